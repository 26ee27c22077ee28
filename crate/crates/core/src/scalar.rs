//! Scalar abstraction shared by plain `f64` evaluation and forward-mode
//! differentiation.
//!
//! Every likelihood in the crate is written once against [`Scalar`]. Evaluating
//! with `f64` gives values; evaluating with [`Dual`] carries a vector of partial
//! derivatives along, which yields exact gradients without finite differences.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::Result;
use crate::special;

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
{
    /// False for plain values, letting callers skip derivative bookkeeping.
    const TANGENTS: bool = true;

    fn cst(v: f64) -> Self;
    fn value(self) -> f64;

    /// A value `v` whose tangent is `Σ_k grad[k] · tangent(inputs[k])`.
    fn chain(v: f64, grad: &[f64], inputs: &[Self]) -> Self {
        let mut out = Self::cst(v);
        for (g, x) in grad.iter().zip(inputs) {
            out += (*x - x.value()) * *g;
        }
        out
    }

    /// Applies a scalar function given its value and derivative maps.
    /// The derivative closure is only invoked by differentiating types.
    fn lift(self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Self;

    fn exp(self) -> Self {
        self.lift(f64::exp, f64::exp)
    }
    fn ln(self) -> Self {
        self.lift(f64::ln, |v| 1.0 / v)
    }
    fn exp_m1(self) -> Self {
        self.lift(f64::exp_m1, f64::exp)
    }
    fn ln_1p(self) -> Self {
        self.lift(f64::ln_1p, |v| 1.0 / (1.0 + v))
    }
    fn sqrt(self) -> Self {
        self.lift(f64::sqrt, |v| 0.5 / v.sqrt())
    }
    fn powi(self, n: i32) -> Self {
        self.lift(|v| v.powi(n), |v| n as f64 * v.powi(n - 1))
    }
    /// `self^e` for `self > 0`.
    fn powf(self, e: Self) -> Self {
        (self.ln() * e).exp()
    }
    fn ln_gamma(self) -> Self {
        self.lift(special::ln_gamma_unchecked, special::digamma)
    }
    fn erfc(self) -> Self {
        self.lift(special::erfc, |v| {
            -2.0 / std::f64::consts::PI.sqrt() * (-v * v).exp()
        })
    }
    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    const TANGENTS: bool = false;

    #[inline]
    fn chain(v: f64, _grad: &[f64], _inputs: &[Self]) -> Self {
        v
    }
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, f: impl Fn(f64) -> f64, _df: impl Fn(f64) -> f64) -> Self {
        f(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
}

/// Forward-mode dual number with `N` tangent directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// A variable seeded along tangent direction `k`.
    pub fn variable(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Dual { v, d }
    }

    #[inline]
    fn scaled(self, v: f64, s: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= s;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn chain(v: f64, grad: &[f64], inputs: &[Self]) -> Self {
        let mut d = [0.0; N];
        for (g, x) in grad.iter().zip(inputs) {
            if *g != 0.0 {
                for (a, b) in d.iter_mut().zip(x.d.iter()) {
                    *a += g * b;
                }
            }
        }
        Dual { v, d }
    }
    #[inline]
    fn lift(self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Self {
        let v = f(self.v);
        self.scaled(v, df(self.v))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.scaled(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.scaled(self.v.ln(), 1.0 / self.v)
    }
    #[inline]
    fn powf(self, e: Self) -> Self {
        if e.d.iter().all(|x| *x == 0.0) {
            let p = self.v.powf(e.v);
            return self.scaled(p, e.v * self.v.powf(e.v - 1.0));
        }
        (self.ln() * e).exp()
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = self.d[k] * rhs.v + self.v * rhs.d[k];
        }
        Dual { v: self.v * rhs.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for k in 0..N {
            d[k] = (self.d[k] - v * rhs.d[k]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.scaled(-self.v, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.v += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.v -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.scaled(self.v * rhs, rhs)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        let inv = 1.0 / rhs;
        self.scaled(self.v * inv, inv)
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl<const N: usize> $tr for Dual<N> {
            #[inline]
            fn $m(&mut self, rhs: Self) {
                *self = *self $op rhs;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

/// A scalar function of a parameter vector, evaluable at any [`Scalar`] type.
pub trait Objective {
    fn dim(&self) -> usize;
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S>;
}

pub fn value<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> Result<f64> {
    obj.eval::<f64>(x)
}

fn seeded<const N: usize>(x: &[f64], offset: usize) -> Vec<Dual<N>> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if i >= offset && i < offset + N {
                Dual::variable(v, i - offset)
            } else {
                Dual::constant(v)
            }
        })
        .collect()
}

fn pass<const N: usize, O: Objective + ?Sized>(
    obj: &O,
    x: &[f64],
    offset: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let xs = seeded::<N>(x, offset);
    let out = obj.eval(&xs)?;
    for k in 0..N {
        if offset + k < grad.len() {
            grad[offset + k] = out.d[k];
        }
    }
    Ok(out.v)
}

/// Value and exact gradient by forward-mode differentiation.
pub fn value_and_gradient<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let v = match n {
        0 => obj.eval::<f64>(x)?,
        1..=2 => pass::<2, O>(obj, x, 0, &mut grad)?,
        3..=4 => pass::<4, O>(obj, x, 0, &mut grad)?,
        5..=8 => pass::<8, O>(obj, x, 0, &mut grad)?,
        _ => {
            let mut v = 0.0;
            let mut offset = 0;
            while offset < n {
                v = pass::<16, O>(obj, x, offset, &mut grad)?;
                offset += 16;
            }
            v
        }
    };
    Ok((v, grad))
}

/// A vector of per-record terms, evaluable at any [`Scalar`] type.
pub trait TermsObjective {
    fn dim(&self) -> usize;
    fn terms<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>>;
}

fn terms_pass<const N: usize, O: TermsObjective + ?Sized>(
    obj: &O,
    x: &[f64],
    offset: usize,
    jac: &mut Vec<Vec<f64>>,
) -> Result<Vec<f64>> {
    let xs = seeded::<N>(x, offset);
    let out = obj.terms(&xs)?;
    if jac.is_empty() {
        *jac = vec![vec![0.0; x.len()]; out.len()];
    }
    for (row, t) in jac.iter_mut().zip(&out) {
        for k in 0..N {
            if offset + k < x.len() {
                row[offset + k] = t.d[k];
            }
        }
    }
    Ok(out.iter().map(|t| t.v).collect())
}

/// Term values and their exact Jacobian (row `i` is the gradient of term `i`).
pub fn terms_and_jacobian<O: TermsObjective + ?Sized>(obj: &O, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = x.len();
    let mut jac = Vec::new();
    let values = match n {
        0 => obj.terms::<f64>(x)?,
        1..=2 => terms_pass::<2, O>(obj, x, 0, &mut jac)?,
        3..=4 => terms_pass::<4, O>(obj, x, 0, &mut jac)?,
        5..=8 => terms_pass::<8, O>(obj, x, 0, &mut jac)?,
        _ => {
            let mut v = Vec::new();
            let mut offset = 0;
            while offset < n {
                v = terms_pass::<16, O>(obj, x, offset, &mut jac)?;
                offset += 16;
            }
            v
        }
    };
    if jac.is_empty() {
        jac = vec![vec![0.0; n]; values.len()];
    }
    Ok((values, jac))
}

/// Central finite-difference gradient; used as an independent check on
/// [`value_and_gradient`] and for functions that are not written generically.
pub fn central_difference_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
) -> Result<Vec<f64>> {
    let h0 = f64::EPSILON.cbrt();
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = h0 * (x[i].abs() + 1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Jacobian of a vector function by central differences; row `i` holds
/// the derivatives of output `i`.
pub fn central_difference_jacobian(
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    rel_step: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut xp = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = rel_step * (x[i].abs() + 1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        cols.push(
            fp.iter()
                .zip(fm.iter())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Ok((0..rows)
        .map(|r| cols.iter().map(|c| c[r]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosen;
    impl Objective for Rosen {
        fn dim(&self) -> usize {
            2
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
            let a = S::cst(1.0) - x[0];
            let b = x[1] - x[0] * x[0];
            Ok(a * a + b * b * 100.0)
        }
    }

    #[test]
    fn dual_gradient_matches_analytic() {
        let (v, g) = value_and_gradient(&Rosen, &[-1.2, 1.0]).unwrap();
        assert!((v - 24.2).abs() < 1e-12);
        assert!((g[0] - (-215.6)).abs() < 1e-10);
        assert!((g[1] - (-88.0)).abs() < 1e-10);
    }

    #[test]
    fn transcendental_derivatives() {
        let x = Dual::<1>::variable(0.7, 0);
        assert!((x.exp().d[0] - 0.7f64.exp()).abs() < 1e-15);
        assert!((x.ln().d[0] - 1.0 / 0.7).abs() < 1e-15);
        assert!((x.exp_m1().d[0] - 0.7f64.exp()).abs() < 1e-15);
        let p = x.powf(Dual::constant(2.5));
        assert!((p.d[0] - 2.5 * 0.7f64.powf(1.5)).abs() < 1e-14);
        let lg = x.ln_gamma();
        let h = 1e-6;
        let fd = (special::ln_gamma_unchecked(0.7 + h) - special::ln_gamma_unchecked(0.7 - h)) / (2.0 * h);
        assert!((lg.d[0] - fd).abs() < 1e-8);
    }

    struct Wide;
    impl Objective for Wide {
        fn dim(&self) -> usize {
            20
        }
        fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
            let mut s = S::cst(0.0);
            for (i, xi) in x.iter().enumerate() {
                s += *xi * *xi * (i as f64 + 1.0);
            }
            Ok(s)
        }
    }

    #[test]
    fn chunked_gradient_covers_every_direction() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let (_, g) = value_and_gradient(&Wide, &x).unwrap();
        for i in 0..20 {
            assert!((g[i] - 2.0 * x[i] * (i as f64 + 1.0)).abs() < 1e-12);
        }
    }
}
