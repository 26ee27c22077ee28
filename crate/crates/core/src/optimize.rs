//! Quasi-Newton minimization (BFGS with a strong-Wolfe line search).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the gradient max-norm.
    pub gtol: f64,
    /// Relative objective change treated as a stall.
    pub ftol_rel: f64,
    /// Gradient max-norm accepted when progress has stalled at rounding level.
    pub stall_gtol: f64,
    /// Largest max-norm displacement of a single line-search trial.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            gtol: 1e-6,
            ftol_rel: 1e-10,
            stall_gtol: 1e-4,
            max_step: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

impl BfgsOutcome {
    pub fn gradient_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

/// Predicted remaining decrease `½ gᵀHg` under the inverse-Hessian estimate.
fn decrement(h: &[f64], g: &[f64]) -> f64 {
    let n = g.len();
    0.5 * (0..n).map(|i| g[i] * dot(&h[i * n..(i + 1) * n], g)).sum::<f64>()
}

/// Newton decrement, relative to `1 + |f|`, below which no representable
/// progress remains.
const ROUNDING_FLOOR: f64 = 1e-13;

/// True when the Newton decrement under fresh curvature is at the
/// rounding floor of the objective.
fn at_rounding_floor<F>(f: &F, x: &[f64], fx: f64, g: &[f64], evaluations: &mut usize) -> bool
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    curvature_preconditioner(f, x, evaluations).is_some_and(|h| decrement(&h, g) <= ROUNDING_FLOOR * (1.0 + fx.abs()))
}

const MAX_REFRESHES: usize = 3;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Probe {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, F> {
    f: &'a F,
    x: &'a [f64],
    p: &'a [f64],
    evaluations: usize,
}

impl<F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>> LineSearch<'_, F> {
    fn probe(&mut self, alpha: f64) -> Probe {
        self.evaluations += 1;
        let x: Vec<f64> = self.x.iter().zip(self.p).map(|(a, b)| a + alpha * b).collect();
        match (self.f)(&x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Probe {
                alpha,
                f,
                slope: dot(&g, self.p),
                x,
                g,
            },
            _ => Probe {
                alpha,
                f: f64::INFINITY,
                slope: f64::NAN,
                x,
                g: Vec::new(),
            },
        }
    }

    /// Strong-Wolfe search; falls back to the best Armijo point found.
    fn run(&mut self, f0: f64, slope0: f64, alpha_init: f64, alpha_max: f64) -> Option<Probe> {
        const C1: f64 = 1e-4;
        const C2: f64 = 0.9;
        let armijo = |p: &Probe| p.f <= f0 + C1 * p.alpha * slope0;
        let mut prev = Probe {
            alpha: 0.0,
            f: f0,
            slope: slope0,
            x: self.x.to_vec(),
            g: Vec::new(),
        };
        let mut alpha = alpha_init.min(alpha_max);
        let mut best: Option<Probe> = None;
        for i in 0..40 {
            let cur = self.probe(alpha);
            if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
                return self.zoom(prev, cur, f0, slope0, best);
            }
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev, f0, slope0, best);
            }
            if alpha >= alpha_max {
                return Some(cur);
            }
            alpha = (2.0 * alpha).min(alpha_max);
            best = Some(Probe { g: cur.g.clone(), x: cur.x.clone(), ..cur });
            prev = cur;
        }
        best
    }

    fn zoom(
        &mut self,
        mut lo: Probe,
        mut hi: Probe,
        f0: f64,
        slope0: f64,
        mut best: Option<Probe>,
    ) -> Option<Probe> {
        const C1: f64 = 1e-4;
        const C2: f64 = 0.9;
        if lo.alpha > 0.0 && best.as_ref().is_none_or(|b| lo.f < b.f) {
            best = Some(Probe { g: lo.g.clone(), x: lo.x.clone(), ..lo });
        }
        for _ in 0..40 {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= 1e-16 * b.max(1.0) {
                break;
            }
            // Quadratic interpolation from lo's value and slope, safeguarded.
            let mut trial = f64::NAN;
            if hi.f.is_finite() {
                let d = hi.alpha - lo.alpha;
                let denom = 2.0 * (hi.f - lo.f - lo.slope * d);
                if denom > 0.0 {
                    trial = lo.alpha - lo.slope * d * d / denom;
                }
            }
            if !(trial > a + 0.1 * width && trial < b - 0.1 * width) {
                trial = 0.5 * (a + b);
            }
            let cur = self.probe(trial);
            if cur.f > f0 + C1 * cur.alpha * slope0 || cur.f >= lo.f {
                hi = cur;
            } else {
                if cur.slope.abs() <= -C2 * slope0 {
                    return Some(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                best = Some(Probe { g: cur.g.clone(), x: cur.x.clone(), ..cur });
                lo = cur;
            }
        }
        best
    }
}

/// Inverse of a central-difference Hessian of the gradient, row-major, when
/// it is positive definite.
fn curvature_preconditioner<F>(f: &F, x: &[f64], evaluations: &mut usize) -> Option<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-4 * (x[j].abs() + 1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        *evaluations += 2;
        let (gp, gm) = match (f(&xp), f(&xm)) {
            (Ok((_, gp)), Ok((_, gm))) => (gp, gm),
            _ => return None,
        };
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let inv = sym.cholesky()?.inverse();
    Some(inv.transpose().iter().copied().collect())
}

/// Minimizes `f`, which returns the value and gradient at a point.
///
/// The inverse-Hessian approximation starts from a finite-difference
/// curvature estimate when that is positive definite, and is refreshed from
/// one if progress stalls with the gradient still large.
pub fn minimize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizationFailure("objective is not finite at the start point".into()));
    }
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    // Inverse Hessian approximation, row-major.
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut Vec<f64>, scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = scale;
        }
    };
    let mut precond = curvature_preconditioner(&f, &x, &mut evaluations);
    let install = |h: &mut Vec<f64>, pc: &Option<Vec<f64>>| match pc {
        Some(m) => {
            h.copy_from_slice(m);
            false
        }
        None => {
            reset(h, 1.0);
            true
        }
    };
    let mut first = install(&mut h, &precond);
    let mut stalls = 0;
    let mut refreshes = 0;
    let outcome = |x: Vec<f64>, f: f64, grad: Vec<f64>, it, ev, conv, msg: &str| BfgsOutcome {
        x,
        f,
        grad,
        iterations: it,
        evaluations: ev,
        converged: conv,
        message: msg.to_string(),
    };

    for iter in 0..opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm < opts.gtol {
            return Ok(outcome(x, fx, g, iter, evaluations, true, "gradient tolerance reached"));
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&p, &g);
        if !(slope < 0.0) {
            first = install(&mut h, &precond);
            p = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
            slope = dot(&p, &g);
            if !(slope < 0.0) {
                reset(&mut h, 1.0);
                first = true;
                p = g.iter().map(|v| -v).collect();
                slope = dot(&p, &g);
            }
        }
        let pnorm = inf_norm(&p);
        let alpha_max = opts.max_step / pnorm;
        let alpha_init = if first { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut ls = LineSearch {
            f: &f,
            x: &x,
            p: &p,
            evaluations: 0,
        };
        let step = ls.run(fx, slope, alpha_init, alpha_max);
        evaluations += ls.evaluations;
        let Some(step) = step else {
            if refreshes < MAX_REFRESHES && gnorm >= opts.gtol {
                refreshes += 1;
                precond = curvature_preconditioner(&f, &x, &mut evaluations);
                first = install(&mut h, &precond);
                continue;
            }
            if !first {
                reset(&mut h, 1.0);
                first = true;
                continue;
            }
            let conv = gnorm < opts.stall_gtol || at_rounding_floor(&f, &x, fx, &g, &mut evaluations);
            return Ok(outcome(x, fx, g, iter, evaluations, conv, "line search failed"));
        };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let df = fx - step.f;
        let rel = df.abs() / (fx.abs().max(step.f.abs()) + 1e-12);
        x = step.x;
        fx = step.f;
        g = step.g;
        if rel < opts.ftol_rel {
            stalls += 1;
            if stalls >= 2 {
                let gnorm = inf_norm(&g);
                if gnorm >= opts.gtol && refreshes < MAX_REFRESHES {
                    refreshes += 1;
                    stalls = 0;
                    precond = curvature_preconditioner(&f, &x, &mut evaluations);
                    first = install(&mut h, &precond);
                    continue;
                }
                let conv = gnorm < opts.stall_gtol || at_rounding_floor(&f, &x, fx, &g, &mut evaluations);
                let msg = if gnorm < opts.gtol {
                    "gradient tolerance reached"
                } else {
                    "objective change below tolerance"
                };
                return Ok(outcome(x, fx, g, iter + 1, evaluations, conv, msg));
            }
        } else {
            stalls = 0;
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if first {
                reset(&mut h, sy / dot(&y, &y));
                first = false;
            }
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
    }
    let conv = inf_norm(&g) < opts.gtol;
    Ok(outcome(x, fx, g, opts.max_iter, evaluations, conv, "iteration limit reached"))
}
