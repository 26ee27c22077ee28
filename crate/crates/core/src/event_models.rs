//! Parametric event-time families with a log-linear covariate link.
//!
//! | family             | shape       | extra | link                         |
//! |--------------------|-------------|-------|------------------------------|
//! | Weibull            | γ           |   -   | scale λ = exp(βᵀz)           |
//! | Gamma              | k           |   -   | scale θ = exp(βᵀz), mean kθ  |
//! | LogNormal          | σ           |   -   | location μ = βᵀz             |
//! | GeneralizedGamma   | γ = 1/σ     |   Q   | location μ = βᵀz             |
//!
//! The generalized gamma uses the Prentice (1974) parameterization with
//! `W = γ (log T − μ)`: for `Q ≠ 0`, `k e^{QW} ~ Gamma(k = Q⁻², 1)`, and
//! `W ~ N(0, 1)` in the limit `Q → 0`. It reduces to
//! * Weibull(γ, e^μ) at `Q = 1`,
//! * Gamma(shape Q⁻², scale e^μ Q²) when `Q = 1/γ`,
//! * LogNormal(μ, 1/γ) at `Q = 0`.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, QuadOptions};
use crate::scalar::Scalar;
use crate::special::{self, normal_cdf, regularized_gamma_with, upper_gamma_with};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;
/// Below this |Q| the generalized gamma is evaluated as its log-normal limit.
const GG_LOGNORMAL_Q: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Weibull,
    Gamma,
    LogNormal,
    GeneralizedGamma,
}

impl Family {
    /// Number of shape-type parameters (excluding regression coefficients).
    pub fn n_shape(self) -> usize {
        match self {
            Family::GeneralizedGamma => 2,
            _ => 1,
        }
    }

    pub fn shape_names(self) -> &'static [&'static str] {
        match self {
            Family::Weibull => &["gamma"],
            Family::Gamma => &["shape"],
            Family::LogNormal => &["sigma"],
            Family::GeneralizedGamma => &["gamma", "q"],
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "weibull" => Ok(Family::Weibull),
            "gamma" => Ok(Family::Gamma),
            "lognormal" | "log_normal" => Ok(Family::LogNormal),
            "generalized_gamma" | "gengamma" | "gg" => Ok(Family::GeneralizedGamma),
            other => Err(Error::Validation(format!("unknown family '{other}'"))),
        }
    }
}

/// Linear predictor `βᵀz`.
pub(crate) fn linear_predictor<S: Scalar>(beta: &[S], z: &[f64]) -> S {
    let mut eta = S::cst(0.0);
    for (b, x) in beta.iter().zip(z.iter()) {
        eta += *b * *x;
    }
    eta
}

/// `exp(βᵀz)`, the Weibull/gamma scale for covariates `z`.
pub fn scale_from_covariates(beta: &[f64], z: &[f64]) -> Result<f64> {
    if beta.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            got: z.len(),
        });
    }
    Ok(linear_predictor(beta, z).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventModel {
    pub family: Family,
    pub shape: f64,
    /// Generalized-gamma `Q`; `None` for the two-parameter families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_shape: Option<f64>,
    pub beta: Vec<f64>,
}

impl EventModel {
    pub fn weibull(shape: f64, beta: Vec<f64>) -> Self {
        EventModel {
            family: Family::Weibull,
            shape,
            extra_shape: None,
            beta,
        }
    }

    pub fn gamma(shape: f64, beta: Vec<f64>) -> Self {
        EventModel {
            family: Family::Gamma,
            shape,
            extra_shape: None,
            beta,
        }
    }

    pub fn log_normal(sigma: f64, beta: Vec<f64>) -> Self {
        EventModel {
            family: Family::LogNormal,
            shape: sigma,
            extra_shape: None,
            beta,
        }
    }

    pub fn generalized_gamma(gamma: f64, q: f64, beta: Vec<f64>) -> Self {
        EventModel {
            family: Family::GeneralizedGamma,
            shape: gamma,
            extra_shape: Some(q),
            beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0) || !self.shape.is_finite() {
            return Err(Error::domain(format!("shape must be positive, got {}", self.shape)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::domain("regression coefficients must be finite"));
        }
        match (self.family, self.extra_shape) {
            (Family::GeneralizedGamma, Some(q)) if q.is_finite() => Ok(()),
            (Family::GeneralizedGamma, _) => Err(Error::domain("generalized gamma needs a finite Q")),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::domain("extra shape is only used by the generalized gamma")),
        }
    }

    pub(crate) fn params(&self) -> FamilyParams<f64> {
        FamilyParams::new(self.family, self.shape, self.extra_shape.unwrap_or(1.0))
    }

    fn eta(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.beta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.beta.len(),
                got: z.len(),
            });
        }
        Ok(linear_predictor(&self.beta, z))
    }

    fn check_time(t: f64) -> Result<()> {
        if !(t > 0.0) {
            return Err(Error::domain(format!("event time must be positive, got {t}")));
        }
        Ok(())
    }

    pub fn cdf(&self, t: f64, z: &[f64]) -> Result<f64> {
        Self::check_time(t)?;
        self.validate()?;
        Ok(self.params().cdf(self.eta(z)?, t))
    }

    pub fn survival(&self, t: f64, z: &[f64]) -> Result<f64> {
        Self::check_time(t)?;
        self.validate()?;
        Ok(self.params().survival(self.eta(z)?, t))
    }

    pub fn log_density(&self, t: f64, z: &[f64]) -> Result<f64> {
        Self::check_time(t)?;
        self.validate()?;
        Ok(self.params().log_density(self.eta(z)?, t))
    }

    pub fn density(&self, t: f64, z: &[f64]) -> Result<f64> {
        self.log_density(t, z).map(f64::exp)
    }

    /// Log of the baseline mean event time (all non-intercept covariates zero).
    pub fn log_baseline_mean(&self) -> Result<f64> {
        self.validate()?;
        let b0 = self.beta.first().copied().unwrap_or(0.0);
        let lg = special::ln_gamma_unchecked;
        Ok(match self.family {
            Family::Weibull => b0 + lg(1.0 + 1.0 / self.shape),
            Family::Gamma => b0 + self.shape.ln(),
            Family::LogNormal => b0 + 0.5 * self.shape * self.shape,
            Family::GeneralizedGamma => {
                let q = self.extra_shape.unwrap_or(1.0);
                let sigma = 1.0 / self.shape;
                if q.abs() < GG_LOGNORMAL_Q {
                    b0 + 0.5 * sigma * sigma
                } else {
                    let k = 1.0 / (q * q);
                    let c = sigma / q;
                    if k + c <= 0.0 {
                        return Err(Error::domain("generalized gamma mean is infinite"));
                    }
                    b0 - c * k.ln() + lg(k + c) - lg(k)
                }
            }
        })
    }

    /// Draws one event time given covariates.
    pub fn sample_event_time<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<f64> {
        self.validate()?;
        let eta = self.eta(z)?;
        Ok(sample_from(self.family, self.shape, self.extra_shape.unwrap_or(1.0), eta, rng))
    }
}

pub(crate) fn sample_from<R: Rng + ?Sized>(
    family: Family,
    shape: f64,
    extra: f64,
    eta: f64,
    rng: &mut R,
) -> f64 {
    match family {
        Family::Weibull => {
            let u: f64 = 1.0 - rng.random::<f64>();
            eta.exp() * (-u.ln()).powf(1.0 / shape)
        }
        Family::Gamma => {
            let g = GammaDist::new(shape, eta.exp()).expect("validated shape");
            g.sample(rng)
        }
        Family::LogNormal => {
            let n: f64 = StandardNormal.sample(rng);
            (eta + shape * n).exp()
        }
        Family::GeneralizedGamma => {
            let w = if extra.abs() < GG_LOGNORMAL_Q {
                StandardNormal.sample(rng)
            } else {
                let k = 1.0 / (extra * extra);
                let g = GammaDist::new(k, 1.0).expect("positive shape").sample(rng);
                (g / k).ln() / extra
            };
            (eta + w / shape).exp()
        }
    }
}

/// Shape-level quantities of a family, shared across subjects.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FamilyParams<S> {
    pub family: Family,
    pub shape: S,
    pub extra: S,
    aux: Aux<S>,
}

#[derive(Clone, Copy, Debug)]
enum Aux<S> {
    /// φ = (γ − 1)/γ and ln Γ(φ); `None` when γ ≤ 1.
    Weibull { ln_shape: S, phi: Option<(S, S)> },
    Gamma { lg_k: S, lower: Option<(S, S)> },
    LogNormal { ln_sigma: S },
    /// `k = Q⁻²`, `c = 1/(γQ)` and the inverse-moment shape `k − c`.
    GenGamma {
        ln_shape: S,
        k: S,
        ln_k: S,
        lg_k: S,
        c: S,
        inverse: Option<(S, S)>,
    },
    GgLogNormal { ln_shape: S },
}

impl<S: Scalar> FamilyParams<S> {
    pub fn new(family: Family, shape: S, extra: S) -> Self {
        let aux = match family {
            Family::Weibull => {
                let phi = if shape.value() > 1.0 {
                    let phi = S::cst(1.0) - S::cst(1.0) / shape;
                    Some((phi, phi.ln_gamma()))
                } else {
                    None
                };
                Aux::Weibull {
                    ln_shape: shape.ln(),
                    phi,
                }
            }
            Family::Gamma => {
                let lower = if shape.value() > 1.0 {
                    let km1 = shape - 1.0;
                    Some((km1, km1.ln_gamma()))
                } else {
                    None
                };
                Aux::Gamma {
                    lg_k: shape.ln_gamma(),
                    lower,
                }
            }
            Family::LogNormal => Aux::LogNormal {
                ln_sigma: shape.ln(),
            },
            Family::GeneralizedGamma => {
                if extra.value().abs() < GG_LOGNORMAL_Q {
                    Aux::GgLogNormal {
                        ln_shape: shape.ln(),
                    }
                } else {
                    let k = S::cst(1.0) / (extra * extra);
                    let c = S::cst(1.0) / (shape * extra);
                    let kmc = k - c;
                    let inverse = if kmc.value() > 0.0 {
                        Some((kmc, kmc.ln_gamma()))
                    } else {
                        None
                    };
                    Aux::GenGamma {
                        ln_shape: shape.ln(),
                        k,
                        ln_k: k.ln(),
                        lg_k: k.ln_gamma(),
                        c,
                        inverse,
                    }
                }
            }
        };
        FamilyParams {
            family,
            shape,
            extra,
            aux,
        }
    }

    pub fn log_density(&self, eta: S, t: f64) -> S {
        let ln_t = t.ln();
        match self.aux {
            Aux::Weibull { ln_shape, .. } => {
                let zt = self.shape * (S::cst(ln_t) - eta);
                ln_shape + zt - ln_t - zt.exp()
            }
            Aux::Gamma { lg_k, .. } => {
                let k = self.shape;
                -lg_k - k * eta + (k - 1.0) * ln_t - (-eta).exp() * t
            }
            Aux::LogNormal { ln_sigma } => {
                let w = (S::cst(ln_t) - eta) / self.shape;
                -(w * w) * 0.5 - ln_sigma - ln_t - LN_SQRT_2PI
            }
            Aux::GgLogNormal { ln_shape } => {
                let w = self.shape * (S::cst(ln_t) - eta);
                -(w * w) * 0.5 + ln_shape - ln_t - LN_SQRT_2PI
            }
            Aux::GenGamma {
                ln_shape,
                k,
                ln_k,
                lg_k,
                ..
            } => {
                let q = self.extra;
                let w = self.shape * (S::cst(ln_t) - eta);
                let qw = q * w;
                q.abs().ln() + ln_shape - ln_t + k * ln_k - lg_k + k * (qw - qw.exp())
            }
        }
    }

    /// `(F(t), 1 − F(t))`, each computed without cancellation.
    pub fn cdf_pair(&self, eta: S, t: f64) -> (S, S) {
        if t <= 0.0 {
            return (S::cst(0.0), S::cst(1.0));
        }
        if t.is_infinite() {
            return (S::cst(1.0), S::cst(0.0));
        }
        let ln_t = t.ln();
        match self.aux {
            Aux::Weibull { .. } => {
                let s = (self.shape * (S::cst(ln_t) - eta)).exp();
                (-(-s).exp_m1(), (-s).exp())
            }
            Aux::Gamma { lg_k, .. } => {
                let x = (-eta).exp() * t;
                regularized_gamma_with(self.shape, x, lg_k)
            }
            Aux::LogNormal { .. } => {
                let w = (S::cst(ln_t) - eta) / self.shape;
                (normal_cdf(w), normal_cdf(-w))
            }
            Aux::GgLogNormal { .. } => {
                let w = self.shape * (S::cst(ln_t) - eta);
                (normal_cdf(w), normal_cdf(-w))
            }
            Aux::GenGamma { k, lg_k, .. } => {
                let q = self.extra;
                let w = self.shape * (S::cst(ln_t) - eta);
                let g = k * (q * w).exp();
                let (p, qq) = regularized_gamma_with(k, g, lg_k);
                if q.value() > 0.0 {
                    (p, qq)
                } else {
                    (qq, p)
                }
            }
        }
    }

    pub fn cdf(&self, eta: S, t: f64) -> S {
        self.cdf_pair(eta, t).0
    }

    pub fn survival(&self, eta: S, t: f64) -> S {
        self.cdf_pair(eta, t).1
    }

    pub fn log_survival(&self, eta: S, t: f64) -> S {
        match self.aux {
            Aux::Weibull { .. } if t > 0.0 && t.is_finite() => {
                -(self.shape * (S::cst(t.ln()) - eta)).exp()
            }
            _ => self.survival(eta, t).ln(),
        }
    }

    /// True when [`Self::inverse_moment_closed`] is available.
    pub fn has_closed_form(&self) -> bool {
        match self.aux {
            Aux::Weibull { phi, .. } => phi.is_some(),
            Aux::Gamma { lower, .. } => lower.is_some(),
            Aux::LogNormal { .. } | Aux::GgLogNormal { .. } => true,
            Aux::GenGamma { inverse, .. } => inverse.is_some(),
        }
    }

    /// Closed form of the inverse-moment tail `∫_a^∞ f(t)/t dt`, `a ≥ 0`.
    ///
    /// For the Weibull this is `e^{−βᵀz} Γ(φ, (a/λ)^γ)` with `φ = (γ−1)/γ`,
    /// which requires γ > 1.
    pub fn inverse_tail_closed(&self, eta: S, a: f64) -> Result<S> {
        if !(a >= 0.0) {
            return Err(Error::domain(format!("invalid inverse-moment bound {a}")));
        }
        if a.is_infinite() {
            return Ok(S::cst(0.0));
        }
        let ln_a = S::cst(a.ln());
        match self.aux {
            Aux::Weibull { phi, .. } => {
                let (phi, lg_phi) = phi.ok_or_else(|| {
                    Error::UnsupportedBranch(format!(
                        "closed form needs Weibull shape > 1, got {}",
                        self.shape.value()
                    ))
                })?;
                let s = if a == 0.0 { S::cst(0.0) } else { (self.shape * (ln_a - eta)).exp() };
                Ok((-eta).exp() * upper_gamma_with(phi, s, lg_phi))
            }
            Aux::Gamma { lg_k, lower } => {
                let (km1, lg_km1) = lower.ok_or_else(|| {
                    Error::UnsupportedBranch("closed form needs gamma shape > 1".into())
                })?;
                let inv_theta = (-eta).exp();
                let (_, q) = regularized_gamma_with(km1, inv_theta * a, lg_km1);
                Ok(inv_theta * (lg_km1 - lg_k).exp() * q)
            }
            Aux::LogNormal { .. } | Aux::GgLogNormal { .. } => {
                let sigma = match self.aux {
                    Aux::LogNormal { .. } => self.shape,
                    _ => S::cst(1.0) / self.shape,
                };
                let mass = if a == 0.0 {
                    S::cst(1.0)
                } else {
                    normal_cdf(-((ln_a - eta) / sigma + sigma))
                };
                Ok((sigma * sigma * 0.5 - eta).exp() * mass)
            }
            Aux::GenGamma {
                k,
                ln_k,
                lg_k,
                c,
                inverse,
                ..
            } => {
                let (kmc, lg_kmc) = inverse.ok_or_else(|| {
                    Error::UnsupportedBranch("closed form needs k > 1/(γQ)".into())
                })?;
                let q = self.extra;
                let g = if a == 0.0 {
                    S::cst(if q.value() > 0.0 { 0.0 } else { f64::INFINITY })
                } else {
                    k * (q * self.shape * (ln_a - eta)).exp()
                };
                let (p_low, q_up) = regularized_gamma_with(kmc, g, lg_kmc);
                let mass = if q.value() > 0.0 { q_up } else { p_low };
                Ok((c * ln_k + lg_kmc - lg_k - eta).exp() * mass)
            }
        }
    }

    /// Closed form of `∫_a^b f(t)/t dt` (`0 ≤ a ≤ b ≤ ∞`).
    #[cfg(test)]
    pub fn inverse_moment_closed(&self, eta: S, a: f64, b: f64) -> Result<S> {
        if !(a >= 0.0) || !(b >= a) {
            return Err(Error::domain(format!("invalid inverse-moment range ({a}, {b})")));
        }
        if a == b {
            return Ok(S::cst(0.0));
        }
        Ok(self.inverse_tail_closed(eta, a)? - self.inverse_tail_closed(eta, b)?)
    }

    /// `∫_a^b f(t)/t dt` by adaptive quadrature in `y = ln t`.
    pub fn inverse_moment_quadrature(&self, eta: S, a: f64, b: f64) -> Result<S> {
        if !(a > 0.0) || !(b >= a) {
            return Err(Error::domain(format!("invalid inverse-moment range ({a}, {b})")));
        }
        let f = |y: f64| {
            let t = y.exp();
            if t == 0.0 || t.is_infinite() {
                return Ok(S::cst(0.0));
            }
            let v = self.log_density(eta, t).exp();
            Ok(if v.value().is_nan() { S::cst(0.0) } else { v })
        };
        let ub = if b.is_infinite() { f64::INFINITY } else { b.ln() };
        quadrature::integrate(
            f,
            a.ln(),
            ub,
            QuadOptions {
                abs_tol: 1e-14,
                rel_tol: 1e-12,
                max_intervals: 500,
            },
        )
    }

    /// Closed form when available, quadrature otherwise.
    #[cfg(test)]
    pub fn inverse_moment(&self, eta: S, a: f64, b: f64) -> Result<S> {
        if self.has_closed_form() {
            self.inverse_moment_closed(eta, a, b)
        } else {
            self.inverse_moment_quadrature(eta, a, b)
        }
    }
}
