//! Outcome-dependent referral model.
//!
//! Given the event time `T = t`, the elapsed fraction `V = R/t` follows a
//! mixture of uniforms: with probability `π_j` it is uniform on
//! `(ν_j, ν_{j+1}]`, `0 = ν_0 < ν_1 < … < ν_{m+1} = 1`. Every quantity that
//! integrates over `T` is linear in `π`, so the per-component integrals are
//! exposed separately and reused by the estimators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::event_models::{linear_predictor, EventModel, FamilyParams};
use crate::quadrature::{self, QuadOptions};
use crate::scalar::Scalar;

/// Tolerated excess of a probability over 1 before it is treated as an error.
const PROB_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferralPartition {
    knots: Vec<f64>,
    probs: Vec<f64>,
}

impl ReferralPartition {
    /// `knots` has length m+2 running from 0 to 1; `probs` has length m+1.
    pub fn new(knots: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        validate_knots(&knots)?;
        if probs.len() + 1 != knots.len() {
            return Err(Error::DimensionMismatch {
                expected: knots.len() - 1,
                got: probs.len(),
            });
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::domain("mixture probabilities must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("mixture probabilities sum to {total}, not 1")));
        }
        Ok(ReferralPartition { knots, probs })
    }

    /// Single uniform component on `(0, 1]`.
    pub fn uniform() -> Self {
        ReferralPartition {
            knots: vec![0.0, 1.0],
            probs: vec![1.0],
        }
    }

    /// Knots with equal mixture probabilities.
    pub fn with_equal_probs(knots: Vec<f64>) -> Result<Self> {
        validate_knots(&knots)?;
        let k = knots.len() - 1;
        Self::new(knots, vec![1.0 / k as f64; k])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Mixture probabilities `π_0..π_m`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_components(&self) -> usize {
        self.probs.len()
    }

    /// Same knots, new probabilities.
    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        Self::new(self.knots.clone(), probs)
    }

    /// Density of `R` given `T = t`, for `0 < r < t`.
    pub fn conditional_density(&self, r: f64, t: f64) -> Result<f64> {
        if !(r > 0.0) || !(r < t) {
            return Err(Error::domain(format!("conditional density needs 0 < r < t, got r={r}, t={t}")));
        }
        let j = component_index(&self.knots, r / t).expect("0 < r/t < 1");
        Ok(self.probs[j] / ((self.knots[j + 1] - self.knots[j]) * t))
    }

    /// Distribution function of `R` given `T = t`, for `0 ≤ r ≤ t`.
    pub fn conditional_cdf(&self, r: f64, t: f64) -> Result<f64> {
        if !(t > 0.0) || !(r >= 0.0) || r > t {
            return Err(Error::domain(format!("conditional cdf needs 0 ≤ r ≤ t, got r={r}, t={t}")));
        }
        let v = r / t;
        let mut total = 0.0;
        for (j, p) in self.probs.iter().enumerate() {
            let (lo, hi) = (self.knots[j], self.knots[j + 1]);
            if v > lo {
                total += p * ((v.min(hi) - lo) / (hi - lo));
            }
        }
        Ok(total.min(1.0))
    }

    /// Draws `R` given `T = t`; always `0 < R < t`.
    pub fn sample_referral_time<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        let mut pick: f64 = rng.random();
        let mut j = self.probs.len() - 1;
        for (i, p) in self.probs.iter().enumerate() {
            if pick < *p {
                j = i;
                break;
            }
            pick -= p;
        }
        while self.probs[j] == 0.0 {
            j -= 1;
        }
        let (lo, hi) = (self.knots[j], self.knots[j + 1]);
        loop {
            let u: f64 = rng.random();
            let r = (lo + u * (hi - lo)) * t;
            if r > 0.0 && r < t {
                return r;
            }
        }
    }
}

fn validate_knots(knots: &[f64]) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::domain("a partition needs at least two knots"));
    }
    if knots[0] != 0.0 || knots[knots.len() - 1] != 1.0 {
        return Err(Error::domain("knots must start at 0 and end at 1"));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("knots must be strictly increasing"));
    }
    Ok(())
}

/// Component `j` with `ν_j < v ≤ ν_{j+1}`.
pub(crate) fn component_index(knots: &[f64], v: f64) -> Option<usize> {
    if !(v > 0.0) || v > 1.0 {
        return None;
    }
    knots.windows(2).position(|w| v > w[0] && v <= w[1])
}

/// Horizon and covariates of a selection event.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionContext {
    pub u: f64,
    pub z: Vec<f64>,
}

/// Which evaluation route to use for integrals over the event time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPath {
    /// Closed form when the family admits one, quadrature otherwise.
    #[default]
    Auto,
    ClosedForm,
    Quadrature,
}

impl EvalPath {
    fn closed<S: Scalar>(self, fp: &FamilyParams<S>) -> Result<bool> {
        match self {
            EvalPath::Auto => Ok(fp.has_closed_form()),
            EvalPath::Quadrature => Ok(false),
            EvalPath::ClosedForm if fp.has_closed_form() => Ok(true),
            EvalPath::ClosedForm => Err(Error::UnsupportedBranch(format!(
                "no closed form for {:?} with shape {}",
                fp.family,
                fp.shape.value()
            ))),
        }
    }
}

const QUAD: QuadOptions = QuadOptions {
    abs_tol: 1e-14,
    rel_tol: 1e-12,
    max_intervals: 500,
};

/// Per-component selection probabilities `A_j = pr(0 < R < u | component j)`,
/// so that `pr(0 < R < u) = Σ_j π_j A_j`.
pub(crate) fn selection_components<S: Scalar>(
    fp: &FamilyParams<S>,
    eta: S,
    knots: &[f64],
    u: f64,
    path: EvalPath,
) -> Result<Vec<S>> {
    let k = knots.len() - 1;
    let closed = path.closed(fp)?;
    // Event-time thresholds u/ν_j; index 0 is +∞.
    let thresholds: Vec<f64> = knots.iter().map(|nu| u / nu).collect();
    let mut cdf = Vec::with_capacity(k + 1);
    let mut surv = Vec::with_capacity(k + 1);
    for &t in &thresholds {
        let (f, s) = fp.cdf_pair(eta, t);
        cdf.push(f);
        surv.push(s);
    }
    let tails: Vec<S> = if closed {
        thresholds
            .iter()
            .map(|&t| fp.inverse_tail_closed(eta, t))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let (lo, hi) = (thresholds[j + 1], thresholds[j]);
        let width = knots[j + 1] - knots[j];
        let below = cdf[j + 1];
        let partial = if closed {
            // u E[1/T; lo<T<hi] − ν_j pr(lo<T<hi)
            let mass = if below.value() > 0.5 {
                surv[j + 1] - surv[j]
            } else {
                cdf[j] - below
            };
            (tails[j + 1] - tails[j]) * u - mass * knots[j]
        } else {
            let nu = knots[j];
            let g = |y: f64| {
                let t = y.exp();
                if t.is_infinite() {
                    return Ok(S::cst(0.0));
                }
                let v = fp.log_density(eta, t).exp() * (u - nu * t);
                Ok(if v.value().is_nan() { S::cst(0.0) } else { v })
            };
            let upper = if hi.is_infinite() { f64::INFINITY } else { hi.ln() };
            quadrature::integrate(g, lo.ln(), upper, QUAD)?
        };
        out.push(below + partial / width);
    }
    Ok(out)
}

/// Per-component pieces `C_j` of the censored joint density
/// `pr(R = r, T ≥ x) = Σ_j π_j C_j`.
pub(crate) fn censored_components<S: Scalar>(
    fp: &FamilyParams<S>,
    eta: S,
    knots: &[f64],
    r: f64,
    x: f64,
    path: EvalPath,
) -> Result<Vec<S>> {
    if !(r > 0.0) || !(r < x) {
        return Err(Error::domain(format!("censored density needs 0 < r < x, got r={r}, x={x}")));
    }
    let closed = path.closed(fp)?;
    let k = knots.len() - 1;
    let top = component_index(knots, r / x).expect("0 < r/x < 1");
    let mut out = vec![S::cst(0.0); k];
    // Tail at the upper end of component j's range, r/ν_j (∞ for j = 0).
    let mut upper_tail = S::cst(0.0);
    for j in 0..=top {
        let width = knots[j + 1] - knots[j];
        let hi = r / knots[j];
        let lo = if j == top { x } else { r / knots[j + 1] };
        let integral = if closed {
            let lower_tail = fp.inverse_tail_closed(eta, lo)?;
            let v = lower_tail - upper_tail;
            upper_tail = lower_tail;
            v
        } else {
            fp.inverse_moment_quadrature(eta, lo, hi)?
        };
        out[j] = integral / width;
    }
    Ok(out)
}

/// `f_{R|T}(r | x)` as `(component, 1/((ν_{j+1}−ν_j) x))`.
pub(crate) fn uncensored_component(knots: &[f64], r: f64, x: f64) -> Option<(usize, f64)> {
    let j = component_index(knots, r / x)?;
    Some((j, 1.0 / ((knots[j + 1] - knots[j]) * x)))
}

/// `Σ_j π_j c_j`.
pub(crate) fn mix<S: Scalar>(probs: &[S], comps: &[S]) -> S {
    let mut total = S::cst(0.0);
    for (p, c) in probs.iter().zip(comps) {
        total += *p * *c;
    }
    total
}

/// Applies the floating-point guard on probabilities slightly above 1.
pub(crate) fn cap_probability<S: Scalar>(p: S, what: &str) -> Result<S> {
    let v = p.value();
    if v > 1.0 + PROB_SLACK || v.is_nan() {
        return Err(Error::domain(format!("{what} evaluates to {v}, outside [0, 1]")));
    }
    Ok(if v > 1.0 { S::cst(1.0) } else { p })
}

/// Conditional inclusion probability of a censored subject,
/// `{pr(0<R<u) − F(x)} / {1 − F(x)}`, given its selection probability.
pub(crate) fn censored_inclusion<S: Scalar>(fp: &FamilyParams<S>, eta: S, x: f64, selection: S) -> S {
    let (f, s) = fp.cdf_pair(eta, x);
    (selection - f) / s
}

fn model_params(model: &EventModel, z: &[f64]) -> Result<(FamilyParams<f64>, f64)> {
    model.validate()?;
    if z.len() != model.beta.len() {
        return Err(Error::DimensionMismatch {
            expected: model.beta.len(),
            got: z.len(),
        });
    }
    Ok((model.params(), linear_predictor(&model.beta, z)))
}

/// `pr(0 < R < u | z)`.
pub fn selection_probability(
    ctx: &SelectionContext,
    model: &EventModel,
    part: &ReferralPartition,
    path: EvalPath,
) -> Result<f64> {
    if !(ctx.u > 0.0) {
        return Err(Error::domain(format!("selection horizon must be positive, got {}", ctx.u)));
    }
    let (fp, eta) = model_params(model, &ctx.z)?;
    let comps = selection_components(&fp, eta, part.knots(), ctx.u, path)?;
    cap_probability(mix(part.probs(), &comps), "selection probability")
}

/// Joint density `pr(R = r, T ≥ x | z)` of a censored subject.
pub fn censored_joint_density(
    r: f64,
    x: f64,
    ctx: &SelectionContext,
    model: &EventModel,
    part: &ReferralPartition,
    path: EvalPath,
) -> Result<f64> {
    let (fp, eta) = model_params(model, &ctx.z)?;
    let comps = censored_components(&fp, eta, part.knots(), r, x, path)?;
    Ok(mix(part.probs(), &comps).max(0.0))
}

/// Probability `p` that a subject with this record's history was selected:
/// exactly 1 for observed events, `{pr(0<R<u) − F(x)}/{1 − F(x)}` otherwise.
pub fn inclusion_probability(
    record: &SubjectRecord,
    model: &EventModel,
    part: &ReferralPartition,
) -> Result<f64> {
    if record.delta {
        return Ok(1.0);
    }
    let (fp, eta) = model_params(model, &record.z)?;
    let comps = selection_components(&fp, eta, part.knots(), record.u, EvalPath::Auto)?;
    let sel = cap_probability(mix(part.probs(), &comps), "selection probability")?;
    let p = censored_inclusion(&fp, eta, record.x, sel);
    if !(p > 0.0) {
        return Err(Error::NearZeroSelection {
            record: record.id.clone(),
            p,
        });
    }
    Ok(p.min(1.0))
}

/// Inverse-probability weight `1/p`.
pub fn inclusion_weight(record: &SubjectRecord, model: &EventModel, part: &ReferralPartition) -> Result<f64> {
    inclusion_probability(record, model, part).map(|p| 1.0 / p)
}
