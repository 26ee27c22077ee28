//! Per-record likelihood pieces shared by the full and hybrid estimators.
//!
//! The costly special functions depend on the parameters only through the
//! shape(s) and the record's linear predictor. Derivative-carrying
//! evaluations therefore compute each record's pieces with a small dual
//! number over (shape, η) and chain the result into the caller's scalar type.

use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::event_models::{linear_predictor, Family, FamilyParams};
use crate::referral::{
    cap_probability, censored_components, mix, selection_components, uncensored_component, EvalPath,
};
use crate::scalar::{Dual, Scalar};

/// Which record pieces to compute.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Need {
    /// Per-component selection probabilities.
    pub selection: bool,
    /// `log f(x)` for events, censored-density components otherwise.
    pub joint: bool,
    /// `log f(x)` for events, `log S(x)` otherwise.
    pub marginal: bool,
    /// `F(x)` and `S(x)` for censored records.
    pub cdf: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct Kernel<T> {
    pub selection: Vec<T>,
    pub censored: Vec<T>,
    pub log_density: T,
    pub log_survival: T,
    pub cdf: T,
    pub survival: T,
}

impl<T: Scalar> Kernel<T> {
    fn map<U: Scalar>(self, f: impl Fn(T) -> U) -> Kernel<U> {
        Kernel {
            selection: self.selection.into_iter().map(&f).collect(),
            censored: self.censored.into_iter().map(&f).collect(),
            log_density: f(self.log_density),
            log_survival: f(self.log_survival),
            cdf: f(self.cdf),
            survival: f(self.survival),
        }
    }
}

fn record_kernel<T: Scalar>(
    fp: &FamilyParams<T>,
    eta: T,
    rec: &SubjectRecord,
    knots: &[f64],
    path: EvalPath,
    need: Need,
) -> Result<Kernel<T>> {
    let zero = T::cst(0.0);
    let mut k = Kernel {
        selection: Vec::new(),
        censored: Vec::new(),
        log_density: zero,
        log_survival: zero,
        cdf: zero,
        survival: T::cst(1.0),
    };
    let wants_selection = need.selection || (need.cdf && !rec.delta);
    if wants_selection {
        k.selection = selection_components(fp, eta, knots, rec.u, path)?;
    }
    if rec.delta {
        if need.joint || need.marginal {
            k.log_density = fp.log_density(eta, rec.x);
        }
    } else {
        if need.joint {
            k.censored = censored_components(fp, eta, knots, rec.r, rec.x, path)?;
        }
        if need.marginal {
            k.log_survival = fp.log_survival(eta, rec.x);
        }
        if need.cdf {
            let (f, s) = fp.cdf_pair(eta, rec.x);
            k.cdf = f;
            k.survival = s;
        }
    }
    Ok(k)
}

/// Evaluates [`Kernel`]s for each record at the given shape(s) and β and
/// hands them to `visit` in record order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn for_each_kernel<S: Scalar>(
    family: Family,
    shape: &[S],
    beta: &[S],
    records: &[SubjectRecord],
    knots: &[f64],
    path: EvalPath,
    need: Need,
    mut visit: impl FnMut(&SubjectRecord, Kernel<S>) -> Result<()>,
) -> Result<()> {
    if !S::TANGENTS {
        let extra = shape.get(1).map_or(1.0, |q| q.value());
        let fp = FamilyParams::new(family, shape[0].value(), extra);
        let bv: Vec<f64> = beta.iter().map(|b| b.value()).collect();
        for rec in records {
            let eta = linear_predictor(&bv, &rec.z);
            let k = record_kernel(&fp, eta, rec, knots, path, need).map_err(|e| tag(rec, e))?;
            visit(rec, k.map(S::cst))?;
        }
        return Ok(());
    }
    match family.n_shape() {
        1 => chained::<S, 2>(family, shape, beta, records, knots, path, need, visit),
        _ => chained::<S, 3>(family, shape, beta, records, knots, path, need, visit),
    }
}

#[allow(clippy::too_many_arguments)]
fn chained<S: Scalar, const K: usize>(
    family: Family,
    shape: &[S],
    beta: &[S],
    records: &[SubjectRecord],
    knots: &[f64],
    path: EvalPath,
    need: Need,
    mut visit: impl FnMut(&SubjectRecord, Kernel<S>) -> Result<()>,
) -> Result<()> {
    let n_shape = K - 1;
    let s0 = Dual::<K>::variable(shape[0].value(), 0);
    let extra = if n_shape == 2 {
        Dual::<K>::variable(shape[1].value(), 1)
    } else {
        Dual::<K>::constant(1.0)
    };
    let fp = FamilyParams::new(family, s0, extra);
    let mut inputs: Vec<S> = shape[..n_shape].to_vec();
    inputs.push(S::cst(0.0));
    for rec in records {
        let eta = linear_predictor(beta, &rec.z);
        inputs[n_shape] = eta;
        let eta_d = Dual::<K>::variable(eta.value(), n_shape);
        let k = record_kernel(&fp, eta_d, rec, knots, path, need).map_err(|e| tag(rec, e))?;
        visit(rec, k.map(|d| S::chain(d.v, &d.d, &inputs)))?;
    }
    Ok(())
}

fn tag(rec: &SubjectRecord, e: Error) -> Error {
    match e {
        Error::Domain(m) | Error::Quadrature(m) => Error::Evaluation {
            record: rec.id.clone(),
            message: m,
        },
        other => other,
    }
}

/// Log-likelihood contribution of one record given its kernel and `π_0..π_m`.
pub(crate) fn full_term<S: Scalar>(rec: &SubjectRecord, k: &Kernel<S>, probs: &[S], knots: &[f64]) -> Result<S> {
    let fail = |message: String| Error::Evaluation {
        record: rec.id.clone(),
        message,
    };
    let sel = cap_probability(mix(probs, &k.selection), "selection probability").map_err(|e| fail(e.to_string()))?;
    let numerator = if rec.delta {
        let (j, c) = uncensored_component(knots, rec.r, rec.x)
            .ok_or_else(|| fail("referral fraction outside (0, 1]".into()))?;
        (probs[j] * c).ln() + k.log_density
    } else {
        mix(probs, &k.censored).ln()
    };
    let term = numerator - sel.ln();
    if !term.value().is_finite() {
        return Err(fail(format!("non-finite log-likelihood contribution {}", term.value())));
    }
    Ok(term)
}

/// Conditional inclusion probability of a record (1 for events).
pub(crate) fn inclusion_term<S: Scalar>(rec: &SubjectRecord, k: &Kernel<S>, probs: &[S]) -> Result<S> {
    if rec.delta {
        return Ok(S::cst(1.0));
    }
    let sel = cap_probability(mix(probs, &k.selection), "selection probability").map_err(|e| Error::Evaluation {
        record: rec.id.clone(),
        message: e.to_string(),
    })?;
    let p = (sel - k.cdf) / k.survival;
    if !(p.value() > 0.0) {
        return Err(Error::NearZeroSelection {
            record: rec.id.clone(),
            p: p.value(),
        });
    }
    Ok(if p.value() > 1.0 { S::cst(1.0) } else { p })
}

/// `δ log f(x) + (1 − δ) log S(x)`.
pub(crate) fn marginal_term<S: Scalar>(rec: &SubjectRecord, k: &Kernel<S>) -> Result<S> {
    let v = if rec.delta { k.log_density } else { k.log_survival };
    if !v.value().is_finite() {
        return Err(Error::Evaluation {
            record: rec.id.clone(),
            message: "non-finite event-time log-likelihood".into(),
        });
    }
    Ok(v)
}
