//! Full-likelihood estimation of the event-time and referral parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::event_models::{EventModel, Family};
use crate::likelihood::{for_each_kernel, full_term, Need};
use crate::optimize::{minimize, BfgsOptions, BfgsOutcome};
use crate::params::{ParamLayout, LOGIT_BOUND};
use crate::referral::{EvalPath, ReferralPartition};
use crate::scalar::{value_and_gradient, Objective, Scalar};
use crate::special::regularized_gamma;

/// Knots of the five-component working partition used in the simulations.
pub const DEFAULT_KNOTS: [f64; 6] = [0.0, 0.5, 0.625, 0.75, 0.875, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub family: Family,
    /// Working-model knots `0 = ν_0 < … < ν_{m+1} = 1`.
    pub knots: Vec<f64>,
    pub eval_path: EvalPath,
    pub max_iter: usize,
    /// Gradient max-norm tolerance on the unconstrained scale.
    pub gtol: f64,
    /// Two-stage cycle cap for the hybrid estimator.
    pub max_cycles: usize,
    /// Largest natural-scale change accepted as a hybrid fixed point.
    pub cycle_tol: f64,
    /// Inclusion probabilities below this abort the hybrid fit.
    pub min_inclusion: f64,
    /// Starting natural parameter vector; derived from the data when absent.
    #[serde(skip)]
    pub start: Option<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            family: Family::Weibull,
            knots: DEFAULT_KNOTS.to_vec(),
            eval_path: EvalPath::Auto,
            max_iter: 500,
            gtol: 1e-6,
            max_cycles: 100,
            cycle_tol: 1e-6,
            min_inclusion: 1e-8,
            start: None,
        }
    }
}

impl FitConfig {
    pub fn layout(&self, data: &Dataset) -> Result<ParamLayout> {
        ReferralPartition::with_equal_probs(self.knots.clone())?;
        Ok(ParamLayout::new(self.family, data.n_covariates(), self.knots.len() - 1))
    }

    pub(crate) fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            max_iter: self.max_iter,
            gtol: self.gtol,
            ..BfgsOptions::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Hybrid,
}

/// A fitted parameter vector with its uncertainty and diagnostics.
#[derive(Clone, Debug)]
pub struct ThetaEstimate {
    pub method: Method,
    pub model: EventModel,
    pub partition: ReferralPartition,
    pub layout: ParamLayout,
    /// Shape(s), β, `π_1..π_m`.
    pub natural: Vec<f64>,
    /// The same point on the unconstrained scale.
    pub free: Vec<f64>,
    /// Covariance of `natural`; rows and columns of boundary components are zero.
    pub covariance: Option<DMatrix<f64>>,
    /// Covariance of `free` over the non-boundary coordinates.
    pub free_covariance: Option<DMatrix<f64>>,
    pub std_errors: Vec<Option<f64>>,
    /// Mixture components held at the logit clamp.
    pub boundary: Vec<bool>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub covariance_warning: Option<String>,
}

impl ThetaEstimate {
    pub fn names(&self) -> Vec<String> {
        self.layout.names()
    }

    /// Applies a natural-scale covariance (None when unavailable).
    pub(crate) fn set_covariance(&mut self, cov: std::result::Result<DMatrix<f64>, String>) {
        let n = self.layout.dim();
        match cov {
            Ok(c) => {
                self.std_errors = (0..n)
                    .map(|i| {
                        let v = c[(i, i)];
                        (!self.boundary[i] && v >= 0.0 && v.is_finite()).then(|| v.sqrt())
                    })
                    .collect();
                self.free_covariance = free_covariance(&self.layout, &self.free, &c, &self.boundary);
                self.covariance = Some(c);
            }
            Err(msg) => {
                self.std_errors = vec![None; n];
                self.covariance = None;
                self.free_covariance = None;
                self.covariance_warning = Some(msg);
            }
        }
    }
}

fn active_indices(boundary: &[bool]) -> Vec<usize> {
    (0..boundary.len()).filter(|&i| !boundary[i]).collect()
}

fn free_covariance(layout: &ParamLayout, free: &[f64], cov: &DMatrix<f64>, boundary: &[bool]) -> Option<DMatrix<f64>> {
    let act = active_indices(boundary);
    let jac = layout.jacobian(free).select_rows(&act).select_columns(&act);
    let jinv = jac.try_inverse()?;
    let c = cov.select_rows(&act).select_columns(&act);
    let fc = &jinv * c * jinv.transpose();
    let mut out = DMatrix::zeros(free.len(), free.len());
    for (a, &i) in act.iter().enumerate() {
        for (b, &j) in act.iter().enumerate() {
            out[(i, j)] = fc[(a, b)];
        }
    }
    Some(out)
}

/// Inverts the information over non-boundary coordinates, embedding the result.
pub(crate) fn invert_information(info: &DMatrix<f64>, boundary: &[bool]) -> std::result::Result<DMatrix<f64>, String> {
    let act = active_indices(boundary);
    let sub = info.select_rows(&act).select_columns(&act);
    let sym = (&sub + sub.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| "observed information is not positive definite; standard errors omitted".to_string())?;
    let inv = chol.inverse();
    let n = info.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (a, &i) in act.iter().enumerate() {
        for (b, &j) in act.iter().enumerate() {
            out[(i, j)] = inv[(a, b)];
        }
    }
    Ok(out)
}

/// Log-likelihood at a natural parameter vector.
pub(crate) fn loglik_natural<S: Scalar>(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[S],
) -> Result<S> {
    let probs = layout.full_probs(natural);
    if probs.iter().any(|p| p.value() < 0.0) {
        return Err(Error::domain("mixture probabilities outside the simplex"));
    }
    let need = Need {
        selection: true,
        joint: true,
        ..Need::default()
    };
    let mut total = S::cst(0.0);
    for_each_kernel(
        layout.family,
        layout.shape(natural),
        layout.beta(natural),
        data.records(),
        knots,
        path,
        need,
        |rec, k| {
            total += full_term(rec, &k, &probs, knots)?;
            Ok(())
        },
    )?;
    Ok(total)
}

/// Log-likelihood over natural parameters.
pub(crate) struct NaturalLoglik<'a> {
    pub layout: &'a ParamLayout,
    pub knots: &'a [f64],
    pub data: &'a Dataset,
    pub path: EvalPath,
}

impl Objective for NaturalLoglik<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        loglik_natural(self.layout, self.knots, self.data, self.path, x)
    }
}

/// Negative log-likelihood over unconstrained parameters.
struct FreeNegLoglik<'a>(NaturalLoglik<'a>);

impl Objective for FreeNegLoglik<'_> {
    fn dim(&self) -> usize {
        self.0.layout.dim()
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let nat = self.0.layout.to_natural(x);
        Ok(-self.0.eval(&nat)?)
    }
}

/// Log-likelihood of a dataset under a model and referral partition.
pub fn full_log_likelihood(
    model: &EventModel,
    part: &ReferralPartition,
    data: &Dataset,
    path: EvalPath,
) -> Result<f64> {
    model.validate()?;
    let layout = ParamLayout::new(model.family, data.n_covariates(), part.n_components());
    let natural = layout.pack(model, part)?;
    loglik_natural(&layout, part.knots(), data, path, &natural)
}

/// Gradient of [`full_log_likelihood`] over the natural parameters
/// (shape(s), β, `π_1..π_m`).
pub fn full_log_likelihood_gradient(
    model: &EventModel,
    part: &ReferralPartition,
    data: &Dataset,
    path: EvalPath,
) -> Result<Vec<f64>> {
    let layout = ParamLayout::new(model.family, data.n_covariates(), part.n_components());
    let natural = layout.pack(model, part)?;
    let obj = NaturalLoglik {
        layout: &layout,
        knots: part.knots(),
        data,
        path,
    };
    Ok(value_and_gradient(&obj, &natural)?.1)
}

/// Finite-difference steps `ε^{1/3}(|θ|+1)`, shrunk for mixture
/// probabilities so that trial points stay inside the simplex.
pub(crate) fn hessian_steps(layout: &ParamLayout, natural: &[f64]) -> Vec<f64> {
    let base = f64::EPSILON.cbrt();
    let p0 = layout.full_probs(natural)[0];
    natural
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let h = base * (v.abs() + 1.0);
            if i >= layout.n_psi() {
                h.min(0.25 * v.min(p0))
            } else {
                h
            }
        })
        .collect()
}

/// Jacobian of a vector function by central differences with given steps;
/// entry `(i, j)` is `∂f_i/∂x_j`.
pub(crate) fn jacobian_with_steps(
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    steps: &[f64],
    skip: &[bool],
) -> Result<DMatrix<f64>> {
    let mut xp = x.to_vec();
    let mut jac: Option<DMatrix<f64>> = None;
    for j in 0..x.len() {
        if skip[j] || !(steps[j] > 0.0) {
            continue;
        }
        let h = steps[j];
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        let m = jac.get_or_insert_with(|| DMatrix::zeros(fp.len(), x.len()));
        for i in 0..fp.len() {
            m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac.ok_or_else(|| Error::Singular("no free coordinates to differentiate".into()))
}

/// `−∂²l/∂θ∂θᵀ` over the natural parameters, by central differences of the
/// exact gradient. Rows and columns flagged in `skip` are left at zero.
pub fn observed_information(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[f64],
    skip: &[bool],
) -> Result<DMatrix<f64>> {
    let obj = NaturalLoglik {
        layout,
        knots,
        data,
        path,
    };
    let steps = hessian_steps(layout, natural);
    let grad = |x: &[f64]| value_and_gradient(&obj, x).map(|(_, g)| g);
    let jac = jacobian_with_steps(grad, natural, &steps, skip)?;
    let mut info = -(&jac + jac.transpose()) * 0.5;
    for (i, s) in skip.iter().enumerate() {
        if *s {
            info.row_mut(i).fill(0.0);
            info.column_mut(i).fill(0.0);
        }
    }
    Ok(info)
}

/// Natural start vector: event-time parameters from an unweighted fit that
/// ignores selection, equal mixture probabilities.
pub(crate) fn default_start(layout: &ParamLayout, data: &Dataset, config: &FitConfig) -> Result<Vec<f64>> {
    let ones = vec![1.0; data.len()];
    let psi = crate::fit_hybrid::solve_pseudo_score(layout, data, &ones, None, config)?;
    let mut start = psi;
    start.extend(std::iter::repeat_n(1.0 / layout.n_components as f64, layout.n_pi()));
    Ok(start)
}

/// Logits this close to the clamp are pinned to it when refitting.
const PIN_MARGIN: f64 = 1.0;

/// Re-runs the optimizer with logits near the clamp held at the bound; the
/// clamp's kink otherwise stalls the line search once a probability heads
/// to zero.
fn refit_with_pinned_logits(
    layout: &ParamLayout,
    obj: &FreeNegLoglik<'_>,
    out: BfgsOutcome,
    config: &FitConfig,
) -> Result<BfgsOutcome> {
    let pinned: Vec<usize> = (layout.n_psi()..layout.dim())
        .filter(|&i| out.x[i].abs() > LOGIT_BOUND - PIN_MARGIN)
        .collect();
    if pinned.is_empty() {
        return Ok(out);
    }
    let mut base = out.x.clone();
    for &i in &pinned {
        base[i] = LOGIT_BOUND.copysign(base[i]);
    }
    let active: Vec<usize> = (0..layout.dim()).filter(|i| !pinned.contains(i)).collect();
    let expand = |y: &[f64]| {
        let mut x = base.clone();
        for (k, &i) in active.iter().enumerate() {
            x[i] = y[k];
        }
        x
    };
    let y0: Vec<f64> = active.iter().map(|&i| base[i]).collect();
    let reduced = minimize(
        |y| {
            let (f, g) = value_and_gradient(obj, &expand(y))?;
            Ok((f, active.iter().map(|&i| g[i]).collect()))
        },
        &y0,
        &config.bfgs(),
    )?;
    let x = expand(&reduced.x);
    let mut grad = vec![0.0; layout.dim()];
    for (k, &i) in active.iter().enumerate() {
        grad[i] = reduced.grad[k];
    }
    Ok(BfgsOutcome {
        x,
        grad,
        iterations: out.iterations + reduced.iterations,
        evaluations: out.evaluations + reduced.evaluations,
        ..reduced
    })
}

pub fn maximize_full(data: &Dataset, config: &FitConfig) -> Result<ThetaEstimate> {
    let layout = config.layout(data)?;
    if data.n_events() == 0 && config.start.is_none() {
        return Err(Error::ShapeUnidentifiable);
    }
    let start = match &config.start {
        Some(s) => s.clone(),
        None => default_start(&layout, data, config)?,
    };
    let free0 = layout.to_free(&start)?;
    let obj = FreeNegLoglik(NaturalLoglik {
        layout: &layout,
        knots: &config.knots,
        data,
        path: config.eval_path,
    });
    let mut out = minimize(|x| value_and_gradient(&obj, x), &free0, &config.bfgs())?;
    if !out.converged {
        out = refit_with_pinned_logits(&layout, &obj, out, config)?;
    }
    let natural = layout.to_natural(&out.x);
    if !out.converged {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            gradient_norm: out.gradient_norm(),
            message: out.message,
            best: natural,
        });
    }
    let boundary = layout.boundary_flags(&out.x);
    let mut est = ThetaEstimate {
        method: Method::Full,
        model: layout.event_model(&natural),
        partition: layout.partition(&config.knots, &natural)?,
        layout: layout.clone(),
        natural: natural.clone(),
        free: out.x.clone(),
        covariance: None,
        free_covariance: None,
        std_errors: vec![None; layout.dim()],
        boundary: boundary.clone(),
        loglik: -out.f,
        converged: true,
        iterations: out.iterations,
        gradient_norm: out.gradient_norm(),
        covariance_warning: None,
    };
    let cov = observed_information(&layout, &config.knots, data, config.eval_path, &natural, &boundary)
        .map_err(|e| e.to_string())
        .and_then(|info| invert_information(&info, &boundary));
    est.set_covariance(cov);
    Ok(est)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LikelihoodRatio {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Likelihood-ratio comparison of a nested fit against a more general one.
pub fn likelihood_ratio_test(nested: &ThetaEstimate, general: &ThetaEstimate) -> Result<LikelihoodRatio> {
    let dof = general
        .layout
        .dim()
        .checked_sub(nested.layout.dim())
        .ok_or_else(|| Error::Validation("general model has fewer parameters than the nested one".into()))?;
    let raw = 2.0 * (general.loglik - nested.loglik);
    if raw < -1e-6 {
        return Err(Error::OptimizationFailure(format!(
            "general fit has lower log-likelihood than the nested fit (statistic {raw:.3e})"
        )));
    }
    let statistic = raw.max(0.0);
    let p_value = if dof == 0 {
        1.0
    } else {
        regularized_gamma(dof as f64 / 2.0, statistic / 2.0).1
    };
    Ok(LikelihoodRatio {
        statistic,
        dof,
        p_value,
    })
}

/// Refits a Weibull full-likelihood estimate as a generalized gamma and
/// tests the Weibull restriction `Q = 1`.
pub fn generalized_gamma_check(
    data: &Dataset,
    weibull: &ThetaEstimate,
    config: &FitConfig,
) -> Result<(ThetaEstimate, LikelihoodRatio)> {
    if weibull.layout.family != Family::Weibull {
        return Err(Error::Validation("the nested fit must be a Weibull fit".into()));
    }
    let mut start = vec![weibull.natural[0], 1.0];
    start.extend_from_slice(&weibull.natural[1..]);
    let cfg = FitConfig {
        family: Family::GeneralizedGamma,
        start: Some(start),
        ..config.clone()
    };
    let general = maximize_full(data, &cfg)?;
    let lr = likelihood_ratio_test(weibull, &general)?;
    Ok((general, lr))
}
