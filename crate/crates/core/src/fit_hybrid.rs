//! Hybrid estimator: an inverse-probability-weighted pseudo score for the
//! event-time parameters, profile likelihood for the referral mixture, and
//! a robust sandwich covariance from the stacked estimating equations.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::event_models::Family;
use crate::fit_full::{
    hessian_steps, jacobian_with_steps, observed_information, FitConfig, Method, NaturalLoglik, ThetaEstimate,
};
use crate::likelihood::{for_each_kernel, full_term, inclusion_term, marginal_term, Need};
use crate::optimize::minimize;
use crate::params::ParamLayout;
use crate::referral::{uncensored_component, EvalPath};
use crate::scalar::{terms_and_jacobian, value_and_gradient, Objective, Scalar, TermsObjective};

/// `δ log f(x) + (1 − δ) log S(x)` per record at natural ψ.
pub(crate) fn marginal_terms<S: Scalar>(layout: &ParamLayout, data: &Dataset, psi: &[S]) -> Result<Vec<S>> {
    let need = Need {
        marginal: true,
        ..Need::default()
    };
    let mut out = Vec::with_capacity(data.len());
    for_each_kernel(
        layout.family,
        &psi[..layout.n_shape()],
        &psi[layout.n_shape()..layout.n_psi()],
        data.records(),
        &[0.0, 1.0],
        EvalPath::Auto,
        need,
        |rec, k| {
            out.push(marginal_term(rec, &k)?);
            Ok(())
        },
    )?;
    Ok(out)
}

/// Conditional inclusion probabilities `p_i` at a natural parameter vector.
pub(crate) fn inclusion_terms<S: Scalar>(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[S],
) -> Result<Vec<S>> {
    let probs = layout.full_probs(natural);
    let need = Need {
        cdf: true,
        ..Need::default()
    };
    let mut out = Vec::with_capacity(data.len());
    for_each_kernel(
        layout.family,
        layout.shape(natural),
        layout.beta(natural),
        data.records(),
        knots,
        path,
        need,
        |rec, k| {
            out.push(inclusion_term(rec, &k, &probs)?);
            Ok(())
        },
    )?;
    Ok(out)
}

/// Full-likelihood contribution of every record.
pub(crate) fn full_terms<S: Scalar>(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[S],
) -> Result<Vec<S>> {
    let probs = layout.full_probs(natural);
    let need = Need {
        selection: true,
        joint: true,
        ..Need::default()
    };
    let mut out = Vec::with_capacity(data.len());
    for_each_kernel(
        layout.family,
        layout.shape(natural),
        layout.beta(natural),
        data.records(),
        knots,
        path,
        need,
        |rec, k| {
            out.push(full_term(rec, &k, &probs, knots)?);
            Ok(())
        },
    )?;
    Ok(out)
}

struct WeightedMarginal<'a> {
    layout: &'a ParamLayout,
    data: &'a Dataset,
    weights: &'a [f64],
    /// Optimize over free ψ (true) or evaluate at natural ψ (false).
    free: bool,
}

impl Objective for WeightedMarginal<'_> {
    fn dim(&self) -> usize {
        self.layout.n_psi()
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let psi = if self.free { self.layout.psi_to_natural(x) } else { x.to_vec() };
        let terms = marginal_terms(self.layout, self.data, &psi)?;
        let mut total = S::cst(0.0);
        for (t, w) in terms.iter().zip(self.weights) {
            total += *t * *w;
        }
        Ok(if self.free { -total } else { total })
    }
}

/// `U₁ = Σ w_i ∂l_i^W/∂ψ` over natural ψ (shape(s) then β).
pub fn weighted_pseudo_score(layout: &ParamLayout, psi: &[f64], weights: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    check_weights(weights, data)?;
    let obj = WeightedMarginal {
        layout,
        data,
        weights,
        free: false,
    };
    Ok(value_and_gradient(&obj, psi)?.1)
}

fn check_weights(weights: &[f64], data: &Dataset) -> Result<()> {
    if weights.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: weights.len(),
        });
    }
    if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Evaluation {
            record: data.records()[i].id.clone(),
            message: format!("invalid weight {}", weights[i]),
        });
    }
    Ok(())
}

/// Crude event-time start values: unit-ish shape and intercept at the log
/// mean follow-up time.
fn crude_psi(layout: &ParamLayout, data: &Dataset) -> Vec<f64> {
    let mean_log_x = data.records().iter().map(|r| r.x.ln()).sum::<f64>() / data.len() as f64;
    let mut psi = match layout.family {
        Family::Weibull => vec![2.0],
        Family::Gamma => vec![2.0],
        Family::LogNormal => vec![1.0],
        Family::GeneralizedGamma => vec![2.0, 1.0],
    };
    let intercept = if layout.family == Family::Gamma {
        mean_log_x - 2f64.ln()
    } else {
        mean_log_x
    };
    psi.push(intercept);
    psi.extend(std::iter::repeat_n(0.0, layout.n_beta - 1));
    psi
}

/// Solves `U₁(ψ) = 0` for fixed weights by maximizing the weighted
/// event-time log-likelihood; returns natural ψ.
pub fn solve_pseudo_score(
    layout: &ParamLayout,
    data: &Dataset,
    weights: &[f64],
    start: Option<&[f64]>,
    config: &FitConfig,
) -> Result<Vec<f64>> {
    check_weights(weights, data)?;
    if data.n_events() == 0 {
        return Err(Error::ShapeUnidentifiable);
    }
    let start = match start {
        Some(s) => s[..layout.n_psi()].to_vec(),
        None => crude_psi(layout, data),
    };
    let obj = WeightedMarginal {
        layout,
        data,
        weights,
        free: true,
    };
    let x0 = layout.psi_to_free(&start)?;
    let out = minimize(|x| value_and_gradient(&obj, x), &x0, &config.bfgs())?;
    let psi = layout.psi_to_natural(&out.x);
    if !out.converged {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            gradient_norm: out.gradient_norm(),
            message: format!("pseudo score: {}", out.message),
            best: psi,
        });
    }
    Ok(psi)
}

/// Profile log-likelihood in `π` with ψ fixed, from precomputed
/// per-record component integrals.
struct ProfileLoglik<'a> {
    layout: &'a ParamLayout,
    psi_free: Vec<f64>,
    /// Event records: mixture component of `r/x`.
    events: Vec<usize>,
    /// Censored records: censored-density components.
    censored: Vec<Vec<f64>>,
    selection: Vec<Vec<f64>>,
}

impl Objective for ProfileLoglik<'_> {
    fn dim(&self) -> usize {
        self.layout.n_pi()
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        let mut free: Vec<S> = self.psi_free.iter().map(|v| S::cst(*v)).collect();
        free.extend_from_slice(x);
        let nat = self.layout.to_natural(&free);
        let probs = self.layout.full_probs(&nat);
        let mut total = S::cst(0.0);
        for j in &self.events {
            total += probs[*j].ln();
        }
        let mix = |c: &[f64]| {
            let mut s = S::cst(0.0);
            for (p, v) in probs.iter().zip(c) {
                s += *p * *v;
            }
            s
        };
        for c in &self.censored {
            total += mix(c).ln();
        }
        for a in &self.selection {
            total -= mix(a).ln();
        }
        Ok(-total)
    }
}

/// Maximizes the full likelihood over `π` with ψ fixed; returns `π_1..π_m`.
pub fn profile_pi(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    psi: &[f64],
    start: Option<&[f64]>,
    config: &FitConfig,
) -> Result<Vec<f64>> {
    if layout.n_pi() == 0 {
        return Ok(Vec::new());
    }
    let need = Need {
        selection: true,
        joint: true,
        ..Need::default()
    };
    let mut events = Vec::new();
    let mut censored = Vec::new();
    let mut selection = Vec::with_capacity(data.len());
    for_each_kernel(
        layout.family,
        &psi[..layout.n_shape()],
        &psi[layout.n_shape()..layout.n_psi()],
        data.records(),
        knots,
        config.eval_path,
        need,
        |rec, k: crate::likelihood::Kernel<f64>| {
            if rec.delta {
                let (j, _) = uncensored_component(knots, rec.r, rec.x).ok_or_else(|| Error::Evaluation {
                    record: rec.id.clone(),
                    message: "referral fraction outside (0, 1]".into(),
                })?;
                events.push(j);
            } else {
                censored.push(k.censored);
            }
            selection.push(k.selection);
            Ok(())
        },
    )?;
    let mut natural = psi[..layout.n_psi()].to_vec();
    match start {
        Some(p) => natural.extend_from_slice(p),
        None => natural.extend(std::iter::repeat_n(1.0 / layout.n_components as f64, layout.n_pi())),
    }
    let free0 = layout.to_free(&natural)?;
    let obj = ProfileLoglik {
        layout,
        psi_free: free0[..layout.n_psi()].to_vec(),
        events,
        censored,
        selection,
    };
    let out = minimize(|x| value_and_gradient(&obj, x), &free0[layout.n_psi()..], &config.bfgs())?;
    let mut full_free = obj.psi_free.clone();
    full_free.extend_from_slice(&out.x);
    let nat = layout.to_natural(&full_free);
    if !out.converged {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            gradient_norm: out.gradient_norm(),
            message: format!("profile likelihood: {}", out.message),
            best: nat,
        });
    }
    Ok(nat[layout.n_psi()..].to_vec())
}

/// Inclusion probabilities `p_i` at a natural parameter vector, aborting on
/// values below `min_inclusion`.
pub fn inclusion_probabilities(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[f64],
    min_inclusion: f64,
) -> Result<Vec<f64>> {
    let p = inclusion_terms(layout, knots, data, path, natural)?;
    if let Some(i) = p.iter().position(|v| *v < min_inclusion) {
        return Err(Error::NearZeroSelection {
            record: data.records()[i].id.clone(),
            p: p[i],
        });
    }
    Ok(p)
}

#[derive(Clone, Debug, Serialize)]
pub struct HybridState {
    pub psi: Vec<f64>,
    /// `π_0..π_m`.
    pub pi: Vec<f64>,
    pub weights: Vec<f64>,
    pub iteration: usize,
    pub max_change: f64,
    /// Largest natural-scale parameter change of each cycle.
    pub trace: Vec<f64>,
    /// `‖U₁‖∞` and `‖∂l/∂π‖∞` at the returned point.
    pub pseudo_score_residual: f64,
    pub profile_residual: f64,
}

#[derive(Clone, Debug)]
pub struct SandwichCovariance {
    /// `Σ`, minus the inverse of the stacked estimating-equation Jacobian.
    pub bread: DMatrix<f64>,
    /// `Λ = Σ_i U₀ᵢ U₀ᵢᵀ`.
    pub meat: DMatrix<f64>,
    /// `Σ Λ Σᵀ`, over the natural parameters.
    pub covariance: DMatrix<f64>,
    /// Stacked Jacobian `[∂U₁/∂ψ ∂U₁/∂π; ∂U₂/∂ψ ∂U₂/∂π]`.
    pub jacobian: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct HybridFit {
    pub estimate: ThetaEstimate,
    pub state: HybridState,
    pub sandwich: Option<SandwichCovariance>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-stage iteration to the joint root of the pseudo score and the profile
/// equations, followed by the sandwich covariance.
pub fn fit_hybrid(data: &Dataset, config: &FitConfig) -> Result<HybridFit> {
    let layout = config.layout(data)?;
    let knots = &config.knots;
    let path = config.eval_path;
    let n_psi = layout.n_psi();

    let theta = match &config.start {
        Some(s) => {
            layout.to_free(s)?;
            s.clone()
        }
        None => {
            let ones = vec![1.0; data.len()];
            let psi = solve_pseudo_score(&layout, data, &ones, None, config)?;
            let pi = profile_pi(&layout, knots, data, &psi, None, config)?;
            [psi, pi].concat()
        }
    };
    let (theta, weights, trace) = two_stage(&layout, data, config, theta)?;

    let free = layout.to_free(&theta)?;
    let natural = layout.to_natural(&free);
    let boundary = layout.boundary_flags(&free);
    let u1 = weighted_pseudo_score(&layout, &natural[..n_psi], &weights, data)?;
    let full = NaturalLoglik {
        layout: &layout,
        knots,
        data,
        path,
    };
    let (loglik, grad) = value_and_gradient(&full, &natural)?;
    let u2: Vec<f64> = (n_psi..layout.dim()).filter(|&i| !boundary[i]).map(|i| grad[i]).collect();
    let state = HybridState {
        psi: natural[..n_psi].to_vec(),
        pi: layout.full_probs(&natural),
        weights,
        iteration: trace.len(),
        max_change: *trace.last().unwrap_or(&0.0),
        trace,
        pseudo_score_residual: inf_norm(&u1),
        profile_residual: inf_norm(&u2),
    };
    let mut estimate = ThetaEstimate {
        method: Method::Hybrid,
        model: layout.event_model(&natural),
        partition: layout.partition(knots, &natural)?,
        layout: layout.clone(),
        natural: natural.clone(),
        free,
        covariance: None,
        free_covariance: None,
        std_errors: vec![None; layout.dim()],
        boundary: boundary.clone(),
        loglik,
        converged: true,
        iterations: state.iteration,
        gradient_norm: state.pseudo_score_residual.max(state.profile_residual),
        covariance_warning: None,
    };
    let sandwich = sandwich_covariance(&layout, knots, data, path, &natural, &boundary);
    let sandwich = match sandwich {
        Ok(s) => {
            estimate.set_covariance(Ok(s.covariance.clone()));
            Some(s)
        }
        Err(e) => {
            estimate.set_covariance(Err(format!("sandwich covariance unavailable: {e}")));
            None
        }
    };
    Ok(HybridFit {
        estimate,
        state,
        sandwich,
    })
}

struct MarginalTerms<'a> {
    layout: &'a ParamLayout,
    data: &'a Dataset,
}

impl TermsObjective for MarginalTerms<'_> {
    fn dim(&self) -> usize {
        self.layout.n_psi()
    }
    fn terms<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        marginal_terms(self.layout, self.data, x)
    }
}

struct FullTerms<'a> {
    layout: &'a ParamLayout,
    knots: &'a [f64],
    data: &'a Dataset,
    path: EvalPath,
}

impl TermsObjective for FullTerms<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn terms<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        full_terms(self.layout, self.knots, self.data, self.path, x)
    }
}

/// Stacked estimating functions `(U₁, U₂)` at a natural parameter vector,
/// with weights recomputed from the same vector.
pub fn stacked_estimating_equations(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[f64],
) -> Result<Vec<f64>> {
    let n_psi = layout.n_psi();
    let p = inclusion_terms(layout, knots, data, path, natural)?;
    let weights: Vec<f64> = p.iter().map(|v| 1.0 / v).collect();
    let mut out = weighted_pseudo_score(layout, &natural[..n_psi], &weights, data)?;
    let full = NaturalLoglik {
        layout,
        knots,
        data,
        path,
    };
    let (_, g) = value_and_gradient(&full, natural)?;
    out.extend_from_slice(&g[n_psi..]);
    Ok(out)
}

/// Robust covariance `ΣΛΣᵀ` of the hybrid estimator over the natural
/// parameters. Coordinates flagged in `boundary` are held fixed.
pub fn sandwich_covariance(
    layout: &ParamLayout,
    knots: &[f64],
    data: &Dataset,
    path: EvalPath,
    natural: &[f64],
    boundary: &[bool],
) -> Result<SandwichCovariance> {
    let dim = layout.dim();
    let n_psi = layout.n_psi();
    let n = data.len();
    let steps = hessian_steps(layout, natural);

    let p = inclusion_terms(layout, knots, data, path, natural)?;
    let w: Vec<f64> = p.iter().map(|v| 1.0 / v).collect();
    // ∂w_i/∂θ by central differences of the inclusion weights.
    let dw = jacobian_with_steps(
        |x| Ok(inclusion_terms(layout, knots, data, path, x)?.iter().map(|v| 1.0 / v).collect()),
        natural,
        &steps,
        boundary,
    )?;
    let (_, gw) = terms_and_jacobian(&MarginalTerms { layout, data }, &natural[..n_psi])?;
    let (_, gf) = terms_and_jacobian(
        &FullTerms {
            layout,
            knots,
            data,
            path,
        },
        natural,
    )?;
    // Σ_i w_i H_i^W with the weights frozen.
    let weighted = WeightedMarginal {
        layout,
        data,
        weights: &w,
        free: false,
    };
    let hw = jacobian_with_steps(
        |x| value_and_gradient(&weighted, x).map(|(_, g)| g),
        &natural[..n_psi],
        &steps[..n_psi],
        &boundary[..n_psi],
    )?;
    let info = observed_information(layout, knots, data, path, natural, boundary)?;

    let mut jac = DMatrix::zeros(dim, dim);
    for a in 0..n_psi {
        for b in 0..dim {
            let mut v = 0.0;
            for i in 0..n {
                v += gw[i][a] * dw[(i, b)];
            }
            if b < n_psi {
                v += hw[(a, b)];
            }
            jac[(a, b)] = v;
        }
    }
    for a in n_psi..dim {
        for b in 0..dim {
            jac[(a, b)] = -info[(a, b)];
        }
    }
    let mut meat = DMatrix::zeros(dim, dim);
    let mut u0 = DVector::zeros(dim);
    for i in 0..n {
        for a in 0..n_psi {
            u0[a] = w[i] * gw[i][a];
        }
        for a in n_psi..dim {
            u0[a] = gf[i][a];
        }
        meat += &u0 * u0.transpose();
    }

    let act: Vec<usize> = (0..dim).filter(|&i| !boundary[i]).collect();
    let j_act = jac.select_rows(&act).select_columns(&act);
    let inv = j_act
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("stacked estimating-equation Jacobian".into()))?;
    let bread_act = -inv;
    let meat_act = meat.select_rows(&act).select_columns(&act);
    let cov_act = &bread_act * &meat_act * bread_act.transpose();
    let embed = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(dim, dim);
        for (a, &i) in act.iter().enumerate() {
            for (b, &j) in act.iter().enumerate() {
                out[(i, j)] = m[(a, b)];
            }
        }
        out
    };
    let cov = embed(&cov_act);
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(SandwichCovariance {
        bread: embed(&bread_act),
        meat,
        covariance,
        jacobian: jac,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BootstrapSummary {
    pub reps: usize,
    pub failures: usize,
    pub std_errors: Vec<f64>,
    /// 2.5% and 97.5% percentiles per parameter.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Subject-resampling bootstrap of the hybrid estimator.
pub fn bootstrap_se(
    data: &Dataset,
    config: &FitConfig,
    reference: &ThetaEstimate,
    reps: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    if reps < 2 {
        return Err(Error::Validation("bootstrap needs at least two replicates".into()));
    }
    let cfg = FitConfig {
        start: Some(reference.natural.clone()),
        ..config.clone()
    };
    let indices: Vec<usize> = (0..data.len()).collect();
    let fits: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let pick: Vec<usize> = (0..data.len())
                .map(|_| *indices.choose(&mut rng).expect("non-empty"))
                .collect();
            let sample = data.resample(&pick);
            fit_hybrid_point(&sample, &cfg).ok()
        })
        .collect();
    let ok: Vec<&Vec<f64>> = fits.iter().flatten().collect();
    let failures = reps - ok.len();
    if failures as f64 > 0.1 * reps as f64 || ok.len() < 2 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: reps,
            limit: 10.0,
        });
    }
    let dim = reference.natural.len();
    let mut std_errors = Vec::with_capacity(dim);
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut col: Vec<f64> = ok.iter().map(|v| v[k]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        std_errors.push(var.sqrt());
        col.sort_by(f64::total_cmp);
        lower.push(quantile(&col, 0.025));
        upper.push(quantile(&col, 0.975));
    }
    Ok(BootstrapSummary {
        reps,
        failures,
        std_errors,
        lower,
        upper,
    })
}

/// Hybrid point estimate without the covariance step.
fn fit_hybrid_point(data: &Dataset, config: &FitConfig) -> Result<Vec<f64>> {
    let layout = config.layout(data)?;
    let start = config.start.clone().ok_or_else(|| Error::Validation("missing start".into()))?;
    Ok(two_stage(&layout, data, config, start)?.0)
}

/// One two-stage cycle: weights from `theta`, then the pseudo-score solve and
/// the profile step. Returns the updated natural parameters and the weights.
fn cycle(layout: &ParamLayout, data: &Dataset, config: &FitConfig, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let knots = &config.knots;
    let n_psi = layout.n_psi();
    let p = inclusion_probabilities(layout, knots, data, config.eval_path, theta, config.min_inclusion)?;
    let weights: Vec<f64> = p.iter().map(|v| 1.0 / v).collect();
    let psi = solve_pseudo_score(layout, data, &weights, Some(&theta[..n_psi]), config)?;
    let pi = profile_pi(layout, knots, data, &psi, Some(&theta[n_psi..]), config)?;
    Ok(([psi, pi].concat(), weights))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Contraction ratio above which plain cycling hands over to Newton steps.
const SLOW_CONTRACTION: f64 = 0.5;

/// Iterates the two-stage cycle to its fixed point. Plain cycles run while
/// they contract quickly; after that, Newton steps on the free-scale cycle
/// residual `G(φ) − φ` with a forward-difference Jacobian take over.
/// Returns the parameters, the weights used in the last cycle and the
/// per-cycle changes. `config.max_cycles` caps the number of residual
/// evaluations (Jacobian probes are not counted).
fn two_stage(
    layout: &ParamLayout,
    data: &Dataset,
    config: &FitConfig,
    mut theta: Vec<f64>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut trace: Vec<f64> = Vec::new();
    let fail = |trace: &[f64], theta: Vec<f64>| Error::NonConvergence {
        iterations: trace.len(),
        gradient_norm: *trace.last().unwrap_or(&f64::INFINITY),
        message: format!(
            "two-stage iteration did not settle; last changes {:?}",
            &trace[trace.len().saturating_sub(5)..]
        ),
        best: theta,
    };

    // Plain cycles.
    let (mut next, mut weights) = cycle(layout, data, config, &theta)?;
    loop {
        let change = max_abs_diff(&next, &theta);
        trace.push(change);
        if change < config.cycle_tol {
            return Ok((next, weights, trace));
        }
        let slow = trace.len() >= 3 && change > SLOW_CONTRACTION * trace[trace.len() - 2];
        theta = next;
        if slow {
            break;
        }
        if trace.len() >= config.max_cycles {
            return Err(fail(&trace, theta));
        }
        (next, weights) = cycle(layout, data, config, &theta)?;
    }

    // Newton on r(φ) = free(G(natural(φ))) − φ.
    let dim = layout.dim();
    let residual = |phi: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        let nat = layout.to_natural(phi);
        let (g, w) = cycle(layout, data, config, &nat)?;
        let r: Vec<f64> = layout.to_free(&g)?.iter().zip(phi).map(|(a, b)| a - b).collect();
        let change = max_abs_diff(&g, &nat);
        Ok((r, g, w, change))
    };
    let mut phi = layout.to_free(&theta)?;
    let (mut r, mut g, mut w, mut change) = residual(&phi)?;
    trace.push(change);
    while trace.len() < config.max_cycles {
        if change < config.cycle_tol {
            return Ok((g, w, trace));
        }
        let mut jac = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let h = 1e-5 * (phi[j].abs() + 1.0);
            let mut probe = phi.clone();
            probe[j] += h;
            let (rj, ..) = residual(&probe)?;
            for i in 0..dim {
                jac[(i, j)] = (rj[i] - r[i]) / h;
            }
        }
        let rhs = DVector::from_iterator(dim, r.iter().map(|v| -v));
        let Some(delta) = jac.lu().solve(&rhs) else {
            return Err(fail(&trace, g));
        };
        let base = norm(&r);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-3 && trace.len() < config.max_cycles {
            let cand: Vec<f64> = phi.iter().zip(delta.iter()).map(|(p, d)| p + t * d).collect();
            match residual(&cand) {
                Ok((rc, gc, wc, cc)) => {
                    trace.push(cc);
                    if norm(&rc) < base {
                        (phi, r, g, w, change) = (cand, rc, gc, wc, cc);
                        accepted = true;
                        break;
                    }
                }
                Err(e) if e.is_convergence() => trace.push(f64::INFINITY),
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if change < config.cycle_tol {
        return Ok((g, w, trace));
    }
    Err(fail(&trace, g))
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSummary {
    Continuous {
        index: usize,
        weighted_mean: f64,
        weighted_sd: f64,
        clinic_mean: f64,
        clinic_sd: f64,
    },
    Binary {
        index: usize,
        weighted_proportion: f64,
        clinic_proportion: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationSummary {
    /// Estimated community size `Σ w_i`.
    pub n_hat: f64,
    pub n_selected: usize,
    pub covariates: Vec<CovariateSummary>,
}

/// Community size and inverse-probability-weighted covariate summaries.
/// Constant columns (the intercept) are skipped; columns with only 0/1
/// values are summarized as proportions.
pub fn population_summaries(data: &Dataset, weights: &[f64]) -> Result<PopulationSummary> {
    check_weights(weights, data)?;
    let n_hat: f64 = weights.iter().sum();
    let n = data.len() as f64;
    let mut covariates = Vec::new();
    for k in 0..data.n_covariates() {
        let col: Vec<f64> = data.records().iter().map(|r| r.z[k]).collect();
        if col.iter().all(|v| *v == col[0]) {
            continue;
        }
        let wmean = col.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / n_hat;
        let mean = col.iter().sum::<f64>() / n;
        if col.iter().all(|v| *v == 0.0 || *v == 1.0) {
            covariates.push(CovariateSummary::Binary {
                index: k,
                weighted_proportion: wmean,
                clinic_proportion: mean,
            });
        } else {
            let wvar = col.iter().zip(weights).map(|(v, w)| w * (v - wmean).powi(2)).sum::<f64>() / n_hat;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            covariates.push(CovariateSummary::Continuous {
                index: k,
                weighted_mean: wmean,
                weighted_sd: wvar.sqrt(),
                clinic_mean: mean,
                clinic_sd: var.sqrt(),
            });
        }
    }
    Ok(PopulationSummary {
        n_hat,
        n_selected: data.len(),
        covariates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;
    use crate::fit_full::maximize_full;
    use crate::simulate::{apply_selection, generate_community, SimulationDesign};

    fn cohort(rep: u64) -> (Dataset, FitConfig) {
        let design = SimulationDesign::preset("table1-weibull").unwrap();
        let community = generate_community(&design, 7, rep).unwrap();
        let data = apply_selection(&community, design.recruitment_cutoff, design.censoring_time).unwrap();
        (data, design.fit_config())
    }

    #[test]
    fn unit_weights_reduce_to_ordinary_score() {
        let (data, config) = cohort(0);
        let layout = config.layout(&data).unwrap();
        let ones = vec![1.0; data.len()];
        let psi = solve_pseudo_score(&layout, &data, &ones, None, &config).unwrap();
        let u1 = weighted_pseudo_score(&layout, &psi, &ones, &data).unwrap();
        assert!(inf_norm(&u1) < 1e-4, "{u1:?}");

        let twos = vec![2.0; data.len()];
        let doubled = weighted_pseudo_score(&layout, &[psi[0] * 1.01, psi[1], psi[2], psi[3]], &twos, &data).unwrap();
        let single = weighted_pseudo_score(&layout, &[psi[0] * 1.01, psi[1], psi[2], psi[3]], &ones, &data).unwrap();
        for (d, s) in doubled.iter().zip(&single) {
            assert!((d - 2.0 * s).abs() <= 1e-9 * s.abs().max(1.0));
        }
    }

    #[test]
    fn weights_are_at_least_one_and_exact_for_events() {
        let (data, config) = cohort(1);
        let fit = fit_hybrid(&data, &config).unwrap();
        for (rec, w) in data.records().iter().zip(&fit.state.weights) {
            assert!(*w >= 1.0);
            if rec.delta {
                assert_eq!(*w, 1.0);
            }
        }
    }

    #[test]
    fn fixed_point_residuals_and_idempotence() {
        let (data, config) = cohort(2);
        let fit = fit_hybrid(&data, &config).unwrap();
        let n_hat: f64 = fit.state.weights.iter().sum();
        assert!(fit.state.max_change < config.cycle_tol);
        assert!(fit.state.pseudo_score_residual < 1e-3 * n_hat, "{}", fit.state.pseudo_score_residual);
        assert!(fit.state.profile_residual < 1e-3 * data.len() as f64, "{}", fit.state.profile_residual);

        let again = fit_hybrid(
            &data,
            &FitConfig {
                start: Some(fit.estimate.natural.clone()),
                ..config.clone()
            },
        )
        .unwrap();
        assert_eq!(again.state.iteration, 1);
        for (a, b) in again.estimate.natural.iter().zip(&fit.estimate.natural) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sandwich_is_symmetric_with_nonnegative_diagonal() {
        let (data, config) = cohort(3);
        let fit = fit_hybrid(&data, &config).unwrap();
        let cov = &fit.sandwich.as_ref().unwrap().covariance;
        for i in 0..cov.nrows() {
            assert!(cov[(i, i)] >= 0.0);
            for j in 0..i {
                assert!((cov[(i, j)] - cov[(j, i)]).abs() <= 1e-10 * (cov[(i, i)] * cov[(j, j)]).sqrt());
            }
        }
    }

    #[test]
    fn profile_pi_reproduces_full_fit() {
        let (data, config) = cohort(4);
        let full = maximize_full(&data, &config).unwrap();
        let layout = config.layout(&data).unwrap();
        let n_psi = layout.n_psi();
        let pi = profile_pi(&layout, &config.knots, &data, &full.natural[..n_psi], None, &config).unwrap();
        for (a, b) in pi.iter().zip(&full.natural[n_psi..]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn population_summary_counts_unit_weights() {
        let (data, _) = cohort(5);
        let s = population_summaries(&data, &vec![1.0; data.len()]).unwrap();
        assert_eq!(s.n_hat, data.len() as f64);
        assert_eq!(s.n_selected, data.len());
        assert_eq!(s.covariates.len(), 2);
    }

    #[test]
    fn all_censored_is_unidentifiable() {
        let records = (0..20)
            .map(|i| SubjectRecord {
                id: format!("c{i}"),
                r: 1.0 + i as f64 * 0.1,
                x: 15.0,
                delta: false,
                u: 15.0,
                z: vec![1.0, 20.0, (i % 2) as f64],
            })
            .collect();
        let data = Dataset::new(records).unwrap();
        assert!(matches!(fit_hybrid(&data, &FitConfig::default()), Err(Error::ShapeUnidentifiable)));
    }

    #[test]
    fn bootstrap_smoke_and_determinism() {
        let (data, config) = cohort(6);
        let fit = fit_hybrid(&data, &config).unwrap();
        let a = bootstrap_se(&data, &config, &fit.estimate, 2, 11).unwrap();
        let b = bootstrap_se(&data, &config, &fit.estimate, 2, 11).unwrap();
        assert!(a.std_errors.iter().all(|s| s.is_finite()));
        assert_eq!(a.std_errors, b.std_errors);
        assert_eq!(a.lower, b.lower);
        assert!(bootstrap_se(&data, &config, &fit.estimate, 1, 11).is_err());
    }
}
