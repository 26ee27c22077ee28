//! Population-level outputs: weighted Kaplan–Meier curves and projected
//! marginal progression rates for a hypothetical community.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, LogNormal, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::event_models::EventModel;
use crate::fit_full::ThetaEstimate;
use crate::fit_hybrid::{inclusion_probabilities, quantile};
use crate::quadrature::{self, QuadOptions};
use crate::referral::EvalPath;
use crate::simulate::CovariateDesign;

/// Right-continuous step function from a product-limit estimator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurvivalCurve {
    /// 0 followed by the distinct event times.
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Weighted number at risk just before each time (total weight at 0).
    pub at_risk: Vec<f64>,
}

impl SurvivalCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|s| *s <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,survival")?;
        for (t, s) in self.times.iter().zip(&self.survival) {
            writeln!(w, "{t},{s}")?;
        }
        Ok(())
    }
}

/// Product-limit estimator with weighted risk sets and event counts.
pub fn weighted_kaplan_meier(times: &[f64], events: &[bool], weights: &[f64]) -> Result<SurvivalCurve> {
    km(None, times, events, weights)
}

/// Product-limit estimator for left-truncated data: a subject is at risk at
/// `t` when `entry < t ≤ time`.
pub fn truncated_kaplan_meier(entry: &[f64], times: &[f64], events: &[bool]) -> Result<SurvivalCurve> {
    km(Some(entry), times, events, &vec![1.0; times.len()])
}

fn km(entry: Option<&[f64]>, times: &[f64], events: &[bool], weights: &[f64]) -> Result<SurvivalCurve> {
    let n = times.len();
    if events.len() != n || weights.len() != n || entry.is_some_and(|e| e.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if events.len() != n { events.len() } else { weights.len() },
        });
    }
    if n == 0 {
        return Err(Error::Validation("no observations".into()));
    }
    if times.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Validation("times must be positive and finite".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Validation("weights must be non-negative and finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let total: f64 = weights.iter().sum();
    let mut curve = SurvivalCurve {
        times: vec![0.0],
        survival: vec![1.0],
        at_risk: vec![total],
    };
    // Risk set bookkeeping: without truncation it shrinks as times pass;
    // with truncation it is recomputed at each event time.
    let mut remaining = total;
    let mut s = 1.0;
    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let mut deaths = 0.0;
        let mut leaving = 0.0;
        let mut j = k;
        while j < n && times[order[j]] == t {
            let i = order[j];
            leaving += weights[i];
            if events[i] {
                deaths += weights[i];
            }
            j += 1;
        }
        let at_risk = match entry {
            None => remaining,
            Some(e) => order[k..]
                .iter()
                .filter(|&&i| e[i] < t)
                .map(|&i| weights[i])
                .sum(),
        };
        if deaths > 0.0 && at_risk > 0.0 {
            s *= 1.0 - deaths / at_risk;
            curve.times.push(t);
            curve.survival.push(s.max(0.0));
            curve.at_risk.push(at_risk);
        }
        remaining -= leaving;
        k = j;
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Years since initiation.
    pub horizon: f64,
    pub runs: usize,
    pub seed: u64,
    /// Hypothetical-community size; `round(N̂)` at the fit when absent.
    #[serde(default)]
    pub community_size: Option<usize>,
    #[serde(default = "default_min_inclusion")]
    pub min_inclusion: f64,
}

fn default_min_inclusion() -> f64 {
    1e-8
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            horizon: 30.0,
            runs: 500,
            seed: 1,
            community_size: None,
            min_inclusion: default_min_inclusion(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionSummary {
    pub horizon: f64,
    pub runs: usize,
    pub failed_runs: usize,
    pub community_size: usize,
    /// `Σ w_i` at the fitted parameters.
    pub n_hat: f64,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub rates: Vec<f64>,
}

/// Generator for one covariate column of the hypothetical community.
#[derive(Clone, Copy, Debug)]
enum ColumnLaw {
    Constant(f64),
    Bernoulli(f64),
    LogNormal { mu: f64, sigma: f64 },
    Normal { mu: f64, sigma: f64 },
}

impl ColumnLaw {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        let bad = |e: String| Error::Validation(format!("covariate generator: {e}"));
        Ok(match *self {
            ColumnLaw::Constant(v) => v,
            ColumnLaw::Bernoulli(p) => {
                if Bernoulli::new(p.clamp(0.0, 1.0)).map_err(|e| bad(e.to_string()))?.sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            ColumnLaw::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).map_err(|e| bad(e.to_string()))?.sample(rng),
            ColumnLaw::Normal { mu, sigma } => Normal::new(mu, sigma).map_err(|e| bad(e.to_string()))?.sample(rng),
        })
    }
}

fn weighted_moments(v: impl Iterator<Item = f64> + Clone, w: &[f64]) -> (f64, f64) {
    let total: f64 = w.iter().sum();
    let mean = v.clone().zip(w).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = v.zip(w).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / total;
    (mean, var.sqrt())
}

/// Independent per-column laws matched to the weighted clinic sample:
/// 0/1 columns as Bernoulli, positive columns as log-normal, others normal.
fn column_laws(data: &Dataset, weights: &[f64]) -> Vec<ColumnLaw> {
    (0..data.n_covariates())
        .map(|k| {
            let col = data.records().iter().map(move |r| r.z[k]);
            let first = data.records()[0].z[k];
            if col.clone().all(|v| v == first) {
                ColumnLaw::Constant(first)
            } else if col.clone().all(|v| v == 0.0 || v == 1.0) {
                ColumnLaw::Bernoulli(weighted_moments(col, weights).0)
            } else if col.clone().all(|v| v > 0.0) {
                let (mu, sigma) = weighted_moments(col.map(f64::ln), weights);
                ColumnLaw::LogNormal { mu, sigma }
            } else {
                let (mu, sigma) = weighted_moments(col, weights);
                ColumnLaw::Normal { mu, sigma }
            }
        })
        .collect()
}

/// `L` with `L Lᵀ = Σ` for a symmetric positive semidefinite `Σ`.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| *v < -1e-10 * scale.max(1e-300)) || eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveSemidefinite);
    }
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Event times for a hypothetical community of `size` members under the
/// natural parameters `natural`, with covariates matched to the clinic
/// sample reweighted at those parameters.
fn community_event_times(
    estimate: &ThetaEstimate,
    natural: &[f64],
    data: &Dataset,
    size: usize,
    min_inclusion: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let layout = &estimate.layout;
    let model: EventModel = layout.event_model(natural);
    let p = inclusion_probabilities(layout, estimate.partition.knots(), data, EvalPath::Auto, natural, min_inclusion)?;
    let weights: Vec<f64> = p.iter().map(|v| 1.0 / v).collect();
    let laws = column_laws(data, &weights);
    let mut times = Vec::with_capacity(size);
    for _ in 0..size {
        let z = laws.iter().map(|l| l.sample(rng)).collect::<Result<Vec<_>>>()?;
        times.push(model.sample_event_time(&z, rng)?);
    }
    Ok(times)
}

fn fitted_n_hat(estimate: &ThetaEstimate, data: &Dataset, min_inclusion: f64) -> Result<f64> {
    let p = inclusion_probabilities(
        &estimate.layout,
        estimate.partition.knots(),
        data,
        EvalPath::Auto,
        &estimate.natural,
        min_inclusion,
    )?;
    Ok(p.iter().map(|v| 1.0 / v).sum())
}

fn community_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Marginal Kaplan–Meier curve of one hypothetical community simulated at
/// the point estimate.
pub fn community_curve(estimate: &ThetaEstimate, data: &Dataset, config: &ProjectionConfig) -> Result<SurvivalCurve> {
    let size = match config.community_size {
        Some(n) => n,
        None => fitted_n_hat(estimate, data, config.min_inclusion)?.round() as usize,
    };
    if size == 0 {
        return Err(Error::Validation("hypothetical community would be empty".into()));
    }
    let mut rng = community_stream(config.seed);
    let times = community_event_times(estimate, &estimate.natural, data, size, config.min_inclusion, &mut rng)?;
    weighted_kaplan_meier(&times, &vec![true; size], &vec![1.0; size])
}

/// Projected marginal progression rate `1 − KM(horizon)` over parameter
/// draws from the fitted estimate's free-scale normal approximation.
pub fn project_progression(
    estimate: &ThetaEstimate,
    data: &Dataset,
    config: &ProjectionConfig,
) -> Result<ProjectionSummary> {
    if !(config.horizon >= 0.0) || !config.horizon.is_finite() {
        return Err(Error::Validation("horizon must be a non-negative number of years".into()));
    }
    if config.runs == 0 {
        return Err(Error::Validation("at least one projection run is required".into()));
    }
    let cov = estimate.free_covariance.as_ref().ok_or_else(|| {
        Error::Validation("projection needs a fit with a covariance matrix".into())
    })?;
    let factor = psd_factor(cov)?;
    let layout = &estimate.layout;
    let n_hat = fitted_n_hat(estimate, data, config.min_inclusion)?;
    let size = config.community_size.unwrap_or(n_hat.round() as usize);
    if size == 0 {
        return Err(Error::Validation("hypothetical community would be empty".into()));
    }

    // Parameter draws use per-run streams; every run shares the community
    // stream, so the spread reflects parameter uncertainty only.
    let run = |b: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(b as u64);
        let eps = DVector::from_iterator(layout.dim(), (0..layout.dim()).map(|_| StandardNormal.sample(&mut rng)));
        let draw = DVector::from_column_slice(&estimate.free) + &factor * eps;
        let natural = layout.to_natural(draw.as_slice());
        let mut community_rng = community_stream(config.seed);
        let times = community_event_times(estimate, &natural, data, size, config.min_inclusion, &mut community_rng)?;
        let curve = weighted_kaplan_meier(&times, &vec![true; size], &vec![1.0; size])?;
        Ok(1.0 - curve.survival_at(config.horizon))
    };
    let outcomes: Vec<Result<f64>> = (0..config.runs).into_par_iter().map(run).collect();
    let mut rates = Vec::with_capacity(config.runs);
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(r) => rates.push(r),
            Err(e) => {
                log::warn!("projection run failed: {e}");
                failed += 1;
            }
        }
    }
    if rates.is_empty() {
        return Err(Error::TooManyFailures {
            failed,
            total: config.runs,
            limit: 100.0,
        });
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let sd = if rates.len() > 1 {
        (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ProjectionSummary {
        horizon: config.horizon,
        runs: config.runs,
        failed_runs: failed,
        community_size: size,
        n_hat,
        mean,
        sd,
        lower: quantile(&sorted, 0.025),
        upper: quantile(&sorted, 0.975),
        rates,
    })
}

/// Progression rates from estimators that ignore the sampling mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NaiveRates {
    /// `1 − KM(horizon)` treating the clinic sample as the population.
    pub unweighted: f64,
    /// `1 − KM(horizon)` with delayed entry at the referral time.
    pub delayed_entry: f64,
}

pub fn naive_progression_rates(data: &Dataset, horizon: f64) -> Result<NaiveRates> {
    let x: Vec<f64> = data.records().iter().map(|r| r.x).collect();
    let d: Vec<bool> = data.records().iter().map(|r| r.delta).collect();
    let r: Vec<f64> = data.records().iter().map(|r| r.r).collect();
    let plain = weighted_kaplan_meier(&x, &d, &vec![1.0; x.len()])?;
    let trunc = truncated_kaplan_meier(&r, &x, &d)?;
    Ok(NaiveRates {
        unweighted: 1.0 - plain.survival_at(horizon),
        delayed_entry: 1.0 - trunc.survival_at(horizon),
    })
}

/// `E_z[F(horizon | z)]` under the covariate generator of a simulation
/// design, by quadrature over the log-normal covariate.
pub fn marginal_progression_rate(model: &EventModel, covariates: &CovariateDesign, horizon: f64) -> Result<f64> {
    let p = covariates.bernoulli_p;
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let f = |u: f64| -> Result<f64> {
        let z1 = (covariates.log_location + covariates.log_scale * u).exp();
        let phi = inv_sqrt_2pi * (-0.5 * u * u).exp();
        let f0 = model.cdf(horizon, &[1.0, z1, 0.0])?;
        let f1 = model.cdf(horizon, &[1.0, z1, 1.0])?;
        Ok(phi * ((1.0 - p) * f0 + p * f1))
    };
    quadrature::integrate(
        f,
        -10.0,
        10.0,
        QuadOptions {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_intervals: 500,
        },
    )
}
