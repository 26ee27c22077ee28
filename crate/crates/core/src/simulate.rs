//! Community generators, prevalent-cohort selection and the replication
//! harness for simulation studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::event_models::{EventModel, Family};
use crate::fit_full::{maximize_full, FitConfig, Method, ThetaEstimate, DEFAULT_KNOTS};
use crate::fit_hybrid::fit_hybrid;
use crate::referral::ReferralPartition;

/// Covariate generator: intercept, a log-normal continuous covariate and a
/// Bernoulli indicator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateDesign {
    /// Location and scale of `ln z₁`.
    pub log_location: f64,
    pub log_scale: f64,
    /// Success probability of `z₂`.
    pub bernoulli_p: f64,
}

impl Default for CovariateDesign {
    fn default() -> Self {
        CovariateDesign {
            log_location: 3.0,
            log_scale: 0.3,
            bernoulli_p: 1.0 / 3.0,
        }
    }
}

impl CovariateDesign {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let ln = LogNormal::new(self.log_location, self.log_scale)
            .map_err(|e| Error::Validation(format!("covariate design: {e}")))?;
        let b = Bernoulli::new(self.bernoulli_p).map_err(|e| Error::Validation(format!("covariate design: {e}")))?;
        Ok(vec![1.0, ln.sample(rng), if b.sample(rng) { 1.0 } else { 0.0 }])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationDesign {
    pub name: String,
    pub community_size: usize,
    pub truth: EventModel,
    pub truth_partition: ReferralPartition,
    pub covariates: CovariateDesign,
    /// Recruitment cutoff `d₀`: subjects with referral time below it enter.
    pub recruitment_cutoff: f64,
    /// Administrative censoring time `c₀` (years since initiation).
    pub censoring_time: f64,
    /// Width of a window of uniformly spread initiation dates before the
    /// common date; 0 puts every initiation on the same date.
    #[serde(default)]
    pub initiation_spread: f64,
    pub fit_family: Family,
    pub working_knots: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
}

/// Named designs for the simulation scenarios.
pub const PRESETS: [&str; 8] = [
    "table1-weibull",
    "table1-gamma",
    "table1-lognormal",
    "table2",
    "table3-15",
    "table3-20",
    "table3-30",
    "edinburgh6",
];

fn truth_partition() -> ReferralPartition {
    ReferralPartition::new(DEFAULT_KNOTS.to_vec(), vec![0.1, 0.06, 0.12, 0.24, 0.48]).expect("valid partition")
}

fn eight_component_partition() -> ReferralPartition {
    let knots: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
    ReferralPartition::new(knots, vec![0.025, 0.05, 0.1, 0.1, 0.125, 0.15, 0.2, 0.25]).expect("valid partition")
}

/// Six-component partition matching the clinic working model.
pub const EDINBURGH6_KNOTS: [f64; 7] = [0.0, 0.25, 0.5, 0.625, 0.75, 0.875, 1.0];

impl SimulationDesign {
    pub fn preset(name: &str) -> Result<Self> {
        let weibull = EventModel::weibull(4.0, vec![4.6, -0.03, -0.4]);
        let base = SimulationDesign {
            name: name.to_string(),
            community_size: 5000,
            truth: weibull.clone(),
            truth_partition: truth_partition(),
            covariates: CovariateDesign::default(),
            recruitment_cutoff: 15.0,
            censoring_time: 15.0,
            initiation_spread: 0.0,
            fit_family: Family::Weibull,
            working_knots: DEFAULT_KNOTS.to_vec(),
            replications: 200,
            seed: 20_130_601,
        };
        let design = match name {
            "table1-weibull" => base,
            "table1-gamma" => SimulationDesign {
                truth: EventModel::gamma(12.71, vec![1.96, -0.03, -0.4]),
                ..base
            },
            "table1-lognormal" => SimulationDesign {
                truth: EventModel::log_normal(0.275, vec![4.464, -0.03, -0.4]),
                ..base
            },
            "table2" => SimulationDesign {
                truth_partition: ReferralPartition::uniform(),
                ..base
            },
            "table3-15" | "table3-20" | "table3-30" => {
                let horizon: f64 = name[7..].parse().expect("numeric suffix");
                SimulationDesign {
                    truth_partition: eight_component_partition(),
                    recruitment_cutoff: horizon,
                    censoring_time: horizon,
                    ..base
                }
            }
            "edinburgh6" => SimulationDesign {
                truth_partition: ReferralPartition::new(
                    EDINBURGH6_KNOTS.to_vec(),
                    vec![0.05, 0.05, 0.1, 0.12, 0.24, 0.44],
                )
                .expect("valid partition"),
                working_knots: EDINBURGH6_KNOTS.to_vec(),
                community_size: 3000,
                ..base
            },
            other => {
                return Err(Error::Validation(format!(
                    "unknown scenario '{other}'; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(design)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.truth.beta.len() != 3 {
            return Err(Error::Validation("the covariate generator produces 3 columns (intercept, z1, z2)".into()));
        }
        if !(self.recruitment_cutoff > 0.0) || !(self.censoring_time > 0.0) {
            return Err(Error::Validation("recruitment cutoff and censoring time must be positive".into()));
        }
        if self.censoring_time != self.recruitment_cutoff {
            return Err(Error::Validation(
                "censoring time must equal the recruitment cutoff (both mark the close of the study)".into(),
            ));
        }
        if !(self.initiation_spread >= 0.0) {
            return Err(Error::Validation("initiation spread must be non-negative".into()));
        }
        if self.community_size == 0 {
            return Err(Error::Validation("community size must be positive".into()));
        }
        ReferralPartition::with_equal_probs(self.working_knots.clone())?;
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            family: self.fit_family,
            knots: self.working_knots.clone(),
            ..FitConfig::default()
        }
    }
}

/// A simulated community before selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Community {
    pub z: Vec<Vec<f64>>,
    pub event_times: Vec<f64>,
    pub referral_times: Vec<f64>,
    /// Extra time between initiation and the common date (0 by default).
    pub offsets: Vec<f64>,
}

impl Community {
    pub fn len(&self) -> usize {
        self.event_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_times.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum Role {
    Covariates = 0,
    Events = 1,
    Referrals = 2,
    Initiation = 3,
}

/// Independent stream for one replication and role.
pub(crate) fn stream(seed: u64, rep: u64, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((rep << 3) | role);
    rng
}

/// Draws a community for replication `rep`.
pub fn generate_community(design: &SimulationDesign, seed: u64, rep: u64) -> Result<Community> {
    design.validate()?;
    let n = design.community_size;
    let mut rz = stream(seed, rep, Role::Covariates as u64);
    let mut rt = stream(seed, rep, Role::Events as u64);
    let mut rr = stream(seed, rep, Role::Referrals as u64);
    let mut ri = stream(seed, rep, Role::Initiation as u64);
    let mut community = Community {
        z: Vec::with_capacity(n),
        event_times: Vec::with_capacity(n),
        referral_times: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let z = design.covariates.sample(&mut rz)?;
        let t = design.truth.sample_event_time(&z, &mut rt)?;
        let r = design.truth_partition.sample_referral_time(t, &mut rr);
        let offset = if design.initiation_spread > 0.0 {
            design.initiation_spread * ri.random::<f64>()
        } else {
            0.0
        };
        community.z.push(z);
        community.event_times.push(t);
        community.referral_times.push(r);
        community.offsets.push(offset);
    }
    Ok(community)
}

/// Keeps members referred before the cutoff and applies administrative
/// censoring; both are measured from each member's initiation date.
pub fn apply_selection(community: &Community, recruitment_cutoff: f64, censoring_time: f64) -> Result<Dataset> {
    if censoring_time != recruitment_cutoff {
        return Err(Error::Validation(
            "censoring time must equal the recruitment cutoff (both mark the close of the study)".into(),
        ));
    }
    let mut records = Vec::new();
    for i in 0..community.len() {
        let u = recruitment_cutoff + community.offsets[i];
        let (t, r) = (community.event_times[i], community.referral_times[i]);
        if r >= u {
            continue;
        }
        let c = censoring_time + community.offsets[i];
        let (x, delta) = if t <= c { (t, true) } else { (c, false) };
        records.push(SubjectRecord {
            id: format!("s{i}"),
            r,
            x,
            delta,
            u,
            z: community.z[i].clone(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptySelection);
    }
    Dataset::new(records)
}

/// Estimates from one fit inside a replication.
#[derive(Clone, Debug, Serialize)]
pub struct FitSummary {
    pub natural: Vec<f64>,
    pub std_errors: Vec<Option<f64>>,
    pub log_baseline_mean: f64,
    pub iterations: usize,
}

impl FitSummary {
    fn from_estimate(est: &ThetaEstimate) -> Self {
        FitSummary {
            natural: est.natural.clone(),
            std_errors: est.std_errors.clone(),
            log_baseline_mean: est.model.log_baseline_mean().unwrap_or(f64::NAN),
            iterations: est.iterations,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicationOutcome {
    pub rep: usize,
    pub n_selected: usize,
    pub n_events: usize,
    pub full: Option<FitSummary>,
    pub hybrid: Option<FitSummary>,
    /// `Σ w_i` from the hybrid fit.
    pub n_hat: Option<f64>,
    pub errors: Vec<String>,
}

/// One row of a study table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub scenario: String,
    pub method: Method,
    pub parameter: String,
    pub mean: f64,
    /// Mean model-based SE (full likelihood).
    pub se_bar: Option<f64>,
    /// Empirical SD of the estimates.
    pub ese: f64,
    /// Mean robust SE (hybrid).
    pub rse_bar: Option<f64>,
    /// Full-likelihood variance over hybrid variance (hybrid rows).
    pub re: Option<f64>,
    pub n_fail: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyResult {
    pub scenario: String,
    pub reps: usize,
    pub seed: u64,
    pub names: Vec<String>,
    pub rows: Vec<ReplicationSummary>,
    pub outcomes: Vec<ReplicationOutcome>,
}

impl StudyResult {
    pub fn row(&self, method: Method, parameter: &str) -> Option<&ReplicationSummary> {
        self.rows.iter().find(|r| r.method == method && r.parameter == parameter)
    }

    fn fits(&self, method: Method) -> Vec<&FitSummary> {
        self.outcomes
            .iter()
            .filter_map(|o| match method {
                Method::Full => o.full.as_ref(),
                Method::Hybrid => o.hybrid.as_ref(),
            })
            .collect()
    }

    /// Mean implied log baseline mean over successful fits.
    pub fn mean_log_baseline(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self.fits(method).iter().map(|f| f.log_baseline_mean).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_n_hat(&self) -> Option<f64> {
        let v: Vec<f64> = self.outcomes.iter().filter_map(|o| o.n_hat).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Empirical SD of `N̂` across replications.
    pub fn sd_n_hat(&self) -> Option<f64> {
        let v: Vec<f64> = self.outcomes.iter().filter_map(|o| o.n_hat).collect();
        (v.len() > 1).then(|| sample_sd(&v))
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scenario,method,parameter,mean,se_bar,ese,rse_bar,re,n_fail")?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let method = match r.method {
                Method::Full => "full",
                Method::Hybrid => "hybrid",
            };
            writeln!(
                w,
                "{},{},{},{:.6},{},{:.6},{},{},{}",
                r.scenario,
                method,
                r.parameter,
                r.mean,
                opt(r.se_bar),
                r.ese,
                opt(r.rse_bar),
                opt(r.re),
                r.n_fail
            )?;
        }
        Ok(())
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs one replication: simulate, select, fit with each requested method.
pub fn run_replication(design: &SimulationDesign, methods: &[Method], seed: u64, rep: usize) -> ReplicationOutcome {
    let mut out = ReplicationOutcome {
        rep,
        n_selected: 0,
        n_events: 0,
        full: None,
        hybrid: None,
        n_hat: None,
        errors: Vec::new(),
    };
    let data = match generate_community(design, seed, rep as u64)
        .and_then(|c| apply_selection(&c, design.recruitment_cutoff, design.censoring_time))
    {
        Ok(d) => d,
        Err(e) => {
            out.errors.push(format!("data: {e}"));
            return out;
        }
    };
    out.n_selected = data.len();
    out.n_events = data.n_events();
    let cfg = design.fit_config();
    for m in methods {
        match m {
            Method::Full => match maximize_full(&data, &cfg) {
                Ok(est) => out.full = Some(FitSummary::from_estimate(&est)),
                Err(e) => out.errors.push(format!("full: {e}")),
            },
            Method::Hybrid => match fit_hybrid(&data, &cfg) {
                Ok(fit) => {
                    out.n_hat = Some(fit.state.weights.iter().sum());
                    out.hybrid = Some(FitSummary::from_estimate(&fit.estimate));
                }
                Err(e) => out.errors.push(format!("hybrid: {e}")),
            },
        }
    }
    if !out.errors.is_empty() {
        log::warn!("replication {rep}: {}", out.errors.join("; "));
    }
    out
}

/// Largest tolerated fraction of failed fits per method.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// Runs `reps` replications in parallel and summarizes them per method and
/// parameter.
pub fn run_study(design: &SimulationDesign, methods: &[Method], reps: usize, seed: u64) -> Result<StudyResult> {
    if reps < 2 {
        return Err(Error::Validation("a study needs at least two replications".into()));
    }
    design.validate()?;
    let outcomes: Vec<ReplicationOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| run_replication(design, methods, seed, rep))
        .collect();
    summarize(design, methods, seed, outcomes)
}

pub(crate) fn summarize(
    design: &SimulationDesign,
    methods: &[Method],
    seed: u64,
    outcomes: Vec<ReplicationOutcome>,
) -> Result<StudyResult> {
    let reps = outcomes.len();
    let layout = crate::params::ParamLayout::new(design.fit_family, 3, design.working_knots.len() - 1);
    let names = layout.names();
    let collect = |m: Method| -> Vec<&FitSummary> {
        outcomes
            .iter()
            .filter_map(|o| match m {
                Method::Full => o.full.as_ref(),
                Method::Hybrid => o.hybrid.as_ref(),
            })
            .collect()
    };
    let mut rows = Vec::new();
    for &m in methods {
        let fits = collect(m);
        let n_fail = reps - fits.len();
        if n_fail as f64 > MAX_FAILURE_FRACTION * reps as f64 || fits.len() < 2 {
            return Err(Error::TooManyFailures {
                failed: n_fail,
                total: reps,
                limit: MAX_FAILURE_FRACTION * 100.0,
            });
        }
        for (k, name) in names.iter().enumerate() {
            let est: Vec<f64> = fits.iter().map(|f| f.natural[k]).collect();
            let ses: Vec<f64> = fits.iter().filter_map(|f| f.std_errors[k]).collect();
            let se_mean = (!ses.is_empty()).then(|| mean_of(&ses));
            let ese = sample_sd(&est);
            let re = if m == Method::Hybrid && methods.contains(&Method::Full) {
                let full: Vec<f64> = collect(Method::Full).iter().map(|f| f.natural[k]).collect();
                (full.len() > 1).then(|| sample_sd(&full).powi(2) / ese.powi(2))
            } else {
                None
            };
            rows.push(ReplicationSummary {
                scenario: design.name.clone(),
                method: m,
                parameter: name.clone(),
                mean: mean_of(&est),
                se_bar: if m == Method::Full { se_mean } else { None },
                ese,
                rse_bar: if m == Method::Hybrid { se_mean } else { None },
                re,
                n_fail,
            });
        }
    }
    Ok(StudyResult {
        scenario: design.name.clone(),
        reps,
        seed,
        names,
        rows,
        outcomes,
    })
}
