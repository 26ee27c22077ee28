use serde::Serialize;
use survref::fit_hybrid::{BootstrapSummary, HybridFit, PopulationSummary};
use survref::{Family, FitConfig, Method, ProjectionConfig, ProjectionSummary, ThetaEstimate};

use crate::config::RunConfig;

pub const SCHEMA: &str = "survref-report/1";

/// Envelope shared by every JSON report.
#[derive(Serialize)]
pub struct Report<'a, B: Serialize> {
    pub schema: &'static str,
    pub generator: String,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: &'a RunConfig,
    #[serde(flatten)]
    pub body: B,
}

impl<'a, B: Serialize> Report<'a, B> {
    pub fn new(command: &'static str, seed: Option<u64>, config: &'a RunConfig, body: B) -> Self {
        Report {
            schema: SCHEMA,
            generator: concat!("survref ", env!("CARGO_PKG_VERSION")).to_string(),
            command,
            seed,
            config,
            body,
        }
    }
}

#[derive(Serialize)]
pub struct DataSummary {
    pub path: String,
    pub n_records: usize,
    pub n_events: usize,
    pub n_covariates: usize,
}

#[derive(Serialize)]
pub struct FitBody<'a> {
    pub data: DataSummary,
    /// Settings after defaults are applied.
    pub settings: &'a FitConfig,
    pub fits: Vec<FitBlock>,
}

#[derive(Serialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub at_boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_interval: Option<[f64; 2]>,
}

#[derive(Serialize)]
pub struct FitBlock {
    pub method: Method,
    pub family: Family,
    pub knots: Vec<f64>,
    pub parameters: Vec<ParamRow>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub covariance_warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridBlock>,
}

#[derive(Serialize)]
pub struct HybridBlock {
    pub cycles: usize,
    pub max_change: f64,
    pub pseudo_score_residual: f64,
    pub profile_residual: f64,
    pub population: PopulationSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapInfo>,
}

#[derive(Serialize)]
pub struct BootstrapInfo {
    pub reps: usize,
    pub failures: usize,
}

impl FitBlock {
    pub fn from_estimate(est: &ThetaEstimate) -> Self {
        let parameters = est
            .names()
            .into_iter()
            .enumerate()
            .map(|(i, name)| ParamRow {
                name,
                estimate: est.natural[i],
                std_error: est.std_errors[i],
                at_boundary: est.boundary[i],
                bootstrap_se: None,
                bootstrap_interval: None,
            })
            .collect();
        FitBlock {
            method: est.method,
            family: est.model.family,
            knots: est.partition.knots().to_vec(),
            parameters,
            covariance: est
                .covariance
                .as_ref()
                .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect()),
            loglik: est.loglik,
            converged: est.converged,
            iterations: est.iterations,
            gradient_norm: est.gradient_norm,
            covariance_warning: est.covariance_warning.clone(),
            hybrid: None,
        }
    }

    pub fn from_hybrid(fit: &HybridFit, population: PopulationSummary, bootstrap: Option<&BootstrapSummary>) -> Self {
        let mut block = FitBlock::from_estimate(&fit.estimate);
        if let Some(b) = bootstrap {
            for (i, row) in block.parameters.iter_mut().enumerate() {
                row.bootstrap_se = Some(b.std_errors[i]);
                row.bootstrap_interval = Some([b.lower[i], b.upper[i]]);
            }
        }
        block.hybrid = Some(HybridBlock {
            cycles: fit.state.iteration,
            max_change: fit.state.max_change,
            pseudo_score_residual: fit.state.pseudo_score_residual,
            profile_residual: fit.state.profile_residual,
            population,
            bootstrap: bootstrap.map(|b| BootstrapInfo {
                reps: b.reps,
                failures: b.failures,
            }),
        });
        block
    }
}

#[derive(Serialize)]
pub struct ProjectBody<'a> {
    pub data: DataSummary,
    pub settings: &'a FitConfig,
    pub projection_settings: &'a ProjectionConfig,
    pub fit: FitBlock,
    pub projection: &'a ProjectionSummary,
    pub curve_csv: String,
}

#[derive(Serialize)]
pub struct SimulateBody {
    pub scenario: String,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub csv: String,
    pub mean_n_hat: Option<f64>,
    pub sd_n_hat: Option<f64>,
    pub failures: Vec<(Method, usize)>,
}
