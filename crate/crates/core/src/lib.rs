#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod data;
pub mod error;
pub mod event_models;
pub mod fit_full;
pub mod fit_hybrid;
mod likelihood;
pub mod optimize;
pub mod params;
pub mod project;
pub mod quadrature;
pub mod referral;
pub mod scalar;
pub mod simulate;
pub mod special;

pub use data::{Dataset, SubjectRecord};
pub use error::{Error, Result};
pub use event_models::{scale_from_covariates, EventModel, Family};
pub use fit_full::{maximize_full, FitConfig, Method, ThetaEstimate};
pub use fit_hybrid::{fit_hybrid, HybridFit};
pub use params::ParamLayout;
pub use referral::{EvalPath, ReferralPartition, SelectionContext};
pub use simulate::{apply_selection, generate_community, run_study, SimulationDesign, StudyResult};
pub use project::{community_curve, project_progression, weighted_kaplan_meier, ProjectionConfig, ProjectionSummary, SurvivalCurve};
