use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use survref::fit_full::DEFAULT_KNOTS;
use survref::simulate::EDINBURGH6_KNOTS;
use survref::{EvalPath, Family, FitConfig, ReferralPartition};

use crate::UsageError;

/// Flat run configuration; every key is optional and unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: Option<Family>,
    /// Working-model knots; mutually exclusive with `partition`.
    pub knots: Option<Vec<f64>>,
    /// Named working partition: `default` or `edinburgh6`.
    pub partition: Option<String>,
    pub eval_path: Option<EvalPath>,
    pub max_iter: Option<usize>,
    pub gtol: Option<f64>,
    pub max_cycles: Option<usize>,
    pub cycle_tol: Option<f64>,
    pub min_inclusion: Option<f64>,
    pub bootstrap_reps: Option<usize>,
    pub projection_runs: Option<usize>,
    pub horizon: Option<f64>,
    pub community_size: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// Simulation scenario preset.
    pub scenario: Option<String>,
    pub reps: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(UsageError::from)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(UsageError::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_some() && self.partition.is_some() {
            bail!(UsageError::msg("config sets both `knots` and `partition`; choose one"));
        }
        let knots = self.knots()?;
        ReferralPartition::with_equal_probs(knots).map_err(|e| UsageError::msg(format!("invalid knots: {e}")))?;
        if self.threads == Some(0) {
            bail!(UsageError::msg("`threads` must be at least 1"));
        }
        Ok(())
    }

    pub fn knots(&self) -> Result<Vec<f64>> {
        match (&self.knots, self.partition.as_deref()) {
            (Some(k), _) => Ok(k.clone()),
            (None, None | Some("default")) => Ok(DEFAULT_KNOTS.to_vec()),
            (None, Some("edinburgh6")) => Ok(EDINBURGH6_KNOTS.to_vec()),
            (None, Some(other)) => bail!(UsageError::msg(format!(
                "unknown partition '{other}'; expected `default` or `edinburgh6`"
            ))),
        }
    }

    pub fn fit_config(&self) -> Result<FitConfig> {
        let d = FitConfig::default();
        Ok(FitConfig {
            family: self.family.unwrap_or(d.family),
            knots: self.knots()?,
            eval_path: self.eval_path.unwrap_or(d.eval_path),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            gtol: self.gtol.unwrap_or(d.gtol),
            max_cycles: self.max_cycles.unwrap_or(d.max_cycles),
            cycle_tol: self.cycle_tol.unwrap_or(d.cycle_tol),
            min_inclusion: self.min_inclusion.unwrap_or(d.min_inclusion),
            start: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"famliy": "weibull"}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn partition_presets() {
        let cfg: RunConfig = serde_json::from_str(r#"{"partition": "edinburgh6"}"#).unwrap();
        assert_eq!(cfg.knots().unwrap(), EDINBURGH6_KNOTS.to_vec());
        let both: RunConfig = serde_json::from_str(r#"{"partition": "default", "knots": [0, 1]}"#).unwrap();
        assert!(both.validate().is_err());
        let bad: RunConfig = serde_json::from_str(r#"{"knots": [0, 0.7, 0.5, 1]}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fit_config_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"family": "gamma", "gtol": 1e-7}"#).unwrap();
        let fc = cfg.fit_config().unwrap();
        assert_eq!(fc.family, Family::Gamma);
        assert_eq!(fc.gtol, 1e-7);
        assert_eq!(fc.knots, DEFAULT_KNOTS.to_vec());
    }
}
