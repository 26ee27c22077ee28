//! Prevalent-cohort records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One selected subject: referral time `r`, follow-up time `x` (both measured
/// from the initiating event), event indicator, selection horizon `u` and
/// covariates `z` (first entry 1 for the intercept).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub r: f64,
    pub x: f64,
    pub delta: bool,
    pub u: f64,
    pub z: Vec<f64>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("record {}: {msg}", self.id)));
        if !(self.r > 0.0) || !self.r.is_finite() {
            return fail(format!("referral time must be positive, got {}", self.r));
        }
        if !(self.x > self.r) || !self.x.is_finite() {
            return fail(format!("follow-up {} must exceed referral time {}", self.x, self.r));
        }
        if !(self.u > 0.0) || !self.u.is_finite() {
            return fail(format!("selection horizon must be positive, got {}", self.u));
        }
        if self.x > self.u * (1.0 + 1e-12) {
            return fail(format!("follow-up {} exceeds selection horizon {}", self.x, self.u));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return fail("covariates must be finite".into());
        }
        Ok(())
    }
}

/// A validated collection of records with a common covariate dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<SubjectRecord>,
    n_covariates: usize,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Validation("dataset is empty".into()))?;
        let p = first.z.len();
        if p == 0 {
            return Err(Error::Validation("at least one covariate (the intercept) is required".into()));
        }
        for rec in &records {
            rec.validate()?;
            if rec.z.len() != p {
                return Err(Error::Validation(format!(
                    "record {}: expected {p} covariates, got {}",
                    rec.id,
                    rec.z.len()
                )));
            }
        }
        Ok(Dataset {
            records,
            n_covariates: p,
        })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.delta).count()
    }

    /// New dataset made of the records at `indices` (repeats allowed).
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            n_covariates: self.n_covariates,
        }
    }
}
