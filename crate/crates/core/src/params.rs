//! Parameter vector layout and the unconstrained reparameterization.
//!
//! Natural order: shape parameter(s), regression coefficients β, then the
//! mixture probabilities `π_1..π_m` (`π_0 = 1 − Σ π_j` is implied).
//! Free order is the same with shape mapped to `ln(γ − 1)` for the Weibull
//! (`ln` of the shape otherwise, identity for the generalized-gamma `Q`) and
//! the probabilities mapped to multinomial logits against `π_0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_models::{EventModel, Family};
use crate::referral::ReferralPartition;
use crate::scalar::{Dual, Scalar};

/// Logits beyond this magnitude are held at the bound.
pub const LOGIT_BOUND: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub family: Family,
    pub n_beta: usize,
    /// Number of mixture components, `m + 1`.
    pub n_components: usize,
}

impl ParamLayout {
    pub fn new(family: Family, n_beta: usize, n_components: usize) -> Self {
        ParamLayout {
            family,
            n_beta,
            n_components,
        }
    }

    pub fn n_shape(&self) -> usize {
        self.family.n_shape()
    }

    /// Event-time parameters (shape and β).
    pub fn n_psi(&self) -> usize {
        self.n_shape() + self.n_beta
    }

    pub fn n_pi(&self) -> usize {
        self.n_components - 1
    }

    pub fn dim(&self) -> usize {
        self.n_psi() + self.n_pi()
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.family.shape_names().iter().map(|s| s.to_string()).collect();
        out.extend((0..self.n_beta).map(|i| format!("beta{i}")));
        out.extend((1..self.n_components).map(|j| format!("pi{j}")));
        out
    }

    pub fn shape<'a, S>(&self, natural: &'a [S]) -> &'a [S] {
        &natural[..self.n_shape()]
    }

    pub fn beta<'a, S>(&self, natural: &'a [S]) -> &'a [S] {
        &natural[self.n_shape()..self.n_psi()]
    }

    /// All mixture probabilities `π_0..π_m` from a natural vector.
    pub fn full_probs<S: Scalar>(&self, natural: &[S]) -> Vec<S> {
        let tail = &natural[self.n_psi()..];
        let mut out = Vec::with_capacity(self.n_components);
        let mut rest = S::cst(1.0);
        for p in tail {
            rest -= *p;
        }
        out.push(rest);
        out.extend_from_slice(tail);
        out
    }

    /// Natural shape(s) and β from the leading free coordinates.
    pub fn psi_to_natural<S: Scalar>(&self, free: &[S]) -> Vec<S> {
        let mut out = Vec::with_capacity(self.n_psi());
        match self.family {
            Family::Weibull => out.push(free[0].exp() + 1.0),
            Family::Gamma | Family::LogNormal => out.push(free[0].exp()),
            Family::GeneralizedGamma => {
                out.push(free[0].exp());
                out.push(free[1]);
            }
        }
        out.extend_from_slice(&free[self.n_shape()..self.n_psi()]);
        out
    }

    pub fn psi_to_free(&self, natural: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_psi());
        match self.family {
            Family::Weibull => {
                if !(natural[0] > 1.0) {
                    return Err(Error::domain(format!("Weibull shape must exceed 1, got {}", natural[0])));
                }
                out.push((natural[0] - 1.0).ln());
            }
            Family::Gamma | Family::LogNormal => {
                if !(natural[0] > 0.0) {
                    return Err(Error::domain("shape must be positive"));
                }
                out.push(natural[0].ln());
            }
            Family::GeneralizedGamma => {
                if !(natural[0] > 0.0) {
                    return Err(Error::domain("shape must be positive"));
                }
                out.push(natural[0].ln());
                out.push(natural[1]);
            }
        }
        out.extend_from_slice(&natural[self.n_shape()..self.n_psi()]);
        Ok(out)
    }

    pub fn to_natural<S: Scalar>(&self, free: &[S]) -> Vec<S> {
        let mut out = self.psi_to_natural(free);
        let logits: Vec<S> = free[self.n_psi()..]
            .iter()
            .map(|a| {
                let v = a.value();
                if v > LOGIT_BOUND {
                    S::cst(LOGIT_BOUND)
                } else if v < -LOGIT_BOUND {
                    S::cst(-LOGIT_BOUND)
                } else {
                    *a
                }
            })
            .collect();
        // Softmax against a zero reference logit, shifted for stability.
        let shift = logits.iter().map(|a| a.value()).fold(0.0, f64::max);
        let mut denom = S::cst((-shift).exp());
        let exps: Vec<S> = logits.iter().map(|a| (*a - shift).exp()).collect();
        for e in &exps {
            denom += *e;
        }
        out.extend(exps.into_iter().map(|e| e / denom));
        out
    }

    pub fn to_free(&self, natural: &[f64]) -> Result<Vec<f64>> {
        if natural.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: natural.len(),
            });
        }
        let mut out = self.psi_to_free(natural)?;
        let probs = self.full_probs(natural);
        let floor = (-LOGIT_BOUND).exp() * 1e-3;
        let p0 = probs[0].max(floor);
        for p in &probs[1..] {
            if *p < -1e-12 || probs[0] < -1e-12 {
                return Err(Error::domain("mixture probabilities must be non-negative"));
            }
            out.push((p.max(floor) / p0).ln().clamp(-LOGIT_BOUND - 1.0, LOGIT_BOUND + 1.0));
        }
        Ok(out)
    }

    /// Logits sitting at or beyond the clamp, indexed like the natural vector.
    pub fn boundary_flags(&self, free: &[f64]) -> Vec<bool> {
        let mut flags = vec![false; self.dim()];
        for (k, a) in free[self.n_psi()..].iter().enumerate() {
            flags[self.n_psi() + k] = a.abs() >= LOGIT_BOUND;
        }
        flags
    }

    /// Jacobian `∂natural/∂free`, rows indexed by natural parameters.
    pub fn jacobian(&self, free: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut jac = DMatrix::zeros(n, n);
        for col in 0..n {
            let xs: Vec<Dual<1>> = free
                .iter()
                .enumerate()
                .map(|(i, &v)| if i == col { Dual::variable(v, 0) } else { Dual::constant(v) })
                .collect();
            for (row, y) in self.to_natural(&xs).iter().enumerate() {
                jac[(row, col)] = y.d[0];
            }
        }
        jac
    }

    /// Natural vector of a model and partition.
    pub fn pack(&self, model: &EventModel, part: &ReferralPartition) -> Result<Vec<f64>> {
        if model.family != self.family || model.beta.len() != self.n_beta || part.n_components() != self.n_components {
            return Err(Error::Validation("model or partition does not match the parameter layout".into()));
        }
        let mut out = vec![model.shape];
        if let Some(q) = model.extra_shape {
            out.push(q);
        }
        out.extend_from_slice(&model.beta);
        out.extend_from_slice(&part.probs()[1..]);
        Ok(out)
    }

    pub fn event_model(&self, natural: &[f64]) -> EventModel {
        EventModel {
            family: self.family,
            shape: natural[0],
            extra_shape: (self.family == Family::GeneralizedGamma).then(|| natural[1]),
            beta: self.beta(natural).to_vec(),
        }
    }

    /// Partition with these knots and the probabilities in `natural`.
    pub fn partition(&self, knots: &[f64], natural: &[f64]) -> Result<ReferralPartition> {
        let probs: Vec<f64> = self.full_probs(natural).into_iter().map(|p| p.max(0.0)).collect();
        let total: f64 = probs.iter().sum();
        ReferralPartition::new(knots.to_vec(), probs.into_iter().map(|p| p / total).collect())
    }
}
