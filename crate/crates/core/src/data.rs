//! Observations and datasets.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::Interval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

/// One participant: outcome, arm, post-vaccination marker, baseline marker, covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub a: u8,
    pub s: f64,
    pub b: f64,
    pub x: Vec<f64>,
}

impl Observation {
    fn check(&self, dim: usize, kind: OutcomeKind) -> Result<()> {
        if self.a > 1 {
            return Err(invalid(format!("treatment must be 0 or 1, got {}", self.a)));
        }
        if self.x.len() != dim {
            return Err(invalid(format!(
                "covariate dimension {} does not match declared {dim}",
                self.x.len()
            )));
        }
        let finite = self.y.is_finite()
            && self.s.is_finite()
            && self.b.is_finite()
            && self.x.iter().all(|v| v.is_finite());
        if !finite {
            return Err(invalid("observation contains a non-finite value"));
        }
        if kind == OutcomeKind::Binary && self.y != 0.0 && self.y != 1.0 {
            return Err(invalid(format!("binary outcome must be 0 or 1, got {}", self.y)));
        }
        Ok(())
    }
}

/// Names reserved for the structural variables; covariates may not reuse them.
pub const RESERVED_NAMES: [&str; 4] = ["y", "a", "s", "b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    outcome_kind: OutcomeKind,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        outcome_kind: OutcomeKind,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(invalid("dataset must contain at least one observation"));
        }
        let mut seen = HashSet::new();
        for name in &covariate_names {
            if RESERVED_NAMES.contains(&name.as_str()) {
                return Err(invalid(format!("covariate name '{name}' is reserved")));
            }
            if !seen.insert(name.as_str()) {
                return Err(invalid(format!("duplicate covariate name '{name}'")));
            }
        }
        let dim = covariate_names.len();
        for (i, obs) in observations.iter().enumerate() {
            obs.check(dim, outcome_kind)
                .map_err(|e| invalid(format!("observation {i}: {e}")))?;
        }
        Ok(Self { observations, outcome_kind, covariate_names })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Subset by index, keeping schema. Panics on out-of-range indices.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let obs = idx.iter().map(|&i| self.observations[i].clone()).collect();
        Dataset::new(obs, self.outcome_kind, self.covariate_names.clone())
    }

    pub fn count_arm(&self, arm: u8) -> usize {
        self.observations.iter().filter(|o| o.a == arm).count()
    }

    /// Returns a copy with every outcome multiplied by `factor` (continuous outcomes only).
    pub fn scale_outcome(&self, factor: f64) -> Result<Dataset> {
        if self.outcome_kind != OutcomeKind::Continuous {
            return Err(invalid("outcome scaling requires a continuous outcome"));
        }
        let obs = self
            .observations
            .iter()
            .map(|o| Observation { y: o.y * factor, ..o.clone() })
            .collect();
        Dataset::new(obs, self.outcome_kind, self.covariate_names.clone())
    }
}

/// Observed range of the marker `S`.
pub fn support_bounds(data: &Dataset) -> Interval {
    let (lo, hi) = data
        .observations
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| (lo.min(o.s), hi.max(o.s)));
    Interval { lo, hi }
}
