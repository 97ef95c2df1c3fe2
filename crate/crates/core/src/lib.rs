//! Cross-fitted one-step estimation of smoothed trimmed weighted controlled
//! risks (STWCR) and relative vaccine efficacies (STWCRVE), with a
//! simulation harness and ground-truth oracle.

pub mod cli;
pub mod data;
pub mod eif;
pub mod error;
pub mod estimators;
pub mod io;
pub mod math;
pub mod nuisance;
pub mod simulation;

pub use data::{Dataset, Observation, OutcomeKind};
pub use eif::{EifPair, StwcrQuery, StwcrveQuery};
pub use error::{Error, Result};
pub use estimators::{
    estimate_stwcr, estimate_stwcrve, make_folds, FoldAssignment, NuisanceSource, StwcrReport, StwcrveReport,
};
pub use math::{Interval, SmoothingParams};
pub use nuisance::{ModelSpecs, Nuisance, NuisanceTriple};
