//! Nuisance functions required by the influence functions:
//! treatment propensity `π'(a | b, x)`, conditional marker density
//! `π(s | a, b, x)` and outcome regression `r(a, s, b, x)`.
//!
//! Models are parametric (logistic / Gaussian-linear) over user-supplied
//! [`FeatureSpec`]s. Anything implementing [`Nuisance`] can be injected into
//! the estimators instead, e.g. the data-generating truth in simulations.

mod features;
mod solver;

pub use features::{CompiledFeatures, FeatureSpec, Term};
pub use solver::{expit, irls_logistic, least_squares, IrlsFit, IrlsSettings, LeastSquaresFit};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{support_bounds, Dataset, Observation, OutcomeKind};
use crate::error::{invalid, Result};
use crate::math::{std_normal_pdf, Interval, DENSITY_FLOOR};
use features::Vars;

const PROB_CEIL: f64 = 1.0 - 1e-12;

/// Evaluation interface for the three nuisance functions plus the marker support.
pub trait Nuisance: Send + Sync {
    /// `P(A = a | B = b, X = x)`, within `[1e-12, 1 - 1e-12]`.
    fn propensity(&self, a: u8, b: f64, x: &[f64]) -> f64;
    /// Conditional density of `S` at `s` given `(A, B, X) = (a, b, x)`.
    fn density(&self, s: f64, a: u8, b: f64, x: &[f64]) -> f64;
    /// `E[Y | A = a, S = s, B = b, X = x]`.
    fn outcome(&self, a: u8, s: f64, b: f64, x: &[f64]) -> f64;
    fn support(&self) -> Interval;
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropensityModel {
    KnownConstant(f64),
    Logistic { features: CompiledFeatures, coefficients: Vec<f64> },
}

impl PropensityModel {
    pub fn known(prob: f64) -> Result<Self> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(invalid(format!("known propensity must lie in (0,1), got {prob}")));
        }
        Ok(Self::KnownConstant(prob))
    }

    /// `P(A = 1 | b, x)`.
    pub fn treated_prob(&self, b: f64, x: &[f64]) -> f64 {
        match self {
            Self::KnownConstant(p) => *p,
            Self::Logistic { features, coefficients } => {
                let vars = Vars { a: 0.0, s: 0.0, b, x };
                expit(features.linear(coefficients, &vars)).clamp(DENSITY_FLOOR, PROB_CEIL)
            }
        }
    }

    pub fn eval(&self, a: u8, b: f64, x: &[f64]) -> f64 {
        let p1 = self.treated_prob(b, x);
        let p = if a == 1 { p1 } else { 1.0 - p1 };
        p.clamp(DENSITY_FLOOR, PROB_CEIL)
    }
}

/// Gaussian-linear model for `S | A, B, X`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondDensityModel {
    features: CompiledFeatures,
    mean_coefficients: Vec<f64>,
    residual_sd: f64,
}

impl CondDensityModel {
    pub fn from_parts(
        spec: &FeatureSpec,
        covariate_names: &[String],
        mean_coefficients: Vec<f64>,
        residual_sd: f64,
    ) -> Result<Self> {
        let features = CompiledFeatures::compile(spec, covariate_names, &["a", "b"], "conditional density")?;
        check_coefficients(&features, &mean_coefficients)?;
        if !(residual_sd > 0.0 && residual_sd.is_finite()) {
            return Err(invalid(format!("residual_sd must be > 0, got {residual_sd}")));
        }
        Ok(Self { features, mean_coefficients, residual_sd })
    }

    pub fn mean_coefficients(&self) -> &[f64] {
        &self.mean_coefficients
    }

    pub fn residual_sd(&self) -> f64 {
        self.residual_sd
    }

    pub fn mean(&self, a: u8, b: f64, x: &[f64]) -> f64 {
        let vars = Vars { a: a as f64, s: 0.0, b, x };
        self.features.linear(&self.mean_coefficients, &vars)
    }

    pub fn eval(&self, s: f64, a: u8, b: f64, x: &[f64]) -> f64 {
        let z = (s - self.mean(a, b, x)) / self.residual_sd;
        std_normal_pdf(z) / self.residual_sd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    kind: OutcomeKind,
    features: CompiledFeatures,
    coefficients: Vec<f64>,
}

impl OutcomeModel {
    pub fn from_parts(
        kind: OutcomeKind,
        spec: &FeatureSpec,
        covariate_names: &[String],
        coefficients: Vec<f64>,
    ) -> Result<Self> {
        let features = CompiledFeatures::compile(spec, covariate_names, &["a", "s", "b"], "outcome")?;
        check_coefficients(&features, &coefficients)?;
        Ok(Self { kind, features, coefficients })
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eval(&self, a: u8, s: f64, b: f64, x: &[f64]) -> f64 {
        let vars = Vars { a: a as f64, s, b, x };
        let eta = self.features.linear(&self.coefficients, &vars);
        match self.kind {
            OutcomeKind::Binary => expit(eta).clamp(DENSITY_FLOOR, PROB_CEIL),
            OutcomeKind::Continuous => eta,
        }
    }
}

fn check_coefficients(features: &CompiledFeatures, coef: &[f64]) -> Result<()> {
    if coef.len() != features.len() {
        return Err(invalid(format!(
            "expected {} coefficients, got {}",
            features.len(),
            coef.len()
        )));
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(invalid("coefficients must be finite"));
    }
    Ok(())
}

/// Fitted (or known) propensity, conditional density, outcome regression and support.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceTriple {
    pub propensity: PropensityModel,
    pub cond_density: CondDensityModel,
    pub outcome: OutcomeModel,
    pub support: Interval,
}

impl Nuisance for NuisanceTriple {
    fn propensity(&self, a: u8, b: f64, x: &[f64]) -> f64 {
        self.propensity.eval(a, b, x)
    }

    fn density(&self, s: f64, a: u8, b: f64, x: &[f64]) -> f64 {
        self.cond_density.eval(s, a, b, x)
    }

    fn outcome(&self, a: u8, s: f64, b: f64, x: &[f64]) -> f64 {
        self.outcome.eval(a, s, b, x)
    }

    fn support(&self) -> Interval {
        self.support
    }
}

/// How the treatment propensity is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensitySpec {
    Known(f64),
    Logistic(FeatureSpec),
}

/// Model specifications for fold-wise nuisance fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecs {
    pub propensity: PropensitySpec,
    pub cond_density: FeatureSpec,
    pub outcome: FeatureSpec,
    #[serde(default)]
    pub irls: IrlsSettings,
}

impl Default for ModelSpecs {
    /// Correctly specified models for the simulation design.
    fn default() -> Self {
        let p = |s: &str| s.parse::<FeatureSpec>().expect("static spec");
        Self {
            propensity: PropensitySpec::Known(0.5),
            cond_density: p("1,b,a,x1,x2^2"),
            outcome: p("1,x2,x3,s,a,b"),
            irls: IrlsSettings::default(),
        }
    }
}

impl ModelSpecs {
    pub fn fit(&self, data: &Dataset) -> Result<NuisanceTriple> {
        let propensity = match &self.propensity {
            PropensitySpec::Known(p) => PropensityModel::known(*p)?,
            PropensitySpec::Logistic(spec) => fit_propensity(data, spec, &self.irls)?,
        };
        Ok(NuisanceTriple {
            propensity,
            cond_density: fit_cond_density(data, &self.cond_density)?,
            outcome: fit_outcome(data, &self.outcome, &self.irls)?,
            support: support_bounds(data),
        })
    }
}

fn design_matrix(data: &Dataset, features: &CompiledFeatures) -> DMatrix<f64> {
    let obs = data.observations();
    let q = features.len();
    let mut m = DMatrix::zeros(obs.len(), q);
    let mut row = vec![0.0; q];
    for (i, o) in obs.iter().enumerate() {
        features.row(&vars_of(o), &mut row);
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

fn vars_of(o: &Observation) -> Vars<'_> {
    Vars { a: o.a as f64, s: o.s, b: o.b, x: &o.x }
}

/// Logistic regression of `A` on features of `(b, x)`.
pub fn fit_propensity(data: &Dataset, spec: &FeatureSpec, irls: &IrlsSettings) -> Result<PropensityModel> {
    let features = CompiledFeatures::compile(spec, data.covariate_names(), &["b"], "propensity")?;
    let design = design_matrix(data, &features);
    let labels: Vec<f64> = data.observations().iter().map(|o| o.a as f64).collect();
    let fit = irls_logistic(&design, &labels, irls.ridge, irls.tol, irls.max_iter)?;
    Ok(PropensityModel::Logistic { features, coefficients: fit.coefficients })
}

/// Least-squares fit of `S` on features of `(a, b, x)` with Gaussian residuals.
pub fn fit_cond_density(data: &Dataset, spec: &FeatureSpec) -> Result<CondDensityModel> {
    let features =
        CompiledFeatures::compile(spec, data.covariate_names(), &["a", "b"], "conditional density")?;
    let n = data.len();
    let q = features.len();
    if n <= q + 2 {
        return Err(invalid(format!("conditional density fit needs n > q + 2 (n = {n}, q = {q})")));
    }
    let design = design_matrix(data, &features);
    let s: Vec<f64> = data.observations().iter().map(|o| o.s).collect();
    let fit = least_squares(&design, &s)?;
    let sd = (fit.rss / (n - q) as f64).sqrt().max(DENSITY_FLOOR);
    Ok(CondDensityModel { features, mean_coefficients: fit.coefficients, residual_sd: sd })
}

/// Outcome regression: logistic for binary outcomes, least squares otherwise.
pub fn fit_outcome(data: &Dataset, spec: &FeatureSpec, irls: &IrlsSettings) -> Result<OutcomeModel> {
    let features = CompiledFeatures::compile(spec, data.covariate_names(), &["a", "s", "b"], "outcome")?;
    let design = design_matrix(data, &features);
    let y: Vec<f64> = data.observations().iter().map(|o| o.y).collect();
    let coefficients = match data.outcome_kind() {
        OutcomeKind::Binary => irls_logistic(&design, &y, irls.ridge, irls.tol, irls.max_iter)?.coefficients,
        OutcomeKind::Continuous => least_squares(&design, &y)?.coefficients,
    };
    Ok(OutcomeModel { kind: data.outcome_kind(), features, coefficients })
}
