//! Synthetic two-arm trial populations, ground-truth estimands by brute-force
//! integration, and a Monte Carlo harness for bias and coverage.
//!
//! Population: `X1 ~ Bernoulli(0.3)`, `X2, X3 ~ U[0,1]`, baseline marker `B`
//! drawn by scenario conditional on `X1`, `A ~ Bernoulli(0.5)`,
//! `S = B + A - 0.5 X1 + X2² + 4 + N(0,1)` and
//! `logit P(Y = 1) = 0.5 X2 + 2 X3 - 0.2 S - A - 0.3 B + 1.5`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::distributions::{Bernoulli, Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::data::{Dataset, Observation, OutcomeKind};
use crate::eif::{StwcrQuery, StwcrveQuery};
use crate::error::{invalid, Error, Result};
use crate::estimators::{estimate_stwcr, estimate_stwcrve, make_folds, NuisanceSource};
use crate::math::{indicator, std_normal_pdf, Interval, KernelRule, SmoothingParams};
use crate::nuisance::{
    expit, CondDensityModel, ModelSpecs, NuisanceTriple, OutcomeModel, PropensityModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
    III,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            other => Err(invalid(format!("unknown scenario '{other}' (expected I, II or III)"))),
        }
    }
}

const B_PROBS_NAIVE_I: [f64; 5] = [0.2, 0.3, 0.4, 0.05, 0.05];
const B_PROBS_NAIVE_III: [f64; 5] = [0.6, 0.2, 0.1, 0.05, 0.05];
const B_PROBS_EXPOSED: [f64; 5] = [0.1, 0.15, 0.3, 0.3, 0.15];

/// `(shape, rate)` of the baseline-marker Gamma law for `X1 = 0` and `X1 = 1`.
const GAMMA_LAWS: [(f64, f64); 2] = [(2.5, 1.0), (3.0, 0.7)];

/// 99.5th percentiles at which Scenario II baseline markers are clamped, by `X1`.
pub fn gamma_caps() -> [f64; 2] {
    static CAPS: OnceLock<[f64; 2]> = OnceLock::new();
    *CAPS.get_or_init(|| {
        GAMMA_LAWS.map(|(shape, rate)| {
            statrs::distribution::Gamma::new(shape, rate)
                .expect("valid gamma law")
                .inverse_cdf(0.995)
        })
    })
}

impl Scenario {
    /// Marker support used by the true nuisances: six unit-sd widths beyond the extreme means.
    pub fn support(&self) -> Interval {
        let (b_lo, b_hi) = match self {
            Scenario::I => (1.0, 5.0),
            Scenario::II => (0.0, gamma_caps()[0].max(gamma_caps()[1])),
            Scenario::III => (0.0, 4.0),
        };
        // mean is minimized at a = 0, x1 = 1, x2 = 0 and maximized at a = 1, x1 = 0, x2 = 1
        Interval { lo: marker_mean(0, b_lo, 1.0, 0.0) - 6.0, hi: marker_mean(1, b_hi, 0.0, 1.0) + 6.0 }
    }

    fn draw_baseline<R: Rng>(&self, x1: f64, rng: &mut R) -> f64 {
        let exposed = x1 == 1.0;
        match self {
            Scenario::I | Scenario::III => {
                let probs = match (self, exposed) {
                    (_, true) => &B_PROBS_EXPOSED,
                    (Scenario::I, false) => &B_PROBS_NAIVE_I,
                    _ => &B_PROBS_NAIVE_III,
                };
                let offset = if *self == Scenario::I { 1.0 } else { 0.0 };
                let idx = WeightedIndex::new(probs).expect("static probabilities").sample(rng);
                idx as f64 + offset
            }
            Scenario::II => {
                let k = exposed as usize;
                let (shape, rate) = GAMMA_LAWS[k];
                let g: f64 = Gamma::new(shape, 1.0 / rate).expect("valid gamma law").sample(rng);
                g.min(gamma_caps()[k])
            }
        }
    }
}

/// `E[S | A, B, X]`.
pub fn marker_mean(a: u8, b: f64, x1: f64, x2: f64) -> f64 {
    b + a as f64 - 0.5 * x1 + x2 * x2 + 4.0
}

/// `P(Y = 1 | A, S, B, X)`.
pub fn true_risk(a: u8, s: f64, b: f64, x2: f64, x3: f64) -> f64 {
    expit(0.5 * x2 + 2.0 * x3 - 0.2 * s - a as f64 - 0.3 * b + 1.5)
}

/// Unit-variance Gaussian density of `S` around [`marker_mean`].
pub fn true_marker_density(s: f64, a: u8, b: f64, x1: f64, x2: f64) -> f64 {
    std_normal_pdf(s - marker_mean(a, b, x1, x2))
}

pub fn covariate_names() -> Vec<String> {
    vec!["x1".into(), "x2".into(), "x3".into()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(invalid(format!("simulated sample size must be >= 50, got {}", self.n)));
        }
        Ok(())
    }
}

fn draw_baseline_covariates<R: Rng>(scenario: Scenario, rng: &mut R) -> (f64, [f64; 3]) {
    let x1 = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
    let x2: f64 = rng.gen();
    let x3: f64 = rng.gen();
    let b = scenario.draw_baseline(x1, rng);
    (b, [x1, x2, x3])
}

pub fn gen_dataset(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let arm = Bernoulli::new(0.5).expect("valid probability");
    let obs = (0..spec.n)
        .map(|_| {
            let (b, x) = draw_baseline_covariates(spec.scenario, &mut rng);
            let a = arm.sample(&mut rng) as u8;
            let noise: f64 = rng.sample(StandardNormal);
            let s = marker_mean(a, b, x[0], x[1]) + noise;
            let y = if rng.gen::<f64>() < true_risk(a, s, b, x[1], x[2]) { 1.0 } else { 0.0 };
            Observation { y, a, s, b, x: x.to_vec() }
        })
        .collect();
    Dataset::new(obs, OutcomeKind::Binary, covariate_names())
}

/// The data-generating nuisances expressed in the fitted-model family.
pub fn true_nuisances(scenario: Scenario) -> NuisanceTriple {
    let defaults = ModelSpecs::default();
    let names = covariate_names();
    let build = || -> Result<NuisanceTriple> {
        Ok(NuisanceTriple {
            propensity: PropensityModel::known(0.5)?,
            // 1, b, a, x1, x2^2
            cond_density: CondDensityModel::from_parts(
                &defaults.cond_density,
                &names,
                vec![4.0, 1.0, 1.0, -0.5, 1.0],
                1.0,
            )?,
            // 1, x2, x3, s, a, b
            outcome: OutcomeModel::from_parts(
                OutcomeKind::Binary,
                &defaults.outcome,
                &names,
                vec![1.5, 0.5, 2.0, -0.2, -1.0, -0.3],
            )?,
            support: scenario.support(),
        })
    };
    build().expect("static coefficient layout")
}

/// A target functional evaluated by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimQuery {
    Stwcr(StwcrQuery),
    Stwcrve(StwcrveQuery),
}

impl fmt::Display for SimQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimQuery::Stwcr(q) => write!(f, "STWCR(a={}, s={})", q.a, q.s),
            SimQuery::Stwcrve(q) => write!(f, "STWCRVE(a1={}, a0={}, s1={}, s0={})", q.a1, q.a0, q.s1, q.s0),
        }
    }
}

impl FromStr for SimQuery {
    type Err = Error;

    /// `stwcr:a:s` or `stwcrve:a1:a0:s1:s0`.
    fn from_str(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.trim().split(':').map(str::trim).collect();
        let bad = || invalid(format!("cannot parse query '{text}' (expected stwcr:a:s or stwcrve:a1:a0:s1:s0)"));
        let arm = |v: &str| v.parse::<u8>().map_err(|_| bad());
        let level = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let q = match parts.as_slice() {
            [k, a, s] if k.eq_ignore_ascii_case("stwcr") => SimQuery::Stwcr(StwcrQuery { a: arm(a)?, s: level(s)? }),
            [k, a1, a0, s1, s0] if k.eq_ignore_ascii_case("stwcrve") => SimQuery::Stwcrve(StwcrveQuery {
                a1: arm(a1)?,
                a0: arm(a0)?,
                s1: level(s1)?,
                s0: level(s0)?,
            }),
            _ => return Err(bad()),
        };
        match &q {
            SimQuery::Stwcr(q) => q.validate()?,
            SimQuery::Stwcrve(q) => q.validate()?,
        }
        Ok(q)
    }
}

/// Population value of a query from Monte Carlo over `(B, X)`.
///
/// `num` and `den` are the smoothed numerator and denominator functionals;
/// `value` is their ratio for STWCR and one minus their ratio for STWCRVE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub num: f64,
    pub den: f64,
    pub value: f64,
    pub num_mc_se: f64,
    pub den_mc_se: f64,
    /// Delta-method Monte Carlo standard error of `value`.
    pub value_mc_se: f64,
    pub mc_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    num: f64,
    den: f64,
    num2: f64,
    den2: f64,
    cross: f64,
}

impl Moments {
    fn push(&mut self, num: f64, den: f64) {
        self.n += 1;
        self.num += num;
        self.den += den;
        self.num2 += num * num;
        self.den2 += den * den;
        self.cross += num * den;
    }

    fn merge(mut self, o: Moments) -> Moments {
        self.n += o.n;
        self.num += o.num;
        self.den += o.den;
        self.num2 += o.num2;
        self.den2 += o.den2;
        self.cross += o.cross;
        self
    }
}

/// Draws per independently seeded block; fixed so results do not depend on thread count.
const ORACLE_BLOCK: usize = 50_000;

pub const DEFAULT_TRUTH_MC_SIZE: usize = 2_000_000;

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(block as u64 + 1)))
}

fn mc_blocks<F>(mc_size: usize, seed: u64, per_block: F) -> Moments
where
    F: Fn(&mut ChaCha8Rng, usize) -> Moments + Sync,
{
    let blocks = mc_size.div_ceil(ORACLE_BLOCK);
    let parts: Vec<Moments> = (0..blocks)
        .into_par_iter()
        .map(|k| {
            let len = ORACLE_BLOCK.min(mc_size - k * ORACLE_BLOCK);
            per_block(&mut block_rng(seed, k), len)
        })
        .collect();
    parts.into_iter().fold(Moments::default(), Moments::merge)
}

/// Smoothed-indicator and risk values on a rule's nodes for one `(b, x)` and arm.
fn node_integrals(rule: &KernelRule, a: u8, b: f64, x: &[f64; 3], params: &SmoothingParams) -> (f64, f64) {
    let mut plain = 0.0;
    let mut with_risk = 0.0;
    for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
        let phi = indicator(true_marker_density(s, a, b, x[0], x[1]), params.t, params.epsilon);
        plain += w * phi;
        with_risk += w * phi * true_risk(a, s, b, x[1], x[2]);
    }
    (with_risk, plain)
}

/// Ground truth for `query` in `scenario`, from `mc_size` draws of `(B, X)`.
pub fn oracle_estimand(
    scenario: Scenario,
    query: &SimQuery,
    params: &SmoothingParams,
    mc_size: usize,
    seed: u64,
) -> Result<OracleEstimate> {
    params.validate()?;
    if mc_size < 2 {
        return Err(invalid("oracle needs at least two draws"));
    }
    let support = scenario.support();
    let m = match *query {
        SimQuery::Stwcr(q) => {
            q.validate()?;
            let rule = KernelRule::new(q.s, params.h, support, params);
            mc_blocks(mc_size, seed, |rng, len| {
                let mut m = Moments::default();
                for _ in 0..len {
                    let (b, x) = draw_baseline_covariates(scenario, rng);
                    let (num, den) = node_integrals(&rule, q.a, b, &x, params);
                    m.push(num, den);
                }
                m
            })
        }
        SimQuery::Stwcrve(q) => {
            q.validate()?;
            let rule0 = KernelRule::new(q.s0, params.h0, support, params);
            let rule1 = KernelRule::new(q.s1, params.h1, support, params);
            mc_blocks(mc_size, seed, |rng, len| {
                let mut m = Moments::default();
                for _ in 0..len {
                    let (b, x) = draw_baseline_covariates(scenario, rng);
                    let (gr, g) = node_integrals(&rule0, q.a0, b, &x, params);
                    let (hr, h) = node_integrals(&rule1, q.a1, b, &x, params);
                    m.push(g * hr, gr * h);
                }
                m
            })
        }
    };

    let n = m.n as f64;
    let (num, den) = (m.num / n, m.den / n);
    let var_num = (m.num2 / n - num * num) * n / (n - 1.0);
    let var_den = (m.den2 / n - den * den) * n / (n - 1.0);
    let cov = (m.cross / n - num * den) * n / (n - 1.0);
    if den.is_nan() || den <= 0.0 {
        return Err(Error::NonpositiveDenominator { tau_num: num, tau_den: den });
    }
    let ratio = num / den;
    let ratio_var = (var_num - 2.0 * ratio * cov + ratio * ratio * var_den).max(0.0) / (den * den);
    let value = match query {
        SimQuery::Stwcr(_) => ratio,
        SimQuery::Stwcrve(_) => 1.0 - ratio,
    };
    Ok(OracleEstimate {
        num,
        den,
        value,
        num_mc_se: (var_num.max(0.0) / n).sqrt(),
        den_mc_se: (var_den.max(0.0) / n).sqrt(),
        value_mc_se: (ratio_var / n).sqrt(),
        mc_size,
        seed,
    })
}

/// `E[r(a, s + hZ, B, X)]` with `Z ~ N(0,1)` by direct simulation; returns `(mean, mc_se)`.
///
/// This is the kernel-smoothed controlled risk without trimming, used to
/// cross-check the oracle in the trim-off limit.
pub fn direct_smoothed_risk(scenario: Scenario, a: u8, s: f64, h: f64, mc_size: usize, seed: u64) -> (f64, f64) {
    let m = mc_blocks(mc_size, seed, |rng, len| {
        let mut m = Moments::default();
        for _ in 0..len {
            let (b, x) = draw_baseline_covariates(scenario, rng);
            let z: f64 = rng.sample(StandardNormal);
            m.push(true_risk(a, s + h * z, b, x[1], x[2]), 0.0);
        }
        m
    });
    let n = m.n as f64;
    let mean = m.num / n;
    let var = (m.num2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var.max(0.0) / n).sqrt())
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep`, computable without running earlier replications.
pub fn replication_seed(master_seed: u64, rep: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(rep as u64))
}

fn fold_seed(rep_seed: u64) -> u64 {
    splitmix64(rep_seed ^ 0xF01D_5EED)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub truth: f64,
    pub mc_se: f64,
    pub mc_size: usize,
    pub seed: u64,
}

/// JSON-backed map from query key to computed truth.
#[derive(Debug, Clone, Default)]
pub struct TruthCache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, TruthEntry>,
}

impl TruthCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file; a missing file yields an empty cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            BTreeMap::new()
        };
        Ok(Self { path: Some(path), entries })
    }

    pub fn save(&self) -> Result<()> {
        if let Some(path) = &self.path {
            std::fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&TruthEntry> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, entry: TruthEntry) {
        self.entries.insert(key, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cached truth if present with at least `mc_size` draws, else computes and stores it.
    pub fn truth(
        &mut self,
        scenario: Scenario,
        query: &SimQuery,
        params: &SmoothingParams,
        mc_size: usize,
        seed: u64,
    ) -> Result<TruthEntry> {
        let key = truth_key(scenario, query, params);
        if let Some(e) = self.entries.get(&key).filter(|e| e.mc_size >= mc_size) {
            log::info!("truth cache hit: {key}");
            return Ok(*e);
        }
        log::info!("computing truth: {key} ({mc_size} draws)");
        let o = oracle_estimand(scenario, query, params, mc_size, seed)?;
        let entry = TruthEntry { truth: o.value, mc_se: o.value_mc_se, mc_size, seed };
        self.entries.insert(key, entry);
        Ok(entry)
    }
}

/// Cache key covering everything the truth depends on.
pub fn truth_key(scenario: Scenario, query: &SimQuery, p: &SmoothingParams) -> String {
    let bandwidths = match query {
        SimQuery::Stwcr(_) => format!("h={:?}", p.h),
        SimQuery::Stwcrve(_) => format!("h0={:?},h1={:?}", p.h0, p.h1),
    };
    format!(
        "{scenario}|{query}|t={:?},eps={:?},{bandwidths},nodes={},window={:?}",
        p.t, p.epsilon, p.quad_nodes, p.window_halfwidth_in_h
    )
}

/// Monte Carlo experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub queries: Vec<SimQuery>,
    pub params: SmoothingParams,
    pub k_folds: usize,
    pub master_seed: u64,
    pub truth_mc_size: usize,
    pub truth_seed: u64,
    pub models: ModelSpecs,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::I,
            n: 1000,
            reps: 100,
            queries: vec![SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 })],
            params: SmoothingParams::default(),
            k_folds: 5,
            master_seed: 20_240_101,
            truth_mc_size: DEFAULT_TRUTH_MC_SIZE,
            truth_seed: 7,
            models: ModelSpecs::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        ScenarioSpec { scenario: self.scenario, n: self.n, seed: 0 }.validate()?;
        self.params.validate()?;
        if self.reps == 0 {
            return Err(invalid("reps must be >= 1"));
        }
        if self.queries.is_empty() {
            return Err(invalid("at least one query is required"));
        }
        if self.truth_mc_size < 100_000 {
            return Err(invalid(format!("truth_mc_size must be >= 100000, got {}", self.truth_mc_size)));
        }
        if self.k_folds < 2 || self.k_folds > self.n {
            return Err(invalid(format!("need 2 <= folds <= n, got {}", self.k_folds)));
        }
        Ok(())
    }
}

/// One replication's result for one query: the estimate of the query's
/// value (STWCR, or the efficacy `δ` for STWCRVE), its standard error and CI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci: Option<Interval>,
    pub error: Option<String>,
}

fn estimate_query(data: &Dataset, query: &SimQuery, config: &SimConfig, fold_seed: u64) -> Result<(f64, f64, Interval)> {
    let folds = make_folds(data.len(), config.k_folds, fold_seed)?;
    let source = NuisanceSource::Fitted(config.models.clone());
    match query {
        SimQuery::Stwcr(q) => {
            let r = estimate_stwcr(data, q, &config.params, &folds, &source)?;
            Ok((r.tau_hat, r.se, r.ci))
        }
        SimQuery::Stwcrve(q) => {
            let r = estimate_stwcrve(data, q, &config.params, &folds, &source)?;
            Ok((r.delta_hat, r.se_direct(), r.ci_delta))
        }
    }
}

/// Runs every replication; `result[q][r]` is query `q` in replication `r`.
pub fn run_replications(config: &SimConfig) -> Result<Vec<Vec<RepOutcome>>> {
    config.validate()?;
    let per_rep: Vec<Vec<RepOutcome>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = replication_seed(config.master_seed, rep);
            let data = gen_dataset(&ScenarioSpec { scenario: config.scenario, n: config.n, seed });
            config
                .queries
                .iter()
                .map(|q| {
                    let res = data.as_ref().map_err(|e| invalid(e.to_string())).and_then(|d| {
                        estimate_query(d, q, config, fold_seed(seed))
                    });
                    match res {
                        Ok((est, se, ci)) => RepOutcome { rep, seed, estimate: Some(est), se: Some(se), ci: Some(ci), error: None },
                        Err(e) => RepOutcome { rep, seed, estimate: None, se: None, ci: None, error: Some(e.to_string()) },
                    }
                })
                .collect()
        })
        .collect();
    Ok((0..config.queries.len())
        .map(|q| per_rep.iter().map(|r| r[q].clone()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: Scenario,
    pub n: usize,
    pub query: String,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub mean_estimate: f64,
    /// `100 (mean estimate - truth) / truth`.
    pub pct_bias: f64,
    /// Fraction of intervals containing the truth.
    pub coverage: f64,
    pub mean_se: f64,
    /// Successful replications.
    pub reps: usize,
    pub failed: usize,
}

/// Largest tolerated share of failed replications.
pub const MAX_FAILED_SHARE: f64 = 0.05;

/// Aggregates replications for one query against its truth.
pub fn summarize(scenario: Scenario, n: usize, query: &SimQuery, truth: TruthEntry, outcomes: &[RepOutcome]) -> Result<MetricsRow> {
    let ok: Vec<(f64, f64, Interval)> = outcomes
        .iter()
        .filter_map(|o| Some((o.estimate?, o.se?, o.ci?)))
        .collect();
    let failed = outcomes.len() - ok.len();
    if ok.is_empty() || failed as f64 > MAX_FAILED_SHARE * outcomes.len() as f64 {
        let first = outcomes.iter().find_map(|o| o.error.clone()).unwrap_or_default();
        return Err(Error::Harness(format!(
            "{query}: {failed} of {} replications failed (first error: {first})",
            outcomes.len()
        )));
    }
    let k = ok.len() as f64;
    let mean_estimate = ok.iter().map(|o| o.0).sum::<f64>() / k;
    let mean_se = ok.iter().map(|o| o.1).sum::<f64>() / k;
    let covered = ok.iter().filter(|o| o.2.contains(truth.truth)).count();
    Ok(MetricsRow {
        scenario,
        n,
        query: query.to_string(),
        truth: truth.truth,
        truth_mc_se: truth.mc_se,
        mean_estimate,
        pct_bias: 100.0 * (mean_estimate - truth.truth) / truth.truth,
        coverage: covered as f64 / k,
        mean_se,
        reps: ok.len(),
        failed,
    })
}

/// Full experiment: truths (through `cache`), replications, and per-query metrics.
pub fn run_monte_carlo(config: &SimConfig, cache: &mut TruthCache) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    let truths = config
        .queries
        .iter()
        .map(|q| cache.truth(config.scenario, q, &config.params, config.truth_mc_size, config.truth_seed))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = run_replications(config)?;
    config
        .queries
        .iter()
        .zip(truths)
        .zip(&outcomes)
        .map(|((q, t), o)| summarize(config.scenario, config.n, q, t, o))
        .collect()
}

/// Shared handle to the true nuisances, for oracle-mode estimation.
pub fn oracle_source(scenario: Scenario) -> NuisanceSource {
    NuisanceSource::Oracle(Arc::new(true_nuisances(scenario)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::Nuisance;
    use approx::assert_abs_diff_eq;

    fn draw(scenario: Scenario, n: usize, seed: u64) -> Dataset {
        gen_dataset(&ScenarioSpec { scenario, n, seed }).unwrap()
    }

    #[test]
    fn gamma_caps_match_reference_quantiles() {
        let [c0, c1] = gamma_caps();
        assert_abs_diff_eq!(c0, 8.374_801_171_819_52, epsilon = 1e-6);
        assert_abs_diff_eq!(c1, 13.248_274_413_222_205, epsilon = 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(draw(Scenario::II, 200, 5), draw(Scenario::II, 200, 5));
        assert_ne!(draw(Scenario::II, 200, 5), draw(Scenario::II, 200, 6));
        assert!(gen_dataset(&ScenarioSpec { scenario: Scenario::I, n: 49, seed: 0 }).is_err());
    }

    #[test]
    fn scenario_one_category_frequencies() {
        let d = draw(Scenario::I, 100_000, 11);
        let obs = d.observations();
        let p_x1 = obs.iter().filter(|o| o.x[0] == 1.0).count() as f64 / obs.len() as f64;
        assert!((p_x1 - 0.30).abs() < 0.005, "{p_x1}");
        let naive: Vec<_> = obs.iter().filter(|o| o.x[0] == 0.0).collect();
        for (k, p) in B_PROBS_NAIVE_I.iter().enumerate() {
            let f = naive.iter().filter(|o| o.b == k as f64 + 1.0).count() as f64 / naive.len() as f64;
            assert!((f - p).abs() < 0.006, "B = {}: {f} vs {p}", k + 1);
        }
        let treated = obs.iter().filter(|o| o.a == 1).count() as f64 / obs.len() as f64;
        assert!((treated - 0.5).abs() < 0.01);
    }

    #[test]
    fn scenario_three_baseline_zero_share() {
        let d = draw(Scenario::III, 100_000, 12);
        let naive: Vec<_> = d.observations().iter().filter(|o| o.x[0] == 0.0).collect();
        let f = naive.iter().filter(|o| o.b == 0.0).count() as f64 / naive.len() as f64;
        assert!((f - 0.60).abs() < 0.007, "{f}");
    }

    #[test]
    fn scenario_two_clamped_at_caps() {
        let caps = gamma_caps();
        let d = draw(Scenario::II, 50_000, 13);
        for o in d.observations() {
            assert!(o.b > 0.0 && o.b <= caps[o.x[0] as usize]);
        }
        // about half a percent of each group sits exactly at its cap
        let at_cap = d.observations().iter().filter(|o| o.b == caps[o.x[0] as usize]).count();
        let share = at_cap as f64 / 50_000.0;
        assert!((share - 0.005).abs() < 0.0015, "{share}");
    }

    #[test]
    fn supports() {
        let s1 = Scenario::I.support();
        assert_abs_diff_eq!(s1.lo, -1.5);
        assert_abs_diff_eq!(s1.hi, 17.0);
        let s2 = Scenario::II.support();
        assert_abs_diff_eq!(s2.lo, -2.5);
        assert_abs_diff_eq!(s2.hi, 13.248_274_413_222_205 + 12.0, epsilon = 1e-6);
        assert_eq!(Scenario::III.support(), Interval { lo: -2.5, hi: 16.0 });
    }

    #[test]
    fn true_nuisance_values() {
        let t = true_nuisances(Scenario::I);
        let x = [0.0, 0.5, 0.5];
        // expit(-0.45)
        assert_abs_diff_eq!(t.outcome(1, 8.0, 2.0, &x), 0.389_360_766_050_777_96, epsilon = 1e-12);
        let mean = marker_mean(1, 2.0, 0.0, 0.5);
        assert_abs_diff_eq!(t.density(mean, 1, 2.0, &x), 0.398_942_280_401_432_7, epsilon = 1e-12);
        assert_eq!(t.propensity(1, 3.0, &x), 0.5);
        assert_eq!(t.propensity(0, 3.0, &x), 0.5);
    }

    #[test]
    fn true_nuisances_agree_with_structural_functions() {
        let t = true_nuisances(Scenario::II);
        let d = draw(Scenario::II, 300, 3);
        for o in d.observations() {
            for a in [0u8, 1] {
                let dens = true_marker_density(o.s, a, o.b, o.x[0], o.x[1]);
                assert_abs_diff_eq!(t.density(o.s, a, o.b, &o.x), dens, epsilon = 1e-14);
                let r = true_risk(a, o.s, o.b, o.x[1], o.x[2]);
                assert_abs_diff_eq!(t.outcome(a, o.s, o.b, &o.x), r, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_oracle_query_has_equal_parts() {
        let p = SmoothingParams::default();
        let q = SimQuery::Stwcrve(StwcrveQuery { a1: 1, a0: 1, s1: 8.0, s0: 8.0 });
        let o = oracle_estimand(Scenario::I, &q, &p, 100_000, 1).unwrap();
        assert!((o.num - o.den).abs() < 1e-12);
        assert!(o.value.abs() < 1e-12);
    }

    #[test]
    fn stwcr_oracle_in_unit_interval() {
        let p = SmoothingParams::default();
        for s in [7.0, 10.0] {
            let o = oracle_estimand(Scenario::I, &SimQuery::Stwcr(StwcrQuery { a: 1, s }), &p, 100_000, 2).unwrap();
            assert!(o.value > 0.0 && o.value < 1.0, "{o:?}");
            assert!(o.value_mc_se > 0.0 && o.value_mc_se < 1e-2);
        }
    }

    #[test]
    fn oracle_is_deterministic_for_a_seed() {
        let p = SmoothingParams::default();
        let q = SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 });
        let a = oracle_estimand(Scenario::III, &q, &p, 120_000, 9).unwrap();
        let b = oracle_estimand(Scenario::III, &q, &p, 120_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn summarize_degenerate_harness() {
        let truth = TruthEntry { truth: 0.3, mc_se: 0.0, mc_size: 100_000, seed: 0 };
        let rep = RepOutcome { rep: 0, seed: 0, estimate: Some(0.3), se: Some(0.0), ci: Some(Interval { lo: 0.3, hi: 0.3 }), error: None };
        let q = SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 });
        let row = summarize(Scenario::I, 1000, &q, truth, &[rep]).unwrap();
        assert_eq!(row.pct_bias, 0.0);
        assert_eq!(row.coverage, 1.0);
        assert_eq!(row.reps, 1);
    }

    #[test]
    fn summarize_rejects_too_many_failures() {
        let truth = TruthEntry { truth: 0.3, mc_se: 0.0, mc_size: 100_000, seed: 0 };
        let good = RepOutcome { rep: 0, seed: 0, estimate: Some(0.31), se: Some(0.01), ci: Some(Interval { lo: 0.29, hi: 0.33 }), error: None };
        let bad = RepOutcome { rep: 1, seed: 0, estimate: None, se: None, ci: None, error: Some("boom".into()) };
        let mut outcomes = vec![good; 19];
        outcomes.push(bad.clone());
        let q = SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 });
        let row = summarize(Scenario::I, 1000, &q, truth, &outcomes).unwrap();
        assert_eq!(row.failed, 1);
        outcomes.push(bad);
        assert!(matches!(summarize(Scenario::I, 1000, &q, truth, &outcomes), Err(Error::Harness(_))));
    }

    #[test]
    fn replication_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..1000).map(|r| replication_seed(42, r)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 1000);
        assert_eq!(replication_seed(42, 17), seeds[17]);
        // SplitMix64 reference output for state 0 after one increment
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn truth_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truths.json");
        let p = SmoothingParams::default();
        let q = SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 });
        let mut cache = TruthCache::open(&path).unwrap();
        assert!(cache.is_empty());
        let e = cache.truth(Scenario::I, &q, &p, 100_000, 3).unwrap();
        cache.save().unwrap();
        let mut reopened = TruthCache::open(&path).unwrap();
        assert_eq!(reopened.get(&truth_key(Scenario::I, &q, &p)), Some(&e));
        // cached value reused even when asked with another seed
        assert_eq!(reopened.truth(Scenario::I, &q, &p, 100_000, 99).unwrap(), e);
    }

    #[test]
    fn truth_key_distinguishes_params() {
        let q = SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 });
        let p = SmoothingParams::default();
        let p2 = SmoothingParams { h: 0.2, ..p };
        assert_ne!(truth_key(Scenario::I, &q, &p), truth_key(Scenario::I, &q, &p2));
        assert_ne!(truth_key(Scenario::I, &q, &p), truth_key(Scenario::II, &q, &p));
    }

    #[test]
    fn small_harness_run_is_reproducible() {
        let config = SimConfig {
            n: 200,
            reps: 3,
            truth_mc_size: 100_000,
            queries: vec![
                SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 }),
                SimQuery::Stwcrve(StwcrveQuery { a1: 1, a0: 0, s1: 8.0, s0: 7.0 }),
            ],
            ..SimConfig::default()
        };
        let mut cache = TruthCache::in_memory();
        let a = run_monte_carlo(&config, &mut cache).unwrap();
        let b = run_monte_carlo(&config, &mut cache).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.coverage)));
    }

    #[test]
    fn scenario_parsing() {
        assert_eq!("ii".parse::<Scenario>().unwrap(), Scenario::II);
        assert_eq!("3".parse::<Scenario>().unwrap(), Scenario::III);
        assert!("IV".parse::<Scenario>().is_err());
        assert_eq!("stwcr:1:7".parse::<SimQuery>().unwrap(), SimQuery::Stwcr(StwcrQuery { a: 1, s: 7.0 }));
        assert_eq!(
            "STWCRVE:1:0:8:7.5".parse::<SimQuery>().unwrap(),
            SimQuery::Stwcrve(StwcrveQuery { a1: 1, a0: 0, s1: 8.0, s0: 7.5 })
        );
        assert!("stwcr:2:7".parse::<SimQuery>().is_err());
        assert!("stwcr:1".parse::<SimQuery>().is_err());
    }
}
