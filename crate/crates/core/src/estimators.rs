//! Cross-fitted one-step estimators with plug-in variances and Wald-type
//! confidence intervals.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, OutcomeKind};
use crate::eif::{eif_stwcr_diag, eif_stwcrve_diag, EifDiagnostics, EifPair, StwcrQuery, StwcrveQuery};
use crate::error::{invalid, Error, Result};
use crate::math::{Interval, SmoothingParams};
use crate::nuisance::{ModelSpecs, Nuisance, NuisanceTriple, PropensitySpec};

/// Ridge used when a training fold is degenerate (constant outcome or constant treatment).
pub const DEGENERATE_FOLD_RIDGE: f64 = 1e-2;

/// Balanced K-fold partition; labels run from 1 to K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k_folds: usize,
    labels: Vec<usize>,
}

impl FoldAssignment {
    pub fn new(k_folds: usize, labels: Vec<usize>) -> Result<Self> {
        if k_folds < 2 {
            return Err(invalid(format!("need at least 2 folds, got {k_folds}")));
        }
        let mut sizes = vec![0usize; k_folds];
        for &l in &labels {
            if l == 0 || l > k_folds {
                return Err(invalid(format!("fold label {l} outside 1..={k_folds}")));
            }
            sizes[l - 1] += 1;
        }
        let (lo, hi) = (sizes.iter().min().copied().unwrap_or(0), sizes.iter().max().copied().unwrap_or(0));
        if lo == 0 {
            return Err(invalid("every fold must be nonempty"));
        }
        if hi - lo > 1 {
            return Err(invalid("fold sizes may differ by at most one"));
        }
        Ok(Self { k_folds, labels })
    }

    pub fn k_folds(&self) -> usize {
        self.k_folds
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Held-out indices of fold `k` (1-based), ascending.
    pub fn held_out(&self, k: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == k).collect()
    }

    /// Training indices for fold `k`, i.e. the complement of [`held_out`](Self::held_out).
    pub fn training(&self, k: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (1..=self.k_folds).map(|k| self.labels.iter().filter(|&&l| l == k).count()).collect()
    }
}

/// Uniformly random balanced partition of `0..n` into `k` folds, reproducible from `seed`.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(invalid(format!("need 2 <= folds <= n, got folds = {k}, n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        labels[i] = pos % k + 1;
    }
    FoldAssignment::new(k, labels)
}

/// Where nuisance functions come from.
#[derive(Clone)]
pub enum NuisanceSource {
    /// Fit on each training fold.
    Fitted(ModelSpecs),
    /// Use the given functions everywhere; cross-fitting then reduces to a plain mean.
    Oracle(Arc<dyn Nuisance>),
}

impl std::fmt::Debug for NuisanceSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NuisanceSource::Fitted(specs) => f.debug_tuple("Fitted").field(specs).finish(),
            NuisanceSource::Oracle(_) => f.write_str("Oracle(..)"),
        }
    }
}

impl From<ModelSpecs> for NuisanceSource {
    fn from(specs: ModelSpecs) -> Self {
        NuisanceSource::Fitted(specs)
    }
}

/// Held-out influence values for every observation, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    pub pairs: Vec<EifPair>,
    pub density_floor_hits: usize,
    /// Training folds that needed the fallback ridge.
    pub degenerate_folds: usize,
}

impl CrossFit {
    /// Pooled means `(num, den)` summed in index order.
    pub fn means(&self) -> (f64, f64) {
        let n = self.pairs.len() as f64;
        let (num, den) = self.pairs.iter().fold((0.0, 0.0), |(a, b), p| (a + p.num, b + p.den));
        (num / n, den / n)
    }
}

fn is_degenerate(train: &Dataset, specs: &ModelSpecs) -> bool {
    let obs = train.observations();
    let constant = |f: fn(&Observation) -> f64| obs.iter().all(|o| f(o) == f(&obs[0]));
    let flat_y = train.outcome_kind() == OutcomeKind::Binary && constant(|o| o.y);
    let flat_a = matches!(specs.propensity, PropensitySpec::Logistic(_)) && constant(|o| o.a as f64);
    flat_y || flat_a
}

fn fit_fold(train: &Dataset, specs: &ModelSpecs) -> Result<(NuisanceTriple, bool)> {
    if is_degenerate(train, specs) {
        let mut relaxed = specs.clone();
        relaxed.irls.ridge = relaxed.irls.ridge.max(DEGENERATE_FOLD_RIDGE);
        return Ok((relaxed.fit(train)?, true));
    }
    Ok((specs.fit(train)?, false))
}

fn cross_fit<F>(
    data: &Dataset,
    folds: &FoldAssignment,
    source: &NuisanceSource,
    arms: &[u8],
    eval: F,
) -> Result<CrossFit>
where
    F: Fn(&Observation, &dyn Nuisance, &mut EifDiagnostics) -> Result<EifPair> + Sync,
{
    if folds.len() != data.len() {
        return Err(invalid(format!(
            "fold assignment covers {} observations but dataset has {}",
            folds.len(),
            data.len()
        )));
    }
    let obs = data.observations();
    let eval_block = |idx: &[usize], nuis: &dyn Nuisance| -> Result<(Vec<EifPair>, usize)> {
        let evaluated: Vec<(EifPair, usize)> = idx
            .par_iter()
            .map(|&i| {
                let mut diag = EifDiagnostics::default();
                eval(&obs[i], nuis, &mut diag).map(|p| (p, diag.density_floor_hits))
            })
            .collect::<Result<_>>()?;
        let hits = evaluated.iter().map(|(_, h)| h).sum();
        Ok((evaluated.into_iter().map(|(p, _)| p).collect(), hits))
    };

    match source {
        NuisanceSource::Oracle(nuis) => {
            let all: Vec<usize> = (0..obs.len()).collect();
            let (pairs, hits) = eval_block(&all, nuis.as_ref())?;
            Ok(CrossFit { pairs, density_floor_hits: hits, degenerate_folds: 0 })
        }
        NuisanceSource::Fitted(specs) => {
            for k in 1..=folds.k_folds() {
                let train = folds.training(k);
                for &arm in arms {
                    if !train.iter().any(|&i| obs[i].a == arm) {
                        return Err(Error::ArmAbsent { arm });
                    }
                }
            }
            let per_fold: Vec<(Vec<usize>, Vec<EifPair>, usize, bool)> = (1..=folds.k_folds())
                .into_par_iter()
                .map(|k| {
                    let wrap = |e| Error::Fold { fold: k, source: Box::new(e) };
                    let train = data.subset(&folds.training(k)).map_err(wrap)?;
                    let (nuis, degenerate) = fit_fold(&train, specs).map_err(wrap)?;
                    let held = folds.held_out(k);
                    let (pairs, hits) = eval_block(&held, &nuis).map_err(wrap)?;
                    Ok((held, pairs, hits, degenerate))
                })
                .collect::<Result<_>>()?;
            let mut pairs = vec![EifPair { num: 0.0, den: 0.0 }; obs.len()];
            let (mut hits, mut degenerate) = (0, 0);
            for (held, fold_pairs, h, d) in per_fold {
                for (i, p) in held.into_iter().zip(fold_pairs) {
                    pairs[i] = p;
                }
                hits += h;
                degenerate += d as usize;
            }
            Ok(CrossFit { pairs, density_floor_hits: hits, degenerate_folds: degenerate })
        }
    }
}

pub fn cross_fit_stwcr(
    data: &Dataset,
    q: &StwcrQuery,
    params: &SmoothingParams,
    folds: &FoldAssignment,
    source: &NuisanceSource,
) -> Result<CrossFit> {
    q.validate()?;
    params.validate()?;
    cross_fit(data, folds, source, &[q.a], |o, nuis, diag| eif_stwcr_diag(o, q, nuis, params, diag))
}

pub fn cross_fit_stwcrve(
    data: &Dataset,
    q: &StwcrveQuery,
    params: &SmoothingParams,
    folds: &FoldAssignment,
    source: &NuisanceSource,
) -> Result<CrossFit> {
    q.validate()?;
    params.validate()?;
    let arms: &[u8] = if q.a1 == q.a0 { &[q.a1] } else { &[q.a1, q.a0] };
    cross_fit(data, folds, source, arms, |o, nuis, diag| eif_stwcrve_diag(o, q, nuis, params, diag))
}

fn sample_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n < 2 {
        return 0.0;
    }
    let mean = sum / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

fn common_warnings(fit: &CrossFit) -> Vec<String> {
    let mut w = Vec::new();
    if fit.density_floor_hits > 0 {
        w.push(format!("marker density fell below the floor {} times", fit.density_floor_hits));
    }
    if fit.degenerate_folds > 0 {
        w.push(format!("{} training folds were degenerate and refit with ridge {DEGENERATE_FOLD_RIDGE}", fit.degenerate_folds));
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StwcrReport {
    pub tau_num_hat: f64,
    pub tau_den_hat: f64,
    pub tau_hat: f64,
    pub sigma1_sq_hat: f64,
    pub se: f64,
    pub ci: Interval,
    pub n: usize,
    pub density_floor_hits: usize,
    pub degenerate_folds: usize,
    pub warnings: Vec<String>,
}

impl StwcrReport {
    pub fn from_cross_fit(fit: &CrossFit, params: &SmoothingParams, kind: OutcomeKind) -> Result<Self> {
        let n = fit.pairs.len();
        let (tau_num_hat, tau_den_hat) = fit.means();
        if tau_den_hat.is_nan() || tau_den_hat <= 0.0 {
            return Err(Error::NonpositiveDenominator { tau_num: tau_num_hat, tau_den: tau_den_hat });
        }
        let tau_hat = tau_num_hat / tau_den_hat;
        let sigma1_sq_hat = sample_variance(fit.pairs.iter().map(|p| (p.num - tau_hat * p.den) / tau_den_hat));
        let se = (sigma1_sq_hat / n as f64).sqrt();
        let half = params.z_crit() * se;
        let mut warnings = common_warnings(fit);
        if kind == OutcomeKind::Binary && !(0.0..=1.0).contains(&tau_hat) {
            warnings.push(format!("estimate {tau_hat} lies outside [0, 1]"));
        }
        Ok(Self {
            tau_num_hat,
            tau_den_hat,
            tau_hat,
            sigma1_sq_hat,
            se,
            ci: Interval::new(tau_hat - half, tau_hat + half)?,
            n,
            density_floor_hits: fit.density_floor_hits,
            degenerate_folds: fit.degenerate_folds,
            warnings,
        })
    }
}

/// How [`StwcrveReport::ci_rho`] was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiScale {
    Log,
    /// Used when the ratio estimate is not positive.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StwcrveReport {
    pub tau_num_hat: f64,
    pub tau_den_hat: f64,
    pub rho_hat: f64,
    pub delta_hat: f64,
    pub sigma2log_sq_hat: f64,
    pub ci_rho: Interval,
    pub ci_delta: Interval,
    pub ci_scale: CiScale,
    /// Direct-scale variance of the ratio, `Var((θ_num - ρ θ_den) / τ_den)`.
    pub sigma2_sq_hat: f64,
    pub n: usize,
    pub density_floor_hits: usize,
    pub degenerate_folds: usize,
    pub warnings: Vec<String>,
}

impl StwcrveReport {
    pub fn from_cross_fit(fit: &CrossFit, params: &SmoothingParams) -> Result<Self> {
        let n = fit.pairs.len();
        let (tau_num_hat, tau_den_hat) = fit.means();
        if tau_den_hat.is_nan() || tau_den_hat <= 0.0 {
            return Err(Error::NonpositiveDenominator { tau_num: tau_num_hat, tau_den: tau_den_hat });
        }
        let rho_hat = tau_num_hat / tau_den_hat;
        let sigma2_sq_hat = sample_variance(fit.pairs.iter().map(|p| (p.num - rho_hat * p.den) / tau_den_hat));
        let z = params.z_crit();
        let mut warnings = common_warnings(fit);

        let sigma2log_sq_hat = sample_variance(fit.pairs.iter().map(|p| p.num / tau_num_hat - p.den / tau_den_hat));
        let (ci_rho, ci_scale) = if rho_hat > 0.0 {
            let f = (z * (sigma2log_sq_hat / n as f64).sqrt()).exp();
            (Interval::new(rho_hat / f, rho_hat * f)?, CiScale::Log)
        } else {
            warnings.push(format!("ratio estimate {rho_hat} is not positive; interval formed on the direct scale"));
            let half = z * (sigma2_sq_hat / n as f64).sqrt();
            (Interval::new(rho_hat - half, rho_hat + half)?, CiScale::Direct)
        };
        let ci_delta = Interval::new(1.0 - ci_rho.hi, 1.0 - ci_rho.lo)?;
        Ok(Self {
            tau_num_hat,
            tau_den_hat,
            rho_hat,
            delta_hat: 1.0 - rho_hat,
            sigma2log_sq_hat,
            ci_rho,
            ci_delta,
            ci_scale,
            sigma2_sq_hat,
            n,
            density_floor_hits: fit.density_floor_hits,
            degenerate_folds: fit.degenerate_folds,
            warnings,
        })
    }

    /// Standard error of `log ρ̂`; meaningless on the direct-scale fallback.
    pub fn se_log(&self) -> f64 {
        (self.sigma2log_sq_hat / self.n as f64).sqrt()
    }

    /// Standard error of `ρ̂` (and of `δ̂`) on the direct scale.
    pub fn se_direct(&self) -> f64 {
        (self.sigma2_sq_hat / self.n as f64).sqrt()
    }
}

pub fn estimate_stwcr(
    data: &Dataset,
    q: &StwcrQuery,
    params: &SmoothingParams,
    folds: &FoldAssignment,
    source: &NuisanceSource,
) -> Result<StwcrReport> {
    let fit = cross_fit_stwcr(data, q, params, folds, source)?;
    StwcrReport::from_cross_fit(&fit, params, data.outcome_kind())
}

pub fn estimate_stwcrve(
    data: &Dataset,
    q: &StwcrveQuery,
    params: &SmoothingParams,
    folds: &FoldAssignment,
    source: &NuisanceSource,
) -> Result<StwcrveReport> {
    let fit = cross_fit_stwcrve(data, q, params, folds, source)?;
    StwcrveReport::from_cross_fit(&fit, params)
}
