//! Uncentered efficient influence functions for the smoothed trimmed
//! weighted controlled risk (STWCR) and relative vaccine efficacy (STWCRVE)
//! functionals, evaluated one observation at a time.
//!
//! Notation in comments: `φ(p) = Φ((p - t)/ε)` is the smoothed trimming
//! indicator, `φ'` its derivative, `π` the conditional marker density,
//! `π'` the propensity and `r` the outcome regression. Integrals are taken
//! against the Gaussian kernel and computed with [`KernelRule`]s; every
//! factor that depends only on `(b, x)` is tabulated once per observation on
//! the quadrature nodes.

use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::error::{invalid, Error, Result};
use crate::math::{indicator, indicator_deriv, kernel, KernelRule, KernelRule2d, SmoothingParams, DENSITY_FLOOR};
use crate::nuisance::Nuisance;

/// One observation's uncentered (numerator, denominator) influence values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EifPair {
    pub num: f64,
    pub den: f64,
}

/// `STWCR(a, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StwcrQuery {
    pub a: u8,
    pub s: f64,
}

/// `STWCRVE(a1, a0, s1, s0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StwcrveQuery {
    pub a1: u8,
    pub a0: u8,
    pub s1: f64,
    pub s0: f64,
}

impl StwcrQuery {
    pub fn validate(&self) -> Result<()> {
        check_arm(self.a)?;
        if !self.s.is_finite() {
            return Err(invalid("query marker level must be finite"));
        }
        Ok(())
    }
}

impl StwcrveQuery {
    pub fn validate(&self) -> Result<()> {
        check_arm(self.a1)?;
        check_arm(self.a0)?;
        if !(self.s1.is_finite() && self.s0.is_finite()) {
            return Err(invalid("query marker levels must be finite"));
        }
        Ok(())
    }
}

fn check_arm(a: u8) -> Result<()> {
    if a > 1 {
        return Err(invalid(format!("arm must be 0 or 1, got {a}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EifDiagnostics {
    /// Times the marker density at the observed `S` fell below the floor.
    pub density_floor_hits: usize,
}

/// Nuisance values for one arm on a kernel rule's nodes.
struct ArmTable {
    phi: Vec<f64>,
    dphi_dens: Vec<f64>,
    risk: Vec<f64>,
}

impl ArmTable {
    fn new<N: Nuisance + ?Sized>(rule: &KernelRule, arm: u8, obs: &Observation, nuis: &N, params: &SmoothingParams) -> Self {
        let n = rule.len();
        let mut phi = Vec::with_capacity(n);
        let mut dphi_dens = Vec::with_capacity(n);
        let mut risk = Vec::with_capacity(n);
        for &s in &rule.nodes {
            let dens = nuis.density(s, arm, obs.b, &obs.x);
            phi.push(indicator(dens, params.t, params.epsilon));
            dphi_dens.push(indicator_deriv(dens, params.t, params.epsilon) * dens);
            risk.push(nuis.outcome(arm, s, obs.b, &obs.x));
        }
        Self { phi, dphi_dens, risk }
    }
}

/// Nuisance values at the observed marker level for one arm.
struct AtObserved {
    ipw: f64,
    phi: f64,
    dphi: f64,
    dens_floored: f64,
    risk: f64,
}

impl AtObserved {
    fn new<N: Nuisance + ?Sized>(arm: u8, obs: &Observation, nuis: &N, params: &SmoothingParams, diag: &mut EifDiagnostics) -> Self {
        let dens = nuis.density(obs.s, arm, obs.b, &obs.x);
        if dens < DENSITY_FLOOR {
            diag.density_floor_hits += 1;
        }
        Self {
            ipw: 1.0 / nuis.propensity(arm, obs.b, &obs.x).max(DENSITY_FLOOR),
            phi: indicator(dens, params.t, params.epsilon),
            dphi: indicator_deriv(dens, params.t, params.epsilon),
            dens_floored: dens.max(DENSITY_FLOOR),
            risk: nuis.outcome(arm, obs.s, obs.b, &obs.x),
        }
    }
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation { term })
    }
}

fn dot3(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

pub fn eif_stwcr<N: Nuisance + ?Sized>(
    obs: &Observation,
    q: &StwcrQuery,
    nuis: &N,
    params: &SmoothingParams,
) -> Result<EifPair> {
    eif_stwcr_diag(obs, q, nuis, params, &mut EifDiagnostics::default())
}

/// STWCR influence values; floor activations are added to `diag`.
pub fn eif_stwcr_diag<N: Nuisance + ?Sized>(
    obs: &Observation,
    q: &StwcrQuery,
    nuis: &N,
    params: &SmoothingParams,
    diag: &mut EifDiagnostics,
) -> Result<EifPair> {
    let rule = KernelRule::new(q.s, params.h, nuis.support(), params);
    let tab = ArmTable::new(&rule, q.a, obs, nuis, params);

    // ∫ K_h φ ds0 and ∫ K_h φ r ds0
    let mut den = finite("plug_in_den", rule.dot(&tab.phi))?;
    let mut num = finite("plug_in_num", dot3(&rule.weights, &tab.phi, &tab.risk))?;

    if obs.a == q.a {
        let at = AtObserved::new(q.a, obs, nuis, params, diag);
        let k = kernel(obs.s - q.s, params.h);
        let score = finite("kernel_score", k * at.ipw * at.dphi)?;
        let residual = finite("residual", k * at.ipw * at.phi / at.dens_floored * (obs.y - at.risk))?;
        // I(A=a)/π' ∫ K_h φ' π ds0 and the same with r
        let corr_den = finite("correction_den", at.ipw * rule.dot(&tab.dphi_dens))?;
        let corr_num = finite("correction_num", at.ipw * dot3(&rule.weights, &tab.dphi_dens, &tab.risk))?;

        den += score - corr_den;
        num += score * at.risk + residual - corr_num;
    }
    Ok(EifPair { num: finite("num", num)?, den: finite("den", den)? })
}

pub fn eif_stwcrve<N: Nuisance + ?Sized>(
    obs: &Observation,
    q: &StwcrveQuery,
    nuis: &N,
    params: &SmoothingParams,
) -> Result<EifPair> {
    eif_stwcrve_diag(obs, q, nuis, params, &mut EifDiagnostics::default())
}

/// STWCRVE influence values for the double-trimmed numerator (arm `a1`,
/// level `s1`) and denominator (arm `a0`, level `s0`).
///
/// Axis 0 carries `s'` around `s0` with bandwidth `h0` and arm `a0`;
/// axis 1 carries `s''` around `s1` with bandwidth `h1` and arm `a1`.
/// Writing `G = ∫ K_{h0} φ0`, `Gr = ∫ K_{h0} φ0 r0`, `H = ∫ K_{h1} φ1`,
/// `Hr = ∫ K_{h1} φ1 r1`, the functionals are `E[G·Hr]` and `E[Gr·H]`.
pub fn eif_stwcrve_diag<N: Nuisance + ?Sized>(
    obs: &Observation,
    q: &StwcrveQuery,
    nuis: &N,
    params: &SmoothingParams,
    diag: &mut EifDiagnostics,
) -> Result<EifPair> {
    let grid = KernelRule2d::new(q.s0, params.h0, q.s1, params.h1, nuis.support(), params);
    let t0 = ArmTable::new(&grid.first, q.a0, obs, nuis, params);
    let t1 = ArmTable::new(&grid.second, q.a1, obs, nuis, params);

    // ∬ K K φ0 φ1 r1 and ∬ K K φ0 φ1 r0
    let mut num = finite("plug_in_num", grid.sum_indexed(|i, j| t0.phi[i] * t1.phi[j] * t1.risk[j]))?;
    let mut den = finite("plug_in_den", grid.sum_indexed(|i, j| t0.phi[i] * t1.phi[j] * t0.risk[i]))?;

    if obs.a == q.a1 {
        let at = AtObserved::new(q.a1, obs, nuis, params, diag);
        let k1 = kernel(obs.s - q.s1, params.h1);
        let g = grid.first.dot(&t0.phi);
        let gr = dot3(&grid.first.weights, &t0.phi, &t0.risk);

        // ∫ K_{h0}(s'-s0) K_{h1}(S-s1) I(A=a1)/π' φ'(π(S|a1)) φ(π(s'|a0)) r(·) ds'
        num += finite("num_score_a1", k1 * at.ipw * at.dphi * g * at.risk)?;
        den += finite("den_score_a1", k1 * at.ipw * at.dphi * gr)?;
        // residual through r(a1, S): K_{h1}(S-s1) G φ(π(S|a1))/π(S|a1) (Y - r)
        num += finite("num_residual", k1 * at.ipw * g * at.phi / at.dens_floored * (obs.y - at.risk))?;
        // ∬ K K I(A=a1)/π' φ'(π(s''|a1)) π(s''|a1) φ(π(s'|a0)) r(·)
        num -= finite(
            "num_correction_a1",
            at.ipw * grid.sum_indexed(|i, j| t1.dphi_dens[j] * t0.phi[i] * t1.risk[j]),
        )?;
        den -= finite(
            "den_correction_a1",
            at.ipw * grid.sum_indexed(|i, j| t1.dphi_dens[j] * t0.phi[i] * t0.risk[i]),
        )?;
    }

    if obs.a == q.a0 {
        let at = AtObserved::new(q.a0, obs, nuis, params, diag);
        let k0 = kernel(obs.s - q.s0, params.h0);
        let h = grid.second.dot(&t1.phi);
        let hr = dot3(&grid.second.weights, &t1.phi, &t1.risk);

        num += finite("num_score_a0", k0 * at.ipw * at.dphi * hr)?;
        den += finite("den_score_a0", k0 * at.ipw * at.dphi * h * at.risk)?;
        den += finite("den_residual", k0 * at.ipw * h * at.phi / at.dens_floored * (obs.y - at.risk))?;
        num -= finite(
            "num_correction_a0",
            at.ipw * grid.sum_indexed(|i, j| t0.dphi_dens[i] * t1.phi[j] * t1.risk[j]),
        )?;
        den -= finite(
            "den_correction_a0",
            at.ipw * grid.sum_indexed(|i, j| t0.dphi_dens[i] * t1.phi[j] * t0.risk[i]),
        )?;
    }

    Ok(EifPair { num: finite("num", num)?, den: finite("den", den)? })
}
