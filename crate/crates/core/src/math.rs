//! Kernel, smoothed-indicator and quadrature primitives.
//!
//! Every integral in the estimands has the shape `∫ K_h(s' - c) f(s') ds'`
//! over the mediator support. The Gaussian kernel is truncated to a window of
//! `window_halfwidth_in_h` bandwidths around the center, the window is clipped
//! to the support, and the remainder is integrated with Gauss–Legendre.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{invalid, Result};

/// Floor applied to densities and probabilities before they are used as divisors.
pub const DENSITY_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Tuning parameters every estimand is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingParams {
    /// Trim threshold on the conditional marker density.
    pub t: f64,
    /// Scale of the normal-CDF smoothing of the trimming indicator.
    pub epsilon: f64,
    /// Kernel bandwidth for STWCR.
    pub h: f64,
    /// Bandwidth around `s0` for STWCRVE.
    pub h0: f64,
    /// Bandwidth around `s1` for STWCRVE.
    pub h1: f64,
    pub alpha: f64,
    pub quad_nodes: usize,
    /// Kernel truncation radius, in bandwidth units.
    pub window_halfwidth_in_h: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            t: 0.1,
            epsilon: 0.1,
            h: 0.1,
            h0: 0.1,
            h1: 0.1,
            alpha: 0.05,
            quad_nodes: 64,
            window_halfwidth_in_h: 8.0,
        }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(invalid(format!("t must lie in (0,1), got {}", self.t)));
        }
        if !pos(self.epsilon) {
            return Err(invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        for (name, v) in [("h", self.h), ("h0", self.h0), ("h1", self.h1)] {
            if !pos(v) {
                return Err(invalid(format!("bandwidth {name} must be > 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.quad_nodes < 8 {
            return Err(invalid(format!("quad_nodes must be >= 8, got {}", self.quad_nodes)));
        }
        if !(self.window_halfwidth_in_h.is_finite() && self.window_halfwidth_in_h >= 4.0) {
            return Err(invalid(format!(
                "window_halfwidth_in_h must be >= 4, got {}",
                self.window_halfwidth_in_h
            )));
        }
        Ok(())
    }

    /// Two-sided standard-normal critical value `z_{1-alpha/2}`.
    pub fn z_crit(&self) -> f64 {
        normal_quantile(1.0 - self.alpha / 2.0)
    }
}

/// Closed interval, used for the mediator support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(invalid(format!("interval requires lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    /// Effectively the whole real line for kernel integrals.
    pub fn wide() -> Self {
        Self { lo: -1e300, hi: 1e300 }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Gaussian kernel `K_h(u) = φ(u/h)/h`.
pub fn kernel_weight(u: f64, h: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(invalid(format!("kernel displacement must be finite, got {u}")));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("bandwidth must be > 0, got {h}")));
    }
    Ok(kernel(u, h))
}

#[inline]
pub(crate) fn kernel(u: f64, h: f64) -> f64 {
    std_normal_pdf(u / h) / h
}

/// Smoothed trimming indicator `Φ((p - t)/ε)`.
pub fn smooth_indicator(p: f64, t: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(indicator(p, t, epsilon))
}

/// Derivative of [`smooth_indicator`] in `p`: `φ((p - t)/ε)/ε`.
pub fn smooth_indicator_deriv(p: f64, t: f64, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(indicator_deriv(p, t, epsilon))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn indicator(p: f64, t: f64, epsilon: f64) -> f64 {
    std_normal_cdf((p - t) / epsilon)
}

#[inline]
pub(crate) fn indicator_deriv(p: f64, t: f64, epsilon: f64) -> f64 {
    std_normal_pdf((p - t) / epsilon) / epsilon
}

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            let w = 2.0 / ((1.0 - x * x) * d * d);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Shared cached rule of order `n`.
    pub fn cached(n: usize) -> Arc<GaussLegendre> {
        static CACHE: OnceLock<RwLock<HashMap<usize, Arc<GaussLegendre>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
        if let Some(rule) = cache.read().expect("quadrature cache poisoned").get(&n) {
            return Arc::clone(rule);
        }
        let mut guard = cache.write().expect("quadrature cache poisoned");
        Arc::clone(guard.entry(n).or_insert_with(|| Arc::new(GaussLegendre::new(n))))
    }

    pub fn integrate(&self, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

// P_n(x) and P_n'(x) by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Quadrature nodes on a kernel window, with the kernel folded into the weights.
///
/// `Σ_k weights[k] · f(nodes[k]) ≈ ∫ K_h(s' - center) f(s') ds'` over the
/// truncated window intersected with the support. An empty intersection
/// yields an empty rule, which integrates everything to zero.
#[derive(Debug, Clone)]
pub struct KernelRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl KernelRule {
    pub fn new(center: f64, h: f64, support: Interval, params: &SmoothingParams) -> Self {
        let radius = params.window_halfwidth_in_h * h;
        let lo = (center - radius).max(support.lo);
        let hi = (center + radius).min(support.hi);
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Self { nodes: Vec::new(), weights: Vec::new() };
        }
        let gl = GaussLegendre::cached(params.quad_nodes);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let nodes: Vec<f64> = gl.nodes.iter().map(|x| mid + half * x).collect();
        let weights = nodes
            .iter()
            .zip(&gl.weights)
            .map(|(s, w)| w * half * kernel(s - center, h))
            .collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (s, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(*s);
        }
        acc
    }

    /// Weighted sum of precomputed node values.
    pub fn dot(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Tensor product of two kernel rules.
#[derive(Debug, Clone)]
pub struct KernelRule2d {
    pub first: KernelRule,
    pub second: KernelRule,
}

impl KernelRule2d {
    pub fn new(
        c0: f64,
        h0: f64,
        c1: f64,
        h1: f64,
        support: Interval,
        params: &SmoothingParams,
    ) -> Self {
        Self {
            first: KernelRule::new(c0, h0, support, params),
            second: KernelRule::new(c1, h1, support, params),
        }
    }

    /// `Σ_i Σ_j w0_i w1_j f(i, j)` over node indices.
    pub fn sum_indexed(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let mut acc = 0.0;
        for (i, w0) in self.first.weights.iter().enumerate() {
            let mut inner = 0.0;
            for (j, w1) in self.second.weights.iter().enumerate() {
                inner += w1 * f(i, j);
            }
            acc += w0 * inner;
        }
        acc
    }

    pub fn integrate(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let (a, b) = (&self.first.nodes, &self.second.nodes);
        self.sum_indexed(|i, j| f(a[i], b[j]))
    }
}

/// `∫ K_h(s' - center) f(s') ds'` over the truncated window intersected with `support`.
///
/// A NaN anywhere in `f` on the window propagates into the result.
pub fn integrate_kernel_weighted(
    f: impl Fn(f64) -> f64,
    center: f64,
    h: f64,
    support: Interval,
    params: &SmoothingParams,
) -> f64 {
    KernelRule::new(center, h, support, params).integrate(f)
}

/// `∬ K_{h0}(s' - c0) K_{h1}(s'' - c1) f(s', s'') ds' ds''` by tensor Gauss–Legendre.
pub fn integrate_kernel_weighted_2d(
    f: impl Fn(f64, f64) -> f64,
    c0: f64,
    h0: f64,
    c1: f64,
    h1: f64,
    support: Interval,
    params: &SmoothingParams,
) -> f64 {
    KernelRule2d::new(c0, h0, c1, h1, support, params).integrate(f)
}
