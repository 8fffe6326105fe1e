//! Gevrey-class smooth transition functions.
//!
//! The step `Φ_τ` is the normalised running integral of the bump
//! `φ_σ(s) = exp(-[(s/τ)(1 - s/τ)]^(-σ))`. It is exactly 0 before the
//! transition, exactly 1 after it, and every derivative vanishes at both
//! ends. Derivatives of the bump are evaluated with truncated Taylor
//! arithmetic (log/exp/pow recurrences), which stays accurate at orders
//! where nested finite differences would be useless.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::adaptive_simpson;

/// Below this exponent the bump is flushed to exactly zero.
const UNDERFLOW_EXPONENT: f64 = -700.0;
const NORMALISATION_TOL: f64 = 1e-13;

pub const DEFAULT_SIGMA: f64 = 1.1;
pub const DEFAULT_MAX_ORDER: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionSchedule {
    pub t0: f64,
    pub tau: f64,
    pub sigma: f64,
    pub k_max: usize,
    #[serde(skip)]
    norm: OnceLock<f64>,
}

impl PartialEq for TransitionSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.t0 == other.t0
            && self.tau == other.tau
            && self.sigma == other.sigma
            && self.k_max == other.k_max
    }
}

impl TransitionSchedule {
    pub fn new(t0: f64, tau: f64, sigma: f64, k_max: usize) -> Result<Self> {
        if !t0.is_finite() {
            return Err(Error::InvalidInput(format!("transition start {t0} is not finite")));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidInput(format!(
                "transition duration tau must be > 0, got {tau}"
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "shape exponent sigma must be > 0, got {sigma}"
            )));
        }
        Ok(TransitionSchedule {
            t0,
            tau,
            sigma,
            k_max,
            norm: OnceLock::new(),
        })
    }

    pub fn with_defaults(t0: f64, tau: f64) -> Result<Self> {
        Self::new(t0, tau, DEFAULT_SIGMA, DEFAULT_MAX_ORDER)
    }

    /// Gevrey order of the step, `1 + 1/σ`.
    pub fn alpha(&self) -> f64 {
        1.0 + 1.0 / self.sigma
    }

    /// `σ > 1` keeps the order strictly below 2, which the series
    /// parametrisation needs for uniform convergence.
    pub fn admits_uniform_convergence(&self) -> bool {
        self.sigma > 1.0
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.tau
    }

    /// `∫_0^1 φ_σ(u) du` on the unit interval.
    fn unit_norm(&self) -> f64 {
        *self.norm.get_or_init(|| {
            let sigma = self.sigma;
            adaptive_simpson(&|u| bump(u, sigma), 0.0, 1.0, NORMALISATION_TOL)
        })
    }

    /// `k`-th time derivative of the step at `t`.
    pub fn phi(&self, t: f64, k: usize) -> Result<f64> {
        if k > self.k_max {
            return Err(Error::UnsupportedOrder {
                requested: k,
                max: self.k_max,
            });
        }
        if !t.is_finite() {
            return Err(Error::InvalidInput(format!("time {t} is not finite")));
        }
        let u = (t - self.t0) / self.tau;
        if k == 0 {
            return Ok(self.step_value(u));
        }
        if u <= 0.0 || u >= 1.0 {
            return Ok(0.0);
        }
        let mut jet = vec![0.0; k];
        bump_jet(u, self.sigma, &mut jet);
        // jet[m] = φ^(m)(u) / m!  (derivatives in u)
        let m = k - 1;
        let deriv_u = jet[m] * factorial(m);
        Ok(deriv_u / (self.unit_norm() * self.tau.powi(k as i32)))
    }

    /// All derivatives `Φ^(0..=k)(t)` in one pass.
    pub fn phi_stack(&self, t: f64, k: usize) -> Result<Vec<f64>> {
        if k > self.k_max {
            return Err(Error::UnsupportedOrder {
                requested: k,
                max: self.k_max,
            });
        }
        if !t.is_finite() {
            return Err(Error::InvalidInput(format!("time {t} is not finite")));
        }
        let u = (t - self.t0) / self.tau;
        let mut out = vec![0.0; k + 1];
        out[0] = self.step_value(u);
        if k == 0 || u <= 0.0 || u >= 1.0 {
            return Ok(out);
        }
        let mut jet = vec![0.0; k];
        bump_jet(u, self.sigma, &mut jet);
        let norm = self.unit_norm();
        let mut fact = 1.0;
        let mut tau_pow = self.tau;
        for m in 0..k {
            if m > 0 {
                fact *= m as f64;
                tau_pow *= self.tau;
            }
            out[m + 1] = jet[m] * fact / (norm * tau_pow);
        }
        Ok(out)
    }

    fn step_value(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let sigma = self.sigma;
        let f = |s: f64| bump(s, sigma);
        let norm = self.unit_norm();
        if u <= 0.5 {
            adaptive_simpson(&f, 0.0, u, NORMALISATION_TOL) / norm
        } else {
            1.0 - adaptive_simpson(&f, u, 1.0, NORMALISATION_TOL) / norm
        }
    }
}

/// Bump on the unit interval.
fn bump(u: f64, sigma: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        return 0.0;
    }
    let w = u * (1.0 - u);
    let expo = -w.powf(-sigma);
    if expo < UNDERFLOW_EXPONENT {
        0.0
    } else {
        expo.exp()
    }
}

/// Taylor coefficients of the unit bump about `u`, `out[m] = φ^(m)(u)/m!`.
fn bump_jet(u: f64, sigma: f64, out: &mut [f64]) {
    let n = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    if n == 0 || u <= 0.0 || u >= 1.0 {
        return;
    }
    // w(u + h) = w + (1 - 2u) h - h^2
    let mut w = vec![0.0; n];
    w[0] = u * (1.0 - u);
    if n > 1 {
        w[1] = 1.0 - 2.0 * u;
    }
    if n > 2 {
        w[2] = -1.0;
    }
    let p0 = w[0].powf(-sigma);
    if -p0 < UNDERFLOW_EXPONENT {
        return;
    }
    // g = -σ ln w
    let mut lnw = vec![0.0; n];
    lnw[0] = w[0].ln();
    for k in 1..n {
        let mut acc = w[k];
        for j in 1..k {
            acc -= (j as f64 / k as f64) * lnw[j] * w[k - j];
        }
        lnw[k] = acc / w[0];
    }
    let g: Vec<f64> = lnw.iter().map(|v| -sigma * v).collect();
    // p = exp(g) = w^-σ
    let p = jet_exp(&g);
    // φ = exp(-p)
    let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
    let phi = jet_exp(&neg_p);
    out.copy_from_slice(&phi);
}

fn jet_exp(g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut e = vec![0.0; n];
    e[0] = g[0].exp();
    for k in 1..n {
        let mut acc = 0.0;
        for j in 1..=k {
            acc += j as f64 * g[j] * e[k - j];
        }
        e[k] = acc / k as f64;
    }
    e
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// One sample for [`gevrey_bound_estimate`]: `|d^k y/dt^k (t)| = value`.
#[derive(Debug, Clone, Copy)]
pub struct DerivativeSample {
    pub t: f64,
    pub order: usize,
    pub value: f64,
}

/// Smallest `D` with `|y^(k)| <= D^(k+1) (k!)^α` over the samples.
pub fn gevrey_bound_estimate(samples: &[DerivativeSample], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no derivative samples".into()));
    }
    if !(alpha.is_finite() && alpha >= 1.0) {
        return Err(Error::InvalidInput(format!("Gevrey order must be >= 1, got {alpha}")));
    }
    let mut d = 0.0_f64;
    for s in samples {
        if !s.value.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite sample at t = {}", s.t)));
        }
        let k = s.order as f64;
        // work in logs: ln D >= (ln|v| - α ln k!) / (k+1)
        if s.value == 0.0 {
            continue;
        }
        let ln_fact: f64 = (1..=s.order).map(|j| (j as f64).ln()).sum();
        let ln_d = (s.value.abs().ln() - alpha * ln_fact) / (k + 1.0);
        d = d.max(ln_d.exp());
    }
    Ok(d)
}
