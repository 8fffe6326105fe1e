//! Modal solution of the controller target dynamics
//!
//! ```text
//! v_t = a v_zz - μ(t) v - f(z) v(0, t),   ∂_t v(0) = -μ v(0),   ∂_t v(ℓ) = -μ v(ℓ)
//! ```
//!
//! with `f = a ∂_s k(z, 0)`. Removing `e^{-∫μ}` and the linear boundary lift
//! leaves a heat equation with a constant source, solved exactly per sine mode.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::backstepping::GainSchedule;
use crate::error::{Error, Result};
use crate::numerics::{adaptive_simpson, simpson, Grid};

/// Initial state: boundary values plus sine coefficients of
/// `v₀(z) - [v₀(0)(1 - z/ℓ) + v₀(ℓ) z/ℓ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalState {
    pub v0: f64,
    pub vl: f64,
    pub sine: Vec<f64>,
}

impl ModalState {
    /// Project samples on an odd-count grid onto `modes` sine modes.
    pub fn from_samples(values: &[f64], grid: Grid, modes: usize) -> Result<Self> {
        if values.len() != grid.nodes {
            return Err(Error::InvalidInput("samples do not match the grid".into()));
        }
        let l = grid.length;
        let v0 = values[0];
        let vl = values[values.len() - 1];
        let rest: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let z = grid.z(i);
                v - (v0 * (1.0 - z / l) + vl * z / l)
            })
            .collect();
        let sine = (1..=modes)
            .map(|k| {
                let w: Vec<f64> = rest
                    .iter()
                    .enumerate()
                    .map(|(i, r)| r * (k as f64 * PI * grid.z(i) / l).sin())
                    .collect();
                simpson(&w, grid.step()).map(|s| 2.0 / l * s)
            })
            .collect::<Result<_>>()?;
        Ok(ModalState { v0, vl, sine })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSystem {
    pub a: f64,
    pub length: f64,
    pub mu: GainSchedule,
    /// Sine coefficients of `f`.
    f_modes: Vec<f64>,
    /// `∫ f²`
    k_s: f64,
}

/// Norms of one solution sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorms {
    pub t: f64,
    /// `√(v(0)² + v(ℓ)² + ‖v_z‖²)`
    pub x_norm: f64,
    /// `√(‖v‖_X² + ‖v‖_{L²}²)`
    pub one_norm: f64,
    pub sup: f64,
}

impl TargetSystem {
    /// `f` sampled on `grid` (odd node count), truncated to `modes` sine modes.
    pub fn new(a: f64, mu: GainSchedule, f: &[f64], grid: Grid, modes: usize) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::InvalidInput("a must be > 0".into()));
        }
        mu.validate("mu")?;
        if f.len() != grid.nodes {
            return Err(Error::InvalidInput("f does not match the grid".into()));
        }
        let l = grid.length;
        let f_modes = (1..=modes)
            .map(|k| {
                let w: Vec<f64> = f
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (k as f64 * PI * grid.z(i) / l).sin())
                    .collect();
                simpson(&w, grid.step()).map(|s| 2.0 / l * s)
            })
            .collect::<Result<_>>()?;
        let sq: Vec<f64> = f.iter().map(|v| v * v).collect();
        let k_s = simpson(&sq, grid.step())?;
        Ok(TargetSystem { a, length: l, mu, f_modes, k_s })
    }

    pub fn modes(&self) -> usize {
        self.f_modes.len()
    }

    fn decay(&self, t0: f64, t: f64) -> f64 {
        let mu = &self.mu;
        let integral = if mu.transition.is_none() {
            mu.start * (t - t0)
        } else {
            adaptive_simpson(&|s| mu.at(s), t0, t, 1e-12)
        };
        (-integral).exp()
    }

    /// Solution at time `t` from `init` given at `t0`, as (decay factor,
    /// sine coefficients of the lifted part).
    fn evolve(&self, init: &ModalState, t0: f64, t: f64) -> (f64, Vec<f64>) {
        let l = self.length;
        let dt = t - t0;
        let beta = (1..=self.modes())
            .map(|k| {
                let lam = -self.a * (k as f64 * PI / l).powi(2);
                let b0 = init.sine.get(k - 1).copied().unwrap_or(0.0);
                let inf = self.f_modes[k - 1] * init.v0 / lam;
                inf + (b0 - inf) * (lam * dt).exp()
            })
            .collect();
        (self.decay(t0, t), beta)
    }

    pub fn value(&self, init: &ModalState, t0: f64, t: f64, z: f64) -> f64 {
        let (e, beta) = self.evolve(init, t0, t);
        e * eval_modes(&beta, init, self.length, z)
    }

    pub fn norms(&self, init: &ModalState, t0: f64, t: f64, sup_points: usize) -> TargetNorms {
        let l = self.length;
        let (e, beta) = self.evolve(init, t0, t);
        let (v0, vl) = (init.v0, init.vl);
        let slope = (vl - v0) / l;
        let dz2: f64 = beta
            .iter()
            .enumerate()
            .map(|(k, b)| b * b * ((k + 1) as f64 * PI / l).powi(2) * l / 2.0)
            .sum::<f64>()
            + slope * slope * l;
        let l2_sq: f64 = beta
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let kk = (k + 1) as f64;
                let sign = if (k + 1) % 2 == 0 { 1.0 } else { -1.0 };
                b * b * l / 2.0 + 2.0 * b * l / (kk * PI) * (v0 - vl * sign)
            })
            .sum::<f64>()
            + l * (v0 * v0 + v0 * vl + vl * vl) / 3.0;
        let x_sq = v0 * v0 + vl * vl + dz2;
        let pts = sup_points.max(2);
        let sup = (0..pts)
            .map(|i| eval_modes(&beta, init, l, i as f64 * l / (pts - 1) as f64).abs())
            .fold(0.0, f64::max);
        TargetNorms {
            t,
            x_norm: e * x_sq.sqrt(),
            one_norm: e * (x_sq + l2_sq.max(0.0)).sqrt(),
            sup: e * sup,
        }
    }

    /// Lyapunov weight `p` and the constants `M` of the `X`-norm and sup-norm
    /// bounds for the lower gain bound `eps_minus`.
    pub fn bound_constants(&self, eps_minus: f64) -> (f64, f64, f64) {
        let rho = 1.0 / (2.0 * self.a);
        let p = (rho * self.k_s / eps_minus).max(1.0);
        let m_x = (0.5 * p.max(1.0) / (0.5 * p.min(1.0))).sqrt();
        let l = self.length;
        let r = 4.0 * l * l / (4.0 * l * l + 1.0);
        let r = r.min(0.999 * (2.0 * l).min(1.0));
        let g_minus = 0.5 * p.min(1.0 - r / (2.0 * l)).min(r / (4.0 * l * l)).min(1.0 - r);
        let g_plus = 0.5 * p.max(1.0);
        (p, m_x, (g_plus / g_minus).sqrt())
    }

    /// `exp(-½ ∫_{t0}^{t} μ)`
    pub fn envelope(&self, t0: f64, t: f64) -> f64 {
        self.decay(t0, t).sqrt()
    }
}

fn eval_modes(beta: &[f64], init: &ModalState, l: f64, z: f64) -> f64 {
    let lin = init.v0 * (1.0 - z / l) + init.vl * z / l;
    lin + beta
        .iter()
        .enumerate()
        .map(|(k, b)| b * ((k + 1) as f64 * PI * z / l).sin())
        .sum::<f64>()
}
