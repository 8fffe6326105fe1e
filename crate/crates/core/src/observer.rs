//! Luenberger observer for the position field driven by the boundary
//! measurements `x(0)`, `x(ℓ)` and `∂_z x(ℓ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Grid;

/// Real-axis stability limit of classical RK4.
const RK4_LIMIT: f64 = 2.78;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub x_at_0: f64,
    pub x_at_l: f64,
    pub dz_x_at_l: f64,
}

/// `(3 v_N - 4 v_{N-1} + v_{N-2}) / (2 Δz)`
pub fn one_sided_slope(values: &[f64], dz: f64) -> f64 {
    let n = values.len();
    (3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) / (2.0 * dz)
}

impl Measurements {
    pub fn from_positions(x: &[f64], dz: f64) -> Result<Self> {
        if x.len() < 3 {
            return Err(Error::InvalidInput("measurements need at least 3 agents".into()));
        }
        let m = Measurements {
            x_at_0: x[0],
            x_at_l: x[x.len() - 1],
            dz_x_at_l: one_sided_slope(x, dz),
        };
        if !(m.x_at_0.is_finite() && m.x_at_l.is_finite() && m.dz_x_at_l.is_finite()) {
            return Err(Error::InvalidInput("non-finite measurement".into()));
        }
        Ok(m)
    }
}

/// Injection weights sampled on the observer nodes at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSnapshot {
    pub l: Vec<f64>,
    pub m: Vec<f64>,
    pub l0: f64,
    pub ll: f64,
}

impl GainSnapshot {
    pub fn zero(nodes: usize, l0: f64, ll: f64) -> Self {
        GainSnapshot { l: vec![0.0; nodes], m: vec![0.0; nodes], l0, ll }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverField {
    pub grid: Grid,
    pub x_hat: Vec<f64>,
    pub t: f64,
}

impl ObserverField {
    pub fn new(grid: Grid, x_hat: Vec<f64>, t: f64) -> Result<Self> {
        if x_hat.len() != grid.nodes || grid.nodes < 3 {
            return Err(Error::InvalidInput(format!(
                "observer state has {} values for {} nodes",
                x_hat.len(),
                grid.nodes
            )));
        }
        if x_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observer state is not finite".into()));
        }
        Ok(ObserverField { grid, x_hat, t })
    }
}

/// Output errors `(x(0) - x̂(0), x(ℓ) - x̂(ℓ), ∂_z x(ℓ) - ∂_z x̂(ℓ))`.
pub fn innovation(meas: &Measurements, xh: &[f64], dz: f64) -> [f64; 3] {
    [
        meas.x_at_0 - xh[0],
        meas.x_at_l - xh[xh.len() - 1],
        meas.dz_x_at_l - one_sided_slope(xh, dz),
    ]
}

fn rhs(
    xh: &[f64],
    inn: [f64; 3],
    gains: &GainSnapshot,
    inputs: (f64, f64),
    c: &[f64],
    a: f64,
    dz: f64,
    out: &mut [f64],
) {
    let n = xh.len();
    let diff = a / (dz * dz);
    let [e_0, e_l, e_dl] = inn;
    for j in 1..n - 1 {
        out[j] = diff * (xh[j + 1] - 2.0 * xh[j] + xh[j - 1])
            + c[j] * xh[j]
            + gains.l[j] * e_l
            + gains.m[j] * e_dl;
    }
    out[0] = inputs.0 + gains.l0 * e_0;
    out[n - 1] = inputs.1 + gains.ll * e_l;
}

/// Gershgorin bound on the spectral radius of the uninjected copy.
pub fn spectral_bound(c: &[f64], a: f64, dz: f64) -> f64 {
    let diff = a / (dz * dz);
    c[1..c.len() - 1]
        .iter()
        .map(|cj| (cj - 2.0 * diff).abs() + 2.0 * diff)
        .fold(0.0, f64::max)
}

/// Advance the estimate by `dt` with RK4. The output injection is evaluated
/// once from the measurements and the estimate at the start of the step and
/// held, as are inputs, gains and `c*`.
pub fn observer_step(
    state: &ObserverField,
    meas: &Measurements,
    gains: &GainSnapshot,
    inputs: (f64, f64),
    c_star: &[f64],
    a: f64,
    dt: f64,
) -> Result<ObserverField> {
    let n = state.x_hat.len();
    if c_star.len() != n || gains.l.len() != n || gains.m.len() != n {
        return Err(Error::InvalidInput("observer data lengths disagree with the grid".into()));
    }
    let dz = state.grid.step();
    let rho = spectral_bound(c_star, a, dz);
    if !(dt > 0.0) || dt * rho > RK4_LIMIT {
        return Err(Error::Config(format!(
            "observer step {dt} exceeds the RK4 stability bound {:.4e}",
            RK4_LIMIT / rho
        )));
    }
    let inn = innovation(meas, &state.x_hat, dz);
    let f = |y: &[f64], out: &mut [f64]| rhs(y, inn, gains, inputs, c_star, a, dz, out);
    let x_hat = rk4(&state.x_hat, dt, f);
    ObserverField::new(state.grid, x_hat, state.t + dt)
}

pub(crate) fn rk4<F: Fn(&[f64], &mut [f64])>(y: &[f64], dt: f64, f: F) -> Vec<f64> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + dt * k3[i];
    }
    f(&tmp, &mut k4);
    (0..n)
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// `r` in `‖ε‖ ≈ C e^{-r t}`.
    pub rate: f64,
    pub log_intercept: f64,
    /// RMS residual of the log-linear fit.
    pub residual: f64,
    /// Set when the trace is not decaying or spans less than a decade.
    pub warning: bool,
}

/// Least-squares slope of `ln ‖ε‖` against time.
pub fn observer_error_decay_fit(times: &[f64], norms: &[f64]) -> Result<DecayFit> {
    if times.len() != norms.len() {
        return Err(Error::InvalidInput("times and norms differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(norms)
        .filter(|(t, v)| t.is_finite() && v.is_finite() && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidInput("decay fit needs at least two positive samples".into()));
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::InvalidInput("decay fit needs distinct times".into()));
    }
    let sty: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let slope = sty / stt;
    let intercept = ym - slope * tm;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / m).sqrt();
    let (lo, hi) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let decade = hi - lo >= std::f64::consts::LN_10;
    Ok(DecayFit {
        rate: -slope,
        log_intercept: intercept,
        residual,
        warning: slope >= 0.0 || !decade,
    })
}
