//! Time-varying backstepping kernels on triangular domains, observer gains
//! and the boundary feedback laws.
//!
//! Both kernels are instances of one canonical problem on `0 <= q <= p <= ℓ`:
//!
//! ```text
//! ς K_t = a (K_pp - K_qq) - λ(q, t) K,   K(p, 0) = 0,   K(p, p) = -(1/2a) ∫_0^p λ
//! ```
//!
//! The controller kernel is `k(z, s) = K(z, s)` with `ς = +1`, `λ = c* + μ`.
//! The observer kernel is `l(z, s) = K(s, z)` (defined for `z <= s`) with
//! `ς = -1`, `λ = c* + ν`.
//!
//! In characteristic coordinates `ξ = p + q`, `η = p - q` the problem becomes
//! `G = g(ξ) - g(η) + (1/4a) ∫_η^ξ ∫_0^η (λ G + ς G_t)`, solved by successive
//! approximation on a lattice with step `h` in both `ξ` and `η`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatness::SeriesField;
use crate::gevrey::TransitionSchedule;
use crate::numerics::{bracket, cumulative_integral, fd_weights, simpson, Grid};
use crate::steady_state::{ClosedForm, Profile1d};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRole {
    Controller,
    Observer,
}

impl KernelRole {
    fn sign(self) -> f64 {
        match self {
            KernelRole::Controller => 1.0,
            KernelRole::Observer => -1.0,
        }
    }
}

/// `g(t) = start + (end - start) Φ(t)`, or a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub transition: Option<TransitionSchedule>,
}

impl GainSchedule {
    pub fn constant(value: f64) -> Self {
        GainSchedule { start: value, end: value, transition: None }
    }

    pub fn at(&self, t: f64) -> f64 {
        match &self.transition {
            Some(s) => self.start + (self.end - self.start) * s.phi(t, 0).unwrap_or(0.0),
            None => self.start,
        }
    }

    /// Bounds `0 < ε⁻ <= g(t) <= ε⁺ < ∞`.
    pub fn validate(&self, name: &str) -> Result<()> {
        let lo = self.start.min(self.end);
        let hi = self.start.max(self.end);
        if !(lo > 0.0 && hi.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gain {name} must stay in (0, ∞), got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Spatial intervals of the kernel grid.
    pub n: usize,
    /// Spacing of kernel time samples.
    pub dt: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    pub residual_tol: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { n: 50, dt: 0.5, tol: 1e-10, max_sweeps: 200, residual_tol: 1e-4 }
    }
}

/// Canonical kernel problem data.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelProblem {
    pub role: KernelRole,
    pub a: f64,
    pub length: f64,
    pub n: usize,
    pub t_samples: Vec<f64>,
    /// `λ(q, t)` on the half-step grid `q = k ℓ / (2n)`, `k = 0..=2n`, per time sample.
    pub lambda: Vec<Vec<f64>>,
    /// The gain part of `λ` (μ or ν) per time sample.
    pub gain: Vec<f64>,
}

/// Fields along the edge `p = ℓ`, sampled at `q_j = j ℓ / n`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeFields {
    pub value: Vec<Vec<f64>>,
    pub d_q: Vec<Vec<f64>>,
    pub d_qq: Vec<Vec<f64>>,
    pub d_p: Vec<Vec<f64>>,
    pub d_t: Vec<Vec<f64>>,
    /// `λ K + K_t + a K_qq` (controller integral weight).
    pub k_i: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub max_abs: f64,
    pub kernel_norm: f64,
    /// `max_abs / (1 + kernel_norm)`
    pub relative: f64,
    pub sweeps: usize,
    /// Sup-norm change per sweep.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub role: KernelRole,
    pub a: f64,
    pub length: f64,
    pub n: usize,
    pub t_samples: Vec<f64>,
    pub gain: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    /// Lattice half-width; exceeds `n` by a margin past `p = ℓ`.
    pub lattice_n: usize,
    /// Lattice values `G(P, Q)` at index `P (lattice_n+1) + Q` per time sample.
    pub lattice: Vec<Vec<f64>>,
    pub edge: EdgeFields,
    pub residual: ResidualSummary,
}

fn in_domain(n: usize, p: i64, q: i64) -> bool {
    q >= 0 && q <= p && p + q <= 2 * n as i64
}

fn idx(n: usize, p: usize, q: usize) -> usize {
    p * (n + 1) + q
}

/// Time-derivative weights for each sample (5-point, one-sided at the ends).
fn time_weights(t: &[f64]) -> Option<Vec<(usize, Vec<f64>)>> {
    let m = t.len();
    if m < 5 {
        return None;
    }
    Some(
        (0..m)
            .map(|k| {
                let start = k.saturating_sub(2).min(m - 5);
                let w = fd_weights(t[k], &t[start..start + 5], 1);
                (start, w[1].clone())
            })
            .collect(),
    )
}

fn time_derivative(series: &[Vec<f64>], tw: &Option<Vec<(usize, Vec<f64>)>>) -> Vec<Vec<f64>> {
    let len = series.first().map_or(0, |s| s.len());
    match tw {
        None => vec![vec![0.0; len]; series.len()],
        Some(tw) => tw
            .par_iter()
            .map(|(start, w)| {
                let mut out = vec![0.0; len];
                for (j, wj) in w.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&series[start + j]) {
                        *o += wj * v;
                    }
                }
                out
            })
            .collect(),
    }
}

/// Least-squares derivative stencil at lattice point `(p, q)`: weights for
/// `∂_ξ`, `∂_η` and `∂_ξ ∂_η` in lattice units.
struct Stencil {
    points: Vec<usize>,
    d_xi: Vec<f64>,
    d_eta: Vec<f64>,
    d_xi_eta: Vec<f64>,
}

const STENCIL_POINTS: usize = 36;
/// Extra lattice rows solved beyond `p = ℓ`.
const LATTICE_MARGIN: usize = 4;
const STENCIL_DEGREE: i64 = 5;

fn lsq_stencil(n: usize, p: usize, q: usize) -> Result<Stencil> {
    let (pi, qi) = (p as i64, q as i64);
    let mut cand: Vec<(i64, i64)> = Vec::new();
    for dp in -5..=5_i64 {
        for dq in -5..=5_i64 {
            if in_domain(n, pi + dp, qi + dq) {
                cand.push((dp, dq));
            }
        }
    }
    cand.sort_by_key(|&(dp, dq)| (dp * dp + dq * dq, dp, dq));
    cand.truncate(STENCIL_POINTS);
    let monos: Vec<(i32, i32)> = (0..=STENCIL_DEGREE as i32)
        .flat_map(|i| (0..=STENCIL_DEGREE as i32 - i).map(move |j| (i, j)))
        .collect();
    let v = DMatrix::from_fn(cand.len(), monos.len(), |r, c| {
        let (dp, dq) = cand[r];
        (dp as f64).powi(monos[c].0) * (dq as f64).powi(monos[c].1)
    });
    let pinv = v
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidInput(format!("stencil at ({p}, {q}): {e}")))?;
    let row = |mono: (i32, i32)| -> Vec<f64> {
        let c = monos.iter().position(|&m| m == mono).unwrap_or(0);
        (0..cand.len()).map(|r| pinv[(c, r)]).collect()
    };
    Ok(Stencil {
        points: cand
            .iter()
            .map(|&(dp, dq)| idx(n, (pi + dp) as usize, (qi + dq) as usize))
            .collect(),
        d_xi: row((1, 0)),
        d_eta: row((0, 1)),
        d_xi_eta: row((1, 1)),
    })
}

fn apply(weights: &[f64], points: &[usize], values: &[f64]) -> f64 {
    weights.iter().zip(points).map(|(w, &i)| w * values[i]).sum()
}

/// Solve the canonical kernel problem.
pub fn solve_kernel(problem: &KernelProblem, config: &KernelConfig) -> Result<KernelGrid> {
    let n = problem.n;
    let a = problem.a;
    if n < 4 {
        return Err(Error::Config("kernel grid needs at least 4 intervals".into()));
    }
    if !(a > 0.0 && problem.length > 0.0) {
        return Err(Error::InvalidInput("kernel needs a > 0 and ℓ > 0".into()));
    }
    let nt = problem.t_samples.len();
    if nt == 0 || problem.lambda.len() != nt || problem.gain.len() != nt {
        return Err(Error::InvalidInput("kernel time data is inconsistent".into()));
    }
    if problem.lambda.iter().any(|l| l.len() != 2 * n + 1 || l.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(format!("λ must have {} finite half-step samples", 2 * n + 1)));
    }
    let h = problem.length / n as f64;
    let sign = problem.role.sign();
    // Values inside the triangle do not depend on the strip beyond p = ℓ,
    // but solving it keeps quadrature and stencils full width near the edge.
    let n_full = n;
    let n = n + LATTICE_MARGIN;
    let lambda: Vec<Vec<f64>> = problem.lambda.iter().map(|l| extrapolate(l, 2 * n + 1)).collect();
    let size = (2 * n + 1) * (n + 1);
    let tw = time_weights(&problem.t_samples);

    // g(ξ) = -(1/2a) ∫_0^{ξ/2} λ on the half-step grid
    let g: Vec<Vec<f64>> = lambda
        .iter()
        .map(|lam| {
            let mut cum = vec![0.0; lam.len()];
            cumulative_integral(lam, 0.5 * h, &mut cum);
            cum.iter().map(|v| -v / (2.0 * a)).collect()
        })
        .collect();
    let base: Vec<Vec<f64>> = g
        .iter()
        .map(|gk| {
            let mut out = vec![0.0; size];
            for p in 0..=2 * n {
                for q in 0..=p.min(2 * n - p) {
                    out[idx(n, p, q)] = gk[p] - gk[q];
                }
            }
            out
        })
        .collect();

    let sweep = |cur: &[Vec<f64>], cur_t: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..nt)
            .into_par_iter()
            .map(|k| {
                let lam = &lambda[k];
                let gv = &cur[k];
                let gt = &cur_t[k];
                let mut hcol = vec![0.0; size];
                let mut col = Vec::with_capacity(n + 1);
                let mut cum = Vec::with_capacity(2 * n + 1);
                for p in 0..=2 * n {
                    let qmax = p.min(2 * n - p);
                    col.clear();
                    for q in 0..=qmax {
                        let i = idx(n, p, q);
                        col.push(lam[p - q] * gv[i] + sign * gt[i]);
                    }
                    cum.clear();
                    cum.resize(col.len(), 0.0);
                    cumulative_integral(&col, h, &mut cum);
                    for q in 0..=qmax {
                        hcol[idx(n, p, q)] = cum[q];
                    }
                }
                let mut out = base[k].clone();
                let mut row = Vec::with_capacity(2 * n + 1);
                for q in 0..=n {
                    row.clear();
                    for p in q..=2 * n - q {
                        row.push(hcol[idx(n, p, q)]);
                    }
                    cum.clear();
                    cum.resize(row.len(), 0.0);
                    cumulative_integral(&row, h, &mut cum);
                    for (off, p) in (q..=2 * n - q).enumerate() {
                        out[idx(n, p, q)] += cum[off] / (4.0 * a);
                    }
                }
                out
            })
            .collect()
    };

    let mut cur = base.clone();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_sweeps {
        let cur_t = time_derivative(&cur, &tw);
        let next = sweep(&cur, &cur_t);
        let mut change = 0.0_f64;
        let mut norm = 0.0_f64;
        for (u, v) in next.iter().zip(&cur) {
            for (x, y) in u.iter().zip(v) {
                change = change.max((x - y).abs());
                norm = norm.max(x.abs());
            }
        }
        cur = next;
        history.push(change);
        if !change.is_finite() {
            break;
        }
        if change < config.tol * norm.max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        let tail: Vec<String> = history.iter().rev().take(5).map(|c| format!("{c:.3e}")).collect();
        return Err(Error::NonConvergence {
            what: format!("{:?} kernel", problem.role),
            detail: format!("{} sweeps, last changes [{}]", history.len(), tail.join(", ")),
        });
    }

    let cur_t = time_derivative(&cur, &tw);
    let residual = kernel_residual(problem, n, &cur, &cur_t, history)?;
    let edge = edge_fields(problem, n, &cur, &cur_t)?;
    Ok(KernelGrid {
        role: problem.role,
        a,
        length: problem.length,
        n: n_full,
        lattice_n: n,
        t_samples: problem.t_samples.clone(),
        gain: problem.gain.clone(),
        lambda: problem.lambda.clone(),
        lattice: cur,
        edge,
        residual,
    })
}

/// Continue `values` to `len` samples with a cubic through the last four.
fn extrapolate(values: &[f64], len: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    let m = values.len();
    if m < 4 {
        out.resize(len, *values.last().unwrap_or(&0.0));
        return out;
    }
    let xs: Vec<f64> = (m - 4..m).map(|i| i as f64).collect();
    for k in m..len {
        let w = fd_weights(k as f64, &xs, 0);
        out.push(w[0].iter().zip(&values[m - 4..]).map(|(a, b)| a * b).sum());
    }
    out
}

fn kernel_residual(
    problem: &KernelProblem,
    lattice_n: usize,
    values: &[Vec<f64>],
    dt: &[Vec<f64>],
    history: Vec<f64>,
) -> Result<ResidualSummary> {
    let n = problem.n;
    let h = problem.length / n as f64;
    let a = problem.a;
    let sign = problem.role.sign();
    let mut interior = Vec::new();
    for p in 1..2 * n {
        for q in 1..p.min(2 * n - p) {
            if q < p && p + q < 2 * n {
                interior.push((p, q));
            }
        }
    }
    let stencils: Vec<(usize, usize, Stencil)> = interior
        .par_iter()
        .map(|&(p, q)| lsq_stencil(lattice_n, p, q).map(|s| (p, q, s)))
        .collect::<Result<_>>()?;
    let max_abs_res = (0..values.len())
        .into_par_iter()
        .map(|k| {
            let v = &values[k];
            stencils.iter().fold(0.0_f64, |m, (p, q, s)| {
                let i = idx(lattice_n, *p, *q);
                let mixed = 4.0 * apply(&s.d_xi_eta, &s.points, v) / (h * h);
                let r = sign * dt[k][i] - a * mixed + problem.lambda[k][p - q] * v[i];
                m.max(r.abs())
            })
        })
        .reduce(|| 0.0, f64::max);
    let kernel_norm = values
        .iter()
        .map(|v| {
            (0..=2 * n)
                .flat_map(|p| (0..=p.min(2 * n - p)).map(move |q| (p, q)))
                .fold(0.0_f64, |m, (p, q)| m.max(v[idx(lattice_n, p, q)].abs()))
        })
        .fold(0.0, f64::max);
    Ok(ResidualSummary {
        max_abs: max_abs_res,
        kernel_norm,
        relative: max_abs_res / (1.0 + kernel_norm),
        sweeps: history.len(),
        history,
    })
}

fn edge_fields(
    problem: &KernelProblem,
    lattice_n: usize,
    values: &[Vec<f64>],
    dt: &[Vec<f64>],
) -> Result<EdgeFields> {
    let n = problem.n;
    let h = problem.length / n as f64;
    let a = problem.a;
    // point j on the edge p = ℓ is lattice (n + j, n - j), q = j h
    let edge_idx: Vec<usize> = (0..=n).map(|j| idx(lattice_n, n + j, n - j)).collect();
    let qs: Vec<f64> = (0..=n).map(|j| j as f64 * h).collect();
    let width = 6.min(n + 1);
    let tangential: Vec<(usize, Vec<Vec<f64>>)> = (0..=n)
        .map(|j| {
            let start = j.saturating_sub(width / 2).min(n + 1 - width);
            (start, fd_weights(qs[j], &qs[start..start + width], 2))
        })
        .collect();
    let normal: Vec<Stencil> =
        (0..=n).map(|j| lsq_stencil(lattice_n, n + j, n - j)).collect::<Result<_>>()?;

    let mut out = EdgeFields::default();
    for (k, v) in values.iter().enumerate() {
        let val: Vec<f64> = edge_idx.iter().map(|&i| v[i]).collect();
        let mut dq = vec![0.0; n + 1];
        let mut dqq = vec![0.0; n + 1];
        for (j, (start, w)) in tangential.iter().enumerate() {
            for (o, wj) in w[1].iter().enumerate() {
                dq[j] += wj * val[start + o];
            }
            for (o, wj) in w[2].iter().enumerate() {
                dqq[j] += wj * val[start + o];
            }
        }
        // ∂_p = ∂_ξ + ∂_η in lattice units
        let dp: Vec<f64> = normal
            .iter()
            .map(|s| (apply(&s.d_xi, &s.points, v) + apply(&s.d_eta, &s.points, v)) / h)
            .collect();
        let dtv: Vec<f64> = edge_idx.iter().map(|&i| dt[k][i]).collect();
        let lam = &problem.lambda[k];
        let ki: Vec<f64> = (0..=n).map(|j| lam[2 * j] * val[j] + dtv[j] + a * dqq[j]).collect();
        out.value.push(val);
        out.d_q.push(dq);
        out.d_qq.push(dqq);
        out.d_p.push(dp);
        out.d_t.push(dtv);
        out.k_i.push(ki);
    }
    Ok(out)
}

impl KernelGrid {
    /// `K(p, q)` at lattice-aligned kernel node `(i, j)`, `j <= i`, in canonical
    /// orientation.
    pub fn canonical(&self, k: usize, i: usize, j: usize) -> f64 {
        self.lattice[k][idx(self.lattice_n, i + j, i - j)]
    }

    /// Kernel value in the role's own coordinates: `k(z_i, s_j)` with `j <= i`
    /// for the controller, `l(z_i, s_j)` with `i <= j` for the observer.
    pub fn value(&self, k: usize, i: usize, j: usize) -> f64 {
        match self.role {
            KernelRole::Controller => self.canonical(k, i, j),
            KernelRole::Observer => self.canonical(k, j, i),
        }
    }

    pub fn certified(&self, tol: f64) -> bool {
        self.residual.relative <= tol
    }

    /// Edge fields at time `t`, linear in time and resampled onto `nodes`
    /// equally spaced points along the edge.
    pub fn edge_at(&self, t: f64, nodes: usize) -> Result<EdgeSnapshot> {
        if nodes < 2 {
            return Err(Error::InvalidInput("edge needs at least 2 nodes".into()));
        }
        let (k, w) = bracket(&self.t_samples, t);
        let k1 = (k + 1).min(self.t_samples.len() - 1);
        let lerp_t = |f: &Vec<Vec<f64>>, j: usize| (1.0 - w) * f[k][j] + w * f[k1][j];
        let resample = |f: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..nodes)
                .map(|m| {
                    let pos = m as f64 * self.n as f64 / (nodes - 1) as f64;
                    let j = (pos.floor() as usize).min(self.n - 1);
                    let r = pos - j as f64;
                    (1.0 - r) * lerp_t(f, j) + r * lerp_t(f, j + 1)
                })
                .collect()
        };
        Ok(EdgeSnapshot {
            value: resample(&self.edge.value),
            d_q: resample(&self.edge.d_q),
            d_p: resample(&self.edge.d_p),
            k_i: resample(&self.edge.k_i),
            gain: (1.0 - w) * self.gain[k] + w * self.gain[k1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSnapshot {
    pub value: Vec<f64>,
    pub d_q: Vec<f64>,
    pub d_p: Vec<f64>,
    pub k_i: Vec<f64>,
    pub gain: f64,
}

fn kernel_times(field: &SeriesField, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config("kernel time step must be > 0".into()));
    }
    let t0 = field.t_samples[0];
    let t1 = *field.t_samples.last().unwrap_or(&t0);
    let steps = ((t1 - t0) / dt).round() as usize;
    Ok((0..=steps).map(|k| (t0 + k as f64 * dt).min(t1)).collect())
}

/// `c*(q, t)` on the half-step kernel grid, linear in time between field samples.
fn c_star_half(field: &SeriesField, n: usize, length: f64, t: f64) -> Vec<f64> {
    let (k, w) = bracket(&field.t_samples, t);
    let k1 = (k + 1).min(field.t_samples.len() - 1);
    let row: Vec<f64> =
        field.c[k].iter().zip(&field.c[k1]).map(|(u, v)| (1.0 - w) * u + w * v).collect();
    let prof = Profile1d { grid: field.grid, values: row, form: ClosedForm::Numeric, degenerate: false };
    (0..=2 * n)
        .map(|m| {
            let q = m as f64 * length / (2 * n) as f64;
            match field.grid.node_of(q) {
                Some(i) => prof.values[i],
                None => prof.eval(q, 0),
            }
        })
        .collect()
}

fn problem_from_field(
    role: KernelRole,
    field: &SeriesField,
    gain: &GainSchedule,
    config: &KernelConfig,
) -> Result<KernelProblem> {
    let t_samples = kernel_times(field, config.dt)?;
    let length = field.grid.length;
    let gains: Vec<f64> = t_samples.iter().map(|&t| gain.at(t)).collect();
    let lambda = t_samples
        .iter()
        .zip(&gains)
        .map(|(&t, g)| c_star_half(field, config.n, length, t).into_iter().map(|c| c + g).collect())
        .collect();
    Ok(KernelProblem { role, a: field.a, length, n: config.n, t_samples, lambda, gain: gains })
}

pub fn solve_controller_kernel(
    c_star: &SeriesField,
    mu: &GainSchedule,
    config: &KernelConfig,
) -> Result<KernelGrid> {
    mu.validate("mu")?;
    solve_kernel(&problem_from_field(KernelRole::Controller, c_star, mu, config)?, config)
}

pub fn solve_observer_kernel(
    c_star: &SeriesField,
    nu: &GainSchedule,
    config: &KernelConfig,
) -> Result<KernelGrid> {
    nu.validate("nu")?;
    solve_kernel(&problem_from_field(KernelRole::Observer, c_star, nu, config)?, config)
}

/// Output-injection weights, `[t][z_j]` on the kernel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    pub t_samples: Vec<f64>,
    pub grid: Grid,
    pub l_gain: Vec<Vec<f64>>,
    pub m_gain: Vec<Vec<f64>>,
    pub l0: Vec<f64>,
    pub ll: Vec<f64>,
}

pub fn observer_gains(kernel: &KernelGrid) -> Result<ObserverGains> {
    if kernel.role != KernelRole::Observer {
        return Err(Error::InvalidInput("observer gains need an observer kernel".into()));
    }
    let a = kernel.a;
    let n = kernel.n;
    let mut l_gain = Vec::with_capacity(kernel.t_samples.len());
    let mut m_gain = Vec::with_capacity(kernel.t_samples.len());
    for k in 0..kernel.t_samples.len() {
        let l_edge = &kernel.edge.value[k];
        let ls_edge = &kernel.edge.d_p[k];
        let lll = l_edge[n];
        l_gain.push((0..=n).map(|j| -a * (l_edge[j] * lll + ls_edge[j])).collect());
        m_gain.push(l_edge.iter().map(|v| a * v).collect());
    }
    Ok(ObserverGains {
        t_samples: kernel.t_samples.clone(),
        grid: Grid::new(kernel.length, n + 1)?,
        l_gain,
        m_gain,
        l0: kernel.gain.clone(),
        ll: kernel.gain.clone(),
    })
}

impl ObserverGains {
    /// `(L, M, l0, lℓ)` at time `t` on `nodes` equally spaced points.
    pub fn at(&self, t: f64, nodes: usize) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let (k, w) = bracket(&self.t_samples, t);
        let k1 = (k + 1).min(self.t_samples.len() - 1);
        let n = self.grid.nodes - 1;
        let resample = |f: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..nodes)
                .map(|m| {
                    let pos = m as f64 * n as f64 / (nodes - 1).max(1) as f64;
                    let j = (pos.floor() as usize).min(n - 1);
                    let r = pos - j as f64;
                    let at = |jj: usize| (1.0 - w) * f[k][jj] + w * f[k1][jj];
                    (1.0 - r) * at(j) + r * at(j + 1)
                })
                .collect()
        };
        let lin = |v: &Vec<f64>| (1.0 - w) * v[k] + w * v[k1];
        (resample(&self.l_gain), resample(&self.m_gain), lin(&self.l0), lin(&self.ll))
    }
}

/// `Δu₀ = -μ x̃(0)`
pub fn feedback_u0(x_err_0: f64, mu_t: f64) -> f64 {
    -mu_t * x_err_0
}

/// Boundary feedback at `z = ℓ` from the kernel edge snapshot on the same
/// nodes as `x_err`.
pub fn feedback_ul_snapshot(x_err: &[f64], dz_x_err_at_l: f64, edge: &EdgeSnapshot, mu_t: f64, a: f64, h: f64) -> Result<f64> {
    let n = x_err.len();
    if edge.value.len() != n {
        return Err(Error::InvalidInput("kernel snapshot does not match the error grid".into()));
    }
    let integrand: Vec<f64> = edge.k_i.iter().zip(x_err).map(|(k, x)| k * x).collect();
    let integral = simpson(&integrand, h)?;
    Ok(-(mu_t + a * edge.d_q[n - 1]) * x_err[n - 1]
        + integral
        + a * edge.value[n - 1] * dz_x_err_at_l
        + a * edge.d_q[0] * x_err[0])
}

/// `Δu_ℓ` for the controller kernel at time `t`; `x_err` on an odd-count
/// uniform grid over `[0, ℓ]`.
pub fn feedback_ul(
    x_err: &[f64],
    dz_x_err_at_l: f64,
    kernel: &KernelGrid,
    mu_t: f64,
    a: f64,
    t: f64,
) -> Result<f64> {
    if kernel.role != KernelRole::Controller {
        return Err(Error::InvalidInput("feedback needs a controller kernel".into()));
    }
    if x_err.len() < 3 || x_err.len() % 2 == 0 {
        return Err(Error::Config(format!(
            "Simpson feedback integral needs an odd node count, got {}",
            x_err.len()
        )));
    }
    let edge = kernel.edge_at(t, x_err.len())?;
    let h = kernel.length / (x_err.len() - 1) as f64;
    feedback_ul_snapshot(x_err, dz_x_err_at_l, &edge, mu_t, a, h)
}
