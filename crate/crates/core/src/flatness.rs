//! Flatness-based motion planning for the coupled position/reaction field.
//!
//! The flat outputs are the value and slope of each field at `z = ξ`.
//! The full state follows from the formal integration series
//! `η = Σ η_n`, with `η_0 = y₁ + (z-ξ) y₂` and
//! `η_n = ∬_ξ (∂_t η_{n-1} - q η_{n-1}) / coef`, evaluated per time sample
//! on stacks of time derivatives.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gevrey::{gevrey_bound_estimate, DerivativeSample, TransitionSchedule};
use crate::numerics::{anchored_double_integral, uniform_derivative, Grid};
use crate::steady_state::{ClosedForm, Profile1d, SteadyProfile};

/// A keyframe profile reached at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    pub profile: SteadyProfile,
}

/// Flat outputs `y₁* = [x̄(ξ), c̄(ξ)]`, `y₂* = [∂_z x̄(ξ), ∂_z c̄(ξ)]`.
pub fn flat_steady_values(profile: &SteadyProfile, xi: f64) -> Result<([f64; 2], [f64; 2])> {
    let len = profile.grid().length;
    if !(xi.is_finite() && (0.0..=len).contains(&xi)) {
        return Err(Error::InvalidInput(format!("flat output location {xi} outside [0, {len}]")));
    }
    Ok((
        [profile.x.eval(xi, 0), profile.c.eval(xi, 0)],
        [profile.x.eval(xi, 1), profile.c.eval(xi, 1)],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatOutputTrajectory {
    pub xi: f64,
    pub keyframes: Vec<Keyframe>,
    /// `[x, c]` per keyframe.
    pub y1: Vec<[f64; 2]>,
    pub y2: Vec<[f64; 2]>,
    /// One schedule per segment between consecutive keyframes.
    pub schedules: Vec<TransitionSchedule>,
}

/// Piecewise Gevrey interpolation of the flat outputs between keyframes.
pub fn assign_flat_trajectory(
    keyframes: &[Keyframe],
    xi: f64,
    schedules: &[TransitionSchedule],
) -> Result<FlatOutputTrajectory> {
    if keyframes.len() < 2 {
        return Err(Error::Config("at least two keyframes are required".into()));
    }
    if schedules.len() != keyframes.len() - 1 {
        return Err(Error::Config(format!(
            "{} keyframes need {} schedules, got {}",
            keyframes.len(),
            keyframes.len() - 1,
            schedules.len()
        )));
    }
    for (j, w) in keyframes.windows(2).enumerate() {
        if w[1].t <= w[0].t {
            return Err(Error::Config(format!("keyframe times must increase (keyframe {})", j + 1)));
        }
        let s = &schedules[j];
        let slack = 1e-9 * w[1].t.abs().max(1.0);
        if s.t0 < w[0].t - slack || s.end() > w[1].t + slack {
            return Err(Error::Config(format!(
                "schedule {j} [{}, {}] overlaps keyframe window [{}, {}]",
                s.t0,
                s.end(),
                w[0].t,
                w[1].t
            )));
        }
    }
    let grid = keyframes[0].profile.grid();
    for k in keyframes {
        if k.profile.grid() != grid {
            return Err(Error::Config("keyframe profiles must share one grid".into()));
        }
    }
    let mut y1 = Vec::with_capacity(keyframes.len());
    let mut y2 = Vec::with_capacity(keyframes.len());
    for k in keyframes {
        let (a, b) = flat_steady_values(&k.profile, xi)?;
        y1.push(a);
        y2.push(b);
    }
    Ok(FlatOutputTrajectory {
        xi,
        keyframes: keyframes.to_vec(),
        y1,
        y2,
        schedules: schedules.to_vec(),
    })
}

impl FlatOutputTrajectory {
    /// Segment whose window contains `t`, and the transition stack `Φ^(0..=k)`.
    fn phase(&self, t: f64, k: usize) -> Result<(usize, Vec<f64>)> {
        let last = self.keyframes.len() - 1;
        if t <= self.keyframes[0].t {
            let mut v = vec![0.0; k + 1];
            v[0] = 0.0;
            return Ok((0, v));
        }
        for j in 0..last {
            if t <= self.keyframes[j + 1].t {
                return Ok((j, self.schedules[j].phi_stack(t, k)?));
            }
        }
        let mut v = vec![0.0; k + 1];
        v[0] = 1.0;
        Ok((last - 1, v))
    }

    /// `d^m/dt^m` of `y₁` (`slope = false`) or `y₂` for state 0 (x) or 1 (c).
    pub fn output_stack(&self, t: f64, state: usize, slope: bool, k: usize) -> Result<Vec<f64>> {
        let (j, phi) = self.phase(t, k)?;
        let ys = if slope { &self.y2 } else { &self.y1 };
        let (y0, y1) = (ys[j][state], ys[j + 1][state]);
        Ok(phi
            .iter()
            .enumerate()
            .map(|(m, p)| if m == 0 { y0 + (y1 - y0) * p } else { (y1 - y0) * p })
            .collect())
    }

    pub fn output(&self, t: f64, state: usize, slope: bool, k: usize) -> Result<f64> {
        Ok(self.output_stack(t, state, slope, k)?[k])
    }

    fn alpha(&self) -> f64 {
        self.schedules.iter().map(|s| s.alpha()).fold(1.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionMode {
    /// `c*(z,t)` blends the keyframe profiles directly with the transition.
    #[default]
    Explicit,
    /// `c*` is itself parametrised through its own diffusion equation.
    Series,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub n_max: usize,
    pub eps: f64,
    pub mode: ReactionMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { n_max: 25, eps: 1e-10, mode: ReactionMode::Explicit }
    }
}

/// Parametrised state on a space–time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesField {
    pub grid: Grid,
    pub t_samples: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub mode: ReactionMode,
    pub alpha: f64,
    /// `[t][z]`
    pub x: Vec<Vec<f64>>,
    pub dt_x: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub dt_c: Vec<Vec<f64>>,
    /// Reaction source `d*`, only in series mode.
    pub d: Vec<Vec<f64>>,
    pub n_used_x: usize,
    pub n_used_c: usize,
    pub tail_x: f64,
    pub tail_c: f64,
    /// Max over time of `sup_z |η_n|` per term.
    pub term_norms_x: Vec<f64>,
    pub term_norms_c: Vec<f64>,
}

struct SeriesSum {
    sum: Vec<Vec<f64>>,
    norms: Vec<f64>,
    n_used: usize,
    tail: f64,
}

fn binomials(k: usize) -> Vec<Vec<f64>> {
    let mut b = vec![vec![0.0; k + 1]; k + 1];
    for n in 0..=k {
        b[n][0] = 1.0;
        for j in 1..=n {
            b[n][j] = b[n - 1][j - 1] + if j < n { b[n - 1][j] } else { 0.0 };
        }
    }
    b
}

/// Formal integration series for `∂_t η = coef ∂_z² η + q η` from the
/// initial stack `init[m] = ∂_t^m η_0` and the stack of `q`.
#[allow(clippy::too_many_arguments)]
fn run_series(
    init: Vec<Vec<f64>>,
    q: &[Vec<f64>],
    coef: f64,
    h: f64,
    anchor: usize,
    n_max: usize,
    eps: f64,
    keep: usize,
    binom: &[Vec<f64>],
) -> std::result::Result<SeriesSum, (usize, f64)> {
    let nz = init[0].len();
    let mut sum: Vec<Vec<f64>> = init.iter().take(keep + 1).cloned().collect();
    let mut norms = Vec::with_capacity(n_max);
    let norm = |s: &[Vec<f64>]| {
        s.iter()
            .take(2)
            .flat_map(|v| v.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    };
    let mut term = init;
    let mut tail = norm(&term);
    norms.push(tail);
    let mut n_used = 1;
    let mut rhs = vec![0.0; nz];
    let mut single = vec![0.0; nz];
    while tail >= eps {
        if n_used >= n_max {
            return Err((n_used, tail));
        }
        let orders = term.len() - 1;
        let mut next = Vec::with_capacity(orders);
        for m in 0..orders {
            for i in 0..nz {
                let mut acc = term[m + 1][i];
                for j in 0..=m {
                    acc -= binom[m][j] * q[j][i] * term[m - j][i];
                }
                rhs[i] = acc / coef;
            }
            let mut out = vec![0.0; nz];
            anchored_double_integral(&rhs, h, anchor, &mut single, &mut out);
            next.push(out);
        }
        term = next;
        for (m, s) in sum.iter_mut().enumerate() {
            if let Some(t) = term.get(m) {
                s.iter_mut().zip(t).for_each(|(a, b)| *a += b);
            }
        }
        tail = norm(&term);
        norms.push(tail);
        n_used += 1;
    }
    Ok(SeriesSum { sum, norms, n_used, tail })
}

fn profile_on(profile: &Profile1d, zs: &[f64]) -> Vec<f64> {
    zs.iter().map(|&z| profile.eval(z, 0)).collect()
}

fn array_on(values: &[f64], source: Grid, zs: &[f64]) -> Vec<f64> {
    let p = Profile1d { grid: source, values: values.to_vec(), form: ClosedForm::Numeric, degenerate: false };
    profile_on(&p, zs)
}

struct SampleOut {
    x: Vec<f64>,
    dt_x: Vec<f64>,
    c: Vec<f64>,
    dt_c: Vec<f64>,
    d: Vec<f64>,
    x_sum: SeriesSum,
    c_sum: Option<SeriesSum>,
}

/// Evaluate the parametrised state `η* = [x*, c*]` and `∂_t η*`.
pub fn parametrize_state(
    traj: &FlatOutputTrajectory,
    grid: Grid,
    t_samples: &[f64],
    config: &PlannerConfig,
) -> Result<SeriesField> {
    let anchor = grid.node_of(traj.xi).ok_or_else(|| {
        Error::InvalidInput(format!("flat output location {} is not a grid node", traj.xi))
    })?;
    if config.n_max < 2 {
        return Err(Error::Config("series needs n_max >= 2".into()));
    }
    if t_samples.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("time samples must increase".into()));
    }
    let kx = config.n_max;
    let kc = 2 * config.n_max;
    let k_top = match config.mode {
        ReactionMode::Explicit => kx,
        ReactionMode::Series => kc,
    };
    if let Some(s) = traj.schedules.iter().find(|s| s.k_max < k_top) {
        return Err(Error::UnsupportedOrder { requested: k_top, max: s.k_max });
    }
    let zs = grid.points();
    let h = grid.step();
    let src = traj.keyframes[0].profile.grid();
    let a = traj.keyframes[0].profile.a;
    let b = traj.keyframes[0].profile.b;
    let c_frames: Vec<Vec<f64>> = traj.keyframes.iter().map(|k| profile_on(&k.profile.c, &zs)).collect();
    let d_frames: Vec<Vec<f64>> =
        traj.keyframes.iter().map(|k| array_on(&k.profile.d_bar, src, &zs)).collect();
    let binom = binomials(k_top + 1);
    let xi = traj.xi;

    let blend = |frames: &[Vec<f64>], j: usize, phi: &[f64], k: usize| -> Vec<Vec<f64>> {
        (0..=k)
            .map(|m| {
                frames[j]
                    .iter()
                    .zip(&frames[j + 1])
                    .map(|(u, v)| if m == 0 { u + (v - u) * phi[0] } else { (v - u) * phi[m] })
                    .collect()
            })
            .collect()
    };
    let initial = |state: usize, t: f64, k: usize| -> Result<Vec<Vec<f64>>> {
        let y1 = traj.output_stack(t, state, false, k)?;
        let y2 = traj.output_stack(t, state, true, k)?;
        Ok((0..=k)
            .map(|m| zs.iter().map(|z| y1[m] + (z - xi) * y2[m]).collect())
            .collect())
    };

    let sample = |t: f64| -> Result<SampleOut> {
        let (j, phi) = traj.phase(t, k_top)?;
        let (c_stack, c_sum, d_now) = match config.mode {
            ReactionMode::Explicit => (blend(&c_frames, j, &phi, kx), None, Vec::new()),
            ReactionMode::Series => {
                let d_stack = blend(&d_frames, j, &phi, kc);
                let init = initial(1, t, kc)?;
                let s = run_series(init, &d_stack, b, h, anchor, config.n_max, config.eps, kx, &binom)
                    .map_err(|(n, tail)| Error::NonConvergence {
                        what: "reaction series".into(),
                        detail: format!("tail {tail:.3e} after {n} terms at t = {t}"),
                    })?;
                let d0 = d_stack[0].clone();
                (s.sum.clone(), Some(s), d0)
            }
        };
        let init = initial(0, t, kx)?;
        let xs = run_series(init, &c_stack, a, h, anchor, config.n_max, config.eps, 1, &binom)
            .map_err(|(n, tail)| Error::NonConvergence {
                what: "position series".into(),
                detail: format!("tail {tail:.3e} after {n} terms at t = {t}"),
            })?;
        Ok(SampleOut {
            x: xs.sum[0].clone(),
            dt_x: xs.sum[1].clone(),
            c: c_stack[0].clone(),
            dt_c: c_stack[1].clone(),
            d: d_now,
            x_sum: xs,
            c_sum,
        })
    };

    let outs: Vec<SampleOut> = t_samples.par_iter().map(|&t| sample(t)).collect::<Result<_>>()?;

    let merge = |acc: &mut Vec<f64>, norms: &[f64]| {
        if acc.len() < norms.len() {
            acc.resize(norms.len(), 0.0);
        }
        for (a, n) in acc.iter_mut().zip(norms) {
            *a = a.max(*n);
        }
    };
    let mut field = SeriesField {
        grid,
        t_samples: t_samples.to_vec(),
        a,
        b,
        mode: config.mode,
        alpha: traj.alpha(),
        x: Vec::with_capacity(outs.len()),
        dt_x: Vec::with_capacity(outs.len()),
        c: Vec::with_capacity(outs.len()),
        dt_c: Vec::with_capacity(outs.len()),
        d: Vec::new(),
        n_used_x: 0,
        n_used_c: 0,
        tail_x: 0.0,
        tail_c: 0.0,
        term_norms_x: Vec::new(),
        term_norms_c: Vec::new(),
    };
    for o in outs {
        field.n_used_x = field.n_used_x.max(o.x_sum.n_used);
        field.tail_x = field.tail_x.max(o.x_sum.tail);
        merge(&mut field.term_norms_x, &o.x_sum.norms);
        if let Some(cs) = &o.c_sum {
            field.n_used_c = field.n_used_c.max(cs.n_used);
            field.tail_c = field.tail_c.max(cs.tail);
            merge(&mut field.term_norms_c, &cs.norms);
            field.d.push(o.d);
        }
        field.x.push(o.x);
        field.dt_x.push(o.dt_x);
        field.c.push(o.c);
        field.dt_c.push(o.dt_c);
    }
    Ok(field)
}

impl SeriesField {
    /// Relative residuals of the position and reaction equations on interior
    /// nodes (fourth-order differences in `z`).
    pub fn pde_residual(&self) -> (f64, f64) {
        let h = self.grid.step();
        let n = self.grid.nodes;
        let mut res = [0.0_f64; 2];
        let mut scale = [0.0_f64; 2];
        for (k, _) in self.t_samples.iter().enumerate() {
            for i in 2..n.saturating_sub(2) {
                let xzz = uniform_derivative(&self.x[k], h, i, 2, 5);
                let terms = [self.dt_x[k][i], self.a * xzz, self.c[k][i] * self.x[k][i]];
                res[0] = res[0].max((terms[0] - terms[1] - terms[2]).abs());
                scale[0] = terms.iter().fold(scale[0], |m, v| m.max(v.abs()));
                if self.mode == ReactionMode::Series {
                    let czz = uniform_derivative(&self.c[k], h, i, 2, 5);
                    let terms = [self.dt_c[k][i], self.b * czz, self.d[k][i] * self.c[k][i]];
                    res[1] = res[1].max((terms[0] - terms[1] - terms[2]).abs());
                    scale[1] = terms.iter().fold(scale[1], |m, v| m.max(v.abs()));
                }
            }
        }
        let rel = |r: f64, s: f64| if s > 0.0 { r / s } else { r };
        (rel(res[0], scale[0]), rel(res[1], scale[1]))
    }
}

/// Boundary rate inputs `u = ∂_t x*`, `v = ∂_t c*` at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedforward {
    pub t: Vec<f64>,
    pub u0: Vec<f64>,
    pub ul: Vec<f64>,
    pub v0: Vec<f64>,
    pub vl: Vec<f64>,
}

pub fn feedforward_controls(field: &SeriesField) -> Feedforward {
    let last = field.grid.nodes - 1;
    let col = |f: &Vec<Vec<f64>>, i: usize| f.iter().map(|row| row[i]).collect();
    Feedforward {
        t: field.t_samples.clone(),
        u0: col(&field.dt_x, 0),
        ul: col(&field.dt_x, last),
        v0: col(&field.dt_c, 0),
        vl: col(&field.dt_c, last),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub term_norms: Vec<f64>,
    /// `‖η_{n+1}‖ / ‖η_n‖`
    pub ratios: Vec<f64>,
    /// Majorant `D^{n+1} (n!)^α r^{2n} / ((2n)! a^n)` with `r = max(ξ, ℓ-ξ)`.
    pub majorant: Vec<f64>,
    pub gevrey_constant: f64,
    /// Gevrey order 2 or above: only a finite convergence radius is guaranteed.
    pub finite_radius_risk: bool,
}

impl ConvergenceReport {
    /// Term norms are non-increasing from term `from` on.
    pub fn monotone_from(&self, from: usize) -> bool {
        self.term_norms.iter().skip(from).collect::<Vec<_>>().windows(2).all(|w| w[1] <= w[0])
    }
}

/// Ratio diagnostics for the position series.
pub fn series_convergence_report(field: &SeriesField, traj: &FlatOutputTrajectory) -> Result<ConvergenceReport> {
    let norms = field.term_norms_x.clone();
    let ratios = norms
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    let kmax = 10.min(traj.schedules.iter().map(|s| s.k_max).min().unwrap_or(0));
    let mut samples = Vec::new();
    for &t in &field.t_samples {
        let stack = traj.output_stack(t, 0, false, kmax)?;
        for (k, v) in stack.into_iter().enumerate() {
            samples.push(DerivativeSample { t, order: k, value: v });
        }
    }
    let d = gevrey_bound_estimate(&samples, field.alpha)?;
    let r = traj.xi.max(field.grid.length - traj.xi);
    let majorant = (0..norms.len())
        .map(|n| {
            let ln_fact = |k: usize| (1..=k).map(|j| (j as f64).ln()).sum::<f64>();
            let ln = (n as f64 + 1.0) * d.max(1e-300).ln() + field.alpha * ln_fact(n)
                + 2.0 * n as f64 * r.ln()
                - ln_fact(2 * n)
                - n as f64 * field.a.ln();
            ln.exp()
        })
        .collect();
    Ok(ConvergenceReport {
        term_norms: norms,
        ratios,
        majorant,
        gevrey_constant: d,
        finite_radius_risk: field.alpha >= 2.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steady_state::BoundarySpec;

    fn line(grid: Grid) -> SteadyProfile {
        SteadyProfile::solve(&BoundarySpec::new(0.0, 5.0, 0.0, 0.0), &vec![0.0; grid.nodes], 1.0, 1.0, grid)
            .unwrap()
    }

    #[test]
    fn linear_flat_values() {
        let grid = Grid::new(10.0, 101).unwrap();
        let (y1, y2) = flat_steady_values(&line(grid), 5.0).unwrap();
        assert!((y1[0] - 2.5).abs() < 1e-14 && (y2[0] - 0.5).abs() < 1e-14);
        assert!(flat_steady_values(&line(grid), 11.0).is_err());
    }

    #[test]
    fn identical_keyframes_give_constant_trajectory() {
        let grid = Grid::new(10.0, 101).unwrap();
        let kf = vec![Keyframe { t: 0.0, profile: line(grid) }, Keyframe { t: 10.0, profile: line(grid) }];
        let s = TransitionSchedule::with_defaults(0.0, 10.0).unwrap();
        let traj = assign_flat_trajectory(&kf, 5.0, &[s]).unwrap();
        for k in 1..5 {
            assert_eq!(traj.output(3.3, 0, false, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn overlapping_schedule_is_rejected() {
        let grid = Grid::new(10.0, 11).unwrap();
        let kf = vec![Keyframe { t: 0.0, profile: line(grid) }, Keyframe { t: 10.0, profile: line(grid) }];
        let s = TransitionSchedule::with_defaults(5.0, 10.0).unwrap();
        assert!(matches!(assign_flat_trajectory(&kf, 5.0, &[s]), Err(Error::Config(_))));
    }

    #[test]
    fn binomial_table() {
        let b = binomials(6);
        assert_eq!(b[6][3], 20.0);
        assert_eq!(b[5][0], 1.0);
        assert_eq!(b[5][5], 1.0);
    }
}
