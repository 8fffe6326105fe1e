//! Steady formation profiles: two-point boundary value problems of the form
//! `a y'' + q(z) y = 0` with Dirichlet data, for both the position field
//! (`q = c̄`) and the reaction field (`q = d̄`, coefficient `b`).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fd_weights, simpson, solve_tridiagonal, Grid};
use crate::optimize::nelder_mead;

const DEGENERACY_TOL: f64 = 1e-9;
const NUMERIC_CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub x0_bar: f64,
    pub xl_bar: f64,
    pub c0_bar: f64,
    pub cl_bar: f64,
    /// Null-space amplitude of the position profile when its problem is degenerate.
    #[serde(default)]
    pub free_amplitude: Option<f64>,
    /// Null-space amplitude of the reaction profile when its problem is degenerate.
    #[serde(default)]
    pub c_free_amplitude: Option<f64>,
}

impl BoundarySpec {
    pub fn new(x0_bar: f64, xl_bar: f64, c0_bar: f64, cl_bar: f64) -> Self {
        BoundarySpec {
            x0_bar,
            xl_bar,
            c0_bar,
            cl_bar,
            free_amplitude: None,
            c_free_amplitude: None,
        }
    }

    pub fn with_free_amplitude(mut self, k: f64) -> Self {
        self.free_amplitude = Some(k);
        self
    }

    pub fn with_c_free_amplitude(mut self, k: f64) -> Self {
        self.c_free_amplitude = Some(k);
        self
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.x0_bar, self.xl_bar, self.c0_bar, self.cl_bar];
        if vals.iter().any(|v| !v.is_finite())
            || self.free_amplitude.is_some_and(|v| !v.is_finite())
            || self.c_free_amplitude.is_some_and(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput(format!("non-finite boundary data {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BvpMethod {
    /// Closed form whenever the coefficient is constant, otherwise numeric.
    #[default]
    Auto,
    Numeric,
}

/// Analytic family of a solution, if one applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClosedForm {
    /// `k1 + k2 z`
    Linear { k1: f64, k2: f64 },
    /// `[y0 sinh(θ(ℓ-z)) + yℓ sinh(θz)] / sinh(θℓ)`, i.e. `k1 e^{θz} + k2 e^{-θz}`.
    Exponential { theta: f64, y0: f64, yl: f64, length: f64 },
    /// `k_cos cos(θz) + k_sin sin(θz)`
    Trigonometric { theta: f64, k_cos: f64, k_sin: f64 },
    Numeric,
}

impl ClosedForm {
    /// Derivative of order 0..=2 (any order for analytic families).
    pub fn eval(&self, z: f64, order: usize) -> Option<f64> {
        match *self {
            ClosedForm::Linear { k1, k2 } => Some(match order {
                0 => k1 + k2 * z,
                1 => k2,
                _ => 0.0,
            }),
            ClosedForm::Exponential { theta, y0, yl, length } => {
                let th = theta.powi(order as i32);
                let sh = (theta * length).sinh();
                let (a, b) = if order % 2 == 0 {
                    ((theta * (length - z)).sinh(), (theta * z).sinh())
                } else {
                    (-(theta * (length - z)).cosh(), (theta * z).cosh())
                };
                Some(th * (y0 * a + yl * b) / sh)
            }
            ClosedForm::Trigonometric { theta, k_cos, k_sin } => {
                let ph = theta * z + order as f64 * std::f64::consts::FRAC_PI_2;
                Some(theta.powi(order as i32) * (k_cos * ph.cos() + k_sin * ph.sin()))
            }
            ClosedForm::Numeric => None,
        }
    }

    /// Coefficients `(k1, k2)` of `k1 e^{θz} + k2 e^{-θz}` for the exponential family.
    pub fn exponential_coefficients(&self) -> Option<(f64, f64)> {
        match *self {
            ClosedForm::Exponential { theta, y0, yl, length } => {
                let sh2 = 2.0 * (theta * length).sinh();
                Some((
                    (yl - y0 * (-theta * length).exp()) / sh2,
                    (y0 * (theta * length).exp() - yl) / sh2,
                ))
            }
            _ => None,
        }
    }
}

/// One solved boundary value problem on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile1d {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub form: ClosedForm,
    pub degenerate: bool,
}

impl Profile1d {
    /// `d^order y / dz^order` at `z`: analytic when available, else a
    /// five-point Lagrange/Fornberg stencil on the nodes.
    pub fn eval(&self, z: f64, order: usize) -> f64 {
        if let Some(v) = self.form.eval(z, order) {
            return v;
        }
        let n = self.values.len();
        let h = self.grid.step();
        let width = 5.min(n);
        let centre = (z / h).round().clamp(0.0, (n - 1) as f64) as usize;
        let start = centre.saturating_sub(width / 2).min(n - width);
        let xs: Vec<f64> = (start..start + width).map(|k| self.grid.z(k)).collect();
        let w = fd_weights(z, &xs, order);
        (0..width).map(|k| w[order][k] * self.values[start + k]).sum()
    }
}

/// Solve `coef y'' + q(z) y = 0`, `y(0) = y0`, `y(ℓ) = yl`.
#[allow(clippy::too_many_arguments)]
pub fn solve_bvp(
    coef: f64,
    q: &[f64],
    y0: f64,
    yl: f64,
    free_amplitude: Option<f64>,
    grid: Grid,
    method: BvpMethod,
    what: &str,
) -> Result<Profile1d> {
    if !(coef.is_finite() && coef > 0.0) {
        return Err(Error::InvalidInput(format!("{what}: diffusion coefficient must be > 0")));
    }
    if q.len() != grid.nodes {
        return Err(Error::InvalidInput(format!(
            "{what}: coefficient has {} samples for a {}-node grid",
            q.len(),
            grid.nodes
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: non-finite coefficient")));
    }
    let q0 = q[0];
    let constant = q.iter().all(|v| (v - q0).abs() <= 1e-13 * q0.abs().max(1e-300));
    let mut sol = if constant && method == BvpMethod::Auto {
        closed_form(coef, q0, y0, yl, free_amplitude, grid, what)?
    } else {
        numerov(coef, q, y0, yl, free_amplitude, grid, what)?
    };
    let n = sol.values.len();
    sol.values[0] = y0;
    sol.values[n - 1] = yl;
    Ok(sol)
}

fn closed_form(
    coef: f64,
    q: f64,
    y0: f64,
    yl: f64,
    free: Option<f64>,
    grid: Grid,
    what: &str,
) -> Result<Profile1d> {
    let len = grid.length;
    let ratio = q / coef;
    let mut degenerate = false;
    let form = if ratio.abs() * len * len < 1e-14 {
        ClosedForm::Linear { k1: y0, k2: (yl - y0) / len }
    } else if ratio < 0.0 {
        ClosedForm::Exponential { theta: (-ratio).sqrt(), y0, yl, length: len }
    } else {
        let theta = ratio.sqrt();
        let s = (theta * len).sin();
        let c = (theta * len).cos();
        let turns = (theta * len / std::f64::consts::PI).round();
        if turns >= 1.0 && s.abs() < DEGENERACY_TOL {
            degenerate = true;
            let scale = 1f64.max(y0.abs()).max(yl.abs());
            if (yl - y0 * c).abs() > DEGENERACY_TOL * scale {
                return Err(Error::InconsistentBoundary(format!(
                    "{what}: y(0) = {y0}, y(ℓ) = {yl} with θℓ = {turns}π requires y(ℓ) = {}",
                    y0 * c
                )));
            }
            let k = free.ok_or_else(|| Error::DegenerateProfile {
                parameter: format!("{what} coefficient {q} (θℓ = {turns}π)"),
            })?;
            ClosedForm::Trigonometric { theta, k_cos: y0, k_sin: k }
        } else {
            ClosedForm::Trigonometric { theta, k_cos: y0, k_sin: (yl - y0 * c) / s }
        }
    };
    if !degenerate && free.is_some() {
        return Err(Error::InvalidInput(format!(
            "{what}: free amplitude given for a non-degenerate problem"
        )));
    }
    let values = (0..grid.nodes)
        .map(|i| form.eval(grid.z(i), 0).unwrap_or(f64::NAN))
        .collect();
    Ok(Profile1d { grid, values, form, degenerate })
}

/// Numerov weights in the symmetric variable `u = w y`.
struct NumerovSystem {
    w: Vec<f64>,
    g: Vec<f64>,
}

impl NumerovSystem {
    fn new(coef: f64, q: &[f64], h: f64) -> Self {
        let w: Vec<f64> = q.iter().map(|qi| 1.0 + h * h * qi / (12.0 * coef)).collect();
        let g = q
            .iter()
            .zip(&w)
            .map(|(qi, wi)| 2.0 * (1.0 - 5.0 * h * h * qi / (12.0 * coef)) / wi)
            .collect();
        NumerovSystem { w, g }
    }

    /// Signed ratio `u_N / max|u|` of the solution with `u_0 = 0`, `u_1 = 1`,
    /// plus the normalised null-vector candidate in `y`.
    fn shoot(&self) -> (f64, Vec<f64>) {
        let n = self.w.len();
        let mut u = vec![0.0; n];
        u[1] = 1.0;
        for i in 1..n - 1 {
            u[i + 1] = self.g[i] * u[i] - u[i - 1];
        }
        let mut y: Vec<f64> = u.iter().zip(&self.w).map(|(ui, wi)| ui / wi).collect();
        let m = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        y.iter_mut().for_each(|v| *v /= m);
        let um = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        (u[n - 1] / um, y)
    }

    /// Dirichlet solve on nodes `lo..=hi` given `y[lo]`, `y[hi]`.
    fn solve_segment(&self, lo: usize, hi: usize, ylo: f64, yhi: f64) -> Result<Vec<f64>> {
        let mut y = vec![0.0; hi - lo + 1];
        y[0] = ylo;
        y[hi - lo] = yhi;
        if hi - lo < 2 {
            return Ok(y);
        }
        let m = hi - lo - 1;
        let lower = vec![1.0; m];
        let upper = vec![1.0; m];
        let diag: Vec<f64> = (lo + 1..hi).map(|i| -self.g[i]).collect();
        let mut rhs = vec![0.0; m];
        rhs[0] -= self.w[lo] * ylo;
        rhs[m - 1] -= self.w[hi] * yhi;
        let u = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
        for k in 0..m {
            y[k + 1] = u[k] / self.w[lo + 1 + k];
        }
        Ok(y)
    }
}

fn numerov(
    coef: f64,
    q: &[f64],
    y0: f64,
    yl: f64,
    free: Option<f64>,
    grid: Grid,
    what: &str,
) -> Result<Profile1d> {
    let h = grid.step();
    let n = grid.nodes;
    let sys = NumerovSystem::new(coef, q, h);
    let (ratio, null) = sys.shoot();
    // Richardson allowance: the same ratio on the doubled step
    let allowance = if (n - 1) % 2 == 0 && n >= 5 {
        let coarse_q: Vec<f64> = q.iter().step_by(2).copied().collect();
        let (coarse, _) = NumerovSystem::new(coef, &coarse_q, 2.0 * h).shoot();
        4.0 * (ratio - coarse).abs() / 15.0
    } else {
        0.0
    };
    let degenerate = ratio.abs() < DEGENERACY_TOL + allowance;
    if !degenerate {
        if free.is_some() {
            return Err(Error::InvalidInput(format!(
                "{what}: free amplitude given for a non-degenerate problem"
            )));
        }
        let values = sys.solve_segment(0, n - 1, y0, yl)?;
        return Ok(Profile1d { grid, values, form: ClosedForm::Numeric, degenerate });
    }

    // split at the null vector's peak, where the two halves are well posed
    let m = (1..n - 1)
        .max_by(|&i, &j| null[i].abs().total_cmp(&null[j].abs()))
        .unwrap_or(n / 2);
    let left = sys.solve_segment(0, m, y0, 0.0)?;
    let right = sys.solve_segment(m, n - 1, 0.0, yl)?;
    let mut y: Vec<f64> = left.iter().chain(right.iter().skip(1)).copied().collect();
    let u = |i: usize| sys.w[i] * y[i];
    let row = u(m - 1) - sys.g[m] * u(m) + u(m + 1);
    let scale = y.iter().fold(1f64, |s, v| s.max(v.abs()));
    if row.abs() > NUMERIC_CONSISTENCY_TOL * scale {
        return Err(Error::InconsistentBoundary(format!(
            "{what}: y(0) = {y0}, y(ℓ) = {yl} leave a residual {row:.3e} on the critical mode"
        )));
    }
    let k = free.ok_or_else(|| Error::DegenerateProfile {
        parameter: format!("{what} coefficient (critical mode, shooting ratio {ratio:.2e})"),
    })?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let proj = dot(&y, &null) / dot(&null, &null);
    for (yi, ni) in y.iter_mut().zip(&null) {
        *yi += (k - proj) * ni;
    }
    Ok(Profile1d { grid, values: y, form: ClosedForm::Numeric, degenerate })
}

/// Pointwise residual `coef y'' + q y` at interior nodes.
pub fn bvp_residual(coef: f64, q: &[f64], profile: &Profile1d) -> Vec<f64> {
    let n = profile.values.len();
    let grid = profile.grid;
    match profile.form {
        ClosedForm::Numeric => {
            let h = grid.step();
            let sys = NumerovSystem::new(coef, q, h);
            let y = &profile.values;
            (1..n - 1)
                .map(|i| {
                    let row = sys.w[i - 1] * y[i - 1] - sys.g[i] * sys.w[i] * y[i]
                        + sys.w[i + 1] * y[i + 1];
                    coef * row / (h * h)
                })
                .collect()
        }
        form => (1..n - 1)
            .map(|i| {
                let z = grid.z(i);
                coef * form.eval(z, 2).unwrap_or(f64::NAN) + q[i] * form.eval(z, 0).unwrap_or(f64::NAN)
            })
            .collect(),
    }
}

/// Reaction profile `c̄` from `b c̄'' + d̄ c̄ = 0`.
pub fn solve_c_steady(spec: &BoundarySpec, d_bar: &[f64], b: f64, grid: Grid) -> Result<Profile1d> {
    solve_c_steady_with(spec, d_bar, b, grid, BvpMethod::Auto)
}

pub fn solve_c_steady_with(
    spec: &BoundarySpec,
    d_bar: &[f64],
    b: f64,
    grid: Grid,
    method: BvpMethod,
) -> Result<Profile1d> {
    spec.validate()?;
    solve_bvp(b, d_bar, spec.c0_bar, spec.cl_bar, spec.c_free_amplitude, grid, method, "reaction profile")
}

/// Position profile `x̄` from `a x̄'' + c̄ x̄ = 0`.
pub fn solve_x_steady(spec: &BoundarySpec, c_bar: &[f64], a: f64, grid: Grid) -> Result<Profile1d> {
    solve_x_steady_with(spec, c_bar, a, grid, BvpMethod::Auto)
}

pub fn solve_x_steady_with(
    spec: &BoundarySpec,
    c_bar: &[f64],
    a: f64,
    grid: Grid,
    method: BvpMethod,
) -> Result<Profile1d> {
    spec.validate()?;
    solve_bvp(a, c_bar, spec.x0_bar, spec.xl_bar, spec.free_amplitude, grid, method, "position profile")
}

/// A complete formation keyframe profile `(x̄, c̄, d̄)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyProfile {
    pub a: f64,
    pub b: f64,
    pub d_bar: Vec<f64>,
    pub x: Profile1d,
    pub c: Profile1d,
}

impl SteadyProfile {
    pub fn solve(spec: &BoundarySpec, d_bar: &[f64], a: f64, b: f64, grid: Grid) -> Result<Self> {
        let c = solve_c_steady(spec, d_bar, b, grid)?;
        let x = solve_x_steady(spec, &c.values, a, grid)?;
        Ok(SteadyProfile { a, b, d_bar: d_bar.to_vec(), x, c })
    }

    pub fn grid(&self) -> Grid {
        self.x.grid
    }

    pub fn x_bar(&self) -> &[f64] {
        &self.x.values
    }

    pub fn c_bar(&self) -> &[f64] {
        &self.c.values
    }

    /// Max-norm residuals of the position and reaction equations.
    pub fn residuals(&self) -> (f64, f64) {
        let rx = bvp_residual(self.a, &self.c.values, &self.x);
        let rc = bvp_residual(self.b, &self.d_bar, &self.c);
        let m = |v: &[f64]| v.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        (m(&rx), m(&rc))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySummary {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub max_eigenvalue: f64,
    pub unstable: bool,
}

/// Spectrum of the Dirichlet finite-difference operator `a ∂_z² + c̄`.
pub fn classify_stability(c_bar: &[f64], a: f64, grid: Grid) -> Result<StabilitySummary> {
    if c_bar.len() != grid.nodes {
        return Err(Error::InvalidInput("reaction profile does not match the grid".into()));
    }
    let m = grid.nodes - 2;
    let h2 = grid.step().powi(2);
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        mat[(i, i)] = -2.0 * a / h2 + c_bar[i + 1];
        if i + 1 < m {
            mat[(i, i + 1)] = a / h2;
            mat[(i + 1, i)] = a / h2;
        }
    }
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(mat).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|x, y| y.total_cmp(x));
    let max_eigenvalue = eigenvalues[0];
    Ok(StabilitySummary { eigenvalues, max_eigenvalue, unstable: max_eigenvalue > 0.0 })
}

pub const FIT_POLY_DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub c_min: f64,
    pub c_max: f64,
    pub scan_points: usize,
    pub max_evals: usize,
    pub f_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { c_min: -1.0, c_max: 1.0, scan_points: 101, max_evals: 6000, f_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: BoundarySpec,
    /// `d̄(z) = Σ_k d_k (z/ℓ)^k`
    pub d_coeffs: Vec<f64>,
    pub d_bar: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub evaluations: usize,
}

fn solve_lenient(coef: f64, q: &[f64], y0: f64, yl: f64, grid: Grid) -> Option<Profile1d> {
    match solve_bvp(coef, q, y0, yl, None, grid, BvpMethod::Auto, "fit") {
        Ok(p) => Some(p),
        Err(Error::DegenerateProfile { .. }) => {
            solve_bvp(coef, q, y0, yl, Some(0.0), grid, BvpMethod::Auto, "fit").ok()
        }
        Err(_) => None,
    }
}

/// Least-squares fit of reaction data so that the steady position profile
/// approximates `target`. Critical parameter values use a zero free amplitude.
pub fn fit_profile(target: &[f64], a: f64, b: f64, grid: Grid, config: &FitConfig) -> Result<FitResult> {
    if target.len() != grid.nodes {
        return Err(Error::InvalidInput("target does not match the grid".into()));
    }
    if grid.nodes % 2 == 0 {
        return Err(Error::Config("profile fit needs an odd node count".into()));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite target".into()));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidInput("diffusion coefficients must be positive".into()));
    }
    let n = grid.nodes;
    let h = grid.step();
    let x0 = target[0];
    let xl = target[n - 1];
    let zs = grid.points();
    let d_of = |coeffs: &[f64]| -> Vec<f64> {
        zs.iter()
            .map(|z| {
                let s = z / grid.length;
                coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
            })
            .collect()
    };
    let objective = |c0: f64, cl: f64, coeffs: &[f64]| -> f64 {
        let d = d_of(coeffs);
        let Some(c) = solve_lenient(b, &d, c0, cl, grid) else {
            return f64::INFINITY;
        };
        let Some(x) = solve_lenient(a, &c.values, x0, xl, grid) else {
            return f64::INFINITY;
        };
        let sq: Vec<f64> = x.values.iter().zip(target).map(|(u, v)| (u - v).powi(2)).collect();
        simpson(&sq, h).map(f64::sqrt).unwrap_or(f64::INFINITY)
    };

    let zero_d = vec![0.0; FIT_POLY_DEGREE + 1];
    let mut evaluations = 0;
    let mut best = (0.0, 0.0, zero_d.clone(), objective(0.0, 0.0, &zero_d));
    evaluations += 1;
    let pts = config.scan_points.max(2);
    for k in 0..pts {
        let c = config.c_min + (config.c_max - config.c_min) * k as f64 / (pts - 1) as f64;
        let j = objective(c, c, &zero_d);
        evaluations += 1;
        if j < best.3 {
            best = (c, c, zero_d.clone(), j);
        }
    }

    let span = (config.c_max - config.c_min) / (pts - 1) as f64;
    let budget = config.max_evals / 3;
    let stage2 = nelder_mead(
        |p| objective(p[0], p[1], &zero_d),
        &[best.0, best.1],
        &[span, -span],
        config.f_tol,
        budget,
    );
    evaluations += stage2.evaluations;
    if stage2.value < best.3 {
        best = (stage2.x[0], stage2.x[1], zero_d.clone(), stage2.value);
    }

    let mut start = vec![best.0, best.1];
    start.extend_from_slice(&best.2);
    let mut steps = vec![span, span];
    steps.extend(std::iter::repeat_n(span, FIT_POLY_DEGREE + 1));
    let stage3 = nelder_mead(
        |p| objective(p[0], p[1], &p[2..]),
        &start,
        &steps,
        config.f_tol,
        config.max_evals.saturating_sub(evaluations),
    );
    evaluations += stage3.evaluations;
    let converged = stage3.converged;
    if stage3.value < best.3 {
        best = (stage3.x[0], stage3.x[1], stage3.x[2..].to_vec(), stage3.value);
    }

    let d_bar = d_of(&best.2);
    Ok(FitResult {
        spec: BoundarySpec::new(x0, xl, best.0, best.1),
        d_coeffs: best.2,
        d_bar,
        objective: best.3,
        converged,
        evaluations,
    })
}
