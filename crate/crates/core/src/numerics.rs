//! Shared numerical kernels: uniform grids, quadrature, banded solves and
//! finite-difference weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid on `[0, length]` with `nodes` points (endpoints included).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub length: f64,
    pub nodes: usize,
}

impl Grid {
    pub fn new(length: f64, nodes: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidInput(format!(
                "grid length must be positive, got {length}"
            )));
        }
        if nodes < 3 {
            return Err(Error::InvalidInput(format!(
                "grid needs at least 3 nodes, got {nodes}"
            )));
        }
        Ok(Grid { length, nodes })
    }

    pub fn step(&self) -> f64 {
        self.length / (self.nodes - 1) as f64
    }

    pub fn z(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.length
        } else {
            i as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.z(i)).collect()
    }

    pub fn intervals(&self) -> usize {
        self.nodes - 1
    }

    /// Index of the node at `z`, if `z` coincides with a node.
    pub fn node_of(&self, z: f64) -> Option<usize> {
        let pos = z / self.step();
        let idx = pos.round();
        if idx >= 0.0 && (idx as usize) < self.nodes && (pos - idx).abs() < 1e-9 {
            Some(idx as usize)
        } else {
            None
        }
    }
}

/// Composite Simpson rule on uniformly spaced samples; needs an odd count.
pub fn simpson(values: &[f64], h: f64) -> Result<f64> {
    let n = values.len();
    if n < 3 || n % 2 == 0 {
        return Err(Error::Config(format!(
            "composite Simpson needs an odd number (>= 3) of nodes, got {n}"
        )));
    }
    let mut acc = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    Ok(acc * h / 3.0)
}

/// Trapezoid rule on uniformly spaced samples.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (values[0] + values[n - 1]) + values[1..n - 1].iter().sum::<f64>()),
    }
}

/// Running integral `out[k] = ∫_{0}^{k h} f`, fourth order at every node.
///
/// Each interval is integrated with the same four-point cubic rule, shifted
/// one-sided at the ends, so the error is smooth from node to node.
pub fn cumulative_integral(values: &[f64], h: f64, out: &mut [f64]) {
    let n = values.len();
    debug_assert_eq!(out.len(), n);
    if n == 0 {
        return;
    }
    out[0] = 0.0;
    match n {
        1 => return,
        2 => {
            out[1] = 0.5 * h * (values[0] + values[1]);
            return;
        }
        3 => {
            out[1] = h * (5.0 * values[0] + 8.0 * values[1] - values[2]) / 12.0;
            out[2] = h * (values[0] + 4.0 * values[1] + values[2]) / 3.0;
            return;
        }
        _ => {}
    }
    let f = values;
    for k in 0..n - 1 {
        let piece = if k == 0 {
            9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]
        } else if k == n - 2 {
            f[n - 4] - 5.0 * f[n - 3] + 19.0 * f[n - 2] + 9.0 * f[n - 1]
        } else {
            -f[k - 1] + 13.0 * f[k] + 13.0 * f[k + 1] - f[k + 2]
        };
        out[k + 1] = out[k] + h * piece / 24.0;
    }
}

/// Double integral `∫_ξ^z ∫_ξ^χ f(σ) dσ dχ` on all nodes of a uniform grid,
/// anchored at node `anchor`. Returns the inner single integral too.
pub fn anchored_double_integral(
    values: &[f64],
    h: f64,
    anchor: usize,
    single: &mut [f64],
    double: &mut [f64],
) {
    cumulative_integral(&values[anchor..], h, &mut single[anchor..]);
    cumulative_integral(&single[anchor..], h, &mut double[anchor..]);
    // backward branch: integrate the reversed sequence, flip sign of the
    // single integral (dχ runs backwards), keep the double integral sign.
    if anchor > 0 {
        let back: Vec<f64> = values[..=anchor].iter().rev().copied().collect();
        let m = back.len();
        let mut s1 = vec![0.0; m];
        let mut s2 = vec![0.0; m];
        cumulative_integral(&back, h, &mut s1);
        cumulative_integral(&s1, h, &mut s2);
        for k in 0..m {
            single[anchor - k] = -s1[k];
            double[anchor - k] = s2[k];
        }
    }
}

/// Thomas algorithm for a tridiagonal system. `lower[0]` and `upper[n-1]`
/// are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::InvalidInput("singular tridiagonal system".into()));
    }
    c[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 {
            return Err(Error::InvalidInput("singular tridiagonal system".into()));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    Ok(x)
}

/// Finite-difference weights (Fornberg) for derivatives up to `order` at
/// `x0` from the sample abscissae `xs`. Returns `w[m][j]` for derivative `m`.
pub fn fd_weights(x0: f64, xs: &[f64], order: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; order + 1];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Derivative of order `order` at index `i` of uniformly sampled `values`,
/// using the `width` nearest samples (centred where possible).
pub fn uniform_derivative(values: &[f64], h: f64, i: usize, order: usize, width: usize) -> f64 {
    let n = values.len();
    let width = width.min(n);
    let half = width / 2;
    let start = i.saturating_sub(half).min(n - width);
    let xs: Vec<f64> = (start..start + width).map(|k| (k as f64 - i as f64) * h).collect();
    let w = fd_weights(0.0, &xs, order);
    (0..width).map(|k| w[order][k] * values[start + k]).sum()
}

/// Adaptive Simpson quadrature with a relative tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    // absolute tolerance from a coarse magnitude estimate
    let scale = whole.abs().max(1e-300);
    simpson_step(f, a, b, fa, fm, fb, whole, rel_tol * scale, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Linear interpolation position of `t` within sorted `samples`:
/// returns `(index, weight)` such that value = (1-w) v[i] + w v[i+1].
pub fn bracket(samples: &[f64], t: f64) -> (usize, f64) {
    let n = samples.len();
    if n == 1 || t <= samples[0] {
        return (0, 0.0);
    }
    if t >= samples[n - 1] {
        return (n.saturating_sub(2), if n >= 2 { 1.0 } else { 0.0 });
    }
    let idx = match samples.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
        Ok(i) => return (i.min(n - 2), if i == n - 1 { 1.0 } else { 0.0 }),
        Err(i) => i - 1,
    };
    let w = (t - samples[idx]) / (samples[idx + 1] - samples[idx]);
    (idx, w)
}

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
