mod common;

use std::f64::consts::PI;

use common::*;
use formation_core::backstepping::*;
use formation_core::flatness::{parametrize_state, PlannerConfig};
use formation_core::numerics::Grid;
use formation_core::target::{ModalState, TargetSystem};
use formation_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `I₁(x)/x` with `x² = y`.
fn i1_over_x(y: f64) -> f64 {
    let mut term = 0.5;
    let mut sum = 0.0;
    for m in 0..200 {
        sum += term;
        term *= y / 4.0 / ((m + 1) as f64 * (m + 2) as f64);
    }
    sum
}

/// Constant-coefficient controller kernel.
fn oracle(lam: f64, a: f64, z: f64, s: f64) -> f64 {
    -lam / a * s * i1_over_x(lam / a * (z * z - s * s))
}

fn constant(role: KernelRole, lam: f64, gain: f64, n: usize) -> KernelGrid {
    let p = KernelProblem {
        role,
        a: 1.0,
        length: LENGTH,
        n,
        t_samples: vec![0.0],
        lambda: vec![vec![lam; 2 * n + 1]],
        gain: vec![gain],
    };
    solve_kernel(&p, &KernelConfig::default()).unwrap()
}

#[test]
fn constant_kernel_matches_the_bessel_series() {
    let n = 50;
    let h = LENGTH / n as f64;
    let k = constant(KernelRole::Controller, 0.5, 0.5, n);
    let mut err = 0.0_f64;
    for i in 0..=n {
        for j in 0..=i {
            err = err.max((k.value(0, i, j) - oracle(0.5, 1.0, i as f64 * h, j as f64 * h)).abs());
        }
    }
    assert!(err < 1e-4, "max error {err}");
    assert!(k.certified(1e-4));
}

#[test]
fn zero_reaction_zero_kernel() {
    for role in [KernelRole::Controller, KernelRole::Observer] {
        let k = constant(role, 0.0, 0.5, 20);
        assert!(k.lattice[0].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn edge_conditions_are_exact() {
    let n = 50;
    let h = LENGTH / n as f64;
    let k = constant(KernelRole::Controller, 0.9, 0.5, n);
    let l = constant(KernelRole::Observer, 0.9, 0.6, n);
    for i in 0..=n {
        let z = i as f64 * h;
        assert_eq!(k.value(0, i, 0), 0.0);
        assert!((k.value(0, i, i) + 0.9 * z / 2.0).abs() < 1e-12);
        assert_eq!(l.value(0, 0, i), 0.0);
        assert!((l.value(0, i, i) + 0.9 * z / 2.0).abs() < 1e-12);
    }
}

#[test]
fn observer_kernel_is_the_transpose_for_constant_coefficients() {
    let n = 50;
    let k = constant(KernelRole::Controller, 0.9, 0.5, n);
    let l = constant(KernelRole::Observer, 0.9, 0.6, n);
    for i in 0..=n {
        for j in i..=n {
            assert!((l.value(0, i, j) - k.value(0, j, i)).abs() < 1e-4);
        }
    }
}

#[test]
fn residual_falls_with_the_grid_step() {
    let coarse = constant(KernelRole::Controller, 0.5, 0.5, 25);
    let fine = constant(KernelRole::Controller, 0.5, 0.5, 50);
    let ratio = coarse.residual.max_abs / fine.residual.max_abs;
    assert!(ratio >= 3.0, "{} -> {}", coarse.residual.max_abs, fine.residual.max_abs);
}

#[test]
fn transition_kernels_are_certified() {
    let grid = Grid::new(LENGTH, 101).unwrap();
    let kf = line_to_circle(1, grid, 1.0);
    let field = parametrize_state(&transition(&kf), grid, &samples(50.0, 101), &PlannerConfig::default()).unwrap();
    let k = solve_controller_kernel(&field, &GainSchedule::constant(0.5), &KernelConfig::default()).unwrap();
    assert_eq!(k.t_samples.len(), 101);
    assert!(k.certified(1e-4), "{:?}", k.residual.relative);
    let l = solve_observer_kernel(&field, &GainSchedule::constant(0.6), &KernelConfig::default()).unwrap();
    assert!(l.certified(1e-4), "{:?}", l.residual.relative);
    for t in 0..k.t_samples.len() {
        for i in 0..=50 {
            assert_eq!(k.value(t, i, 0), 0.0);
            assert_eq!(l.value(t, 0, i), 0.0);
        }
    }
}

#[test]
fn sweep_budget_exhaustion_is_reported() {
    let p = KernelProblem {
        role: KernelRole::Controller,
        a: 1.0,
        length: LENGTH,
        n: 20,
        t_samples: vec![0.0],
        lambda: vec![vec![0.9; 41]],
        gain: vec![0.5],
    };
    let cfg = KernelConfig { max_sweeps: 2, ..KernelConfig::default() };
    assert!(matches!(solve_kernel(&p, &cfg), Err(Error::NonConvergence { .. })));
}

#[test]
fn observer_gains_follow_the_edge() {
    let n = 50;
    let l = constant(KernelRole::Observer, 0.9, 0.6, n);
    let g = observer_gains(&l).unwrap();
    for j in 0..=n {
        let z = j as f64 * LENGTH / n as f64;
        assert_eq!(g.m_gain[0][j], l.value(0, j, n));
        // l(z, ℓ) = k(ℓ, z)
        let tol = 1e-4 * (1.0 + l.residual.kernel_norm);
        assert!((g.m_gain[0][j] - oracle(0.9, 1.0, LENGTH, z)).abs() < tol);
    }
    assert_eq!((g.l0[0], g.ll[0]), (0.6, 0.6));

    let zero = constant(KernelRole::Observer, 0.0, 0.6, 10);
    let g = observer_gains(&zero).unwrap();
    assert!(g.l_gain[0].iter().chain(&g.m_gain[0]).all(|v| *v == 0.0));
    assert!(observer_gains(&constant(KernelRole::Controller, 0.9, 0.6, 10)).is_err());
}

#[test]
fn feedback_laws() {
    assert_eq!(feedback_u0(0.0, 0.5), 0.0);
    assert_eq!(feedback_u0(1.0, 0.5), -0.5);
    assert!((feedback_u0(-0.2, 0.15) - 0.03).abs() < 1e-15);

    let zero = constant(KernelRole::Controller, 0.0, 0.5, 10);
    let err: Vec<f64> = (0..11).map(|i| (i as f64 * 0.3).cos()).collect();
    assert_eq!(feedback_ul(&[0.0; 11], 0.0, &zero, 0.5, 1.0, 0.0).unwrap(), 0.0);
    let u = feedback_ul(&err, 0.7, &zero, 0.5, 1.0, 0.0).unwrap();
    assert!((u + 0.5 * err[10]).abs() < 1e-15);
}

#[test]
fn feedback_ul_matches_a_trapezoid_oracle() {
    let (lam, n) = (0.2, 100);
    let k = constant(KernelRole::Controller, lam, 0.5, n);
    let grid = Grid::new(LENGTH, n + 1).unwrap();
    let err: Vec<f64> = grid.points().iter().map(|z| (PI * z / LENGTH).sin()).collect();
    let slope = -PI / LENGTH;
    let u = feedback_ul(&err, slope, &k, 0.5, 1.0, 0.0).unwrap();

    // k_I(ℓ, s) = λ k + a k_ss with a = 1
    let m = 200_000;
    let hs = LENGTH / m as f64;
    let d = 1e-4;
    let w = |s: f64| {
        let kss = (oracle(lam, 1.0, LENGTH, s + d) - 2.0 * oracle(lam, 1.0, LENGTH, s) + oracle(lam, 1.0, LENGTH, s - d)) / (d * d);
        (lam * oracle(lam, 1.0, LENGTH, s) + kss) * (PI * s / LENGTH).sin()
    };
    let mut integral = 0.5 * (w(0.0) + w(LENGTH));
    for i in 1..m {
        integral += w(i as f64 * hs);
    }
    integral *= hs;
    let expected = integral + oracle(lam, 1.0, LENGTH, LENGTH) * slope;
    assert!((u - expected).abs() < 1e-6, "{u} vs {expected}");
}

#[test]
fn target_dynamics_respect_the_decay_bounds() {
    let (c0, mu) = (circle_c(), 0.5);
    let lam = c0 + mu;
    let grid = Grid::new(LENGTH, 201).unwrap();
    // f = a ∂_s k(z, 0)
    let f: Vec<f64> = grid.points().iter().map(|z| -lam * i1_over_x(lam * z * z)).collect();
    let sys = TargetSystem::new(1.0, GainSchedule::constant(mu), &f, grid, 40).unwrap();
    let (_, m_x, m_sup) = sys.bound_constants(mu);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let coefs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = grid
            .points()
            .iter()
            .map(|z| {
                coefs[0] + coefs[1] * z / LENGTH
                    + (2..6).map(|k| coefs[k] * (k as f64 * PI * z / LENGTH).sin()).sum::<f64>()
            })
            .collect();
        let init = ModalState::from_samples(&v, grid, 40).unwrap();
        let n0 = sys.norms(&init, 0.0, 0.0, 401);
        for step in 1..=60 {
            let t = step as f64 * 0.5;
            let nt = sys.norms(&init, 0.0, t, 401);
            let env = sys.envelope(0.0, t);
            assert!(nt.x_norm <= m_x * env * n0.x_norm + 1e-6, "X at t = {t}");
            assert!(nt.sup <= m_sup * env * n0.one_norm + 1e-6, "sup at t = {t}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn feedback_is_linear_in_the_error(alpha in -5.0..5.0f64, phase in 0.0..6.0f64) {
        let k = constant(KernelRole::Controller, 0.7, 0.5, 20);
        let err: Vec<f64> = (0..21).map(|i| (0.4 * i as f64 + phase).sin()).collect();
        let scaled: Vec<f64> = err.iter().map(|v| alpha * v).collect();
        let u = feedback_ul(&err, 0.3, &k, 0.5, 1.0, 0.0).unwrap();
        let v = feedback_ul(&scaled, 0.3 * alpha, &k, 0.5, 1.0, 0.0).unwrap();
        prop_assert!((alpha * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
    }
}
