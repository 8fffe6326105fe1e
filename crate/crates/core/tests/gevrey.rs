use formation_core::gevrey::{gevrey_bound_estimate, DerivativeSample, TransitionSchedule};
use formation_core::Error;
use proptest::prelude::*;

fn unit() -> TransitionSchedule {
    TransitionSchedule::new(0.0, 1.0, 1.1, 12).unwrap()
}

#[test]
fn third_derivative_matches_finite_difference() {
    let s = unit();
    let t = 0.3;
    let h = 1e-4;
    let fd = (s.phi(t + h, 2).unwrap() - s.phi(t - h, 2).unwrap()) / (2.0 * h);
    let exact = s.phi(t, 3).unwrap();
    assert!(((fd - exact) / exact).abs() < 1e-6, "{fd} vs {exact}");
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(matches!(TransitionSchedule::new(0.0, 0.0, 1.1, 4), Err(Error::InvalidInput(_))));
    assert!(matches!(TransitionSchedule::new(0.0, -2.0, 1.1, 4), Err(Error::InvalidInput(_))));
    assert!(matches!(unit().phi(f64::NAN, 0), Err(Error::InvalidInput(_))));
    assert!(matches!(unit().phi(0.5, 13), Err(Error::UnsupportedOrder { requested: 13, max: 12 })));
}

#[test]
fn gevrey_order_below_two() {
    let s = unit();
    assert!((s.alpha() - (1.0 + 1.0 / 1.1)).abs() < 1e-15);
    assert!(s.admits_uniform_convergence());
    assert!(!TransitionSchedule::new(0.0, 1.0, 0.8, 4).unwrap().admits_uniform_convergence());
}

#[test]
fn bound_estimate_examples() {
    let exp: Vec<DerivativeSample> = (0..=10)
        .flat_map(|k| (0..=20).map(move |i| DerivativeSample { t: i as f64 / 20.0, order: k, value: (i as f64 / 20.0).exp() }))
        .collect();
    let d = gevrey_bound_estimate(&exp, 1.0).unwrap();
    assert!((d - std::f64::consts::E).abs() < 1e-12, "{d}");

    let s = unit();
    let samples: Vec<DerivativeSample> = (0..200)
        .flat_map(|i| {
            let t = (i as f64 + 0.5) / 200.0;
            let stack = s.phi_stack(t, 10).unwrap();
            stack.into_iter().enumerate().map(move |(k, v)| DerivativeSample { t, order: k, value: v })
        })
        .collect();
    let d = gevrey_bound_estimate(&samples, s.alpha()).unwrap();
    assert!(d.is_finite() && d > 0.0);
    assert!(gevrey_bound_estimate(&[], 1.5).is_err());
    assert!(gevrey_bound_estimate(&samples, 0.5).is_err());
}

#[test]
fn step_is_monotone_on_a_fine_grid() {
    let s = TransitionSchedule::with_defaults(2.0, 3.0).unwrap();
    let mut prev = 0.0;
    for i in 0..=1000 {
        let v = s.phi(2.0 + 3.0 * i as f64 / 1000.0, 0).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!(v >= prev);
        prev = v;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivatives_vanish_outside_the_window(
        t0 in -10.0..10.0f64,
        tau in 0.1..50.0f64,
        k in 1usize..=12,
        beyond in 0.0..5.0f64,
    ) {
        let s = TransitionSchedule::new(t0, tau, 1.1, 12).unwrap();
        for t in [t0, t0 + tau, t0 - beyond, t0 + tau + beyond] {
            prop_assert_eq!(s.phi(t, k).unwrap(), 0.0);
        }
        prop_assert_eq!(s.phi(t0 - beyond, 0).unwrap(), 0.0);
        prop_assert_eq!(s.phi(t0 + tau + beyond, 0).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_about_the_midpoint(tau in 0.1..100.0f64, frac in 0.0..1.0f64, sigma in 1.01..3.0f64) {
        let s = TransitionSchedule::new(0.0, tau, sigma, 4).unwrap();
        let sum = s.phi(frac * tau, 0).unwrap() + s.phi(tau - frac * tau, 0).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn next_order_is_the_derivative(frac in 0.25..0.75f64, k in 0usize..6, tau in 0.5..5.0f64) {
        let s = TransitionSchedule::new(0.0, tau, 1.1, 12).unwrap();
        let t = frac * tau;
        let h = tau * 2e-5;
        let fd = (s.phi(t + h, k).unwrap() - s.phi(t - h, k).unwrap()) / (2.0 * h);
        let exact = s.phi(t, k + 1).unwrap();
        let peak = (0..=40).map(|i| s.phi(tau * i as f64 / 40.0, k + 1).unwrap().abs()).fold(0.0, f64::max);
        let scale = exact.abs().max(1e-2 * peak);
        prop_assert!((fd - exact).abs() <= 1e-6 * scale, "k {} fd {} exact {}", k, fd, exact);
    }

    #[test]
    fn stack_agrees_with_single_orders(frac in 0.0..1.0f64) {
        let s = unit();
        let stack = s.phi_stack(frac, 8).unwrap();
        for (k, v) in stack.iter().enumerate() {
            let single = s.phi(frac, k).unwrap();
            prop_assert!((v - single).abs() <= 1e-12 * single.abs().max(1.0));
        }
    }
}
