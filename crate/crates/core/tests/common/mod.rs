#![allow(dead_code)]

use std::f64::consts::PI;

use formation_core::flatness::*;
use formation_core::gevrey::TransitionSchedule;
use formation_core::numerics::Grid;
use formation_core::steady_state::{BoundarySpec, SteadyProfile};

pub const LENGTH: f64 = 10.0;

pub fn circle_c() -> f64 {
    (2.0 * PI / LENGTH).powi(2)
}

/// First desk-scale transition of one coordinate: straight line at `t = 0`
/// to the circle at `t = 50`.
pub fn line_to_circle(coord: usize, grid: Grid, b: f64) -> Vec<Keyframe> {
    let z = vec![0.0; grid.nodes];
    let c = circle_c();
    let (start, end) = match coord {
        0 => (BoundarySpec::new(-1.0, 1.0, 0.0, 0.0), BoundarySpec::new(1.0, 1.0, c, c).with_free_amplitude(0.0)),
        _ => (BoundarySpec::new(0.0, 0.0, 0.0, 0.0), BoundarySpec::new(0.0, 0.0, c, c).with_free_amplitude(1.0)),
    };
    vec![
        Keyframe { t: 0.0, profile: SteadyProfile::solve(&start, &z, 1.0, b, grid).unwrap() },
        Keyframe { t: 50.0, profile: SteadyProfile::solve(&end, &z, 1.0, b, grid).unwrap() },
    ]
}

pub fn transition(keyframes: &[Keyframe]) -> FlatOutputTrajectory {
    let s: Vec<TransitionSchedule> = keyframes
        .windows(2)
        .map(|w| TransitionSchedule::with_defaults(w[0].t, w[1].t - w[0].t).unwrap())
        .collect();
    assign_flat_trajectory(keyframes, LENGTH / 2.0, &s).unwrap()
}

pub fn samples(t_end: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| t_end * k as f64 / (count - 1) as f64).collect()
}
