//! Acceptance suite. Runs as a plain binary so that the per-criterion lines
//! are always printed; exits non-zero when any criterion fails.

mod common;

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use formation_core::backstepping::{solve_kernel, GainSchedule, KernelConfig, KernelGrid, KernelProblem, KernelRole};
use formation_core::flatness::{parametrize_state, PlannerConfig};
use formation_core::io::write_trace;
use formation_core::numerics::{simpson, Grid};
use formation_core::observer::observer_error_decay_fit;
use formation_core::scenario::{bundled, ScenarioConfig, BUNDLED};
use formation_core::steady_state::{BoundarySpec, SteadyProfile};
use formation_core::swarm::{
    continuum_discrete_scaling, simulate, simulate_continuum, simulate_protocol, ControllerMode, KernelSet,
    ScenarioPlan, SimTrace,
};
use formation_core::target::{ModalState, TargetSystem};
use formation_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn run(id: usize, name: &str, budget: Duration, carried: Duration, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed() + carried;
    let (pass, detail) = match outcome {
        Ok(v) => (v.pass && took <= budget, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {id} {name}: {} | {detail} | {:.2} s of {:.0} s",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs_f64()
    );
    pass
}

fn i1_over_x(y: f64) -> f64 {
    let mut term = 0.5;
    let mut sum = 0.0;
    for m in 0..200 {
        sum += term;
        term *= y / 4.0 / ((m + 1) as f64 * (m + 2) as f64);
    }
    sum
}

fn max_edge_error(k: &KernelGrid) -> f64 {
    let n = k.n;
    let h = k.length / n as f64;
    let mut err = 0.0_f64;
    for (t, lam) in k.lambda.iter().enumerate() {
        for i in 0..=n {
            let (zero, diag) = match k.role {
                KernelRole::Controller => (k.value(t, i, 0), k.value(t, i, i)),
                KernelRole::Observer => (k.value(t, 0, i), k.value(t, i, i)),
            };
            let integral = if i == 0 { 0.0 } else { simpson(&lam[..=2 * i], 0.5 * h).unwrap_or(f64::NAN) };
            err = err.max(zero.abs()).max((diag + integral / (2.0 * k.a)).abs());
        }
    }
    err
}

struct Fig4a {
    cfg: ScenarioConfig,
    plan: ScenarioPlan,
    kernels: KernelSet,
    cost: Duration,
}

fn steady_profiles() -> Result<Verdict> {
    let grid = Grid::new(LENGTH, 201)?;
    let z = vec![0.0; 201];
    let c = circle_c();
    let specs = [
        ("circle x1", BoundarySpec::new(10.0, 10.0, c, c).with_free_amplitude(0.0)),
        ("circle x2", BoundarySpec::new(0.0, 0.0, c, c).with_free_amplitude(10.0)),
        ("gull x1", BoundarySpec::new(-1.0, 1.0, -0.49, -0.49)),
        ("gull x2", BoundarySpec::new(1.0, 1.0, c, c).with_free_amplitude(0.0)),
    ];
    let mut worst: f64 = 0.0;
    let mut exact = true;
    let mut profiles = Vec::new();
    for (_, spec) in &specs {
        let p = SteadyProfile::solve(spec, &z, 1.0, 1.0, grid)?;
        let (rx, rc) = p.residuals();
        worst = worst.max(rx).max(rc);
        let x = p.x_bar();
        exact &= x[0] == spec.x0_bar && x[200] == spec.xl_bar && p.c_bar()[0] == spec.c0_bar && p.c_bar()[200] == spec.cl_bar;
        profiles.push(p);
    }
    let radius = profiles[0]
        .x_bar()
        .iter()
        .zip(profiles[1].x_bar())
        .map(|(u, v)| (u.hypot(*v) - 10.0).abs())
        .fold(0.0, f64::max);
    verdict(
        worst < 1e-8 && exact && radius < 1e-8,
        format!("max residual {worst:.2e}, boundary values exact: {exact}, circle radius error {radius:.2e}"),
    )
}

fn flatness_residual() -> Result<Verdict> {
    let grid = Grid::new(LENGTH, 101)?;
    let ts = samples(50.0, 501);
    let mut detail = Vec::new();
    let mut pass = true;
    for coord in 0..2 {
        let kf = line_to_circle(coord, grid, 1.0);
        let f = parametrize_state(&transition(&kf), grid, &ts, &PlannerConfig::default())?;
        let (rx, _) = f.pde_residual();
        pass &= rx < 1e-4 && f.tail_x < 1e-10 && f.n_used_x <= 25;
        detail.push(format!("x{}: residual {rx:.2e}, tail {:.1e} after {} terms", coord + 1, f.tail_x, f.n_used_x));
    }
    verdict(pass, detail.join("; "))
}

fn kernel_certification(fig: &Fig4a) -> Result<Verdict> {
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, ck) in fig.kernels.coords.iter().enumerate() {
        let obs = ck.observer.as_ref();
        for k in std::iter::once(&ck.controller).chain(obs) {
            let edge = max_edge_error(k);
            pass &= k.certified(1e-4) && edge < 1e-10;
            detail.push(format!(
                "x{} {:?} residual {:.2e} edge {:.0e}",
                i + 1,
                k.role,
                k.residual.relative,
                edge
            ));
        }
    }
    // the absolute oracle tolerance needs a finer lattice once the kernel grows
    let mut oracle_err = 0.0_f64;
    for (lam, n) in [(0.5, 50), (circle_c() + 0.5, 100)] {
        let p = KernelProblem {
            role: KernelRole::Controller,
            a: 1.0,
            length: LENGTH,
            n,
            t_samples: vec![0.0],
            lambda: vec![vec![lam; 2 * n + 1]],
            gain: vec![0.5],
        };
        let k = solve_kernel(&p, &KernelConfig { n, ..KernelConfig::default() })?;
        let h = LENGTH / n as f64;
        for i in 0..=n {
            for j in 0..=i {
                let (z, s) = (i as f64 * h, j as f64 * h);
                let exact = -lam * s * i1_over_x(lam * (z * z - s * s));
                oracle_err = oracle_err.max((k.value(0, i, j) - exact).abs());
            }
        }
    }
    pass &= oracle_err < 1e-4;
    detail.push(format!("constant-coefficient oracle error {oracle_err:.2e}"));
    verdict(pass, detail.join(", "))
}

fn target_decay() -> Result<Verdict> {
    let mu = 0.5;
    let lam = circle_c() + mu;
    let grid = Grid::new(LENGTH, 201)?;
    let f: Vec<f64> = grid.points().iter().map(|z| -lam * i1_over_x(lam * z * z)).collect();
    let sys = TargetSystem::new(1.0, GainSchedule::constant(mu), &f, grid, 40)?;
    let (_, m_x, m_sup) = sys.bound_constants(mu);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_x = f64::NEG_INFINITY;
    let mut worst_sup = f64::NEG_INFINITY;
    for _ in 0..10 {
        let coefs: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = grid
            .points()
            .iter()
            .map(|z| {
                coefs[0] * (1.0 - z / LENGTH)
                    + coefs[1] * z / LENGTH
                    + (2..8).map(|k| coefs[k] * ((k - 1) as f64 * PI * z / LENGTH).sin()).sum::<f64>()
            })
            .collect();
        let init = ModalState::from_samples(&v, grid, 40)?;
        let n0 = sys.norms(&init, 0.0, 0.0, 401);
        for step in 1..=120 {
            let t = step as f64 * 0.5;
            let nt = sys.norms(&init, 0.0, t, 401);
            let env = sys.envelope(0.0, t);
            worst_x = worst_x.max(nt.x_norm - m_x * env * n0.x_norm);
            worst_sup = worst_sup.max(nt.sup - m_sup * env * n0.one_norm);
        }
    }
    verdict(
        worst_x <= 1e-6 && worst_sup <= 1e-6,
        format!("M_X = {m_x:.3}, M_sup = {m_sup:.3}; largest excess X {worst_x:.2e}, sup {worst_sup:.2e}"),
    )
}

fn final_errors(name: &str, trace: &SimTrace, amp: f64) -> (bool, String) {
    let last = trace.last().expect("trace has snapshots");
    let l2 = last.metrics.l2_tracking;
    let ok = last.t >= 100.0 && l2.iter().all(|v| *v < 0.05 * amp);
    (ok, format!("{name} t = {:.0} L2 {:.1e} {:.1e}", last.t, l2[0], l2[1]))
}

fn scenarios(fig: &Fig4a, traces: &mut Vec<SimTrace>) -> Result<Verdict> {
    let mut pass = true;
    let mut detail = Vec::new();
    let trace = simulate(&fig.plan, Some(&fig.kernels), &fig.cfg.sim_settings())?;
    let (ok, d) = final_errors("fig4a", &trace, fig.cfg.amplitude);
    pass &= ok;
    detail.push(d);
    traces.push(trace);
    for name in ["fig4b", "fig4c"] {
        let cfg = bundled(name)?;
        let plan = cfg.build_plan()?;
        let kernels = cfg.precompute_kernels(&plan)?;
        let trace = simulate(&plan, Some(&kernels), &cfg.sim_settings())?;
        let (ok, mut d) = final_errors(name, &trace, cfg.amplitude);
        pass &= ok && trace.dropped_messages > 0;
        d += &format!(" drops {}/{}", trace.dropped_messages, trace.sent_messages);
        if name == "fig4c" {
            let centre = trace.last().expect("snapshots").formation_centre();
            let off = (centre[0] - 1.0).hypot(centre[1]);
            pass &= off < 0.02;
            d += &format!(" centre ({:.4}, {:.4})", centre[0], centre[1]);
        }
        detail.push(d);
    }
    verdict(pass, detail.join("; "))
}

fn dichotomy() -> Result<Verdict> {
    let cfg = bundled("table3")?;
    let plan = cfg.build_plan()?;
    let kernels = cfg.precompute_kernels(&plan)?;
    let tau = 80.0;
    let r_m = |tr: &SimTrace, t: f64| tr.at(t).map_or(f64::NAN, |s| s.metrics.mean_distance);
    let bs = simulate(&plan, Some(&kernels), &cfg.sim_settings())?;
    let mut prop_cfg = cfg.clone();
    prop_cfg.mode = ControllerMode::Proportional;
    let pr = simulate(&plan, None, &prop_cfg.sim_settings())?;
    let (b2, p1, p2) = (r_m(&bs, 2.0 * tau), r_m(&pr, tau), r_m(&pr, 2.0 * tau));
    verdict(
        b2 < 0.1 * cfg.amplitude && p2 / p1 >= 2.0 && p2 >= 3.0 * b2,
        format!("backstepping r_m(2τ) = {b2:.3}; proportional r_m(τ) = {p1:.3}, r_m(2τ) = {p2:.3}"),
    )
}

fn observer_convergence(fig: &Fig4a, with_observer: &SimTrace) -> Result<Verdict> {
    let mut pass = true;
    let mut detail = Vec::new();
    for coord in 0..2 {
        let (t, e): (Vec<f64>, Vec<f64>) =
            with_observer.snapshots.iter().map(|s| (s.t, s.metrics.l2_observer[coord])).unzip();
        let peak = (0..e.len()).max_by(|&i, &j| e[i].total_cmp(&e[j])).unwrap_or(0);
        let end = (peak..e.len()).find(|&i| e[i] < 1e-3 * e[peak]).unwrap_or(e.len() - 1);
        let fit = observer_error_decay_fit(&t[peak..=end], &e[peak..=end])?;
        pass &= fit.rate >= 0.25 && !fit.warning;
        detail.push(format!("x{} rate {:.3} over [{:.1}, {:.1}] s", coord + 1, fit.rate, t[peak], t[end]));
    }
    let mut cfg = fig.cfg.clone();
    cfg.use_observer = false;
    let true_state = simulate(&fig.plan, Some(&fig.kernels), &cfg.sim_settings())?;
    let a = with_observer.last().expect("snapshots").metrics.mean_distance;
    let b = true_state.last().expect("snapshots").metrics.mean_distance;
    let gap = (a - b).abs() / a.max(b);
    pass &= gap < 0.1;
    detail.push(format!("final mean distance {a:.3e} (estimate) vs {b:.3e} (true state), relative gap {gap:.2e}"));
    verdict(pass, detail.join("; "))
}

fn equivalence() -> Result<Verdict> {
    let mut pass = true;
    let mut detail = Vec::new();
    for n in [5usize, 10, 20] {
        let (length, frak_a, frak_b, a) = (10.0, 1.0, 0.5, 0.4);
        let r = continuum_discrete_scaling(n, length, frak_a, a)?.r;
        let b = frak_b * length * length / (r * (n * n) as f64);
        let x0: Vec<f64> = (0..=n).map(|j| (0.9 * j as f64).cos()).collect();
        let c0: Vec<f64> = (0..=n).map(|j| 0.04 + 0.01 * (0.5 * j as f64).sin()).collect();
        let d = |j: usize, t: f64| 0.01 * (j as f64 * 0.2 - 1.0) * (0.3 * t).sin();
        let lead = |t: f64| [0.05 * (0.5 * t).sin(), -0.02, 0.002 * t.cos(), -0.001];
        let dt = 1e-3;
        let chain = simulate_protocol(&x0, &c0, frak_a, frak_b, &d, &lead, 10.0, dt)?;
        let grid = Grid::new(length, n + 1)?;
        let h = grid.step();
        let c0s: Vec<f64> = c0.iter().map(|c| c / r).collect();
        let dc = |z: f64, t: f64| d((z / h).round() as usize, t / r) / r;
        let lead_c = |t: f64| {
            let [u0, ul, v0, vl] = lead(t / r);
            [u0 / r, ul / r, v0 / (r * r), vl / (r * r)]
        };
        let cont = simulate_continuum(&x0, &c0s, grid, a, b, &dc, &lead_c, r * 10.0, r * dt)?;
        let mut gap = 0.0_f64;
        for k in 0..chain.t.len() {
            for j in 0..=n {
                gap = gap.max((chain.x[k][j] - cont.x[k][j]).abs()).max((chain.c[k][j] - r * cont.c[k][j]).abs());
            }
        }
        pass &= gap < 1e-8 && chain.t.len() == cont.t.len();
        detail.push(format!("N = {n}: r = {r:.3}, gap {gap:.1e}"));
    }
    verdict(pass, detail.join("; "))
}

fn determinism(fig: &Fig4a, first: &SimTrace) -> Result<Verdict> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let (p, q) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_trace(first, &p)?;
    write_trace(&simulate(&fig.plan, Some(&fig.kernels), &fig.cfg.sim_settings())?, &q)?;
    let identical = std::fs::read(&p).expect("first trace") == std::fs::read(&q).expect("second trace");
    let mut lossless = true;
    for (name, _) in BUNDLED {
        let cfg = bundled(name)?;
        let path = dir.path().join(format!("{name}.toml"));
        cfg.save(&path)?;
        lossless &= ScenarioConfig::load(&path)? == cfg;
    }
    verdict(identical && lossless, format!("fig4a traces byte-identical: {identical}, configs lossless: {lossless}"))
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= run(1, "steady profiles", secs(1), Duration::ZERO, steady_profiles);
    all &= run(2, "flatness residual", secs(120), Duration::ZERO, flatness_residual);

    let start = Instant::now();
    let fig = bundled("fig4a").and_then(|cfg| {
        let plan = cfg.build_plan()?;
        let kernels = cfg.precompute_kernels(&plan)?;
        Ok(Fig4a { cfg, plan, kernels, cost: Duration::ZERO })
    });
    let fig = fig.map(|f| Fig4a { cost: start.elapsed(), ..f });
    let cost = fig.as_ref().map_or(Duration::ZERO, |f| f.cost);
    let mut traces = Vec::new();
    match &fig {
        Ok(fig) => {
            all &= run(3, "kernel certification", secs(300), cost, || kernel_certification(fig));
        }
        Err(e) => {
            println!("criterion 3 kernel certification: FAIL | error: {e}");
            all = false;
        }
    }
    all &= run(4, "target-system decay", secs(60), Duration::ZERO, target_decay);
    match &fig {
        Ok(fig) => {
            all &= run(5, "scenario reproduction", secs(900), cost, || scenarios(fig, &mut traces));
        }
        Err(_) => {
            println!("criterion 5 scenario reproduction: FAIL | fig4a plan unavailable");
            all = false;
        }
    }
    all &= run(6, "instability dichotomy", secs(300), Duration::ZERO, dichotomy);
    match (&fig, traces.first()) {
        (Ok(fig), Some(trace)) => {
            all &= run(7, "observer convergence", secs(120), Duration::ZERO, || observer_convergence(fig, trace));
        }
        _ => {
            println!("criterion 7 observer convergence: FAIL | fig4a trace unavailable");
            all = false;
        }
    }
    all &= run(8, "continuum equivalence", secs(30), Duration::ZERO, equivalence);
    match (&fig, traces.first()) {
        (Ok(fig), Some(trace)) => {
            all &= run(9, "determinism and round trip", secs(30), Duration::ZERO, || determinism(fig, trace));
        }
        _ => {
            println!("criterion 9 determinism and round trip: FAIL | fig4a trace unavailable");
            all = false;
        }
    }
    println!("acceptance: {}", if all { "all criteria pass" } else { "some criteria FAIL" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
