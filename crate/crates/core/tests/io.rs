use formation_core::io::*;
use formation_core::scenario::{bundled, ScenarioConfig, BUNDLED};
use formation_core::swarm::{simulate, ControllerMode, CoordSnapshot, Metrics, SimTrace, Snapshot};
use formation_core::Error;
use proptest::prelude::*;
use tempfile::tempdir;

fn short_fig4a() -> ScenarioConfig {
    let mut cfg = bundled("fig4a").unwrap();
    cfg.duration = 20.0;
    cfg
}

fn open_loop_run(seed: u64) -> SimTrace {
    let mut cfg = short_fig4a();
    cfg.mode = ControllerMode::FeedforwardOnly;
    cfg.duration = 5.0;
    cfg.comm.seed = seed;
    simulate(&cfg.build_plan().unwrap(), None, &cfg.sim_settings()).unwrap()
}

fn lines(path: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn bundled_scenarios_load() {
    let a = bundled("fig4a").unwrap();
    assert_eq!(a.agents, 11);
    assert!(a.coordinates.iter().all(|c| c.mu == 0.5 && c.nu == 0.6));
    let t: Vec<f64> = a.coordinates[0].keyframes.iter().map(|k| k.t).collect();
    assert_eq!(t, [0.0, 50.0, 100.0]);
    let t3 = bundled("table3").unwrap();
    assert!(t3.coordinates.iter().all(|c| c.a == 0.5));
    assert_eq!((t3.length, t3.amplitude, t3.coordinates[0].keyframes[1].t), (10.0, 150.0, 80.0));
    assert!(matches!(bundled("nope"), Err(Error::Config(_))));
}

#[test]
fn configs_round_trip_through_files() {
    let dir = tempdir().unwrap();
    for (name, _) in BUNDLED {
        let cfg = bundled(name).unwrap();
        let path = dir.path().join(format!("{name}.toml"));
        cfg.save(&path).unwrap();
        assert_eq!(ScenarioConfig::load(&path).unwrap(), cfg);
    }
}

#[test]
fn validation_names_every_field() {
    let mut cfg = bundled("fig4a").unwrap();
    cfg.coordinates[0].keyframes[1].t = 0.0;
    cfg.coordinates[1].keyframes[1].t = 0.0;
    cfg.coordinates[0].a = -1.0;
    let Err(Error::Validation(errs)) = cfg.validate() else { panic!("validation passed") };
    assert!(errs.iter().any(|e| e.starts_with("coordinate[0].keyframe[1].t") && e.contains("tau")), "{errs:?}");
    assert!(errs.iter().any(|e| e.starts_with("coordinate[0].a")), "{errs:?}");
    assert_eq!(Error::Validation(errs).exit_code(), 1);

    let text = std::fs::read_to_string("scenarios/fig4a.toml").unwrap().replace("agents = 11", "agents = \"x\"");
    let err = ScenarioConfig::from_toml_str(&text, "bad.toml".as_ref()).unwrap_err();
    assert!(matches!(&err, Error::Parse { message, .. } if message.contains("agents")), "{err}");
}

#[test]
fn empty_trace_is_header_only() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    let trace = SimTrace { agents: 3, length: 2.0, snapshots: vec![], sent_messages: 0, dropped_messages: 0, held_feedforward: 0 };
    write_trace(&trace, &path).unwrap();
    assert_eq!(lines(&path), vec![TRACE_HEADER.join(",")]);
    assert!(read_trace(&path).unwrap().snapshots.is_empty());
    assert!(emit_plot_data(&trace, PlotKind::ErrorNorms, dir.path()).is_err());
}

#[test]
fn single_agent_single_snapshot() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("one.csv");
    let coord = CoordSnapshot { x: vec![0.5], c: vec![0.1], x_e: vec![0.0], x_hat: vec![0.5], x_star: vec![0.5], x_e_star: vec![0.0], u0: 0.0, ul: 0.0 };
    let trace = SimTrace {
        agents: 1,
        length: 0.0,
        snapshots: vec![Snapshot { t: 0.0, coords: vec![coord.clone(), coord], metrics: Metrics::default() }],
        sent_messages: 0,
        dropped_messages: 0,
        held_feedforward: 0,
    };
    write_trace(&trace, &path).unwrap();
    let rows = lines(&path);
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0.000000000,0,0.000000000,1,0.500000000,0.100000000"));
    assert!(rows[2].contains(",2,"));
}

#[test]
fn stored_metrics_are_recomputable() {
    let cfg = short_fig4a();
    let plan = cfg.build_plan().unwrap();
    let kernels = cfg.precompute_kernels(&plan).unwrap();
    let trace = simulate(&plan, Some(&kernels), &cfg.sim_settings()).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("fig4a.csv");
    write_trace(&trace, &path).unwrap();
    let back = read_trace(&path).unwrap();
    assert_eq!(back.snapshots.len(), trace.snapshots.len());
    assert_eq!(back.agents, 11);
    assert!(metric_discrepancy(&back) < 1e-9, "{}", metric_discrepancy(&back));
    assert!(metric_discrepancy(&trace) < 1e-12);

    let f3d = emit_plot_data(&back, PlotKind::Formation3d, dir.path()).unwrap();
    assert_eq!(lines(&f3d).len(), 1 + back.snapshots.len() * back.agents);
    assert_eq!(f3d.file_name().unwrap(), "formation_3d.csv");
}

#[test]
fn seeded_trace_files_are_byte_identical() {
    let dir = tempdir().unwrap();
    let (p, q) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_trace(&open_loop_run(4), &p).unwrap();
    write_trace(&open_loop_run(4), &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn plot_data_shapes() {
    let dir = tempdir().unwrap();
    let mut trace = open_loop_run(1);
    for s in &mut trace.snapshots {
        for c in &mut s.coords {
            c.x = c.x_star.clone();
            c.x_hat = c.x_star.clone();
        }
        s.metrics = Metrics::default();
    }
    let norms = emit_plot_data(&trace, PlotKind::ErrorNorms, dir.path()).unwrap();
    let rows = lines(&norms);
    assert_eq!(rows[0], "t[s],l2_tracking_1[m],l2_tracking_2[m],l2_observer_1[m],l2_observer_2[m]");
    assert_eq!(rows.len(), 1 + trace.snapshots.len());
    assert!(rows[1..].iter().all(|r| r.split(',').skip(1).all(|v| v == "0.000000000")));
    assert_eq!(metric_discrepancy(&trace), 0.0);

    let other = open_loop_run(2);
    let path = dir.path().join("pair.csv");
    write_mean_distance(&[("first", &trace), ("second", &other)], &path).unwrap();
    let rows = lines(&path);
    assert_eq!(rows[0], "t[s],first[m],second[m]");
    assert_eq!(rows.len(), 1 + trace.snapshots.len());

    let mut shorter = other.clone();
    shorter.snapshots.pop();
    assert!(write_mean_distance(&[("a", &trace), ("b", &shorter)], &path).is_err());
    assert!(matches!("bogus".parse::<PlotKind>(), Err(Error::InvalidInput(_))));
}

#[test]
fn kernel_cache_round_trip() {
    let mut cfg = bundled("fig4a").unwrap();
    cfg.duration = 4.0;
    cfg.use_observer = true;
    let plan = cfg.build_plan().unwrap();
    let kernels = cfg.precompute_kernels(&plan).unwrap();
    let fp = cfg.kernel_fingerprint().unwrap();
    let cache = KernelCache { fingerprint: fp, plan, kernels };
    let dir = tempdir().unwrap();
    let path = dir.path().join("sub").join("k.fmkc");
    save_kernel_cache(&cache, &path).unwrap();
    assert_eq!(load_kernel_cache(&path, fp).unwrap(), cache);

    assert!(matches!(load_kernel_cache(&path, fp ^ 1), Err(Error::KernelCacheMissing(_))));
    assert!(matches!(load_kernel_cache(dir.path().join("none"), fp), Err(Error::KernelCacheMissing(_))));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_kernel_cache(&path, fp), Err(Error::Parse { .. })));

    let mut seeded = cfg.clone();
    seeded.comm.seed = 99;
    seeded.name = "renamed".into();
    assert_eq!(seeded.kernel_fingerprint().unwrap(), fp);
    seeded.coordinates[0].mu = 0.4;
    assert_ne!(seeded.kernel_fingerprint().unwrap(), fp);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scalar_edits_round_trip(duration in 0.0..500.0f64, p in 0.0..0.99f64, seed in any::<u64>(), mu in 0.01..5.0f64) {
        let mut cfg = bundled("fig4b").unwrap();
        cfg.duration = duration;
        cfg.comm.dropout_prob = p;
        cfg.comm.seed = seed;
        cfg.coordinates[1].mu = mu;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ScenarioConfig::from_toml_str(&text, "x.toml".as_ref()).unwrap(), cfg);
    }
}
