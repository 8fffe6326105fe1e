use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use formation_core::io::{
    emit_plot_data, load_kernel_cache, metric_discrepancy, read_trace, save_kernel_cache, write_mean_distance,
    write_trace, KernelCache, PlotKind,
};
use formation_core::scenario::{bundled, ScenarioConfig, BUNDLED};
use formation_core::swarm::{simulate, ControllerMode};
use formation_core::{Error, Result};

#[derive(Parser)]
#[command(name = "formation", version, about = "Leader-follower formation planning, control and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the feedforward and compute the backstepping kernels.
    Precompute {
        #[command(flatten)]
        source: Source,
        /// Cache file (default `<output dir>/<name>.fmkc`).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the closed-loop swarm and write the trace table.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Summarise a trace and write plot data.
    Report {
        trace: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Plot data to emit (default: all).
        #[arg(long = "kind")]
        kinds: Vec<String>,
        /// Extra traces for a mean distance comparison, as `label=path`.
        #[arg(long = "compare")]
        compare: Vec<String>,
    },
    /// Write a bundled scenario file.
    Export { name: String, path: PathBuf },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Bundled scenario name.
    #[arg(short, long)]
    bundled: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Backstepping,
    Proportional,
    FeedforwardOnly,
}

impl From<Mode> for ControllerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Backstepping => ControllerMode::Backstepping,
            Mode::Proportional => ControllerMode::Proportional,
            Mode::FeedforwardOnly => ControllerMode::FeedforwardOnly,
        }
    }
}

impl Source {
    fn load(&self) -> Result<ScenarioConfig> {
        match (&self.config, &self.bundled) {
            (Some(path), _) => ScenarioConfig::load(path),
            (None, Some(name)) => bundled(name),
            (None, None) => Err(Error::Config("no scenario given".into())),
        }
    }
}

fn out_dir(cfg: &ScenarioConfig, out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| cfg.output.dir.clone().into())
}

fn cache_path(cfg: &ScenarioConfig, cache: &Option<PathBuf>, out: &Option<PathBuf>) -> PathBuf {
    cache.clone().unwrap_or_else(|| out_dir(cfg, out).join(format!("{}.fmkc", cfg.name)))
}

fn precompute(source: &Source, cache: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let cfg = source.load()?;
    let start = Instant::now();
    let plan = cfg.build_plan()?;
    eprintln!("planned {} coordinates in {:.1?}", plan.coords.len(), start.elapsed());
    let kernels = cfg.precompute_kernels(&plan)?;
    for (i, k) in kernels.coords.iter().enumerate() {
        eprintln!(
            "coordinate {}: controller residual {:.2e}{}",
            i + 1,
            k.controller.residual.relative,
            k.observer
                .as_ref()
                .map_or(String::new(), |o| format!(", observer residual {:.2e}", o.residual.relative))
        );
    }
    let path = cache_path(&cfg, cache, out);
    save_kernel_cache(&KernelCache { fingerprint: cfg.kernel_fingerprint()?, plan, kernels }, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(
    source: &Source,
    cache: &Option<PathBuf>,
    out: &Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<Mode>,
) -> Result<()> {
    let mut cfg = source.load()?;
    if let Some(s) = seed {
        cfg.comm.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    cfg.validate()?;
    let path = cache_path(&cfg, cache, out);
    let stored = match load_kernel_cache(&path, cfg.kernel_fingerprint()?) {
        Ok(c) => Some(c),
        Err(Error::KernelCacheMissing(_)) if cfg.mode != ControllerMode::Backstepping => None,
        Err(e) => return Err(e),
    };
    let start = Instant::now();
    let trace = match &stored {
        Some(c) => simulate(&c.plan, Some(&c.kernels), &cfg.sim_settings())?,
        None => simulate(&cfg.build_plan()?, None, &cfg.sim_settings())?,
    };
    eprintln!("simulated {:.0} s in {:.1?}", cfg.duration, start.elapsed());
    let trace_path = out_dir(&cfg, out).join(format!("{}.trace.csv", cfg.name));
    write_trace(&trace, &trace_path)?;
    if let Some(last) = trace.last() {
        let m = last.metrics;
        println!(
            "t = {:.3} s: tracking L2 {:.6} {:.6}, observer L2 {:.6} {:.6}, mean distance {:.6}",
            last.t, m.l2_tracking[0], m.l2_tracking[1], m.l2_observer[0], m.l2_observer[1], m.mean_distance
        );
    }
    println!("messages: {} sent, {} dropped", trace.sent_messages, trace.dropped_messages);
    println!("{}", trace_path.display());
    Ok(())
}

fn report(trace_path: &Path, out: &Option<PathBuf>, kinds: &[String], compare: &[String]) -> Result<()> {
    let trace = read_trace(trace_path)?;
    let last = trace
        .last()
        .ok_or_else(|| Error::InvalidInput(format!("{} holds no snapshots", trace_path.display())))?;
    let dir = out
        .clone()
        .unwrap_or_else(|| trace_path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    let m = last.metrics;
    println!("agents {}, snapshots {}, final t = {:.3} s", trace.agents, trace.snapshots.len(), last.t);
    println!("final tracking L2 {:.6} {:.6}", m.l2_tracking[0], m.l2_tracking[1]);
    println!("final observer L2 {:.6} {:.6}", m.l2_observer[0], m.l2_observer[1]);
    println!("final mean distance {:.6}", m.mean_distance);
    let centre = last.formation_centre();
    println!("final centre ({:.6}, {:.6})", centre[0], centre[1]);
    println!("metric recomputation gap {:.3e}", metric_discrepancy(&trace));
    let kinds = if kinds.is_empty() {
        PlotKind::ALL.to_vec()
    } else {
        kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?
    };
    for k in kinds {
        println!("{}", emit_plot_data(&trace, k, &dir)?.display());
    }
    if !compare.is_empty() {
        let mut others = Vec::new();
        for spec in compare {
            let (label, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("expected label=path, got `{spec}`")))?;
            others.push((label.to_string(), read_trace(path)?));
        }
        let mut runs = vec![("this", &trace)];
        runs.extend(others.iter().map(|(l, t)| (l.as_str(), t)));
        let path = dir.join("mean_distance_comparison.csv");
        write_mean_distance(&runs, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn export(name: &str, path: &Path) -> Result<()> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no bundled scenario named `{name}`")))?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Precompute { source, cache, out } => precompute(source, cache, out),
        Command::Simulate { source, cache, out, seed, mode } => run(source, cache, out, *seed, *mode),
        Command::Report { trace, out, kinds, compare } => report(trace, out, kinds, compare),
        Command::Export { name, path } => export(name, path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
