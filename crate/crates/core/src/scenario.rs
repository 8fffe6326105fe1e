//! Scenario files: TOML schema, validation, planning and kernel precompute.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backstepping::{solve_controller_kernel, solve_observer_kernel, GainSchedule, KernelConfig};
use crate::error::{Error, Result};
use crate::flatness::{assign_flat_trajectory, parametrize_state, Keyframe, PlannerConfig, ReactionMode, SeriesField};
use crate::gevrey::{TransitionSchedule, DEFAULT_MAX_ORDER, DEFAULT_SIGMA};
use crate::numerics::Grid;
use crate::steady_state::{BoundarySpec, SteadyProfile};
use crate::swarm::{
    simulate, CommConfig, ControllerMode, CoordinateKernels, CoordinatePlan, KernelSet, ReactionSource, ScenarioPlan,
    SimSettings, SimTrace,
};

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeConfig {
    pub t: f64,
    pub x0: f64,
    pub xl: f64,
    /// Constant steady reaction value `c̄`.
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub xe0: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub xel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinateConfig {
    pub a: f64,
    /// Diffusion of the reaction protocol; defaults to `a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    pub mu: f64,
    pub nu: f64,
    #[serde(rename = "keyframe")]
    pub keyframes: Vec<KeyframeConfig>,
}

impl CoordinateConfig {
    pub fn b(&self) -> f64 {
        self.b.unwrap_or(self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommSettings {
    pub dropout_prob: f64,
    pub ts_o_ms: f64,
    pub ts_e_ms: f64,
    pub seed: u64,
    pub initial_error: f64,
}

impl Default for CommSettings {
    fn default() -> Self {
        CommSettings { dropout_prob: 0.0, ts_o_ms: 10.0, ts_e_ms: 20.0, seed: 0, initial_error: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSettings {
    /// Planner nodes per agent interval.
    pub nodes_per_interval: usize,
    pub dt: f64,
    pub n_max: usize,
    pub eps: f64,
    /// Flat output location; the domain midpoint when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings { nodes_per_interval: 10, dt: 0.1, n_max: 25, eps: 1e-10, xi: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
    pub snapshot_dt: f64,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings { dir: PathBuf::from("out"), snapshot_dt: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// `N + 1`
    pub agents: usize,
    pub length: f64,
    pub duration: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    pub mode: ControllerMode,
    #[serde(default = "yes")]
    pub use_observer: bool,
    #[serde(default)]
    pub reaction: ReactionSource,
    /// Agents apply the reaction coefficient whose chain equilibria are the
    /// sampled constant-coefficient profiles.
    #[serde(default)]
    pub matched_reaction: bool,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub comm: CommSettings,
    #[serde(default)]
    pub planner: PlannerSettings,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub output: OutputSettings,
    #[serde(rename = "coordinate")]
    pub coordinates: Vec<CoordinateConfig>,
}

fn ratio_ok(a: f64, b: f64) -> bool {
    let r = a / b;
    r.is_finite() && r.round() >= 1.0 && (r - r.round()).abs() <= 1e-6
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise scenario: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Every violated constraint, by field name.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.agents >= 3, format!("agents: need at least 3 agents, got {}", self.agents));
        need(self.length > 0.0 && self.length.is_finite(), format!("length: must be > 0, got {}", self.length));
        need(self.duration >= 0.0 && self.duration.is_finite(), format!("duration: must be >= 0, got {}", self.duration));
        need(self.amplitude > 0.0, format!("amplitude: must be > 0, got {}", self.amplitude));
        need(self.sigma > 1.0, format!("sigma: must be > 1 for a convergent series, got {}", self.sigma));
        if self.mode == ControllerMode::Backstepping {
            need(
                self.agents % 2 == 1,
                format!("agents: backstepping feedback needs an odd agent count, got {}", self.agents),
            );
        }
        let c = &self.comm;
        need((0.0..1.0).contains(&c.dropout_prob), format!("comm.dropout_prob: must lie in [0, 1), got {}", c.dropout_prob));
        need(c.ts_o_ms > 0.0, format!("comm.ts_o_ms: must be > 0, got {}", c.ts_o_ms));
        need(
            c.ts_o_ms > 0.0 && ratio_ok(c.ts_e_ms, c.ts_o_ms),
            format!("comm.ts_e_ms: must be a whole multiple of ts_o_ms, got {}", c.ts_e_ms),
        );
        need(c.initial_error >= 0.0, format!("comm.initial_error: must be >= 0, got {}", c.initial_error));
        let p = &self.planner;
        need(p.nodes_per_interval >= 1, "planner.nodes_per_interval: must be >= 1".into());
        need(p.dt > 0.0, format!("planner.dt: must be > 0, got {}", p.dt));
        need(p.n_max >= 2, format!("planner.n_max: must be >= 2, got {}", p.n_max));
        if let Some(xi) = p.xi {
            need((0.0..=self.length).contains(&xi), format!("planner.xi: {xi} lies outside [0, length]"));
        }
        let k = &self.kernel;
        need(k.n >= 4, format!("kernel.n: must be >= 4, got {}", k.n));
        need(k.dt > 0.0, format!("kernel.dt: must be > 0, got {}", k.dt));
        need(
            self.output.snapshot_dt > 0.0 && c.ts_o_ms > 0.0 && ratio_ok(self.output.snapshot_dt * 1e3, c.ts_o_ms),
            format!("output.snapshot_dt: must be a whole multiple of ts_o_ms, got {}", self.output.snapshot_dt),
        );
        need(
            self.coordinates.len() == 2,
            format!("coordinate: exactly two coordinates are required, got {}", self.coordinates.len()),
        );
        for (i, co) in self.coordinates.iter().enumerate() {
            need(co.a > 0.0, format!("coordinate[{i}].a: must be > 0, got {}", co.a));
            need(co.b() > 0.0, format!("coordinate[{i}].b: must be > 0, got {}", co.b()));
            need(co.mu > 0.0, format!("coordinate[{i}].mu: must be > 0, got {}", co.mu));
            need(co.nu > 0.0, format!("coordinate[{i}].nu: must be > 0, got {}", co.nu));
            need(
                co.keyframes.len() >= 2,
                format!("coordinate[{i}].keyframe: at least two keyframes are required, got {}", co.keyframes.len()),
            );
            if let Some(first) = co.keyframes.first() {
                need(first.t == 0.0, format!("coordinate[{i}].keyframe[0].t: the first keyframe sits at t = 0, got {}", first.t));
            }
            for (j, w) in co.keyframes.windows(2).enumerate() {
                let tau = w[1].t - w[0].t;
                need(
                    tau > 0.0,
                    format!("coordinate[{i}].keyframe[{}].t: transition duration tau must be > 0, got {tau}", j + 1),
                );
            }
            if i == 1 {
                let t0: Vec<f64> = self.coordinates[0].keyframes.iter().map(|k| k.t).collect();
                let t1: Vec<f64> = co.keyframes.iter().map(|k| k.t).collect();
                need(t0 == t1, "coordinate[1].keyframe: keyframe times must match coordinate[0]".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn relocating(&self) -> bool {
        self.coordinates.iter().flat_map(|c| &c.keyframes).any(|k| k.xe0 != 0.0 || k.xel != 0.0)
    }

    pub fn planner_grid(&self) -> Result<Grid> {
        Grid::new(self.length, (self.agents - 1) * self.planner.nodes_per_interval + 1)
    }

    pub fn time_samples(&self) -> Vec<f64> {
        let dt = self.planner.dt;
        let n = (self.duration / dt).floor() as usize;
        let mut t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        if self.duration - t[n] > 1e-9 * dt {
            t.push(self.duration);
        }
        t
    }

    fn xi(&self) -> f64 {
        self.planner.xi.unwrap_or(0.5 * self.length)
    }

    fn schedules(&self, times: &[f64]) -> Result<Vec<TransitionSchedule>> {
        times
            .windows(2)
            .map(|w| TransitionSchedule::new(w[0], w[1] - w[0], self.sigma, DEFAULT_MAX_ORDER))
            .collect()
    }

    fn planner_config(&self, mode: ReactionMode) -> PlannerConfig {
        PlannerConfig { n_max: self.planner.n_max, eps: self.planner.eps, mode }
    }

    fn plan_coordinate(&self, co: &CoordinateConfig, grid: Grid, ts: &[f64]) -> Result<CoordinatePlan> {
        let zeros = vec![0.0; grid.nodes];
        let times: Vec<f64> = co.keyframes.iter().map(|k| k.t).collect();
        let schedules = self.schedules(&times)?;
        let keyframes = co
            .keyframes
            .iter()
            .map(|k| {
                let mut spec = BoundarySpec::new(k.x0, k.xl, k.c, k.c);
                spec.free_amplitude = k.free_amplitude;
                Ok(Keyframe { t: k.t, profile: SteadyProfile::solve(&spec, &zeros, co.a, co.b(), grid)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let traj = assign_flat_trajectory(&keyframes, self.xi(), &schedules)?;
        let mode = match self.reaction {
            ReactionSource::Explicit => ReactionMode::Explicit,
            ReactionSource::Protocol => ReactionMode::Series,
        };
        let field = parametrize_state(&traj, grid, ts, &self.planner_config(mode))?;
        let relocation = if self.relocating() {
            Some(relocation_field(co, grid, ts, self.xi(), &schedules, &self.planner_config(ReactionMode::Explicit))?)
        } else {
            None
        };
        Ok(CoordinatePlan {
            a: co.a,
            b: co.b(),
            mu: GainSchedule::constant(co.mu),
            nu: GainSchedule::constant(co.nu),
            field,
            relocation,
        })
    }

    pub fn build_plan(&self) -> Result<ScenarioPlan> {
        self.validate()?;
        let grid = self.planner_grid()?;
        let ts = self.time_samples();
        let coords = self
            .coordinates
            .par_iter()
            .map(|co| self.plan_coordinate(co, grid, &ts))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioPlan { agents: self.agents, length: self.length, coords })
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            mode: self.mode,
            use_observer: self.use_observer,
            matched_reaction: self.matched_reaction,
            reaction: self.reaction,
            comm: CommConfig {
                dropout_prob: self.comm.dropout_prob,
                ts_o: self.comm.ts_o_ms * 1e-3,
                ts_e: self.comm.ts_e_ms * 1e-3,
                seed: self.comm.seed,
                initial_error: self.comm.initial_error,
            },
            duration: self.duration,
            snapshot_dt: self.output.snapshot_dt,
            amplitude: self.amplitude,
        }
    }

    /// Controller kernels, plus observer kernels when the observer is used.
    pub fn precompute_kernels(&self, plan: &ScenarioPlan) -> Result<KernelSet> {
        let with_obs = self.use_observer;
        let cfg = self.kernel;
        let jobs: Vec<(usize, bool)> =
            (0..plan.coords.len()).flat_map(|i| [(i, false), (i, true)]).filter(|(_, o)| !o || with_obs).collect();
        let mut solved = jobs
            .par_iter()
            .map(|&(i, obs)| {
                let cp = &plan.coords[i];
                if obs {
                    solve_observer_kernel(&cp.field, &cp.nu, &cfg)
                } else {
                    solve_controller_kernel(&cp.field, &cp.mu, &cfg)
                }
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut coords = Vec::new();
        for _ in 0..plan.coords.len() {
            let controller = solved.next().ok_or_else(|| Error::Config("kernel job list is short".into()))?;
            let observer = if with_obs { solved.next() } else { None };
            coords.push(CoordinateKernels { controller, observer });
        }
        Ok(KernelSet { coords })
    }

    /// Hash of everything the kernels depend on.
    pub fn kernel_fingerprint(&self) -> Result<u64> {
        let mut view = self.clone();
        view.name = String::new();
        view.mode = ControllerMode::Backstepping;
        view.amplitude = 1.0;
        view.comm = CommSettings::default();
        view.output = OutputSettings::default();
        Ok(fnv1a(view.to_toml_string()?.as_bytes()))
    }
}

/// Reaction-free planning of the exogenous relocation state.
fn relocation_field(
    co: &CoordinateConfig,
    grid: Grid,
    ts: &[f64],
    xi: f64,
    schedules: &[TransitionSchedule],
    cfg: &PlannerConfig,
) -> Result<SeriesField> {
    let zeros = vec![0.0; grid.nodes];
    let keyframes = co
        .keyframes
        .iter()
        .map(|k| {
            let spec = BoundarySpec::new(k.xe0, k.xel, 0.0, 0.0);
            Ok(Keyframe { t: k.t, profile: SteadyProfile::solve(&spec, &zeros, co.a, co.b(), grid)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = assign_flat_trajectory(&keyframes, xi, schedules)?;
    parametrize_state(&traj, grid, ts, cfg)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Plan and run a scenario; backstepping mode needs `kernels`.
pub fn run_scenario(config: &ScenarioConfig, kernels: Option<&KernelSet>) -> Result<SimTrace> {
    if config.mode == ControllerMode::Backstepping && kernels.is_none() {
        return Err(Error::KernelCacheMissing(format!("scenario `{}`", config.name)));
    }
    let plan = config.build_plan()?;
    simulate(&plan, kernels, &config.sim_settings())
}

/// Scenario files shipped with the crate.
pub const BUNDLED: [(&str, &str); 4] = [
    ("fig4a", include_str!("../scenarios/fig4a.toml")),
    ("fig4b", include_str!("../scenarios/fig4b.toml")),
    ("fig4c", include_str!("../scenarios/fig4c.toml")),
    ("table3", include_str!("../scenarios/table3.toml")),
];

pub fn bundled(name: &str) -> Result<ScenarioConfig> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no bundled scenario named `{name}`")))?;
    ScenarioConfig::from_toml_str(text, Path::new(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_files_parse() {
        for (name, _) in BUNDLED {
            bundled(name).unwrap();
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
