//! Discrete leader–follower chain: the next-neighbour protocol, leader
//! inputs, lossy exchange of `c` and `x_e`, and the closed-loop driver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backstepping::{feedback_u0, feedback_ul, observer_gains, GainSchedule, KernelGrid, ObserverGains};
use crate::error::{Error, Result};
use crate::flatness::SeriesField;
use crate::numerics::{bracket, simpson, solve_tridiagonal, trapezoid, Grid};
use crate::observer::{observer_step, one_sided_slope, GainSnapshot, Measurements, ObserverField};

const RK4_LIMIT: f64 = 2.78;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    Backstepping,
    Proportional,
    FeedforwardOnly,
}

/// Where follower reaction values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionSource {
    /// Every agent is assigned `c*(z_j, t)` directly.
    #[default]
    Explicit,
    /// `c` runs its own protocol driven by the leader inputs `v*`.
    Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Follower right-hand side; leader rows are left at zero.
pub fn protocol_rhs(x: &[f64], c: &[f64], frak_a: f64, out: &mut [f64]) {
    let n = x.len();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for j in 1..n - 1 {
        out[j] = frak_a * (x[j - 1] - 2.0 * x[j] + x[j + 1]) + c[j] * x[j];
    }
}

fn check_chain(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("a chain needs at least 3 agents, got {n}")));
    }
    Ok(())
}

/// Advance the followers by `dt` with `c` held; leaders are untouched.
pub fn follower_step(x: &[f64], c: &[f64], frak_a: f64, dt: f64, integrator: Integrator) -> Result<Vec<f64>> {
    check_chain(x.len())?;
    if c.len() != x.len() {
        return Err(Error::InvalidInput("x and c differ in length".into()));
    }
    let cmax = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let rho = 4.0 * frak_a + cmax;
    let limit = match integrator {
        Integrator::Euler => 2.0,
        Integrator::Rk4 => RK4_LIMIT,
    };
    if !(dt > 0.0) || dt * rho > limit {
        return Err(Error::Config(format!("step {dt} violates the stability bound {:.4e}", limit / rho)));
    }
    let f = |y: &[f64], out: &mut [f64]| protocol_rhs(y, c, frak_a, out);
    Ok(match integrator {
        Integrator::Euler => {
            let mut k = vec![0.0; x.len()];
            f(x, &mut k);
            x.iter().zip(&k).map(|(y, d)| y + dt * d).collect()
        }
        Integrator::Rk4 => crate::observer::rk4(x, dt, f),
    })
}

/// Reaction coefficient for which the chain with spacing `dz` has the
/// samples of `cos(√(c/a) z)` (or `cosh`) as exact equilibria.
pub fn matched_reaction(c: f64, a: f64, dz: f64) -> f64 {
    let kappa = (c.abs() / a).sqrt() * dz;
    let scale = 2.0 * a / (dz * dz);
    if c >= 0.0 {
        scale * (1.0 - kappa.cos())
    } else {
        -scale * (kappa.cosh() - 1.0)
    }
}

/// Time scaling between the agent chain and its diffusion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// `r = ℓ² 𝔞 / (N² a)`
    pub r: f64,
}

impl Scaling {
    /// Continuum time for chain time `t`.
    pub fn time(&self, t: f64) -> f64 {
        self.r * t
    }

    /// Continuum reaction (or source) value for a chain value.
    pub fn reaction(&self, c: f64) -> f64 {
        c / self.r
    }
}

pub fn continuum_discrete_scaling(n: usize, length: f64, frak_a: f64, a: f64) -> Result<Scaling> {
    if n == 0 || !(length > 0.0 && frak_a > 0.0 && a > 0.0) {
        return Err(Error::InvalidInput("scaling needs positive N, ℓ, 𝔞 and a".into()));
    }
    let n = n as f64;
    Ok(Scaling { r: length * length * frak_a / (n * n * a) })
}

/// Time series of a chain or grid run, `[step][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

/// Leader rates `[u₀, u_N, v₀, v_N]` as a function of time.
pub type LeaderSignals<'a> = &'a dyn Fn(f64) -> [f64; 4];

#[allow(clippy::too_many_arguments)]
fn run_coupled(
    x0: &[f64],
    c0: &[f64],
    kx: f64,
    kc: f64,
    d: &dyn Fn(usize, f64) -> f64,
    leaders: LeaderSignals,
    t_end: f64,
    dt: f64,
) -> Result<ChainRun> {
    let n = x0.len();
    check_chain(n)?;
    if c0.len() != n {
        return Err(Error::InvalidInput("x and c differ in length".into()));
    }
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(Error::InvalidInput("step and horizon must be positive".into()));
    }
    let steps = (t_end / dt).round() as usize;
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| {
        let (x, c) = y.split_at(n);
        let (ox, oc) = out.split_at_mut(n);
        let lead = leaders(t);
        for j in 1..n - 1 {
            ox[j] = kx * (x[j - 1] - 2.0 * x[j] + x[j + 1]) + c[j] * x[j];
            oc[j] = kc * (c[j - 1] - 2.0 * c[j] + c[j + 1]) + d(j, t) * c[j];
        }
        ox[0] = lead[0];
        ox[n - 1] = lead[1];
        oc[0] = lead[2];
        oc[n - 1] = lead[3];
    };
    let mut y: Vec<f64> = x0.iter().chain(c0).copied().collect();
    let mut run = ChainRun { t: vec![0.0], x: vec![x0.to_vec()], c: vec![c0.to_vec()] };
    for k in 0..steps {
        let t = k as f64 * dt;
        y = rk4_t(&y, t, dt, &rhs);
        run.t.push((k + 1) as f64 * dt);
        run.x.push(y[..n].to_vec());
        run.c.push(y[n..].to_vec());
    }
    Ok(run)
}

fn rk4_t<F: Fn(f64, &[f64], &mut [f64])>(y: &[f64], t: f64, dt: f64, f: &F) -> Vec<f64> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let step = |k: &[f64], h: f64| -> Vec<f64> { (0..n).map(|i| y[i] + h * k[i]).collect() };
    f(t, y, &mut k1);
    f(t + 0.5 * dt, &step(&k1, 0.5 * dt), &mut k2);
    f(t + 0.5 * dt, &step(&k2, 0.5 * dt), &mut k3);
    f(t + dt, &step(&k3, dt), &mut k4);
    (0..n)
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// The agent protocol for positions and reaction values.
#[allow(clippy::too_many_arguments)]
pub fn simulate_protocol(
    x0: &[f64],
    c0: &[f64],
    frak_a: f64,
    frak_b: f64,
    d: &dyn Fn(usize, f64) -> f64,
    leaders: LeaderSignals,
    t_end: f64,
    dt: f64,
) -> Result<ChainRun> {
    run_coupled(x0, c0, frak_a, frak_b, d, leaders, t_end, dt)
}

/// Finite-difference method of lines for the diffusion–reaction pair on
/// `grid`; `d` takes `(z, t)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_continuum(
    x0: &[f64],
    c0: &[f64],
    grid: Grid,
    a: f64,
    b: f64,
    d: &dyn Fn(f64, f64) -> f64,
    leaders: LeaderSignals,
    t_end: f64,
    dt: f64,
) -> Result<ChainRun> {
    if x0.len() != grid.nodes {
        return Err(Error::InvalidInput("initial state does not match the grid".into()));
    }
    let h2 = grid.step() * grid.step();
    let dj = |j: usize, t: f64| d(grid.z(j), t);
    run_coupled(x0, c0, a / h2, b / h2, &dj, leaders, t_end, dt)
}

/// Rest state of the chain with leaders held at `x0`, `xl`.
pub fn discrete_steady_profile(x0: f64, xl: f64, c: &[f64], frak_a: f64) -> Result<Vec<f64>> {
    let n = c.len();
    check_chain(n)?;
    let m = n - 2;
    let lower = vec![frak_a; m];
    let upper = vec![frak_a; m];
    let diag: Vec<f64> = (1..n - 1).map(|j| c[j] - 2.0 * frak_a).collect();
    let mut rhs = vec![0.0; m];
    rhs[0] -= frak_a * x0;
    rhs[m - 1] -= frak_a * xl;
    let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let mut out = Vec::with_capacity(n);
    out.push(x0);
    out.extend(inner);
    out.push(xl);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    /// Probability that one `c` or `x_e` message is lost.
    pub dropout_prob: f64,
    /// Control and observer sample time (s).
    pub ts_o: f64,
    /// Exchange interval of `c` and `x_e` (s).
    pub ts_e: f64,
    pub seed: u64,
    /// Initial error bound as a fraction of the formation amplitude.
    pub initial_error: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        CommConfig { dropout_prob: 0.0, ts_o: 0.01, ts_e: 0.02, seed: 0, initial_error: 0.0 }
    }
}

/// Planned data for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatePlan {
    pub a: f64,
    pub b: f64,
    pub mu: GainSchedule,
    pub nu: GainSchedule,
    pub field: SeriesField,
    /// Planned `x_e*` (reaction-free heat equation), if relocating.
    pub relocation: Option<SeriesField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPlan {
    pub agents: usize,
    pub length: f64,
    pub coords: Vec<CoordinatePlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateKernels {
    pub controller: KernelGrid,
    pub observer: Option<KernelGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub coords: Vec<CoordinateKernels>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSettings {
    pub mode: ControllerMode,
    pub use_observer: bool,
    pub matched_reaction: bool,
    pub reaction: ReactionSource,
    pub comm: CommConfig,
    pub duration: f64,
    pub snapshot_dt: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l2_tracking: [f64; 2],
    pub l2_observer: [f64; 2],
    pub mean_distance: f64,
}

/// Per-coordinate values at one snapshot, on the agents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordSnapshot {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
    pub x_e: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub x_star: Vec<f64>,
    pub x_e_star: Vec<f64>,
    /// Applied leader rates `u₀`, `u_ℓ`.
    pub u0: f64,
    pub ul: f64,
}

impl CoordSnapshot {
    /// Physical position `x + x_e` minus its target.
    pub fn tracking_error(&self) -> Vec<f64> {
        (0..self.x.len())
            .map(|j| (self.x[j] + self.x_e[j]) - (self.x_star[j] + self.x_e_star[j]))
            .collect()
    }

    pub fn observer_error(&self) -> Vec<f64> {
        self.x.iter().zip(&self.x_hat).map(|(x, h)| x - h).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub coords: Vec<CoordSnapshot>,
    pub metrics: Metrics,
}

impl Snapshot {
    /// Mean shift of the agents from the unrelocated target profile.
    pub fn formation_centre(&self) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (i, c) in self.coords.iter().enumerate().take(2) {
            let n = c.x.len() as f64;
            out[i] = (0..c.x.len()).map(|j| c.x[j] + c.x_e[j] - c.x_star[j]).sum::<f64>() / n;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub agents: usize,
    pub length: f64,
    pub snapshots: Vec<Snapshot>,
    pub sent_messages: u64,
    pub dropped_messages: u64,
    /// Steps whose feedforward lay beyond the planned horizon.
    pub held_feedforward: u64,
}

impl SimTrace {
    pub fn dz(&self) -> f64 {
        self.length / (self.agents - 1) as f64
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    /// Snapshot closest to `t`.
    pub fn at(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

/// `L²` norm over the agent grid: Simpson for odd counts, trapezoid otherwise.
pub fn l2_norm(values: &[f64], dz: f64) -> f64 {
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    let integral = if sq.len() >= 3 && sq.len() % 2 == 1 {
        simpson(&sq, dz).unwrap_or_else(|_| trapezoid(&sq, dz))
    } else {
        trapezoid(&sq, dz)
    };
    integral.max(0.0).sqrt()
}

/// `(1/(N+1)) Σ_j √(e¹_j² + e²_j²)`
pub fn mean_distance(e1: &[f64], e2: &[f64]) -> f64 {
    let n = e1.len().min(e2.len());
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|j| e1[j].hypot(e2[j])).sum::<f64>() / n as f64
}

/// Metrics of one snapshot from its stored values.
pub fn metrics(coords: &[CoordSnapshot], dz: f64) -> Metrics {
    let mut m = Metrics::default();
    let errs: Vec<Vec<f64>> = coords.iter().map(|c| c.tracking_error()).collect();
    for (i, c) in coords.iter().enumerate().take(2) {
        m.l2_tracking[i] = l2_norm(&errs[i], dz);
        m.l2_observer[i] = l2_norm(&c.observer_error(), dz);
    }
    if errs.len() >= 2 {
        m.mean_distance = mean_distance(&errs[0], &errs[1]);
    }
    m
}

fn round9(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// Field values at the agents, linear in time.
struct Sampler<'a> {
    field: &'a SeriesField,
    stride: usize,
    agents: usize,
}

impl<'a> Sampler<'a> {
    fn new(field: &'a SeriesField, agents: usize) -> Result<Self> {
        let intervals = field.grid.nodes - 1;
        if intervals % (agents - 1) != 0 {
            return Err(Error::Config(format!(
                "planner grid with {intervals} intervals does not contain the {agents} agent nodes"
            )));
        }
        Ok(Sampler { field, stride: intervals / (agents - 1), agents })
    }

    fn beyond(&self, t: f64) -> bool {
        t > *self.field.t_samples.last().unwrap_or(&0.0) + 1e-9
    }

    fn row(&self, f: &[Vec<f64>], t: f64) -> Vec<f64> {
        let (k, w) = bracket(&self.field.t_samples, t);
        let k1 = (k + 1).min(f.len() - 1);
        (0..self.agents)
            .map(|j| {
                let i = j * self.stride;
                (1.0 - w) * f[k][i] + w * f[k1][i]
            })
            .collect()
    }

    fn ends(&self, f: &[Vec<f64>], t: f64) -> (f64, f64) {
        let (k, w) = bracket(&self.field.t_samples, t);
        let k1 = (k + 1).min(f.len() - 1);
        let last = self.field.grid.nodes - 1;
        let at = |i: usize| (1.0 - w) * f[k][i] + w * f[k1][i];
        (at(0), at(last))
    }

    fn x(&self, t: f64) -> Vec<f64> {
        self.row(&self.field.x, t)
    }

    fn c(&self, t: f64) -> Vec<f64> {
        self.row(&self.field.c, t)
    }
}

struct CoordSim<'a> {
    plan: &'a CoordinatePlan,
    target: Sampler<'a>,
    reloc: Option<Sampler<'a>>,
    frak_a: f64,
    frak_b: f64,
    /// `(a, Δz)` when the reaction is mapped through [`matched_reaction`].
    matched: Option<(f64, f64)>,
    x: Vec<f64>,
    c: Vec<f64>,
    xe: Vec<f64>,
    observer: Option<ObserverField>,
    gains: Option<ObserverGains>,
    controller: Option<&'a KernelGrid>,
    /// Last received neighbour values `(left, right)` per agent.
    c_recv: Vec<(f64, f64)>,
    xe_recv: Vec<(f64, f64)>,
    v_hold: (f64, f64),
    w_hold: (f64, f64),
    u_applied: (f64, f64),
}

/// Closed-loop run of the two-coordinate chain.
pub fn simulate(plan: &ScenarioPlan, kernels: Option<&KernelSet>, settings: &SimSettings) -> Result<SimTrace> {
    let n = plan.agents;
    check_chain(n)?;
    if plan.coords.len() != 2 {
        return Err(Error::Config("a scenario has exactly two coordinates".into()));
    }
    let comm = settings.comm;
    if !(comm.ts_o > 0.0 && comm.ts_e >= comm.ts_o) {
        return Err(Error::Config("sample times need 0 < ts_o <= ts_e".into()));
    }
    if !(0.0..1.0).contains(&comm.dropout_prob) {
        return Err(Error::Config("dropout probability must lie in [0, 1)".into()));
    }
    let ratio = |a: f64, b: f64, what: &str| -> Result<usize> {
        let r = a / b;
        if (r - r.round()).abs() > 1e-6 || r.round() < 1.0 {
            return Err(Error::Config(format!("{what} must be a whole multiple of the control sample time")));
        }
        Ok(r.round() as usize)
    };
    let e_every = ratio(comm.ts_e, comm.ts_o, "ts_e")?;
    let snap_every = ratio(settings.snapshot_dt, comm.ts_o, "snapshot interval")?;
    let backstepping = settings.mode == ControllerMode::Backstepping;
    let with_observer = backstepping && settings.use_observer;
    if backstepping {
        let ks = kernels.ok_or_else(|| Error::KernelCacheMissing("no kernels were supplied".into()))?;
        if ks.coords.len() != 2 || (with_observer && ks.coords.iter().any(|k| k.observer.is_none())) {
            return Err(Error::KernelCacheMissing("kernel set is incomplete for this mode".into()));
        }
        if n % 2 == 0 {
            return Err(Error::Config(format!(
                "backstepping feedback integrates with Simpson's rule and needs an odd agent count, got {n}"
            )));
        }
    }

    let dz = plan.length / (n - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(comm.seed);
    let amp = settings.amplitude * comm.initial_error;
    let mut sims: Vec<CoordSim> = Vec::with_capacity(2);
    for (i, cp) in plan.coords.iter().enumerate() {
        let target = Sampler::new(&cp.field, n)?;
        let reloc = cp.relocation.as_ref().map(|f| Sampler::new(f, n)).transpose()?;
        let x_star = target.x(0.0);
        let x: Vec<f64> = x_star.iter().map(|v| v + amp * rng.gen_range(-1.0..=1.0)).collect();
        let observer = if with_observer {
            let xh: Vec<f64> = x.iter().map(|v| v - amp * rng.gen_range(-1.0..=1.0)).collect();
            Some(ObserverField::new(Grid::new(plan.length, n)?, xh, 0.0)?)
        } else {
            None
        };
        let ks = kernels.and_then(|k| k.coords.get(i));
        let gains = match (with_observer, ks.and_then(|k| k.observer.as_ref())) {
            (true, Some(obs)) => Some(observer_gains(obs)?),
            _ => None,
        };
        let c = target.c(0.0);
        let xe = reloc.as_ref().map_or(vec![0.0; n], |r| r.x(0.0));
        sims.push(CoordSim {
            plan: cp,
            frak_a: cp.a / (dz * dz),
            frak_b: cp.b / (dz * dz),
            matched: settings.matched_reaction.then_some((cp.a, dz)),
            c_recv: (0..n).map(|j| (c[j.saturating_sub(1)], c[(j + 1).min(n - 1)])).collect(),
            xe_recv: (0..n).map(|j| (xe[j.saturating_sub(1)], xe[(j + 1).min(n - 1)])).collect(),
            target,
            reloc,
            x,
            c,
            xe,
            observer,
            gains,
            controller: if backstepping { ks.map(|k| &k.controller) } else { None },
            v_hold: (0.0, 0.0),
            w_hold: (0.0, 0.0),
            u_applied: (0.0, 0.0),
        });
    }

    // plant substeps inside one control sample
    let stiff = sims
        .iter()
        .map(|s| {
            let cmax = s.plan.field.c.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
            4.0 * s.frak_a.max(s.frak_b) + cmax
        })
        .fold(0.0, f64::max);
    let sub = ((comm.ts_o * stiff / RK4_LIMIT).ceil() as usize).max(1);
    let dt = comm.ts_o / sub as f64;

    let steps = (settings.duration / comm.ts_o).round() as usize;
    let mut trace = SimTrace {
        agents: n,
        length: plan.length,
        snapshots: Vec::with_capacity(steps / snap_every + 1),
        sent_messages: 0,
        dropped_messages: 0,
        held_feedforward: 0,
    };
    trace.snapshots.push(snapshot(&sims, 0.0, dz, settings.reaction));

    for k in 0..steps {
        let t = k as f64 * comm.ts_o;
        if k % e_every == 0 {
            for s in sims.iter_mut() {
                exchange(s, settings.reaction, comm.dropout_prob, &mut rng, &mut trace);
                s.v_hold = s.target.ends(&s.target.field.dt_c, t);
                if let Some(r) = &s.reloc {
                    s.w_hold = r.ends(&r.field.dt_x, t);
                }
            }
        }
        for s in sims.iter_mut() {
            if s.target.beyond(t) {
                trace.held_feedforward += 1;
            }
            let (u0s, uls) = s.target.ends(&s.target.field.dt_x, t);
            let x_star = s.target.x(t);
            let mu = s.plan.mu.at(t);
            let (du0, dul) = match settings.mode {
                ControllerMode::FeedforwardOnly => (0.0, 0.0),
                ControllerMode::Proportional => {
                    (-mu * (s.x[0] - x_star[0]), -mu * (s.x[n - 1] - x_star[n - 1]))
                }
                ControllerMode::Backstepping => {
                    let basis = s.observer.as_ref().map_or(&s.x, |o| &o.x_hat);
                    let err: Vec<f64> = basis.iter().zip(&x_star).map(|(v, r)| v - r).collect();
                    let kernel = s.controller.ok_or_else(|| Error::KernelCacheMissing("controller kernel".into()))?;
                    let du0 = feedback_u0(err[0], mu);
                    let dul = feedback_ul(&err, one_sided_slope(&err, dz), kernel, mu, s.plan.a, t)?;
                    (du0, dul)
                }
            };
            s.u_applied = (u0s + du0, uls + dul);
            if let (Some(obs), Some(g)) = (&s.observer, &s.gains) {
                let (l, m, l0, ll) = g.at(t, n);
                let gains = GainSnapshot { l, m, l0, ll };
                let meas = Measurements::from_positions(&s.x, dz)?;
                let c_star = s.effective(s.target.c(t));
                s.observer = Some(observer_step(obs, &meas, &gains, s.u_applied, &c_star, s.plan.a, comm.ts_o)?);
            }
            for m in 0..sub {
                advance_plant(s, t + m as f64 * dt, dt, settings.reaction);
            }
            if s.x.iter().chain(&s.c).chain(&s.xe).any(|v| !v.is_finite()) {
                return Err(Error::NonConvergence {
                    what: "closed-loop simulation".into(),
                    detail: format!("state diverged at t = {t:.3}"),
                });
            }
        }
        if (k + 1) % snap_every == 0 {
            let tn = (k + 1) as f64 * comm.ts_o;
            trace.snapshots.push(snapshot(&sims, tn, dz, settings.reaction));
        }
    }
    Ok(trace)
}

fn exchange(s: &mut CoordSim, reaction: ReactionSource, p: f64, rng: &mut ChaCha8Rng, trace: &mut SimTrace) {
    let n = s.x.len();
    let mut deliver = |recv: &mut Vec<(f64, f64)>, vals: &[f64]| {
        for j in 1..n - 1 {
            for side in 0..2 {
                trace.sent_messages += 1;
                if p > 0.0 && rng.gen::<f64>() < p {
                    trace.dropped_messages += 1;
                    continue;
                }
                if side == 0 {
                    recv[j].0 = vals[j - 1];
                } else {
                    recv[j].1 = vals[j + 1];
                }
            }
        }
    };
    if reaction == ReactionSource::Protocol {
        let vals = s.c.clone();
        deliver(&mut s.c_recv, &vals);
    }
    if s.reloc.is_some() {
        let vals = s.xe.clone();
        deliver(&mut s.xe_recv, &vals);
    }
}

impl CoordSim<'_> {
    fn effective(&self, c: Vec<f64>) -> Vec<f64> {
        match self.matched {
            Some((a, dz)) => c.into_iter().map(|v| matched_reaction(v, a, dz)).collect(),
            None => c,
        }
    }
}

fn advance_plant(s: &mut CoordSim, t: f64, dt: f64, reaction: ReactionSource) {
    let n = s.x.len();
    let protocol = reaction == ReactionSource::Protocol;
    let reloc = s.reloc.is_some();
    let (fa, fb) = (s.frak_a, s.frak_b);
    let u = s.u_applied;
    let v = s.v_hold;
    let w = s.w_hold;
    let c_recv = &s.c_recv;
    let xe_recv = &s.xe_recv;
    let target = &s.target;
    let effective = |c: Vec<f64>| s.effective(c);
    let d_field = &target.field.d;
    let has_d = protocol && !d_field.is_empty();
    let rhs = |tt: f64, y: &[f64], out: &mut [f64]| {
        let (x, rest) = y.split_at(n);
        let (c, xe) = rest.split_at(n);
        let (ox, orest) = out.split_at_mut(n);
        let (oc, oxe) = orest.split_at_mut(n);
        let c_now = effective(if protocol { c.to_vec() } else { target.c(tt) });
        let d_now = if has_d { Some(target.row(d_field, tt)) } else { None };
        for j in 1..n - 1 {
            ox[j] = fa * (x[j - 1] - 2.0 * x[j] + x[j + 1]) + c_now[j] * x[j];
            oc[j] = if protocol {
                fb * (c_recv[j].0 + c_recv[j].1 - 2.0 * c[j]) + d_now.as_ref().map_or(0.0, |d| d[j]) * c[j]
            } else {
                0.0
            };
            oxe[j] = if reloc { fa * (xe_recv[j].0 + xe_recv[j].1 - 2.0 * xe[j]) } else { 0.0 };
        }
        ox[0] = u.0;
        ox[n - 1] = u.1;
        oc[0] = if protocol { v.0 } else { 0.0 };
        oc[n - 1] = if protocol { v.1 } else { 0.0 };
        oxe[0] = if reloc { w.0 } else { 0.0 };
        oxe[n - 1] = if reloc { w.1 } else { 0.0 };
    };
    let y: Vec<f64> = s.x.iter().chain(&s.c).chain(&s.xe).copied().collect();
    let y = rk4_t(&y, t, dt, &rhs);
    s.x.copy_from_slice(&y[..n]);
    if protocol {
        s.c.copy_from_slice(&y[n..2 * n]);
    } else {
        s.c = target.c(t + dt);
    }
    s.xe.copy_from_slice(&y[2 * n..]);
}

fn snapshot(sims: &[CoordSim], t: f64, dz: f64, reaction: ReactionSource) -> Snapshot {
    let r = |v: &[f64]| v.iter().map(|x| round9(*x)).collect::<Vec<f64>>();
    let coords: Vec<CoordSnapshot> = sims
        .iter()
        .map(|s| {
            let n = s.x.len();
            let c = if reaction == ReactionSource::Protocol { s.c.clone() } else { s.target.c(t) };
            CoordSnapshot {
                x: r(&s.x),
                c: r(&c),
                x_e: r(&s.xe),
                x_hat: r(s.observer.as_ref().map_or(&s.x, |o| &o.x_hat)),
                x_star: r(&s.target.x(t)),
                x_e_star: r(&s.reloc.as_ref().map_or(vec![0.0; n], |rr| rr.x(t))),
                u0: round9(s.u_applied.0),
                ul: round9(s.u_applied.1),
            }
        })
        .collect();
    let metrics = metrics(&coords, dz);
    Snapshot { t: round9(t), coords, metrics }
}
