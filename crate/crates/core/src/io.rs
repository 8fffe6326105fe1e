//! Trace tables, plot data and the kernel cache.
//!
//! The trace is a comma-separated table with one row per snapshot, agent and
//! coordinate. All floating-point columns carry nine decimals.
//!
//! The kernel cache is the 4-byte magic `FMKC`, a little-endian `u32` format
//! version, the little-endian `u64` scenario fingerprint, and then the
//! bincode 1 encoding (little-endian, fixed-width integers) of the planned
//! scenario followed by its kernel set.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::swarm::{metrics, CoordSnapshot, KernelSet, ScenarioPlan, SimTrace, Snapshot};

pub const TRACE_HEADER: [&str; 15] = [
    "t[s]",
    "j",
    "z",
    "coord",
    "x[m]",
    "c[1/s]",
    "x_e[m]",
    "x_hat[m]",
    "x_star[m]",
    "x_e_star[m]",
    "u0[m/s]",
    "ul[m/s]",
    "l2_tracking[m]",
    "l2_observer[m]",
    "mean_distance[m]",
];

pub const CACHE_MAGIC: [u8; 4] = *b"FMKC";
pub const CACHE_VERSION: u32 = 1;

fn f9(v: f64) -> String {
    format!("{v:.9}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), message: format!("{other:?}") },
    }
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

pub fn write_trace(trace: &SimTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(BufWriter::new(create(path)?));
    w.write_record(TRACE_HEADER).map_err(|e| csv_err(path, e))?;
    let dz = if trace.agents > 1 { trace.dz() } else { 0.0 };
    for snap in &trace.snapshots {
        for (i, c) in snap.coords.iter().enumerate() {
            let l2 = |v: &[f64; 2]| v.get(i).copied().unwrap_or(0.0);
            for j in 0..c.x.len() {
                let row = [
                    f9(snap.t),
                    j.to_string(),
                    f9(j as f64 * dz),
                    (i + 1).to_string(),
                    f9(c.x[j]),
                    f9(c.c[j]),
                    f9(c.x_e[j]),
                    f9(c.x_hat[j]),
                    f9(c.x_star[j]),
                    f9(c.x_e_star[j]),
                    f9(c.u0),
                    f9(c.ul),
                    f9(l2(&snap.metrics.l2_tracking)),
                    f9(l2(&snap.metrics.l2_observer)),
                    f9(snap.metrics.mean_distance),
                ];
                w.write_record(&row).map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    #[serde(rename = "t[s]")]
    t: f64,
    j: usize,
    z: f64,
    coord: usize,
    #[serde(rename = "x[m]")]
    x: f64,
    #[serde(rename = "c[1/s]")]
    c: f64,
    #[serde(rename = "x_e[m]")]
    x_e: f64,
    #[serde(rename = "x_hat[m]")]
    x_hat: f64,
    #[serde(rename = "x_star[m]")]
    x_star: f64,
    #[serde(rename = "x_e_star[m]")]
    x_e_star: f64,
    #[serde(rename = "u0[m/s]")]
    u0: f64,
    #[serde(rename = "ul[m/s]")]
    ul: f64,
    #[serde(rename = "l2_tracking[m]")]
    l2_tracking: f64,
    #[serde(rename = "l2_observer[m]")]
    l2_observer: f64,
    #[serde(rename = "mean_distance[m]")]
    mean_distance: f64,
}

/// Read a trace table back. Metrics are taken from the stored columns;
/// message counters are not part of the table and come back as zero.
pub fn read_trace(path: impl AsRef<Path>) -> Result<SimTrace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut agents = 0;
    let mut length: f64 = 0.0;
    for (line, rec) in r.deserialize::<TraceRow>().enumerate() {
        let row = rec.map_err(|e| match csv_err(path, e) {
            Error::Parse { path, message } => Error::Parse { path, message: format!("row {}: {message}", line + 2) },
            other => other,
        })?;
        if row.coord == 0 {
            return Err(Error::Parse { path: path.to_path_buf(), message: format!("row {}: coord starts at 1", line + 2) });
        }
        agents = agents.max(row.j + 1);
        length = length.max(row.z);
        if snapshots.last().map_or(true, |s| s.t != row.t) {
            snapshots.push(Snapshot { t: row.t, coords: Vec::new(), metrics: Default::default() });
        }
        let snap = snapshots.last_mut().expect("pushed above");
        while snap.coords.len() < row.coord {
            snap.coords.push(CoordSnapshot::default());
        }
        let c = &mut snap.coords[row.coord - 1];
        if c.x.len() != row.j {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("row {}: agents are not listed in order", line + 2),
            });
        }
        c.x.push(row.x);
        c.c.push(row.c);
        c.x_e.push(row.x_e);
        c.x_hat.push(row.x_hat);
        c.x_star.push(row.x_star);
        c.x_e_star.push(row.x_e_star);
        c.u0 = row.u0;
        c.ul = row.ul;
        if row.coord <= 2 {
            snap.metrics.l2_tracking[row.coord - 1] = row.l2_tracking;
            snap.metrics.l2_observer[row.coord - 1] = row.l2_observer;
        }
        snap.metrics.mean_distance = row.mean_distance;
    }
    Ok(SimTrace { agents, length, snapshots, sent_messages: 0, dropped_messages: 0, held_feedforward: 0 })
}

/// Largest gap between the stored metrics and those recomputed from the
/// position columns.
pub fn metric_discrepancy(trace: &SimTrace) -> f64 {
    if trace.agents < 2 {
        return 0.0;
    }
    let dz = trace.dz();
    trace
        .snapshots
        .iter()
        .map(|s| {
            let m = metrics(&s.coords, dz);
            let d = (0..2)
                .map(|i| {
                    (m.l2_tracking[i] - s.metrics.l2_tracking[i])
                        .abs()
                        .max((m.l2_observer[i] - s.metrics.l2_observer[i]).abs())
                })
                .fold(0.0, f64::max);
            d.max((m.mean_distance - s.metrics.mean_distance).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Formation3d,
    ErrorNorms,
    MeanDistance,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::Formation3d, PlotKind::ErrorNorms, PlotKind::MeanDistance];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Formation3d => "formation_3d",
            PlotKind::ErrorNorms => "error_norms",
            PlotKind::MeanDistance => "mean_distance",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown plot kind `{s}`")))
    }
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(create(path)?));
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `<dir>/<kind>.csv` and return its path.
///
/// * `formation_3d`: one polyline per agent, rows `agent, t, x1, x2, ...`
///   with the physical position `x + x_e`.
/// * `error_norms`: `t` and the tracking and observer `L²` norms per
///   coordinate.
/// * `mean_distance`: `t` and the mean distance error.
pub fn emit_plot_data(trace: &SimTrace, kind: PlotKind, dir: impl AsRef<Path>) -> Result<PathBuf> {
    if trace.snapshots.is_empty() {
        return Err(Error::InvalidInput("plot data needs a nonempty trace".into()));
    }
    let path = dir.as_ref().join(format!("{kind}.csv"));
    let ncoord = trace.snapshots[0].coords.len();
    match kind {
        PlotKind::Formation3d => {
            let mut header = vec!["agent".to_string(), "t[s]".to_string()];
            header.extend((1..=ncoord).map(|i| format!("x{i}[m]")));
            let rows = (0..trace.agents).flat_map(|j| {
                trace.snapshots.iter().map(move |s| {
                    let mut row = vec![j.to_string(), f9(s.t)];
                    row.extend(s.coords.iter().map(|c| f9(c.x[j] + c.x_e[j])));
                    row
                })
            });
            write_table(&path, &header, rows)?;
        }
        PlotKind::ErrorNorms => {
            let m = ncoord.min(2);
            let mut header = vec!["t[s]".to_string()];
            header.extend((1..=m).map(|i| format!("l2_tracking_{i}[m]")));
            header.extend((1..=m).map(|i| format!("l2_observer_{i}[m]")));
            let rows = trace.snapshots.iter().map(|s| {
                let mut row = vec![f9(s.t)];
                row.extend(s.metrics.l2_tracking[..m].iter().map(|v| f9(*v)));
                row.extend(s.metrics.l2_observer[..m].iter().map(|v| f9(*v)));
                row
            });
            write_table(&path, &header, rows)?;
        }
        PlotKind::MeanDistance => {
            return write_mean_distance(&[("mean_distance", trace)], &path).map(|_| path);
        }
    }
    Ok(path)
}

/// Mean distance errors of several runs side by side, one column per label.
/// The runs must share their snapshot times.
pub fn write_mean_distance(runs: &[(&str, &SimTrace)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = runs.first().ok_or_else(|| Error::InvalidInput("no runs to compare".into()))?.1;
    for (label, tr) in runs {
        let aligned = tr.snapshots.len() == first.snapshots.len()
            && tr.snapshots.iter().zip(&first.snapshots).all(|(a, b)| a.t == b.t);
        if !aligned {
            return Err(Error::InvalidInput(format!("run `{label}` is not aligned on t")));
        }
    }
    let mut header = vec!["t[s]".to_string()];
    header.extend(runs.iter().map(|(l, _)| format!("{l}[m]")));
    let rows = (0..first.snapshots.len()).map(|k| {
        let mut row = vec![f9(first.snapshots[k].t)];
        row.extend(runs.iter().map(|(_, tr)| f9(tr.snapshots[k].metrics.mean_distance)));
        row
    });
    write_table(path, &header, rows)
}

/// Planned scenario and kernels stored by `precompute`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCache {
    pub fingerprint: u64,
    pub plan: ScenarioPlan,
    pub kernels: KernelSet,
}

fn bincode_err(path: &Path, e: bincode::Error) -> Error {
    match *e {
        bincode::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), message: other.to_string() },
    }
}

pub fn save_kernel_cache(cache: &KernelCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(create(path)?);
    let io = |e| Error::io(path, e);
    w.write_all(&CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&cache.fingerprint.to_le_bytes()).map_err(io)?;
    bincode::serialize_into(&mut w, &cache.plan).map_err(|e| bincode_err(path, e))?;
    bincode::serialize_into(&mut w, &cache.kernels).map_err(|e| bincode_err(path, e))?;
    w.flush().map_err(io)
}

/// Load a cache, refusing foreign files, other versions and caches built for
/// a different scenario fingerprint.
pub fn load_kernel_cache(path: impl AsRef<Path>, fingerprint: u64) -> Result<KernelCache> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::KernelCacheMissing(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: format!("truncated cache header: {e}"),
    })?;
    if head[..4] != CACHE_MAGIC {
        return Err(Error::Parse { path: path.to_path_buf(), message: "not a kernel cache".into() });
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("cache version {version}, expected {CACHE_VERSION}"),
        });
    }
    let stored = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    if stored != fingerprint {
        return Err(Error::KernelCacheMissing(format!(
            "{} was built for fingerprint {stored:016x}, scenario has {fingerprint:016x}",
            path.display()
        )));
    }
    let plan = bincode::deserialize_from(&mut r).map_err(|e| bincode_err(path, e))?;
    let kernels = bincode::deserialize_from(&mut r).map_err(|e| bincode_err(path, e))?;
    Ok(KernelCache { fingerprint, plan, kernels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_kind_names_round_trip() {
        for k in PlotKind::ALL {
            assert_eq!(k.name().parse::<PlotKind>().unwrap(), k);
        }
        assert!("contour".parse::<PlotKind>().is_err());
    }

    #[test]
    fn nine_decimals() {
        assert_eq!(f9(0.1), "0.100000000");
        assert_eq!(f9(-2.0), "-2.000000000");
    }
}
