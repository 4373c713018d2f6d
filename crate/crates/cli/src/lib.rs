//! Command-line front end: single runs and parameter sweeps that write
//! trajectory, allocation and metric artifacts for plotting.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use uavsec_core::orchestrator::{Block, SolveReport};
use uavsec_core::scenario::dbm_to_watts;
use uavsec_core::{default_scenario, load_scenario, solve, AllocationState, Scenario, Scheme, SolveError, SolveOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Everything that determines a run. Two runs with equal manifests write
/// byte-identical metrics.json unless `timing` is set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub scheme: Scheme,
    /// Scenario config path; the built-in default scenario when absent.
    pub scenario: Option<PathBuf>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub out: PathBuf,
    /// Recorded for reproducibility; the solvers themselves are deterministic.
    pub seed: u64,
    /// Write wall-clock seconds into metrics.json instead of null.
    pub timing: bool,
    pub version: String,
}

impl RunManifest {
    pub fn new(scheme: Scheme, out: impl Into<PathBuf>) -> Self {
        Self {
            scheme,
            scenario: None,
            tol: None,
            max_iter: None,
            out: out.into(),
            seed: 0,
            timing: false,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn options(&self) -> SolveOptions {
        let mut o = SolveOptions::default();
        if let Some(t) = self.tol {
            o.tol = t;
        }
        if let Some(m) = self.max_iter {
            o.max_iter = m;
        }
        o
    }

    pub fn load_scenario(&self) -> Result<Scenario> {
        match &self.scenario {
            None => Ok(default_scenario()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading scenario {}", p.display()))?;
                load_scenario(&text).with_context(|| format!("parsing scenario {}", p.display()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Values in seconds; the slot length is kept.
    MissionTime,
    /// Values in dBm, applied to every UAV.
    PeakPower,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mission_time" => Ok(SweepAxis::MissionTime),
            "peak_power" => Ok(SweepAxis::PeakPower),
            other => Err(format!("unknown sweep axis `{other}` (expected mission_time or peak_power)")),
        }
    }
}

impl SweepAxis {
    pub fn apply(self, s: &Scenario, value: f64) -> Scenario {
        match self {
            SweepAxis::MissionTime => s.with_mission_time(value),
            SweepAxis::PeakPower => s.with_peak_power(dbm_to_watts(value)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub eta_bpshz: f64,
    pub per_user_secrecy_bpshz: Vec<f64>,
    pub iterations: usize,
    pub scheme: Scheme,
    pub converged: bool,
    pub runtime_s: Option<f64>,
}

/// Outcome of a single run.
#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub metrics: Option<Metrics>,
    pub seconds: f64,
}

/// Solves one scenario and writes its artifacts into `manifest.out`.
///
/// Infeasible scenarios write nothing and return [`EXIT_INFEASIBLE`]; a solve
/// that ends unconverged or with constraint violations still writes its
/// artifacts and returns [`EXIT_SOLVER`].
pub fn run(manifest: &RunManifest) -> Result<RunOutcome> {
    let scenario = manifest.load_scenario()?;
    fs::create_dir_all(&manifest.out).with_context(|| format!("creating {}", manifest.out.display()))?;
    let start = Instant::now();
    let report = match solve(&scenario, manifest.scheme, &manifest.options()) {
        Ok(r) => r,
        Err(SolveError::Infeasible(v)) => {
            log::error!("scenario is infeasible:\n{v}");
            return Ok(RunOutcome { exit_code: EXIT_INFEASIBLE, metrics: None, seconds: start.elapsed().as_secs_f64() });
        }
        Err(e @ SolveError::NoInitialTrajectory(_)) => {
            log::error!("{e}");
            return Ok(RunOutcome { exit_code: EXIT_SOLVER, metrics: None, seconds: start.elapsed().as_secs_f64() });
        }
        Err(e) => return Err(e.into()),
    };
    let seconds = start.elapsed().as_secs_f64();

    let metrics = Metrics {
        eta_bpshz: report.eta,
        per_user_secrecy_bpshz: report.per_user.clone(),
        iterations: report.iterations.len(),
        scheme: manifest.scheme,
        converged: report.converged,
        runtime_s: manifest.timing.then_some(seconds),
    };
    write_trajectory(&manifest.out.join("trajectory.csv"), &report)?;
    write_allocation(&manifest.out.join("allocation.csv"), &report.state)?;
    write_json(&manifest.out.join("metrics.json"), &metrics)?;
    write_json(&manifest.out.join("report.json"), &FullReport::new(manifest, &report, seconds))?;

    let ok = report.converged && report.constraints.all_passed();
    if !report.constraints.all_passed() {
        log::error!("final solution violates constraints:\n{}", report.constraints);
    } else if !report.converged {
        log::warn!("stopped after {} iterations without converging", report.iterations.len());
    }
    Ok(RunOutcome { exit_code: if ok { EXIT_OK } else { EXIT_SOLVER }, metrics: Some(metrics), seconds })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub scheme: Scheme,
    pub eta_bpshz: f64,
    pub converged: bool,
    pub seconds: f64,
}

/// Runs every (value, scheme) pair concurrently and writes `sweep.csv` into
/// `out`. Rows follow the order of `values`, then `schemes`.
pub fn sweep(
    base: &RunManifest,
    schemes: &[Scheme],
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    anyhow::ensure!(!values.is_empty(), "sweep needs at least one value");
    anyhow::ensure!(values.windows(2).all(|w| w[0] < w[1]), "sweep values must be strictly ascending");
    let scenario = base.load_scenario()?;
    let opts = base.options();
    let jobs: Vec<(f64, Scheme)> = values.iter().flat_map(|&v| schemes.iter().map(move |&s| (v, s))).collect();

    let results: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(value, scheme)| {
                let s = axis.apply(&scenario, value);
                let opts = &opts;
                scope.spawn(move || -> Result<SweepRow> {
                    let start = Instant::now();
                    let (eta, converged) = match solve(&s, scheme, opts) {
                        Ok(r) => (r.eta, r.converged && r.constraints.all_passed()),
                        Err(SolveError::Infeasible(_)) | Err(SolveError::NoInitialTrajectory(_)) => (0.0, false),
                        Err(e) => return Err(e.into()),
                    };
                    Ok(SweepRow { axis_value: value, scheme, eta_bpshz: eta, converged, seconds: start.elapsed().as_secs_f64() })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&base.out).with_context(|| format!("creating {}", base.out.display()))?;
    let path = base.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Role of UAV `m` while flying to waypoint `w`; waypoint 0 precedes every slot.
pub fn role(state: &AllocationState, m: usize, w: usize) -> &'static str {
    let d = state.dims;
    if w == 0 || w > d.slots {
        return "idle";
    }
    let n = w - 1;
    if (0..d.subcarriers).any(|i| state.served_user(n, m, i).is_some()) {
        "comm"
    } else if (0..d.subcarriers).any(|i| state.jam_tx(n, m, i) > 0.0) {
        "jam"
    } else {
        "idle"
    }
}

#[derive(Serialize)]
struct TrajectoryRow {
    slot: usize,
    uav: usize,
    x_m: f64,
    y_m: f64,
    role: &'static str,
}

fn write_trajectory(path: &Path, report: &SolveReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for (m, pts) in report.traj.waypoints.iter().enumerate() {
        for (slot, p) in pts.iter().enumerate() {
            w.serialize(TrajectoryRow { slot, uav: m, x_m: p.x, y_m: p.y, role: role(&report.state, m, slot) })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AllocationRow {
    slot: usize,
    uav: usize,
    subcarrier: usize,
    user: i64,
    comm_power_w: f64,
    jam_power_w: f64,
}

fn write_allocation(path: &Path, state: &AllocationState) -> Result<()> {
    let d = state.dims;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                let user = state.served_user(n, m, i);
                w.serialize(AllocationRow {
                    slot: n,
                    uav: m,
                    subcarrier: i,
                    user: user.map_or(-1, |k| k as i64),
                    comm_power_w: user.map_or(0.0, |k| state.comm_tx(n, m, k, i)),
                    jam_power_w: state.jam_tx(n, m, i),
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct BlockEntry {
    block: String,
    proposed_eta: f64,
    accepted: bool,
    flag: String,
    seconds: f64,
}

#[derive(Serialize)]
struct IterationEntry {
    iteration: usize,
    eta: f64,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize)]
struct FullReport<'a> {
    manifest: &'a RunManifest,
    eta_bpshz: f64,
    per_user_secrecy_bpshz: &'a [f64],
    converged: bool,
    eta_trace: &'a [f64],
    iterations: Vec<IterationEntry>,
    block_seconds: [(String, f64); 3],
    constraints: &'a uavsec_core::ConstraintReport,
    runtime_s: f64,
}

impl<'a> FullReport<'a> {
    fn new(manifest: &'a RunManifest, r: &'a SolveReport, seconds: f64) -> Self {
        let name = |b: Block| format!("{b:?}").to_lowercase();
        Self {
            manifest,
            eta_bpshz: r.eta,
            per_user_secrecy_bpshz: &r.per_user,
            converged: r.converged,
            eta_trace: &r.eta_trace,
            iterations: r
                .iterations
                .iter()
                .map(|it| IterationEntry {
                    iteration: it.iteration,
                    eta: it.eta,
                    blocks: it
                        .blocks
                        .iter()
                        .map(|b| BlockEntry {
                            block: name(b.block),
                            proposed_eta: b.proposed,
                            accepted: b.accepted,
                            flag: format!("{:?}", b.flag).to_lowercase(),
                            seconds: b.seconds,
                        })
                        .collect(),
                })
                .collect(),
            block_seconds: [Block::Comm, Block::Jam, Block::Traj].map(|b| (name(b), r.block_seconds(b))),
            constraints: &r.constraints,
            runtime_s: seconds,
        }
    }
}
