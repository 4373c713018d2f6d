//! Alternating optimization of scheduling and power, jamming, and trajectories,
//! plus the no-jamming and split-role baselines.
//!
//! Every block update is checked against the oracle objective and kept only if
//! it does not lower it, so the objective trace is non-decreasing by construction.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::comm_alloc::{solve_subproblem1, CommOptions};
use crate::jam_alloc::{solve_jamming_sca, JamOptions, JamStatus, PenaltyConfig};
use crate::rates::{check_constraints, objective, per_user_secrecy, AllocationState, ConstraintReport, Dims, TrajectorySet};
use crate::scenario::{validate, Scenario, ValidationReport};
use crate::traj_opt::{initial_trajectory, solve_trajectory_sca, user_tour_trajectory, TrajError, TrajOptions, TrajStatus};

/// Largest objective drop a block update may cause and still be accepted.
const ACCEPT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Multi-purpose UAVs: every UAV may communicate or jam on any subcarrier.
    Pa,
    /// No jamming.
    Nj,
    /// Split roles: the first UAV only jams, the second only communicates.
    Sp,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Pa, Scheme::Nj, Scheme::Sp];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Pa => "pa",
            Scheme::Nj => "nj",
            Scheme::Sp => "sp",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pa" => Ok(Scheme::Pa),
            "nj" => Ok(Scheme::Nj),
            "sp" => Ok(Scheme::Sp),
            other => Err(format!("unknown scheme `{other}` (expected pa, nj or sp)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("scenario is infeasible:\n{0}")]
    Infeasible(ValidationReport),
    #[error("no feasible initial trajectory: {0}")]
    NoInitialTrajectory(#[from] TrajError),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Relative objective change that counts as converged (twice in a row).
    pub tol: f64,
    pub max_iter: usize,
    pub comm: CommOptions,
    pub penalty: PenaltyConfig,
    pub jam: JamOptions,
    pub traj: TrajOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 60,
            comm: CommOptions::default(),
            penalty: PenaltyConfig::default(),
            jam: JamOptions::default(),
            traj: TrajOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Comm,
    Jam,
    Traj,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockFlag {
    Ok,
    /// The block stopped at its iteration cap.
    NotConverged,
    /// The block's own safeguard kept its input.
    Unchanged,
    /// The block's solver failed; its input was kept.
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutcome {
    pub block: Block,
    /// Oracle objective of the block's proposal.
    pub proposed: f64,
    pub accepted: bool,
    pub flag: BlockFlag,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Oracle objective after the iteration.
    pub eta: f64,
    pub blocks: Vec<BlockOutcome>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub scheme: Scheme,
    /// Oracle objective before the first iteration and after each one.
    pub eta_trace: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub state: AllocationState,
    pub traj: TrajectorySet,
    pub eta: f64,
    pub per_user: Vec<f64>,
    pub constraints: ConstraintReport,
}

impl SolveReport {
    /// Total seconds spent per block.
    pub fn block_seconds(&self, block: Block) -> f64 {
        self.iterations
            .iter()
            .flat_map(|r| &r.blocks)
            .filter(|b| b.block == block)
            .map(|b| b.seconds)
            .sum()
    }

    /// True when any block update failed or stopped early.
    pub fn has_warnings(&self) -> bool {
        self.iterations
            .iter()
            .flat_map(|r| &r.blocks)
            .any(|b| matches!(b.flag, BlockFlag::Failed | BlockFlag::NotConverged))
    }
}

pub fn solve_pa(s: &Scenario, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    solve(s, Scheme::Pa, opts)
}

pub fn solve_nj(s: &Scenario, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    solve(s, Scheme::Nj, opts)
}

pub fn solve_sp(s: &Scenario, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    solve(s, Scheme::Sp, opts)
}

/// Index of the jamming-only UAV and the communication-only UAV in the split-role scheme.
pub const SP_JAMMER: usize = 0;
pub const SP_SENDER: usize = 1;

pub fn solve(s: &Scenario, scheme: Scheme, opts: &SolveOptions) -> Result<SolveReport, SolveError> {
    let report = validate(s);
    if !report.is_feasible() {
        return Err(SolveError::Infeasible(report));
    }
    if scheme == Scheme::Sp && s.num_uavs() != 2 {
        return Err(SolveError::Unsupported(format!(
            "the split-role scheme needs exactly 2 UAVs, got {}",
            s.num_uavs()
        )));
    }
    let mut traj = initial_trajectory(s)?;
    let mut comm_opts = opts.comm.clone();
    if scheme == Scheme::Sp {
        let mut allowed = vec![false; s.num_uavs()];
        allowed[SP_SENDER] = true;
        comm_opts.allowed = Some(allowed);
        // The sender alone must reach every user; start it on a tour over them when one fits.
        if let Some(tour) = user_tour_trajectory(s, SP_SENDER) {
            traj = tour;
        }
    }

    let mut state = AllocationState::zeros(Dims::of(s));
    let mut eta = objective(&state, &traj, s);
    let mut eta_trace = vec![eta];
    let mut iterations = Vec::new();
    let mut calm = 0;
    let mut converged = false;

    for l in 1..=opts.max_iter {
        let mut blocks = Vec::with_capacity(3);

        let t = Instant::now();
        let comm = solve_subproblem1(&state, &traj, s, &comm_opts);
        let accepted = comm.eta >= eta - ACCEPT_SLACK;
        blocks.push(BlockOutcome {
            block: Block::Comm,
            proposed: comm.eta,
            accepted,
            flag: if comm.converged { BlockFlag::Ok } else { BlockFlag::NotConverged },
            seconds: t.elapsed().as_secs_f64(),
        });
        if accepted {
            state = comm.state;
            eta = comm.eta;
        }

        if scheme != Scheme::Nj {
            let t = Instant::now();
            let (proposed, flag, next) = match solve_jamming_sca(&state, &traj, s, &opts.penalty, &opts.jam) {
                Ok(sol) => {
                    let flag = match sol.status {
                        JamStatus::Updated => BlockFlag::Ok,
                        JamStatus::KeptIncoming => BlockFlag::Unchanged,
                        JamStatus::SolverFailure => BlockFlag::Failed,
                    };
                    (sol.eta, flag, Some(sol.state))
                }
                Err(e) => {
                    log::warn!("jamming block failed: {e}");
                    (eta, BlockFlag::Failed, None)
                }
            };
            let accepted = next.is_some() && proposed >= eta - ACCEPT_SLACK;
            blocks.push(BlockOutcome {
                block: Block::Jam,
                proposed,
                accepted,
                flag,
                seconds: t.elapsed().as_secs_f64(),
            });
            if let (true, Some(next)) = (accepted, next) {
                state = next;
                eta = proposed;
            }
        }

        let t = Instant::now();
        let (proposed, flag, next) = match solve_trajectory_sca(&state, &traj, s, &opts.traj) {
            Ok(sol) => {
                let flag = match sol.status {
                    TrajStatus::Updated => BlockFlag::Ok,
                    TrajStatus::KeptIncoming => BlockFlag::Unchanged,
                    TrajStatus::SolverFailure => BlockFlag::Failed,
                };
                (sol.eta, flag, Some(sol.traj))
            }
            Err(e) => {
                log::warn!("trajectory block failed: {e}");
                (eta, BlockFlag::Failed, None)
            }
        };
        let accepted = next.is_some() && proposed >= eta - ACCEPT_SLACK;
        blocks.push(BlockOutcome {
            block: Block::Traj,
            proposed,
            accepted,
            flag,
            seconds: t.elapsed().as_secs_f64(),
        });
        if let (true, Some(next)) = (accepted, next) {
            traj = next;
            eta = proposed;
        }

        let prev = *eta_trace.last().expect("trace starts with the initial objective");
        eta_trace.push(eta);
        iterations.push(IterationRecord { iteration: l, eta, blocks });
        log::debug!("{scheme} iteration {l}: eta = {eta:.6}");

        let change = (eta - prev).abs() / prev.abs().max(1e-12);
        calm = if change < opts.tol || (eta == prev) { calm + 1 } else { 0 };
        if calm >= 2 {
            converged = true;
            break;
        }
    }

    let constraints = check_constraints(&state, &traj, s, 1e-6);
    Ok(SolveReport {
        scheme,
        per_user: per_user_secrecy(&state, &traj, s),
        eta,
        eta_trace,
        iterations,
        converged,
        state,
        traj,
        constraints,
    })
}
