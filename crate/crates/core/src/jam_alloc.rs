//! Jamming scheduling and power for fixed communication and trajectories.
//!
//! The binary schedule `s^J` enters only through `p̄ ≤ s^J·P^U`, where `p̄` is
//! the transmitted jamming power and `P^U` the budget left after communication.
//! The binary constraint is relaxed to `[0, 1]` with the concave penalty
//! `−φ·s(1−s)`. Each SCA step keeps the concave log terms of the secrecy rates
//! exact and linearizes the convex ones, which gives a lower bound that is tight
//! at the expansion point.

use std::f64::consts::LN_2;

use thiserror::Error;

use crate::convex_core::{solve_from, Affine, ConvexProgram, Expr, SolveOptions, Term};
use crate::rates::{objective, objective_unclipped, AllocationState, Dims, LinkGains, TrajectorySet};
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum JamError {
    #[error("expansion point violates the jamming constraints: {0}")]
    InfeasibleExpansion(String),
    #[error("state dimensions do not match the scenario")]
    DimensionMismatch,
}

/// Relaxed jamming iterate, indexed by [`Dims::jam`].
#[derive(Debug, Clone, PartialEq)]
pub struct JamIterate {
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    /// `s·p`.
    pub pbar: Vec<f64>,
    pub eta: f64,
}

impl JamIterate {
    /// Reads the jamming policy carried by `state`.
    pub fn from_state(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> Self {
        let sched: Vec<f64> = state.jam_sched.iter().map(|&b| f64::from(u8::from(b))).collect();
        let pbar: Vec<f64> = (0..state.jam_power.len())
            .map(|j| sched[j] * state.jam_power[j])
            .collect();
        let gains = LinkGains::new(traj, s);
        let eta = min_pair(state, &gains, s);
        Self {
            s: sched,
            p: state.jam_power.clone(),
            pbar,
            eta,
        }
    }

    /// Largest `s(1−s)` over all entries.
    pub fn max_binary_gap(&self) -> f64 {
        self.s.iter().map(|v| v * (1.0 - v)).fold(0.0, f64::max)
    }

    fn apply(&self, base: &AllocationState) -> AllocationState {
        let mut st = base.clone();
        for j in 0..self.pbar.len() {
            st.jam_sched[j] = self.pbar[j] > 0.0;
            st.jam_power[j] = self.pbar[j].max(0.0);
        }
        st
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    /// Weight on `η`.
    pub zeta: f64,
    /// Initial binariness weight, in bps/Hz per slot-averaged unit of `Σ s(1−s)`.
    pub phi: f64,
    pub growth: f64,
    /// Target for `max s(1−s)` before rounding.
    pub binary_tol: f64,
    pub max_rounds: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            zeta: 1.0,
            phi: 0.1,
            growth: 2.0,
            binary_tol: 1e-3,
            max_rounds: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JamOptions {
    /// Relative change of the penalized objective that ends an SCA round.
    pub tol: f64,
    /// SCA steps per penalty round.
    pub max_sca: usize,
    pub solver: SolveOptions,
}

impl Default for JamOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_sca: 20,
            solver: SolveOptions {
                tol: 1e-9,
                max_iter: 300,
            },
        }
    }
}

/// Budget left for jamming per `(n, m)`, indexed by [`Dims::slot_uav`].
pub fn residual_budget(comm_state: &AllocationState, s: &Scenario) -> Vec<f64> {
    let d = comm_state.dims;
    let mut out = vec![0.0; d.slots * d.uavs];
    for n in 0..d.slots {
        for m in 0..d.uavs {
            let used: f64 = (0..d.users)
                .flat_map(|k| (0..d.subcarriers).map(move |i| (k, i)))
                .map(|(k, i)| comm_state.comm_tx(n, m, k, i))
                .sum();
            out[d.slot_uav(n, m)] = (s.uavs[m].peak_power - used).max(0.0);
        }
    }
    out
}

/// One jamming variable pair `(s, p̄)` of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JamVar {
    /// Index into the jamming arrays.
    pub cell: usize,
    pub slot: usize,
    pub uav: usize,
    pub subcarrier: usize,
    /// Program indices of `s` and `p̄`.
    pub s_var: usize,
    pub p_var: usize,
}

/// A served `(n, i)` and its slice of jamming variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedCell {
    pub slot: usize,
    pub subcarrier: usize,
    pub sender: usize,
    pub user: usize,
    /// Program index of the per-link secrecy variable; absent when nobody can jam.
    pub z: Option<usize>,
    /// Range into [`Surrogate::vars`].
    pub vars: std::ops::Range<usize>,
}

/// Convex surrogate of one SCA step.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub program: ConvexProgram,
    pub vars: Vec<JamVar>,
    pub cells: Vec<ServedCell>,
    /// Program index of `η`.
    pub eta_var: usize,
    /// Penalty weight per unit `s(1−s)` after slot averaging.
    pub phi_eff: f64,
    pub zeta: f64,
}

impl Surrogate {
    /// Writes a program point back into an iterate.
    pub fn read(&self, x: &[f64], base: &JamIterate) -> JamIterate {
        let mut it = base.clone();
        it.s.iter_mut().for_each(|v| *v = 0.0);
        it.p.iter_mut().for_each(|v| *v = 0.0);
        it.pbar.iter_mut().for_each(|v| *v = 0.0);
        for v in &self.vars {
            let s = x[v.s_var].clamp(0.0, 1.0);
            let pb = x[v.p_var].max(0.0);
            it.s[v.cell] = s;
            it.pbar[v.cell] = pb;
            it.p[v.cell] = pb;
        }
        it.eta = x[self.eta_var];
        it
    }

    /// Program point of an iterate; `η` is left at zero.
    pub fn point(&self, it: &JamIterate) -> Vec<f64> {
        let mut x = vec![0.0; self.program.num_vars()];
        for v in &self.vars {
            x[v.s_var] = it.s[v.cell];
            x[v.p_var] = it.pbar[v.cell];
        }
        x
    }
}

/// `ln` of the positive argument with the expansion-point floor.
fn floored(v: f64, floor: f64) -> f64 {
    v.max(floor)
}

/// Builds the concave surrogate program around `it`.
///
/// Every served `(n, i)` with jamming candidates gets a variable `z ≤ R − R′_e` for all `e`;
/// `η` is bounded by each user's slot-averaged sum of `z`.
/// `comm_state` supplies the communication schedule and powers; its jamming fields are ignored.
pub fn build_surrogate(
    it: &JamIterate,
    pen: &PenaltyConfig,
    comm_state: &AllocationState,
    traj: &TrajectorySet,
    s: &Scenario,
) -> Result<Surrogate, JamError> {
    let d = Dims::of(s);
    if comm_state.dims != d || it.s.len() != d.jam_len() {
        return Err(JamError::DimensionMismatch);
    }
    let budget = residual_budget(comm_state, s);
    let gains = LinkGains::new(traj, s);
    let sigma = s.noise_power;
    let floor = 1e-3;
    let w = 1.0 / LN_2;

    // Layout: per served (n, i) with candidates, `z` followed by `(s, p̄)` for every other UAV with budget left.
    let mut vars = Vec::new();
    let mut cells = Vec::new();
    let mut next = 0;
    for n in 0..d.slots {
        for i in 0..d.subcarriers {
            let Some((mc, k)) = (0..d.uavs).find_map(|m| comm_state.served_user(n, m, i).map(|k| (m, k))) else {
                continue;
            };
            let jammers: Vec<usize> = (0..d.uavs)
                .filter(|&m| m != mc && budget[d.slot_uav(n, m)] > 0.0)
                .collect();
            let z = (!jammers.is_empty()).then(|| {
                next += 1;
                next - 1
            });
            let first = vars.len();
            for m in jammers {
                let cell = d.jam(n, m, i);
                let (sv, pv) = (it.s[cell], it.pbar[cell]);
                if !(0.0..=1.0).contains(&sv) || pv < 0.0 || pv > sv * budget[d.slot_uav(n, m)] * (1.0 + 1e-9) + 1e-15 {
                    return Err(JamError::InfeasibleExpansion(format!("slot {n}, uav {m}, subcarrier {i}")));
                }
                vars.push(JamVar {
                    cell,
                    slot: n,
                    uav: m,
                    subcarrier: i,
                    s_var: next,
                    p_var: next + 1,
                });
                next += 2;
            }
            cells.push(ServedCell {
                slot: n,
                subcarrier: i,
                sender: mc,
                user: k,
                z,
                vars: first..vars.len(),
            });
        }
    }

    let mut p = ConvexProgram::new(next, 1);
    let eta_var = p.global(0);
    let phi_eff = pen.phi / d.slots as f64;

    // Objective: ζη − φ_eff·Σ s + φ_eff·Σ (s_l² + 2 s_l (s − s_l)).
    let mut obj = vec![(eta_var, pen.zeta)];
    let mut obj_c = 0.0;
    for v in &vars {
        let sl = it.s[v.cell];
        obj.push((v.s_var, phi_eff * (2.0 * sl - 1.0)));
        obj_c -= phi_eff * sl * sl;
    }
    p.maximize(Term::Linear(Affine::new(obj, obj_c)));

    for v in &vars {
        let cap = budget[d.slot_uav(v.slot, v.uav)];
        p.add_bounds(v.s_var, 0.0, 1.0);
        p.add_ge(Affine::var(v.p_var), 0.0);
        p.add_ge(Affine::new([(v.s_var, cap), (v.p_var, -1.0)], 0.0), 0.0);
    }
    for n in 0..d.slots {
        for m in 0..d.uavs {
            let coeffs: Vec<(usize, f64)> = vars
                .iter()
                .filter(|v| v.slot == n && v.uav == m)
                .map(|v| (v.p_var, 1.0))
                .collect();
            if !coeffs.is_empty() {
                p.add_le(Affine::new(coeffs, 0.0), budget[d.slot_uav(n, m)]);
            }
        }
    }

    // Per-link secrecy, log2 units, arguments normalized by σ².
    let mut user_sum: Vec<(Vec<(usize, f64)>, f64)> = vec![(Vec::new(), 0.0); d.users];
    for c in &cells {
        let (n, i, mc, k) = (c.slot, c.subcarrier, c.sender, c.user);
        let pc = comm_state.comm_tx(n, mc, k, i);
        let jv = &vars[c.vars.clone()];
        let Some(z) = c.z else {
            let value = (0..d.eves.max(1))
                .map(|e| {
                    let r = (1.0 + pc * gains.user(n, mc, k) / sigma).log2();
                    let leak = if d.eves == 0 { 0.0 } else { (1.0 + pc * gains.eve(n, mc, e) / sigma).log2() };
                    r - leak
                })
                .fold(f64::INFINITY, f64::min);
            user_sum[k].1 += value / d.slots as f64;
            continue;
        };
        user_sum[k].0.push((z, 1.0 / d.slots as f64));

        // Interference at a receiver with per-jammer gains g, normalized by σ², and its value at the expansion point.
        let interference = |g: &dyn Fn(usize) -> f64| -> (Vec<(usize, f64)>, f64) {
            let coeffs: Vec<(usize, f64)> = jv.iter().map(|v| (v.p_var, g(v.uav) / sigma)).collect();
            let at: f64 = jv.iter().map(|v| g(v.uav) / sigma * it.pbar[v.cell]).sum();
            (coeffs, at)
        };
        // User: ln(1 + J + S) exact, −ln(1 + J) linearized.
        let (cu, ju) = interference(&|m| gains.user(n, m, k));
        let su = pc * gains.user(n, mc, k) / sigma;
        let base_u = floored(1.0 + ju, floor);
        let mut user_lin: Vec<(usize, f64)> = cu.iter().map(|&(v, a)| (v, -w * a / base_u)).collect();
        user_lin.push((z, -1.0));
        let user_c = -w * (base_u.ln() - ju / base_u);
        let user_log = Term::Log {
            weight: w,
            arg: Affine::new(cu.iter().copied(), 1.0 + su),
        };
        if d.eves == 0 {
            p.add_inequality(
                Expr::new()
                    .with(user_log.clone())
                    .with(Term::Linear(Affine::new(user_lin.iter().copied(), user_c))),
            );
            continue;
        }
        for e in 0..d.eves {
            // Eavesdropper: −ln(1 + J′ + S′) linearized, ln(1 + J′) exact.
            let (ce, je) = interference(&|m| gains.eve(n, m, e));
            let se = pc * gains.eve(n, mc, e) / sigma;
            let base_e = floored(1.0 + je + se, floor);
            let mut lin = user_lin.clone();
            lin.extend(ce.iter().map(|&(v, a)| (v, -w * a / base_e)));
            let lin_c = user_c - w * (base_e.ln() - je / base_e);
            p.add_inequality(
                Expr::new()
                    .with(user_log.clone())
                    .with(Term::Log {
                        weight: w,
                        arg: Affine::new(ce.iter().copied(), 1.0),
                    })
                    .with(Term::Linear(Affine::new(lin, lin_c))),
            );
        }
    }
    for (coeffs, c) in user_sum {
        let mut coeffs = coeffs;
        coeffs.push((eta_var, -1.0));
        p.add_ge(Affine::new(coeffs, c), 0.0);
    }

    Ok(Surrogate {
        program: p,
        vars,
        cells,
        eta_var,
        phi_eff,
        zeta: pen.zeta,
    })
}

fn min_pair(state: &AllocationState, gains: &LinkGains, s: &Scenario) -> f64 {
    objective_unclipped(state, gains, s.noise_power)
}

/// True penalized objective `ζ·η − φ_eff·Σ s(1−s)` at a relaxed iterate.
fn penalized(it: &JamIterate, sur: &Surrogate, base: &AllocationState, gains: &LinkGains, s: &Scenario) -> f64 {
    let eta = min_pair(&it.apply(base), gains, s);
    let gap: f64 = sur.vars.iter().map(|v| it.s[v.cell] * (1.0 - it.s[v.cell])).sum();
    sur.zeta * eta - sur.phi_eff * gap
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyStep {
    pub round: usize,
    pub phi: f64,
    /// True penalized objective after the step.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JamStatus {
    /// The rounded policy was accepted.
    Updated,
    /// Rounding would have lowered the objective; the incoming policy is returned.
    KeptIncoming,
    /// The convex solver failed; the incoming policy is returned.
    SolverFailure,
}

#[derive(Debug, Clone)]
pub struct JamSolution {
    /// Input communication policy with the new jamming policy.
    pub state: AllocationState,
    /// Oracle objective of `state`.
    pub eta: f64,
    pub status: JamStatus,
    /// Penalized objective after every SCA step, starting with the expansion point of each round.
    pub trace: Vec<PenaltyStep>,
    /// `max s(1−s)` of the relaxed solution before rounding.
    pub binary_gap: f64,
    pub sca_steps: usize,
}

/// Rounds a relaxed iterate at 0.5 and zeroes the power of switched-off entries.
pub fn round_iterate(it: &JamIterate, comm_state: &AllocationState, s: &Scenario) -> AllocationState {
    let d = comm_state.dims;
    let budget = residual_budget(comm_state, s);
    let mut st = comm_state.clone();
    st.jam_sched.iter_mut().for_each(|v| *v = false);
    st.jam_power.iter_mut().for_each(|v| *v = 0.0);
    for n in 0..d.slots {
        for m in 0..d.uavs {
            let cap = budget[d.slot_uav(n, m)];
            let mut used = 0.0;
            for i in 0..d.subcarriers {
                let j = d.jam(n, m, i);
                let own = (0..d.users).any(|k| comm_state.comm_sched[d.comm(n, m, k, i)]);
                if it.s[j] > 0.5 && !own && it.pbar[j] > 1e-9 * cap {
                    st.jam_sched[j] = true;
                    st.jam_power[j] = it.pbar[j];
                    used += it.pbar[j];
                }
            }
            if used > cap {
                let f = cap / used * (1.0 - 1e-12);
                for i in 0..d.subcarriers {
                    st.jam_power[d.jam(n, m, i)] *= f;
                }
            }
        }
    }
    st
}

/// Penalized D.C. iterations followed by rounding and a monotone safeguard.
///
/// `comm_state` carries the fixed communication policy and the incoming jamming policy.
pub fn solve_jamming_sca(
    comm_state: &AllocationState,
    traj: &TrajectorySet,
    s: &Scenario,
    pen: &PenaltyConfig,
    opts: &JamOptions,
) -> Result<JamSolution, JamError> {
    let d = Dims::of(s);
    if comm_state.dims != d {
        return Err(JamError::DimensionMismatch);
    }
    let gains = LinkGains::new(traj, s);
    let incoming_eta = objective(comm_state, traj, s);
    let keep = |status, trace, binary_gap, sca_steps| JamSolution {
        state: comm_state.clone(),
        eta: incoming_eta,
        status,
        trace,
        binary_gap,
        sca_steps,
    };

    // Drop jamming the fixed schedule makes useless or illegal before expanding.
    let mut start = comm_state.clone();
    let budget = residual_budget(comm_state, s);
    for n in 0..d.slots {
        for i in 0..d.subcarriers {
            let sender = (0..d.uavs).find(|&m| comm_state.served_user(n, m, i).is_some());
            for m in 0..d.uavs {
                let j = d.jam(n, m, i);
                if sender.is_none() || sender == Some(m) || budget[d.slot_uav(n, m)] <= 0.0 {
                    start.jam_sched[j] = false;
                    start.jam_power[j] = 0.0;
                }
            }
        }
        for m in 0..d.uavs {
            let used: f64 = (0..d.subcarriers).map(|i| start.jam_tx(n, m, i)).sum();
            let cap = budget[d.slot_uav(n, m)];
            if used > cap {
                for i in 0..d.subcarriers {
                    start.jam_power[d.jam(n, m, i)] *= cap / used;
                }
            }
        }
    }
    let mut it = JamIterate::from_state(&start, traj, s);
    // Every candidate starts switched on; the power alone then decides whether it jams.
    for n in 0..d.slots {
        for i in 0..d.subcarriers {
            let Some(sender) = (0..d.uavs).find(|&m| comm_state.served_user(n, m, i).is_some()) else {
                continue;
            };
            for m in (0..d.uavs).filter(|&m| m != sender && budget[d.slot_uav(n, m)] > 0.0) {
                it.s[d.jam(n, m, i)] = 1.0;
            }
        }
    }

    let seeded = grid_seed(&it, comm_state, &gains, s);
    let probe = build_surrogate(&it, pen, comm_state, traj, s)?;
    if penalized(&seeded, &probe, comm_state, &gains, s) > penalized(&it, &probe, comm_state, &gains, s) {
        it = seeded;
    }

    let mut trace = Vec::new();
    let mut steps = 0;
    let mut phi = pen.phi;
    let mut gap = it.max_binary_gap();
    for round in 0..pen.max_rounds.max(1) {
        let cfg = PenaltyConfig { phi, ..*pen };
        let probe = build_surrogate(&it, &cfg, comm_state, traj, s)?;
        if probe.vars.is_empty() {
            break;
        }
        let mut value = penalized(&it, &probe, comm_state, &gains, s);
        trace.push(PenaltyStep {
            round,
            phi,
            objective: value,
        });
        for _ in 0..opts.max_sca {
            let sur = build_surrogate(&it, &cfg, comm_state, traj, s)?;
            let x0 = interior_start(&sur, &it, comm_state, s);
            let sol = solve_from(&sur.program, Some(&x0), opts.solver);
            steps += 1;
            if !sol.is_usable() {
                log::warn!("jamming surrogate failed with {:?}", sol.status);
                return Ok(keep(JamStatus::SolverFailure, trace, gap, steps));
            }
            let next = sur.read(&sol.x, &it);
            let next_value = penalized(&next, &sur, comm_state, &gains, s);
            if next_value < value {
                break;
            }
            let change = (next_value - value).abs() / value.abs().max(1.0);
            it = next;
            value = next_value;
            trace.push(PenaltyStep {
                round,
                phi,
                objective: value,
            });
            if change < opts.tol {
                break;
            }
        }
        gap = sur_gap(&it, &probe);
        if gap < pen.binary_tol {
            break;
        }
        phi *= pen.growth;
    }

    let rounded = round_iterate(&it, comm_state, s);
    let eta = objective(&rounded, traj, s);
    if eta < incoming_eta {
        return Ok(keep(JamStatus::KeptIncoming, trace, gap, steps));
    }
    Ok(JamSolution {
        state: rounded,
        eta,
        status: JamStatus::Updated,
        trace,
        binary_gap: gap,
        sca_steps: steps,
    })
}

/// Per-cell log-grid search of the jamming power that maximizes the clipped secrecy of that cell alone.
fn grid_seed(it: &JamIterate, comm_state: &AllocationState, gains: &LinkGains, s: &Scenario) -> JamIterate {
    let d = comm_state.dims;
    let budget = residual_budget(comm_state, s);
    let sigma = s.noise_power;
    let mut out = it.clone();
    for n in 0..d.slots {
        for i in 0..d.subcarriers {
            let Some((mc, k)) = (0..d.uavs).find_map(|m| comm_state.served_user(n, m, i).map(|k| (m, k))) else {
                continue;
            };
            let pc = comm_state.comm_tx(n, mc, k, i);
            let cell = |jam: &dyn Fn(usize) -> f64| -> f64 {
                let ju: f64 = (0..d.uavs).map(|m| jam(m) * gains.user(n, m, k)).sum();
                let r = (1.0 + pc * gains.user(n, mc, k) / (sigma + ju)).log2();
                let leak = (0..d.eves)
                    .map(|e| {
                        let je: f64 = (0..d.uavs).map(|m| jam(m) * gains.eve(n, m, e)).sum();
                        (1.0 + pc * gains.eve(n, mc, e) / (sigma + je)).log2()
                    })
                    .fold(0.0, f64::max);
                (r - leak).max(0.0)
            };
            for m in (0..d.uavs).filter(|&m| m != mc && budget[d.slot_uav(n, m)] > 0.0) {
                let j = d.jam(n, m, i);
                let cap = budget[d.slot_uav(n, m)];
                let others = |q: f64| move |u: usize| if u == m { q } else { 0.0 };
                let mut best = (0.0, cell(&others(0.0)));
                for step in 0..=60 {
                    let q = cap * 10f64.powf(-6.0 + 0.1 * step as f64);
                    let v = cell(&others(q));
                    if v > best.1 {
                        best = (q, v);
                    }
                }
                out.s[j] = 1.0;
                out.pbar[j] = best.0;
                out.p[j] = best.0;
            }
        }
        for m in 0..d.uavs {
            let cap = budget[d.slot_uav(n, m)];
            let used: f64 = (0..d.subcarriers).map(|i| out.pbar[d.jam(n, m, i)]).sum();
            if used > cap {
                for i in 0..d.subcarriers {
                    let j = d.jam(n, m, i);
                    out.pbar[j] *= cap / used * (1.0 - 1e-9);
                    out.p[j] = out.pbar[j];
                }
            }
        }
    }
    out
}

fn sur_gap(it: &JamIterate, sur: &Surrogate) -> f64 {
    sur.vars
        .iter()
        .map(|v| it.s[v.cell] * (1.0 - it.s[v.cell]))
        .fold(0.0, f64::max)
}

/// Strictly feasible start near `it`, with `z` and `η` below their constraints.
fn interior_start(sur: &Surrogate, it: &JamIterate, comm_state: &AllocationState, s: &Scenario) -> Vec<f64> {
    let d = comm_state.dims;
    let budget = residual_budget(comm_state, s);
    let mut x = sur.point(it);
    for v in &sur.vars {
        let cap = budget[d.slot_uav(v.slot, v.uav)];
        let s0 = 0.9 * it.s[v.cell] + 0.05;
        x[v.s_var] = s0;
        x[v.p_var] = 0.9 * it.pbar[v.cell] + 0.01 * s0 * cap / d.subcarriers as f64;
    }
    // With z = η = 0 each nonlinear row reads R − R′_e (and each user row its average).
    x[sur.eta_var] = 0.0;
    let mut row = 0;
    let nonlinear: Vec<f64> = sur
        .program
        .inequalities
        .iter()
        .filter(|g| !g.is_affine())
        .map(|g| g.value(&x).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let per_link = if d.eves == 0 { 1 } else { d.eves };
    for c in &sur.cells {
        if let Some(z) = c.z {
            let lo = nonlinear[row..row + per_link].iter().fold(f64::INFINITY, |a, &b| a.min(b));
            x[z] = lo - 1.0;
            row += per_link;
        }
    }
    let users = sur.program.inequalities.len() - d.users..sur.program.inequalities.len();
    let lowest = sur.program.inequalities[users]
        .iter()
        .filter_map(|g| g.value(&x))
        .fold(f64::INFINITY, f64::min);
    x[sur.eta_var] = if lowest.is_finite() { lowest - 1.0 } else { 0.0 };
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Point;
    use crate::comm_alloc::{solve_subproblem1, CommOptions};
    use crate::rates::{check_constraints, pair_secrecy};
    use crate::scenario::{default_scenario, UavSpec};
    use approx::assert_relative_eq;

    fn uav(x: f64, y: f64) -> UavSpec {
        UavSpec {
            start: Point::new(x, y),
            end: Point::new(x, y),
            peak_power: 1.0,
        }
    }

    /// One slot, one subcarrier: UAV 0 serves the user, UAV 1 hovers over the eavesdropper.
    fn adjacent_eve() -> Scenario {
        Scenario {
            num_slots: 1,
            slot_duration: 1.0,
            uavs: vec![uav(0.0, 0.0), uav(60.0, 0.0)],
            users: vec![Point::new(0.0, 0.0)],
            eves: vec![Point::new(60.0, 0.0)],
            nfzs: vec![],
            altitude: 100.0,
            max_speed: 20.0,
            safety_distance: 10.0,
            num_subcarriers: 1,
            ref_gain: 1e-5,
            noise_power: 1e-13,
            bandwidth_hz: None,
        }
    }

    fn serving(s: &Scenario, power: f64) -> AllocationState {
        let d = Dims::of(s);
        let mut st = AllocationState::zeros(d);
        st.comm_sched[d.comm(0, 0, 0, 0)] = true;
        st.comm_power[d.comm(0, 0, 0, 0)] = power;
        st
    }

    #[test]
    fn residual_budget_examples() {
        let s = adjacent_eve();
        let d = Dims::of(&s);
        assert_eq!(residual_budget(&AllocationState::zeros(d), &s), vec![1.0, 1.0]);
        assert_relative_eq!(residual_budget(&serving(&s, 0.4), &s)[0], 0.6);
        assert_eq!(residual_budget(&serving(&s, 1.0), &s)[0], 0.0);
    }

    #[test]
    fn surrogate_is_tight_at_expansion() {
        let s = adjacent_eve();
        let traj = TrajectorySet::straight_lines(&s);
        let mut st = serving(&s, 0.5);
        let d = Dims::of(&s);
        st.jam_sched[d.jam(0, 1, 0)] = true;
        st.jam_power[d.jam(0, 1, 0)] = 0.3;
        let it = JamIterate::from_state(&st, &traj, &s);
        let sur = build_surrogate(&it, &PenaltyConfig::default(), &st, &traj, &s).unwrap();
        let mut x = sur.point(&it);
        x[sur.eta_var] = 0.0;
        let g = sur.program.inequalities.iter().find(|g| !g.is_affine()).unwrap();
        let gains = LinkGains::new(&traj, &s);
        let exact = pair_secrecy(&st, &gains, s.noise_power)[0];
        assert_relative_eq!(g.value(&x).unwrap(), exact, max_relative = 1e-10);
        // At s = 1 the penalty vanishes, so the surrogate objective is ζη.
        x[sur.eta_var] = exact;
        assert_relative_eq!(sur.program.objective_value(&x).unwrap(), exact, max_relative = 1e-10);
    }

    #[test]
    fn zero_schedule_has_no_binariness_gradient() {
        let s = adjacent_eve();
        let traj = TrajectorySet::straight_lines(&s);
        let st = serving(&s, 0.5);
        let it = JamIterate::from_state(&st, &traj, &s);
        let sur = build_surrogate(&it, &PenaltyConfig::default(), &st, &traj, &s).unwrap();
        // Only the linear −φ·s term remains at s_l = 0.
        let g = sur.program.objective.gradient(&sur.point(&it), sur.program.num_vars());
        assert_relative_eq!(g[sur.vars[0].s_var], -sur.phi_eff);
    }

    #[test]
    fn a_coefficient_example() {
        // h = 1e−9, I = 0, σ² = 1e−13.
        assert_relative_eq!(1e-9 / 1e-13, 1e4);
        let s = adjacent_eve();
        let traj = TrajectorySet::straight_lines(&s);
        let gains = LinkGains::new(&traj, &s);
        let st = serving(&s, 0.5);
        let it = JamIterate::from_state(&st, &traj, &s);
        let sur = build_surrogate(&it, &PenaltyConfig::default(), &st, &traj, &s).unwrap();
        let g = sur.program.inequalities.iter().find(|g| !g.is_affine()).unwrap();
        let grad = g.gradient(&sur.point(&it), sur.program.num_vars());
        let pv = sur.vars[0].p_var;
        // ∂/∂p̄ at p̄ = 0: user term (a_u/(1+S) − a_u) and eavesdropper term (a_e − a_e/(1+S′)).
        let a_u = gains.user(0, 1, 0) / s.noise_power;
        let a_e = gains.eve(0, 1, 0) / s.noise_power;
        let su = 0.5 * gains.user(0, 0, 0) / s.noise_power;
        let se = 0.5 * gains.eve(0, 0, 0) / s.noise_power;
        let expect = (a_u / (1.0 + su) - a_u + a_e - a_e / (1.0 + se)) / LN_2;
        assert_relative_eq!(grad[pv], expect, max_relative = 1e-10);
    }

    #[test]
    fn no_comm_means_no_jamming() {
        let s = adjacent_eve();
        let traj = TrajectorySet::straight_lines(&s);
        let st = AllocationState::zeros(Dims::of(&s));
        let sol = solve_jamming_sca(&st, &traj, &s, &PenaltyConfig::default(), &JamOptions::default()).unwrap();
        assert_eq!(sol.eta, 0.0);
        assert!(sol.state.jam_power.iter().all(|&p| p == 0.0));
    }

    fn brute_force(st: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> f64 {
        let d = Dims::of(s);
        let j = d.jam(0, 1, 0);
        let mut best = objective(st, traj, s);
        for q in 1..=100 {
            let mut t = st.clone();
            t.jam_sched[j] = true;
            t.jam_power[j] = 0.5 * q as f64 / 100.0;
            best = best.max(objective(&t, traj, s));
        }
        best
    }

    #[test]
    fn idle_uav_jams_an_adjacent_eve() {
        let s = adjacent_eve();
        let traj = TrajectorySet::straight_lines(&s);
        let st = serving(&s, 0.5);
        let before = objective(&st, &traj, &s);
        let sol = solve_jamming_sca(&st, &traj, &s, &PenaltyConfig::default(), &JamOptions::default()).unwrap();
        assert_eq!(sol.status, JamStatus::Updated);
        assert!(sol.state.jam_sched[Dims::of(&s).jam(0, 1, 0)]);
        assert!(sol.eta > before);
        assert!(sol.eta >= 0.98 * brute_force(&st, &traj, &s));
        assert!(sol.binary_gap < 1e-3);
    }

    #[test]
    fn symmetric_jammer_is_useless() {
        let mut s = adjacent_eve();
        // Jammer equidistant from user and eavesdropper, which sit at equal range from the sender.
        s.users = vec![Point::new(-50.0, 0.0)];
        s.eves = vec![Point::new(50.0, 0.0)];
        s.uavs = vec![uav(0.0, 0.0), uav(0.0, 300.0)];
        let traj = TrajectorySet::straight_lines(&s);
        let st = serving(&s, 0.5);
        let sol = solve_jamming_sca(&st, &traj, &s, &PenaltyConfig::default(), &JamOptions::default()).unwrap();
        assert!(sol.eta <= 1e-9);
        assert!((sol.eta - objective(&st, &traj, &s)).abs() <= 1e-6);
    }

    #[test]
    fn default_scenario_is_monotone_and_binary() {
        let s = default_scenario().with_subcarriers(4);
        let traj = TrajectorySet::straight_lines(&s);
        let comm = solve_subproblem1(&AllocationState::zeros(Dims::of(&s)), &traj, &s, &CommOptions::default());
        let sol = solve_jamming_sca(&comm.state, &traj, &s, &PenaltyConfig::default(), &JamOptions::default()).unwrap();
        for w in sol.trace.windows(2) {
            if w[0].round == w[1].round {
                assert!(w[1].objective >= w[0].objective - 1e-6, "{w:?}");
            }
        }
        assert!(sol.binary_gap < 1e-3, "gap {}", sol.binary_gap);
        assert!(sol.eta >= comm.eta - 1e-6);
        assert!(check_constraints(&sol.state, &traj, &s, 1e-9).all_passed());
    }
}
