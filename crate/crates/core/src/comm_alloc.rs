//! User scheduling and power allocation for fixed jamming and trajectories,
//! by Lagrangian dual decomposition.
//!
//! For fixed multipliers the problem separates over `(n, m, k_U, i)`: each
//! link gets a water-filling power and a score, and every subcarrier goes to
//! its best-scoring link (or stays idle). Multipliers are then updated by
//! projected subgradient steps. The min-rate weights `α` live on the unit
//! simplex, which removes `η` from the Lagrangian.

use std::f64::consts::LN_2;

use thiserror::Error;

use crate::rates::{objective, AllocationState, Dims, LinkGains, TrajectorySet};
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum CommError {
    #[error("non-finite input to the power rule: {0}")]
    NonFinite(&'static str),
    #[error("theta must be strictly positive, got {0}")]
    NonPositiveTheta(f64),
}

/// Lagrange multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    /// `α_{k_U,k_E}`, row-major by user; one column when there are no eavesdroppers.
    pub alpha: Vec<f64>,
    /// `β_i[n]`, indexed `n·N_F + i`.
    pub beta: Vec<f64>,
    /// `ε_{m,i}[n]`, indexed by [`Dims::jam`].
    pub eps: Vec<f64>,
    /// `ϑ_m[n]`, indexed by [`Dims::slot_uav`].
    pub theta: Vec<f64>,
}

impl DualState {
    pub fn is_valid(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(&self.eps).all(|v| v.is_finite() && *v >= 0.0)
            && self.theta.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    fn alpha_row(&self, k: usize, cols: usize) -> &[f64] {
        &self.alpha[k * cols..(k + 1) * cols]
    }
}

/// Jamming-adjusted gains `𝓗 = h/(I+σ²)` and `𝓗′` in 1/W.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveGains {
    pub dims: Dims,
    /// Indexed by [`Dims::comm`].
    pub comm: Vec<f64>,
    /// Indexed `((n·M + m)·K_E + e)·N_F + i`.
    pub eve: Vec<f64>,
}

impl EffectiveGains {
    #[inline]
    pub fn user(&self, n: usize, m: usize, k: usize, i: usize) -> f64 {
        self.comm[self.dims.comm(n, m, k, i)]
    }

    #[inline]
    pub fn eve(&self, n: usize, m: usize, e: usize, i: usize) -> f64 {
        let d = self.dims;
        self.eve[((n * d.uavs + m) * d.eves + e) * d.subcarriers + i]
    }

    fn eves_of(&self, n: usize, m: usize, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.dims.eves).map(|e| self.eve(n, m, e, i)));
    }
}

pub fn effective_gains(traj: &TrajectorySet, jam_state: &AllocationState, s: &Scenario) -> EffectiveGains {
    let d = Dims::of(s);
    let g = LinkGains::new(traj, s);
    let mut comm = vec![0.0; d.comm_len()];
    let mut eve = vec![0.0; d.slots * d.uavs * d.eves * d.subcarriers];
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                for k in 0..d.users {
                    comm[d.comm(n, m, k, i)] =
                        g.user(n, m, k) / (g.user_interference(jam_state, n, m, k, i) + s.noise_power);
                }
                for e in 0..d.eves {
                    eve[((n * d.uavs + m) * d.eves + e) * d.subcarriers + i] =
                        g.eve(n, m, e) / (g.eve_interference(jam_state, n, m, e, i) + s.noise_power);
                }
            }
        }
    }
    EffectiveGains { dims: d, comm, eve }
}

/// `ψ(x, y) = x·log2(1 + κ1·y/x) − x·log2(1 + κ2·y/x)`: the time-shared secrecy rate, jointly concave for `κ1 > κ2 ≥ 0`.
pub fn perspective_secrecy(x: f64, y: f64, k1: f64, k2: f64) -> f64 {
    x * (1.0 + k1 * y / x).log2() - x * (1.0 + k2 * y / x).log2()
}

/// Maximizer over `[0, p_cap]` of `Σ_e α_e[log2(1+pH) − log2(1+pH′_e)] − ϑp`.
///
/// Returns zero whenever some eavesdropper sees at least the user's gain.
/// Without eavesdroppers `alpha_row` has a single entry and the rule is plain water-filling.
pub fn optimal_power(alpha_row: &[f64], theta: f64, h: f64, h_eve: &[f64], p_cap: f64) -> Result<f64, CommError> {
    if !theta.is_finite() || !h.is_finite() || !p_cap.is_finite() {
        return Err(CommError::NonFinite("theta, gain or cap"));
    }
    if alpha_row.iter().chain(h_eve).any(|v| !v.is_finite()) {
        return Err(CommError::NonFinite("alpha or eavesdropper gain"));
    }
    if theta <= 0.0 {
        return Err(CommError::NonPositiveTheta(theta));
    }
    if p_cap <= 0.0 || h <= 0.0 || h_eve.iter().any(|&g| h <= g) || alpha_row.iter().all(|&a| a <= 0.0) {
        return Ok(0.0);
    }
    let p = match h_eve.len() {
        0 => alpha_row[0] / (theta * LN_2) - 1.0 / h,
        1 => {
            let (a, b) = (1.0 / h, 1.0 / h_eve[0]);
            let gamma = b - a;
            let c = alpha_row[0] * gamma / (theta * LN_2);
            0.5 * ((gamma * gamma + 4.0 * c).sqrt() - (a + b))
        }
        _ => {
            let slope = |p: f64| -> f64 {
                alpha_row
                    .iter()
                    .zip(h_eve)
                    .map(|(al, g)| al * (h / (1.0 + p * h) - g / (1.0 + p * g)))
                    .sum::<f64>()
                    / LN_2
                    - theta
            };
            if slope(0.0) <= 0.0 {
                0.0
            } else if slope(p_cap) >= 0.0 {
                p_cap
            } else {
                let (mut lo, mut hi) = (0.0, p_cap);
                while hi - lo > 1e-9 {
                    let mid = 0.5 * (lo + hi);
                    if slope(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    };
    Ok(p.clamp(0.0, p_cap))
}

/// Derivative of the Lagrangian with respect to the schedule variable at power `p`.
pub fn scheduling_metric(alpha_row: &[f64], beta: f64, eps: f64, h: f64, h_eve: &[f64], p: f64) -> f64 {
    let lam = p * h;
    let own = (1.0 + lam).log2() - lam / ((1.0 + lam) * LN_2);
    let gain: f64 = if h_eve.is_empty() {
        alpha_row[0] * own
    } else {
        alpha_row
            .iter()
            .zip(h_eve)
            .map(|(a, g)| {
                let le = p * g;
                a * (own - (1.0 + le).log2() + le / ((1.0 + le) * LN_2))
            })
            .sum()
    };
    gain - beta - eps
}

/// Scores for every `(m, k_U)` competing for one `(n, i)`, row-major by UAV.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    pub users: usize,
    pub scores: Vec<f64>,
}

/// Picks the best positive-scoring `(m, k_U)`; ties go to the lowest `(m, k_U)`.
pub fn select_assignments(cell: &CellScores) -> Option<(usize, usize)> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, &sc) in cell.scores.iter().enumerate() {
        if sc > 0.0 && best.is_none_or(|(_, b)| sc > b) {
            best = Some((idx, sc));
        }
    }
    best.map(|(idx, _)| (idx / cell.users, idx % cell.users))
}

/// Step sizes `δ_u(1)` for `(α, β, ε, ϑ)`; iteration `l` uses `δ_u(1)/√l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    /// Relative: `ϑ ← ϑ·(1 − δ·slack/P_peak)`.
    pub theta: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            eps: 0.1,
            theta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub steps: StepSizes,
    pub theta_min: f64,
    /// UAVs allowed to communicate; `None` allows all.
    pub allowed: Option<Vec<bool>>,
}

impl Default for CommOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_outer: 500,
            max_inner: 50,
            steps: StepSizes::default(),
            theta_min: 1e-6,
            allowed: None,
        }
    }
}

/// Which multipliers an [`update_multipliers`] call moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateScope {
    /// `α` only.
    Outer,
    /// `β`, `ε`, `ϑ`.
    Inner,
}

/// One projected subgradient step.
///
/// `pair_avg` holds the achieved per-pair average secrecy (unclipped) and `eta`
/// the current minimum over pairs; `α` moves by `−δ(achieved − η)`, is clipped at
/// zero and renormalized to the unit simplex.
pub fn update_multipliers(
    dual: &DualState,
    state: &AllocationState,
    s: &Scenario,
    pair_avg: &[f64],
    eta: f64,
    l: usize,
    steps: &StepSizes,
    theta_min: f64,
    scope: UpdateScope,
) -> DualState {
    assert!(l >= 1, "iterations are counted from 1");
    let d = state.dims;
    let root = (l as f64).sqrt();
    let mut out = dual.clone();
    match scope {
        UpdateScope::Outer => {
            let da = steps.alpha / root;
            for (a, &r) in out.alpha.iter_mut().zip(pair_avg) {
                *a = (*a - da * (r - eta)).max(0.0);
            }
            let total: f64 = out.alpha.iter().sum();
            if total > 0.0 {
                out.alpha.iter_mut().for_each(|a| *a /= total);
            } else {
                let worst = pair_avg.iter().fold(f64::INFINITY, |m, &v| m.min(v));
                let hits: Vec<bool> = pair_avg.iter().map(|&v| v <= worst).collect();
                let c = hits.iter().filter(|&&h| h).count() as f64;
                for (a, h) in out.alpha.iter_mut().zip(hits) {
                    *a = if h { 1.0 / c } else { 0.0 };
                }
            }
        }
        UpdateScope::Inner => {
            let (db, de, dt) = (steps.beta / root, steps.eps / root, steps.theta / root);
            for n in 0..d.slots {
                for i in 0..d.subcarriers {
                    let used = (0..d.uavs)
                        .flat_map(|m| (0..d.users).map(move |k| (m, k)))
                        .filter(|&(m, k)| state.comm_sched[d.comm(n, m, k, i)])
                        .count() as f64;
                    let b = &mut out.beta[n * d.subcarriers + i];
                    *b = (*b - db * (1.0 - used)).max(0.0);
                    for m in 0..d.uavs {
                        let own = (0..d.users).filter(|&k| state.comm_sched[d.comm(n, m, k, i)]).count() as f64;
                        let jam = f64::from(u8::from(state.jam_sched[d.jam(n, m, i)]));
                        let e = &mut out.eps[d.jam(n, m, i)];
                        *e = (*e - de * (1.0 - own - jam)).max(0.0);
                    }
                }
                for m in 0..d.uavs {
                    let peak = s.uavs[m].peak_power;
                    let slack = (peak - state.total_power(n, m)) / peak;
                    let th = &mut out.theta[d.slot_uav(n, m)];
                    *th = (*th * (1.0 - dt * slack).max(0.1)).max(theta_min);
                }
            }
        }
    }
    out
}

/// Result of [`solve_subproblem1`].
#[derive(Debug, Clone)]
pub struct CommSolution {
    /// Input jamming with the new communication schedule and powers.
    pub state: AllocationState,
    /// Oracle objective of `state`.
    pub eta: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub dual: DualState,
    /// Dual value after every outer iteration.
    pub dual_trace: Vec<f64>,
}

struct Workspace<'a> {
    s: &'a Scenario,
    d: Dims,
    gains: EffectiveGains,
    cap: Vec<f64>,
    allowed: Vec<bool>,
    cols: usize,
}

impl Workspace<'_> {
    fn blocked(&self, jam: &AllocationState, n: usize, m: usize, i: usize) -> bool {
        !self.allowed[m] || jam.jam_sched[self.d.jam(n, m, i)] || self.cap[self.d.slot_uav(n, m)] <= 0.0
    }

    /// Primal step for fixed duals; returns the raw (uncapped) allocation and the Lagrangian value.
    fn primal(&self, dual: &DualState, jam: &AllocationState) -> (AllocationState, f64) {
        let d = self.d;
        let mut st = jam.clone();
        st.comm_sched.iter_mut().for_each(|v| *v = false);
        st.comm_power.iter_mut().for_each(|v| *v = 0.0);
        let mut heve = Vec::with_capacity(d.eves);
        let mut scores = CellScores {
            users: d.users,
            scores: vec![0.0; d.uavs * d.users],
        };
        let mut powers = vec![0.0; d.uavs * d.users];
        let mut lagr = 0.0;
        for n in 0..d.slots {
            for i in 0..d.subcarriers {
                let beta = dual.beta[n * d.subcarriers + i];
                for m in 0..d.uavs {
                    let eps = dual.eps[d.jam(n, m, i)];
                    let cap = self.cap[d.slot_uav(n, m)];
                    let theta = dual.theta[d.slot_uav(n, m)];
                    self.gains.eves_of(n, m, i, &mut heve);
                    for k in 0..d.users {
                        let slot = m * d.users + k;
                        if self.blocked(jam, n, m, i) {
                            scores.scores[slot] = f64::NEG_INFINITY;
                            powers[slot] = 0.0;
                            continue;
                        }
                        let h = self.gains.user(n, m, k, i);
                        let row = dual.alpha_row(k, self.cols);
                        let p = optimal_power(row, theta, h, &heve, cap).unwrap_or(0.0);
                        powers[slot] = p;
                        scores.scores[slot] = if p > 0.0 {
                            scheduling_metric(row, beta, eps, h, &heve, p)
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                }
                if let Some((m, k)) = select_assignments(&scores) {
                    let idx = d.comm(n, m, k, i);
                    st.comm_sched[idx] = true;
                    st.comm_power[idx] = powers[m * d.users + k];
                    lagr += scores.scores[m * d.users + k];
                }
            }
        }
        (st, lagr)
    }

    fn dual_value(&self, dual: &DualState, lagr: f64, jam: &AllocationState) -> f64 {
        let d = self.d;
        let mut v = lagr + dual.beta.iter().sum::<f64>();
        for n in 0..d.slots {
            for m in 0..d.uavs {
                v += dual.theta[d.slot_uav(n, m)] * self.cap[d.slot_uav(n, m)];
                for i in 0..d.subcarriers {
                    v += dual.eps[d.jam(n, m, i)] * (1.0 - f64::from(u8::from(jam.jam_sched[d.jam(n, m, i)])));
                }
            }
        }
        v / d.slots as f64
    }

    /// Scales each UAV's communication powers down into its residual budget.
    fn recover(&self, raw: &AllocationState) -> AllocationState {
        let d = self.d;
        let mut st = raw.clone();
        for n in 0..d.slots {
            for m in 0..d.uavs {
                let cap = self.cap[d.slot_uav(n, m)];
                let used: f64 = (0..d.users)
                    .flat_map(|k| (0..d.subcarriers).map(move |i| (k, i)))
                    .map(|(k, i)| raw.comm_tx(n, m, k, i))
                    .sum();
                if used > cap {
                    let f = if used > 0.0 { cap / used * (1.0 - 1e-12) } else { 0.0 };
                    for k in 0..d.users {
                        for i in 0..d.subcarriers {
                            st.comm_power[d.comm(n, m, k, i)] *= f;
                        }
                    }
                }
            }
        }
        st
    }

    /// Per-pair unclipped averages `(1/N)Σ(R − R′_e)` and the clipped per-link objective, from the effective gains.
    fn progress(&self, st: &AllocationState) -> (Vec<f64>, f64) {
        let d = self.d;
        let mut pairs = vec![0.0; d.users * self.cols];
        let mut users = vec![0.0; d.users];
        for n in 0..d.slots {
            for m in 0..d.uavs {
                for i in 0..d.subcarriers {
                    let Some(k) = st.served_user(n, m, i) else {
                        continue;
                    };
                    let p = st.comm_power[d.comm(n, m, k, i)];
                    let r = (1.0 + p * self.gains.user(n, m, k, i)).log2();
                    if d.eves == 0 {
                        pairs[k] += r;
                    }
                    let mut worst: f64 = 0.0;
                    for e in 0..d.eves {
                        let leak = (1.0 + p * self.gains.eve(n, m, e, i)).log2();
                        pairs[k * self.cols + e] += r - leak;
                        worst = worst.max(leak);
                    }
                    users[k] += (r - worst).max(0.0);
                }
            }
        }
        let scale = 1.0 / d.slots as f64;
        pairs.iter_mut().for_each(|v| *v *= scale);
        let eta = users.into_iter().map(|v| v * scale).fold(f64::INFINITY, f64::min);
        (pairs, eta)
    }

    fn initial_dual(&self) -> DualState {
        let d = self.d;
        let alpha = vec![1.0 / (d.users * self.cols) as f64; d.users * self.cols];
        let mut theta = vec![1.0; d.slots * d.uavs];
        let mut heve = Vec::new();
        for n in 0..d.slots {
            for m in 0..d.uavs {
                let cap = self.cap[d.slot_uav(n, m)];
                let p_eq = cap.max(1e-12) / d.subcarriers as f64;
                // Water level at which an equal split is the unconstrained optimum of the best link.
                let mut level: f64 = 0.0;
                for i in 0..d.subcarriers {
                    self.gains.eves_of(n, m, i, &mut heve);
                    for k in 0..d.users {
                        let h = self.gains.user(n, m, k, i);
                        let row = &alpha[k * self.cols..(k + 1) * self.cols];
                        let slope = if heve.is_empty() {
                            row[0] * h / (1.0 + p_eq * h)
                        } else {
                            row.iter()
                                .zip(&heve)
                                .map(|(a, g)| a * (h / (1.0 + p_eq * h) - g / (1.0 + p_eq * g)))
                                .sum()
                        };
                        level = level.max(slope / LN_2);
                    }
                }
                theta[d.slot_uav(n, m)] = level.max(1e-6);
            }
        }
        DualState {
            alpha,
            beta: vec![0.0; d.slots * d.subcarriers],
            eps: vec![0.0; d.jam_len()],
            theta,
        }
    }
}

/// Optimal communication scheduling and power for fixed jamming and trajectories.
pub fn solve_subproblem1(
    jam_state: &AllocationState,
    traj: &TrajectorySet,
    s: &Scenario,
    opts: &CommOptions,
) -> CommSolution {
    let d = Dims::of(s);
    let cap: Vec<f64> = (0..d.slots)
        .flat_map(|n| (0..d.uavs).map(move |m| (n, m)))
        .map(|(n, m)| {
            let jam: f64 = (0..d.subcarriers).map(|i| jam_state.jam_tx(n, m, i)).sum();
            (s.uavs[m].peak_power - jam).max(0.0)
        })
        .collect();
    let ws = Workspace {
        s,
        d,
        gains: effective_gains(traj, jam_state, s),
        cap,
        allowed: opts.allowed.clone().unwrap_or_else(|| vec![true; d.uavs]),
        cols: d.eves.max(1),
    };
    let _ = ws.s;
    let mut dual = ws.initial_dual();
    let mut best_state = ws.recover(&ws.primal(&dual, jam_state).0);
    let mut best_eta = ws.progress(&best_state).1;
    let mut dual_trace: Vec<f64> = Vec::new();
    let mut calm = 0;
    let mut converged = false;
    let mut outer = 0;

    for l in 1..=opts.max_outer {
        outer = l;
        let mut lagr = 0.0;
        let mut raw = best_state.clone();
        for li in 1..=opts.max_inner {
            let (st, lg) = ws.primal(&dual, jam_state);
            raw = st;
            lagr = lg;
            let next = update_multipliers(
                &dual,
                &raw,
                s,
                &[],
                0.0,
                li,
                &opts.steps,
                opts.theta_min,
                UpdateScope::Inner,
            );
            let moved = dual
                .theta
                .iter()
                .zip(&next.theta)
                .map(|(a, b)| (a - b).abs() / a.max(opts.theta_min))
                .fold(0.0, f64::max);
            dual = next;
            if moved < 1e-3 {
                break;
            }
        }
        let value = ws.dual_value(&dual, lagr, jam_state);
        let st = ws.recover(&raw);
        let (pairs, eta) = ws.progress(&st);
        if eta > best_eta {
            best_eta = eta;
            best_state = st;
        }
        let worst = pairs.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        dual = update_multipliers(&dual, &raw, s, &pairs, worst, l, &opts.steps, opts.theta_min, UpdateScope::Outer);
        if let Some(&prev) = dual_trace.last() {
            let rel = (value - prev).abs() / prev.abs().max(1e-12);
            calm = if rel < opts.tol { calm + 1 } else { 0 };
        }
        dual_trace.push(value);
        if calm >= 5 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("communication allocation stopped at the iteration cap without dual convergence");
    }
    let eta = objective(&best_state, traj, s);
    CommSolution {
        state: best_state,
        eta,
        converged,
        outer_iterations: outer,
        dual,
        dual_trace,
    }
}
