//! Reference evaluation of SINRs, rates, leakage and the average minimum
//! secrecy rate for any candidate allocation and trajectory.
//!
//! Everything here is a direct transcription of the system model and is
//! deliberately independent of the solvers: it is the yardstick every
//! solver output is measured against.

use std::fmt;

use serde::Serialize;

use crate::channel::{channel_gain, Point};
use crate::scenario::Scenario;

/// Problem dimensions: slots, UAVs, users, eavesdroppers, subcarriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub slots: usize,
    pub uavs: usize,
    pub users: usize,
    pub eves: usize,
    pub subcarriers: usize,
}

impl Dims {
    pub fn of(s: &Scenario) -> Self {
        Self {
            slots: s.num_slots,
            uavs: s.num_uavs(),
            users: s.num_users(),
            eves: s.num_eves(),
            subcarriers: s.num_subcarriers,
        }
    }

    /// Index of `(n, m, k, i)` in a comm-shaped array.
    #[inline]
    pub fn comm(&self, n: usize, m: usize, k: usize, i: usize) -> usize {
        ((n * self.uavs + m) * self.users + k) * self.subcarriers + i
    }

    /// Index of `(n, m, i)` in a jam-shaped array.
    #[inline]
    pub fn jam(&self, n: usize, m: usize, i: usize) -> usize {
        (n * self.uavs + m) * self.subcarriers + i
    }

    #[inline]
    pub fn slot_uav(&self, n: usize, m: usize) -> usize {
        n * self.uavs + m
    }

    pub fn comm_len(&self) -> usize {
        self.slots * self.uavs * self.users * self.subcarriers
    }

    pub fn jam_len(&self) -> usize {
        self.slots * self.uavs * self.subcarriers
    }
}

/// Communication and jamming schedules and powers for every slot, UAV and subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationState {
    pub dims: Dims,
    /// `s_{m,k,i}[n]`, indexed by [`Dims::comm`].
    pub comm_sched: Vec<bool>,
    /// `p_{m,k,i}[n]` in watts, indexed by [`Dims::comm`].
    pub comm_power: Vec<f64>,
    /// `s^J_{m,i}[n]`, indexed by [`Dims::jam`].
    pub jam_sched: Vec<bool>,
    /// `p^J_{m,i}[n]` in watts, indexed by [`Dims::jam`].
    pub jam_power: Vec<f64>,
}

impl AllocationState {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            comm_sched: vec![false; dims.comm_len()],
            comm_power: vec![0.0; dims.comm_len()],
            jam_sched: vec![false; dims.jam_len()],
            jam_power: vec![0.0; dims.jam_len()],
        }
    }

    /// Effective transmit power `s·p` of user link `(n, m, k, i)`.
    #[inline]
    pub fn comm_tx(&self, n: usize, m: usize, k: usize, i: usize) -> f64 {
        let idx = self.dims.comm(n, m, k, i);
        if self.comm_sched[idx] {
            self.comm_power[idx]
        } else {
            0.0
        }
    }

    /// Effective jamming power `s^J·p^J` of `(n, m, i)`.
    #[inline]
    pub fn jam_tx(&self, n: usize, m: usize, i: usize) -> f64 {
        let idx = self.dims.jam(n, m, i);
        if self.jam_sched[idx] {
            self.jam_power[idx]
        } else {
            0.0
        }
    }

    /// User served by UAV `m` on subcarrier `i` in slot `n`, if any.
    pub fn served_user(&self, n: usize, m: usize, i: usize) -> Option<usize> {
        (0..self.dims.users).find(|&k| self.comm_sched[self.dims.comm(n, m, k, i)])
    }

    /// Total effective power of UAV `m` in slot `n`.
    pub fn total_power(&self, n: usize, m: usize) -> f64 {
        let d = self.dims;
        let comm: f64 = (0..d.users)
            .flat_map(|k| (0..d.subcarriers).map(move |i| (k, i)))
            .map(|(k, i)| self.comm_tx(n, m, k, i))
            .sum();
        let jam: f64 = (0..d.subcarriers).map(|i| self.jam_tx(n, m, i)).sum();
        comm + jam
    }

    /// Drops all jamming.
    pub fn without_jamming(&self) -> Self {
        let mut s = self.clone();
        s.jam_sched.iter_mut().for_each(|v| *v = false);
        s.jam_power.iter_mut().for_each(|v| *v = 0.0);
        s
    }
}

/// Horizontal waypoints `q_m[n]` for `n = 0..=N`; slot `n ≥ 1` is served from `q_m[n]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySet {
    pub waypoints: Vec<Vec<Point>>,
}

impl TrajectorySet {
    pub fn num_uavs(&self) -> usize {
        self.waypoints.len()
    }

    pub fn num_slots(&self) -> usize {
        self.waypoints.first().map(|w| w.len().saturating_sub(1)).unwrap_or(0)
    }

    /// Position of UAV `m` while serving slot `n` (0-based slot index).
    #[inline]
    pub fn slot_position(&self, m: usize, n: usize) -> Point {
        self.waypoints[m][n + 1]
    }

    /// Uniform-speed straight lines from start to end.
    pub fn straight_lines(s: &Scenario) -> Self {
        let n = s.num_slots;
        let waypoints = s
            .uavs
            .iter()
            .map(|u| {
                (0..=n)
                    .map(|t| {
                        let f = t as f64 / n as f64;
                        u.start + (u.end - u.start) * f
                    })
                    .collect()
            })
            .collect();
        Self { waypoints }
    }
}

/// Channel gains `h_{m,k}[n]` from every UAV to every user and eavesdropper.
#[derive(Debug, Clone)]
pub struct LinkGains {
    pub dims: Dims,
    /// `(n, m, k_U)` row-major.
    pub user: Vec<f64>,
    /// `(n, m, k_E)` row-major.
    pub eve: Vec<f64>,
}

impl LinkGains {
    pub fn new(traj: &TrajectorySet, s: &Scenario) -> Self {
        let dims = Dims::of(s);
        let mut user = Vec::with_capacity(dims.slots * dims.uavs * dims.users);
        let mut eve = Vec::with_capacity(dims.slots * dims.uavs * dims.eves);
        for n in 0..dims.slots {
            for m in 0..dims.uavs {
                let q = traj.slot_position(m, n);
                user.extend(s.users.iter().map(|&w| channel_gain(q, w, s.altitude, s.ref_gain)));
                eve.extend(s.eves.iter().map(|&w| channel_gain(q, w, s.altitude, s.ref_gain)));
            }
        }
        Self { dims, user, eve }
    }

    #[inline]
    pub fn user(&self, n: usize, m: usize, k: usize) -> f64 {
        self.user[(n * self.dims.uavs + m) * self.dims.users + k]
    }

    #[inline]
    pub fn eve(&self, n: usize, m: usize, k: usize) -> f64 {
        self.eve[(n * self.dims.uavs + m) * self.dims.eves + k]
    }

    /// Jamming interference `Σ_{m'≠m} s^J p^J h_{m',k}` at user `k` on `(n, i)`.
    pub fn user_interference(&self, state: &AllocationState, n: usize, m: usize, k: usize, i: usize) -> f64 {
        (0..self.dims.uavs)
            .filter(|&j| j != m)
            .map(|j| state.jam_tx(n, j, i) * self.user(n, j, k))
            .sum()
    }

    /// Jamming interference at eavesdropper `k` on `(n, i)`, excluding UAV `m`.
    pub fn eve_interference(&self, state: &AllocationState, n: usize, m: usize, k: usize, i: usize) -> f64 {
        (0..self.dims.uavs)
            .filter(|&j| j != m)
            .map(|j| state.jam_tx(n, j, i) * self.eve(n, j, k))
            .sum()
    }
}

/// SINR at user `k` for the link from UAV `m` on `(n, i)`.
pub fn sinr_user(
    n: usize,
    m: usize,
    k: usize,
    i: usize,
    state: &AllocationState,
    gains: &LinkGains,
    noise: f64,
) -> f64 {
    let p = state.comm_power[state.dims.comm(n, m, k, i)];
    p * gains.user(n, m, k) / (gains.user_interference(state, n, m, k, i) + noise)
}

/// SINR at eavesdropper `e` when UAV `m` transmits to user `k` on `(n, i)`.
pub fn sinr_eve(
    n: usize,
    m: usize,
    k: usize,
    e: usize,
    i: usize,
    state: &AllocationState,
    gains: &LinkGains,
    noise: f64,
) -> f64 {
    let p = state.comm_power[state.dims.comm(n, m, k, i)];
    p * gains.eve(n, m, e) / (gains.eve_interference(state, n, m, e, i) + noise)
}

/// Achievable rate in bps/Hz, zero when the link is not scheduled.
pub fn rate_user(n: usize, m: usize, k: usize, i: usize, state: &AllocationState, gains: &LinkGains, noise: f64) -> f64 {
    if !state.comm_sched[state.dims.comm(n, m, k, i)] {
        return 0.0;
    }
    (1.0 + sinr_user(n, m, k, i, state, gains, noise)).log2()
}

/// Rate leaked to eavesdropper `e`, zero when the link is not scheduled.
#[allow(clippy::too_many_arguments)]
pub fn leakage_rate(
    n: usize,
    m: usize,
    k: usize,
    e: usize,
    i: usize,
    state: &AllocationState,
    gains: &LinkGains,
    noise: f64,
) -> f64 {
    if !state.comm_sched[state.dims.comm(n, m, k, i)] {
        return 0.0;
    }
    (1.0 + sinr_eve(n, m, k, e, i, state, gains, noise)).log2()
}

/// Per-link secrecy term before clipping: `R − max_e R'` (just `R` without eavesdroppers).
pub fn secrecy_term(n: usize, m: usize, k: usize, i: usize, state: &AllocationState, gains: &LinkGains, noise: f64) -> f64 {
    if !state.comm_sched[state.dims.comm(n, m, k, i)] {
        return 0.0;
    }
    let r = rate_user(n, m, k, i, state, gains, noise);
    let worst = (0..state.dims.eves)
        .map(|e| leakage_rate(n, m, k, e, i, state, gains, noise))
        .fold(0.0, f64::max);
    r - worst
}

/// Average secrecy rate of user `k` over the mission, with per-link clipping at zero.
pub fn avg_secrecy_rate(k: usize, state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> f64 {
    let gains = LinkGains::new(traj, s);
    avg_secrecy_with(k, state, &gains, s.noise_power)
}

pub fn avg_secrecy_with(k: usize, state: &AllocationState, gains: &LinkGains, noise: f64) -> f64 {
    let d = state.dims;
    let mut total = 0.0;
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                total += secrecy_term(n, m, k, i, state, gains, noise).max(0.0);
            }
        }
    }
    total / d.slots as f64
}

pub fn per_user_secrecy(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> Vec<f64> {
    let gains = LinkGains::new(traj, s);
    (0..s.num_users())
        .map(|k| avg_secrecy_with(k, state, &gains, s.noise_power))
        .collect()
}

/// Average minimum secrecy rate η: the quantity every solver reports and is judged by.
pub fn objective(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> f64 {
    per_user_secrecy(state, traj, s).into_iter().fold(f64::INFINITY, f64::min)
}

/// Average-minimum secrecy without per-link clipping: `min_k (1/N) Σ (R − max_e R')`.
///
/// Never exceeds [`objective`]; equal when no scheduled link has negative secrecy.
pub fn objective_unclipped(state: &AllocationState, gains: &LinkGains, noise: f64) -> f64 {
    let d = state.dims;
    let mut users = vec![0.0; d.users];
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                if let Some(k) = state.served_user(n, m, i) {
                    users[k] += secrecy_term(n, m, k, i, state, gains, noise);
                }
            }
        }
    }
    users.into_iter().map(|v| v / d.slots as f64).fold(f64::INFINITY, f64::min)
}

/// Switches off every scheduled link whose secrecy is not positive.
///
/// Such a link contributes zero to [`objective`] and is the only transmission
/// on its subcarrier, so removing it leaves every other term unchanged while
/// freeing its power. The result is the allocation whose unclipped and clipped
/// objectives agree.
pub fn clip_nonsecure_links(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> AllocationState {
    let gains = LinkGains::new(traj, s);
    let d = state.dims;
    let mut out = state.clone();
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                if let Some(k) = state.served_user(n, m, i) {
                    if secrecy_term(n, m, k, i, state, &gains, s.noise_power) <= 0.0 {
                        let c = d.comm(n, m, k, i);
                        out.comm_sched[c] = false;
                        out.comm_power[c] = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// Unclipped pair average `(1/N) Σ (R_k − R'_{k,e})` for every `(k_U, k_E)`, row-major.
///
/// With no eavesdroppers there is one column holding the plain average rate.
pub fn pair_secrecy(state: &AllocationState, gains: &LinkGains, noise: f64) -> Vec<f64> {
    let d = state.dims;
    let cols = d.eves.max(1);
    let mut out = vec![0.0; d.users * cols];
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                for k in 0..d.users {
                    if !state.comm_sched[d.comm(n, m, k, i)] {
                        continue;
                    }
                    let r = rate_user(n, m, k, i, state, gains, noise);
                    if d.eves == 0 {
                        out[k] += r;
                    }
                    for e in 0..d.eves {
                        out[k * cols + e] += r - leakage_rate(n, m, k, e, i, state, gains, noise);
                    }
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= d.slots as f64);
    out
}

/// Minimum over `(k_U, k_E)` of the unclipped pair averages.
pub fn pair_objective(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> f64 {
    let gains = LinkGains::new(traj, s);
    pair_secrecy(state, &gains, s.noise_power)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Unschedules every link whose unclipped secrecy term is negative.
pub fn clip_negative_links(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> AllocationState {
    let gains = LinkGains::new(traj, s);
    let d = state.dims;
    let mut out = state.clone();
    for n in 0..d.slots {
        for m in 0..d.uavs {
            for i in 0..d.subcarriers {
                for k in 0..d.users {
                    let idx = d.comm(n, m, k, i);
                    if state.comm_sched[idx] && secrecy_term(n, m, k, i, state, &gains, s.noise_power) < 0.0 {
                        out.comm_sched[idx] = false;
                        out.comm_power[idx] = 0.0;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Constraint checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Constraint {
    C2,
    C3,
    C4,
    C5,
    C6a,
    C6b,
    C6c,
    C7,
    C8,
    C9,
    C10,
    C11,
}

impl Constraint {
    pub const ALL: [Constraint; 12] = [
        Constraint::C2,
        Constraint::C3,
        Constraint::C4,
        Constraint::C5,
        Constraint::C6a,
        Constraint::C6b,
        Constraint::C6c,
        Constraint::C7,
        Constraint::C8,
        Constraint::C9,
        Constraint::C10,
        Constraint::C11,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            Constraint::C2 => "binary communication schedule",
            Constraint::C3 => "binary jamming schedule",
            Constraint::C4 => "one link per subcarrier and slot",
            Constraint::C5 => "communicate or jam, not both",
            Constraint::C6a => "per-slot peak power",
            Constraint::C6b => "non-negative communication power",
            Constraint::C6c => "non-negative jamming power",
            Constraint::C7 => "speed limit",
            Constraint::C8 => "no-fly zone clearance",
            Constraint::C9 => "pairwise safety distance",
            Constraint::C10 => "start position",
            Constraint::C11 => "end position",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintCheck {
    pub constraint: Constraint,
    pub passed: bool,
    /// Largest violation found (0 when satisfied); meters for geometry, watts for power.
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub checks: Vec<ConstraintCheck>,
}

impl ConstraintReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, c: Constraint) -> &ConstraintCheck {
        self.checks.iter().find(|x| x.constraint == c).expect("every constraint is checked")
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConstraintCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:?} {:<36} {} (worst {:.3e})",
                c.constraint,
                c.constraint.describe(),
                if c.passed { "ok" } else { "FAIL" },
                c.worst_violation
            )?;
        }
        Ok(())
    }
}

/// Checks C2–C11. Geometric tolerances are in meters, power tolerances in watts.
pub fn check_constraints(state: &AllocationState, traj: &TrajectorySet, s: &Scenario, tol: f64) -> ConstraintReport {
    let d = state.dims;
    let mut worst = [0.0f64; 12];
    let mut bump = |c: Constraint, v: f64| {
        let slot = &mut worst[c as usize];
        if v > *slot || v.is_nan() {
            *slot = if v.is_nan() { f64::INFINITY } else { v };
        }
    };

    for n in 0..d.slots {
        for i in 0..d.subcarriers {
            let links = (0..d.uavs)
                .flat_map(|m| (0..d.users).map(move |k| (m, k)))
                .filter(|&(m, k)| state.comm_sched[d.comm(n, m, k, i)])
                .count();
            bump(Constraint::C4, links as f64 - 1.0);
            for m in 0..d.uavs {
                let own = (0..d.users).filter(|&k| state.comm_sched[d.comm(n, m, k, i)]).count();
                let jam = state.jam_sched[d.jam(n, m, i)] as usize;
                bump(Constraint::C5, (own + jam) as f64 - 1.0);
            }
        }
        for m in 0..d.uavs {
            bump(Constraint::C6a, state.total_power(n, m) - s.uavs[m].peak_power);
        }
    }
    for &p in &state.comm_power {
        bump(Constraint::C6b, -p);
    }
    for &p in &state.jam_power {
        bump(Constraint::C6c, -p);
    }

    let v_cap = s.max_step();
    for (m, wps) in traj.waypoints.iter().enumerate() {
        for pair in wps.windows(2) {
            bump(Constraint::C7, pair[0].dist(pair[1]) - v_cap);
        }
        for q in wps {
            for z in &s.nfzs {
                bump(Constraint::C8, z.radius - q.dist(z.center));
            }
        }
        if let (Some(first), Some(last)) = (wps.first(), wps.last()) {
            bump(Constraint::C10, first.dist(s.uavs[m].start));
            bump(Constraint::C11, last.dist(s.uavs[m].end));
        }
    }
    for a in 0..traj.num_uavs() {
        for b in a + 1..traj.num_uavs() {
            for (qa, qb) in traj.waypoints[a].iter().zip(&traj.waypoints[b]) {
                bump(Constraint::C9, s.safety_distance - qa.dist(*qb));
            }
        }
    }
    // Schedules are stored as booleans, so C2/C3 hold by construction; a
    // mismatched shape is the only way to break them.
    if state.comm_sched.len() != d.comm_len() || state.comm_power.len() != d.comm_len() {
        bump(Constraint::C2, 1.0);
    }
    if state.jam_sched.len() != d.jam_len() || state.jam_power.len() != d.jam_len() {
        bump(Constraint::C3, 1.0);
    }
    if traj.num_uavs() != d.uavs || traj.num_slots() != d.slots {
        bump(Constraint::C10, f64::INFINITY);
    }

    let checks = Constraint::ALL
        .iter()
        .map(|&c| {
            let w = worst[c as usize].max(0.0);
            let limit = match c {
                Constraint::C4 | Constraint::C5 | Constraint::C2 | Constraint::C3 => 0.0,
                _ => tol,
            };
            ConstraintCheck {
                constraint: c,
                passed: w <= limit,
                worst_violation: w,
            }
        })
        .collect();
    ConstraintReport { checks }
}
