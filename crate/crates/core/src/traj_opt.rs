//! Trajectory design for fixed communication and jamming policies, by successive convex approximation.
//!
//! Rates depend on positions through squared distances `d² = ‖q − w‖² + H²`.
//! Logs of noise plus inverse-distance sums are convex in `d²`. Their tangents
//! give affine lower bounds, which are concave quadratics in `q`. Where a rate
//! increases with `d²`, the distance is replaced by its tangent lower bound,
//! which keeps the expression concave in `q`. No-fly zones and pairwise
//! separation are linearized as half-planes, and the speed limit is kept exact.
//! All of these are inner approximations, so every iterate is feasible.

use std::f64::consts::{LN_2, PI};

use thiserror::Error;

use crate::channel::{inside_nfz, Point};
use crate::convex_core::{solve_from, Affine, ConvexProgram, Expr, SolveOptions, SolveStatus, Term};
use crate::rates::{objective, objective_unclipped, AllocationState, Dims, LinkGains, TrajectorySet};
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum TrajError {
    #[error("UAV {uav} is inside no-fly zone {zone} at waypoint {waypoint}")]
    InsideNfz { uav: usize, waypoint: usize, zone: usize },
    #[error("UAV {uav} cannot reach its end point: path of {length:.1} m exceeds {budget:.1} m")]
    Unreachable { uav: usize, length: f64, budget: f64 },
    #[error("UAV {uav} at waypoint {waypoint} sits on the center of no-fly zone {zone}")]
    DegenerateLinearization { uav: usize, waypoint: usize, zone: usize },
    #[error("UAVs {a} and {b} coincide at waypoint {waypoint}")]
    Coincident { a: usize, b: usize, waypoint: usize },
    #[error("could not resolve the separation conflict between UAVs {a} and {b} at waypoint {waypoint}")]
    Separation { a: usize, b: usize, waypoint: usize },
    #[error("trajectory shape does not match the scenario")]
    DimensionMismatch,
}

// ---------------------------------------------------------------------------
// Initial trajectory
// ---------------------------------------------------------------------------

fn segment_distance(a: Point, b: Point, c: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sq();
    let t = if len2 > 0.0 { ((c - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + ab * t).dist(c)
}

/// Shortest tangent path from `a` to `b` around a disk, the arc replaced by a circumscribed polygon.
fn tangent_detour(a: Point, b: Point, center: Point, radius: f64) -> Vec<Point> {
    let (da, db) = (a.dist(center), b.dist(center));
    let (ta, tb) = ((a - center).y.atan2((a - center).x), (b - center).y.atan2((b - center).x));
    let (aa, ab) = ((radius / da).acos(), (radius / db).acos());
    let mut best: Option<(f64, Vec<Point>)> = None;
    for side in [1.0, -1.0] {
        let start = ta + side * aa;
        let end = tb - side * ab;
        let sweep = (side * (end - start)).rem_euclid(2.0 * PI);
        let length = (da * da - radius * radius).sqrt() + (db * db - radius * radius).sqrt() + radius * sweep;
        let pieces = (sweep / (PI / 18.0)).ceil().max(1.0) as usize;
        let step = sweep / pieces as f64;
        let outer = radius / (step / 2.0).cos();
        let on = |r: f64, t: f64| center + Point::new(t.cos(), t.sin()) * r;
        let mut path = vec![on(radius, start)];
        path.extend((0..pieces).map(|j| on(outer, start + side * step * (j as f64 + 0.5))));
        path.push(on(radius, end));
        if best.as_ref().is_none_or(|(l, _)| length < *l) {
            best = Some((length, path));
        }
    }
    best.map(|(_, p)| p).unwrap_or_default()
}

/// Straight line with tangent detours around every no-fly disk it crosses (radius inflated by 1 m).
pub fn detour_path(start: Point, end: Point, s: &Scenario) -> Vec<Point> {
    let mut path = vec![start, end];
    for _ in 0..64 {
        let hit = path.windows(2).enumerate().find_map(|(j, w)| {
            s.nfzs
                .iter()
                .find(|z| segment_distance(w[0], w[1], z.center) < z.radius + 1.0 - 1e-6)
                .map(|z| (j, z))
        });
        let Some((j, z)) = hit else { break };
        let (a, b) = (path[j], path[j + 1]);
        let radius = (z.radius + 1.0).min(a.dist(z.center).min(b.dist(z.center)) - 1e-9).max(z.radius);
        let detour = tangent_detour(a, b, z.center, radius);
        path.splice(j + 1..j + 1, detour);
    }
    path
}

/// `count + 1` points evenly spaced by arc length along a polyline.
pub fn resample(path: &[Point], count: usize) -> Vec<Point> {
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + w[0].dist(w[1]));
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(count + 1);
    let mut seg = 0;
    for j in 0..=count {
        let target = total * j as f64 / count as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((target - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(path[seg] + (path[seg + 1] - path[seg]) * t);
    }
    if let (Some(first), Some(last)) = (out.first_mut(), path.first()) {
        *first = *last;
    }
    if let (Some(l), Some(e)) = (out.last_mut(), path.last()) {
        *l = *e;
    }
    out
}

fn polyline_length(path: &[Point]) -> f64 {
    path.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Uniform-speed straight lines, detoured around no-fly zones, with separation conflicts pushed apart.
pub fn initial_trajectory(s: &Scenario) -> Result<TrajectorySet, TrajError> {
    let n = s.num_slots;
    let budget = s.max_speed * s.slot_duration * n as f64;
    let mut waypoints = Vec::with_capacity(s.num_uavs());
    for (m, u) in s.uavs.iter().enumerate() {
        let path = detour_path(u.start, u.end, s);
        let length = polyline_length(&path);
        if length > budget * (1.0 + 1e-12) {
            return Err(TrajError::Unreachable { uav: m, length, budget });
        }
        waypoints.push(resample(&path, n));
    }
    for w in 1..n {
        for b in 1..waypoints.len() {
            for a in 0..b {
                let (pa, pb) = (waypoints[a][w], waypoints[b][w]);
                let gap = pa.dist(pb);
                if gap >= s.safety_distance {
                    continue;
                }
                let heading = waypoints[b][w + 1] - waypoints[b][w - 1];
                let mut side = if heading.norm() > 0.0 {
                    heading.perp() * (1.0 / heading.norm())
                } else {
                    Point::new(0.0, 1.0)
                };
                if side.dot(pb - pa) < 0.0 {
                    side = side * -1.0;
                }
                waypoints[b][w] = pb + side * s.safety_distance;
            }
        }
    }
    let traj = TrajectorySet { waypoints };
    check_geometry(&traj, s, 1e-9)?;
    Ok(traj)
}

/// Initial trajectory in which UAV `uav` flies over every user on the way to its end point,
/// in the visiting order that gives the shortest detoured path.
///
/// Returns `None` when no such tour fits in the mission time or the tour breaks separation.
pub fn user_tour_trajectory(s: &Scenario, uav: usize) -> Option<TrajectorySet> {
    let mut base = initial_trajectory(s).ok()?;
    let spec = &s.uavs[uav];
    let mut order: Vec<usize> = (0..s.users.len()).collect();
    let mut best: Option<(f64, Vec<Point>)> = None;
    let mut visit = |order: &[usize]| {
        let stops: Vec<Point> = std::iter::once(spec.start)
            .chain(order.iter().map(|&k| s.users[k]))
            .chain(std::iter::once(spec.end))
            .collect();
        if stops.iter().any(|p| s.nfzs.iter().any(|z| inside_nfz(*p, z))) {
            return;
        }
        let mut path = vec![spec.start];
        for leg in stops.windows(2) {
            path.extend(detour_path(leg[0], leg[1], s).into_iter().skip(1));
        }
        let length = polyline_length(&path);
        if best.as_ref().is_none_or(|(l, _)| length < *l) {
            best = Some((length, path));
        }
    };
    if order.len() <= 6 {
        permute(&mut order, 0, &mut visit);
    } else {
        visit(&order);
    }
    let (length, path) = best?;
    if length > s.max_speed * s.slot_duration * s.num_slots as f64 * (1.0 - 1e-9) {
        return None;
    }
    base.waypoints[uav] = resample(&path, s.num_slots);
    check_geometry(&base, s, 1e-9).ok()?;
    Some(base)
}

fn permute(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == v.len() {
        f(v);
        return;
    }
    for j in at..v.len() {
        v.swap(at, j);
        permute(v, at + 1, f);
        v.swap(at, j);
    }
}

/// Verifies speed, no-fly zones and separation at every waypoint.
pub fn check_geometry(traj: &TrajectorySet, s: &Scenario, tol: f64) -> Result<(), TrajError> {
    let step = s.max_step();
    for (m, path) in traj.waypoints.iter().enumerate() {
        for (w, p) in path.iter().enumerate() {
            if let Some(zone) = s.nfzs.iter().position(|z| inside_nfz(*p, z) && p.dist(z.center) < z.radius - tol) {
                return Err(TrajError::InsideNfz { uav: m, waypoint: w, zone });
            }
        }
        let longest = path.windows(2).map(|w| w[0].dist(w[1])).fold(0.0, f64::max);
        if longest > step + tol {
            return Err(TrajError::Unreachable {
                uav: m,
                length: longest * s.num_slots as f64,
                budget: step * s.num_slots as f64,
            });
        }
    }
    for w in 1..s.num_slots {
        for b in 1..traj.num_uavs() {
            for a in 0..b {
                if traj.waypoints[a][w].dist(traj.waypoints[b][w]) < s.safety_distance - tol {
                    return Err(TrajError::Separation { a, b, waypoint: w });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Slack variables
// ---------------------------------------------------------------------------

/// Squared-distance slacks per `(n, m, k)` at the waypoint flown in slot `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajIterate {
    pub traj: TrajectorySet,
    /// Upper bounds on user distances, indexed `(n·M + m)·K_U + k`.
    pub t_user: Vec<f64>,
    /// Upper bounds on eavesdropper distances, indexed `(n·M + m)·K_E + e`.
    pub t_eve: Vec<f64>,
    /// Lower bounds on user distances.
    pub t_user_lo: Vec<f64>,
    /// Lower bounds on eavesdropper distances.
    pub t_eve_lo: Vec<f64>,
    pub eta: f64,
}

/// Sets every slack to its exact squared distance.
pub fn init_slacks(traj: &TrajectorySet, s: &Scenario) -> Result<TrajIterate, TrajError> {
    if traj.num_uavs() != s.num_uavs() || traj.waypoints.iter().any(|w| w.len() != s.num_slots + 1) {
        return Err(TrajError::DimensionMismatch);
    }
    for (m, path) in traj.waypoints.iter().enumerate() {
        for (w, p) in path.iter().enumerate() {
            if let Some(zone) = s.nfzs.iter().position(|z| inside_nfz(*p, z)) {
                return Err(TrajError::InsideNfz { uav: m, waypoint: w, zone });
            }
        }
    }
    let h2 = s.altitude * s.altitude;
    let d = Dims::of(s);
    let mut t_user = Vec::with_capacity(d.slots * d.uavs * d.users);
    let mut t_eve = Vec::with_capacity(d.slots * d.uavs * d.eves);
    for n in 0..d.slots {
        for m in 0..d.uavs {
            let q = traj.slot_position(m, n);
            t_user.extend(s.users.iter().map(|w| q.dist_sq(*w) + h2));
            t_eve.extend(s.eves.iter().map(|w| q.dist_sq(*w) + h2));
        }
    }
    Ok(TrajIterate {
        traj: traj.clone(),
        t_user_lo: t_user.clone(),
        t_eve_lo: t_eve.clone(),
        t_user,
        t_eve,
        eta: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Program layout
// ---------------------------------------------------------------------------

/// A scheduled `(n, i)` link and its secrecy variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkVar {
    pub slot: usize,
    pub subcarrier: usize,
    pub sender: usize,
    pub user: usize,
    /// Absent when the slot's waypoint is pinned, so the link is constant.
    pub z: Option<usize>,
}

/// Variable layout: for every free waypoint, the coordinates of all UAVs followed by the
/// secrecy variables of the links flown from it; `η` is the single global.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajLayout {
    pub slots: usize,
    pub uavs: usize,
    /// Program index of `x` per `(waypoint, uav)`, `y` follows; `None` for pinned end points.
    coord: Vec<Option<usize>>,
    pub links: Vec<LinkVar>,
    pub num_local: usize,
}

impl TrajLayout {
    pub fn new(state: &AllocationState, s: &Scenario) -> Self {
        let d = Dims::of(s);
        let mut coord = vec![None; (d.slots + 1) * d.uavs];
        let mut links = Vec::new();
        let mut next = 0;
        for w in 0..=d.slots {
            let free = w > 0 && w < d.slots;
            if free {
                for m in 0..d.uavs {
                    coord[w * d.uavs + m] = Some(next);
                    next += 2;
                }
            }
            if w == 0 {
                continue;
            }
            let n = w - 1;
            for i in 0..d.subcarriers {
                for m in 0..d.uavs {
                    if let Some(k) = state.served_user(n, m, i) {
                        let z = free.then(|| {
                            next += 1;
                            next - 1
                        });
                        links.push(LinkVar {
                            slot: n,
                            subcarrier: i,
                            sender: m,
                            user: k,
                            z,
                        });
                    }
                }
            }
        }
        Self {
            slots: d.slots,
            uavs: d.uavs,
            coord,
            links,
            num_local: next,
        }
    }

    pub fn coord(&self, w: usize, m: usize) -> Option<usize> {
        self.coord[w * self.uavs + m]
    }

    /// Position of UAV `m` at waypoint `w` as a pair of affine expressions.
    pub fn position(&self, traj: &TrajectorySet, m: usize, w: usize) -> [Affine; 2] {
        match self.coord(w, m) {
            Some(j) => [Affine::var(j), Affine::var(j + 1)],
            None => {
                let p = traj.waypoints[m][w];
                [Affine::constant(p.x), Affine::constant(p.y)]
            }
        }
    }

    /// Program point with the coordinates of `traj`; secrecy variables and `η` are zero.
    pub fn point(&self, traj: &TrajectorySet, num_vars: usize) -> Vec<f64> {
        let mut x = vec![0.0; num_vars];
        for w in 0..=self.slots {
            for m in 0..self.uavs {
                if let Some(j) = self.coord(w, m) {
                    x[j] = traj.waypoints[m][w].x;
                    x[j + 1] = traj.waypoints[m][w].y;
                }
            }
        }
        x
    }

    pub fn read(&self, x: &[f64], base: &TrajectorySet) -> TrajectorySet {
        let mut out = base.clone();
        for w in 0..=self.slots {
            for m in 0..self.uavs {
                if let Some(j) = self.coord(w, m) {
                    out.waypoints[m][w] = Point::new(x[j], x[j + 1]);
                }
            }
        }
        out
    }
}

fn diff_rows(pos: &[Affine; 2], target: Point) -> Vec<Affine> {
    vec![pos[0].clone().shifted(-target.x), pos[1].clone().shifted(-target.y)]
}

/// Tangent lower bound of `‖q − target‖² + H²` at `ql`.
fn distance_minorant(pos: &[Affine; 2], ql: Point, target: Point, h2: f64) -> Affine {
    let g = (ql - target) * 2.0;
    let mut coeffs: Vec<(usize, f64)> = Vec::new();
    let mut c = (ql - target).norm_sq() + h2 - g.dot(ql);
    for (axis, gv) in [(0, g.x), (1, g.y)] {
        c += gv * pos[axis].offset();
        coeffs.extend(pos[axis].coeffs().iter().map(|&(j, v)| (j, gv * v)));
    }
    Affine::new(coeffs, c)
}

/// A transmitter seen by one receiver: normalized power `P·β0/σ²` and its position.
struct Source {
    weight: f64,
    uav: usize,
}

/// Concave minorant pieces of one log term `ln(1 + Σ c_u/d_u²)`.
enum Bound {
    /// Tangent in `d²`: lower-bounds the log, concave quadratic in `q`.
    Tangent,
    /// `d²` replaced by its tangent lower bound: upper-bounds the log; used negated.
    Minorant,
}

/// Adds `sign·ln(1 + Σ c_u / d_u²)` bounded from below to `expr` (in nats, scaled by `w`).
#[allow(clippy::too_many_arguments)]
fn push_log(
    expr: &mut Expr,
    lin: &mut f64,
    sources: &[Source],
    target: Point,
    w: usize,
    n: usize,
    it: &TrajIterate,
    layout: &TrajLayout,
    h2: f64,
    weight: f64,
    how: Bound,
) {
    if sources.is_empty() {
        return;
    }
    let at: Vec<f64> = sources
        .iter()
        .map(|src| it.traj.slot_position(src.uav, n).dist_sq(target) + h2)
        .collect();
    match how {
        Bound::Tangent => {
            let inner = 1.0 + sources.iter().zip(&at).map(|(src, x)| src.weight / x).sum::<f64>();
            *lin += weight * inner.ln();
            for (src, &x) in sources.iter().zip(&at) {
                // ∂/∂x ln(1 + Σ c/x) = −(c/x²)/inner.
                let g = src.weight / (x * x) / inner;
                *lin += weight * g * x;
                let pos = layout.position(&it.traj, src.uav, w);
                let rows = diff_rows(&pos, target);
                *lin -= weight * g * h2;
                if rows.iter().all(|r| r.coeffs().is_empty()) {
                    *lin -= weight * g * rows.iter().map(|r| r.offset().powi(2)).sum::<f64>();
                } else {
                    expr.push(Term::NegSquares { weight: weight * g, rows });
                }
            }
        }
        Bound::Minorant => {
            let parts: Vec<(f64, Affine)> = sources
                .iter()
                .map(|src| {
                    let pos = layout.position(&it.traj, src.uav, w);
                    (src.weight, distance_minorant(&pos, it.traj.slot_position(src.uav, n), target, h2))
                })
                .collect();
            if parts.iter().all(|(_, a)| a.coeffs().is_empty()) {
                let g = 1.0 + parts.iter().map(|(c, a)| c / a.offset()).sum::<f64>();
                *lin -= weight * g.ln();
            } else {
                expr.push(Term::NegLogInvSum { weight, base: 1.0, parts });
            }
        }
    }
}

/// Per-link rows `z ≤ R − R′_e` (one per eavesdropper, or `z ≤ R` without any) in bps/Hz.
///
/// Returns `(link index, row)` pairs; each row is `bound − z ≥ 0`.
pub fn rate_lower_bounds(
    it: &TrajIterate,
    layout: &TrajLayout,
    state: &AllocationState,
    s: &Scenario,
) -> Vec<(usize, Expr)> {
    let d = Dims::of(s);
    let h2 = s.altitude * s.altitude;
    let norm = s.ref_gain / s.noise_power;
    let wlog = 1.0 / LN_2;
    let mut out = Vec::new();
    for (li, link) in layout.links.iter().enumerate() {
        let Some(z) = link.z else { continue };
        let (n, i, mc, k) = (link.slot, link.subcarrier, link.sender, link.user);
        let w = n + 1;
        let comm = Source {
            weight: state.comm_tx(n, mc, k, i) * norm,
            uav: mc,
        };
        let jammers: Vec<Source> = (0..d.uavs)
            .filter(|&m| m != mc && state.jam_tx(n, m, i) > 0.0)
            .map(|m| Source {
                weight: state.jam_tx(n, m, i) * norm,
                uav: m,
            })
            .collect();
        let all: Vec<Source> = std::iter::once(Source { weight: comm.weight, uav: mc })
            .chain(jammers.iter().map(|j| Source { weight: j.weight, uav: j.uav }))
            .collect();

        // R ≥ tangent of ln(1 + S/x + Σ P/y) − ln(1 + Σ P/L(y)).
        let mut user = Expr::new();
        let mut user_c = 0.0;
        push_log(&mut user, &mut user_c, &all, s.users[k], w, n, it, layout, h2, wlog, Bound::Tangent);
        push_log(&mut user, &mut user_c, &jammers, s.users[k], w, n, it, layout, h2, wlog, Bound::Minorant);
        if d.eves == 0 {
            let mut row = user;
            row.push(Term::Linear(Affine::new([(z, -1.0)], user_c)));
            out.push((li, row));
            continue;
        }
        for e in 0..d.eves {
            // −R′ ≥ −ln(1 + S′/L(x′) + Σ P′/L(y′)) + tangent of ln(1 + Σ P′/y′).
            let mut row = user.clone();
            let mut c = user_c;
            push_log(&mut row, &mut c, &all, s.eves[e], w, n, it, layout, h2, wlog, Bound::Minorant);
            push_log(&mut row, &mut c, &jammers, s.eves[e], w, n, it, layout, h2, wlog, Bound::Tangent);
            row.push(Term::Linear(Affine::new([(z, -1.0)], c)));
            out.push((li, row));
        }
    }
    out
}

/// Linearized no-fly-zone and separation constraints at the iterate, each `a ≥ 0`.
pub fn linearized_geometry(it: &TrajIterate, layout: &TrajLayout, s: &Scenario) -> Result<Vec<Affine>, TrajError> {
    let mut out = Vec::new();
    for w in 1..s.num_slots {
        for m in 0..s.num_uavs() {
            let pos = layout.position(&it.traj, m, w);
            let ql = it.traj.waypoints[m][w];
            for (zone, z) in s.nfzs.iter().enumerate() {
                if ql.dist_sq(z.center) == 0.0 {
                    return Err(TrajError::DegenerateLinearization { uav: m, waypoint: w, zone });
                }
                out.push(distance_minorant(&pos, ql, z.center, 0.0).shifted(-z.radius * z.radius));
            }
        }
        for b in 1..s.num_uavs() {
            for a in 0..b {
                let (pa, pb) = (layout.position(&it.traj, a, w), layout.position(&it.traj, b, w));
                let (qa, qb) = (it.traj.waypoints[a][w], it.traj.waypoints[b][w]);
                let dl = qa - qb;
                if dl.norm_sq() == 0.0 {
                    return Err(TrajError::Coincident { a, b, waypoint: w });
                }
                // ‖dl‖² + 2 dl·((qa − qb) − dl) ≥ D_S².
                let mut coeffs = Vec::new();
                let mut c = -dl.norm_sq() - s.safety_distance * s.safety_distance;
                for (axis, g) in [(0, 2.0 * dl.x), (1, 2.0 * dl.y)] {
                    c += g * (pa[axis].offset() - pb[axis].offset());
                    coeffs.extend(pa[axis].coeffs().iter().map(|&(j, v)| (j, g * v)));
                    coeffs.extend(pb[axis].coeffs().iter().map(|&(j, v)| (j, -g * v)));
                }
                out.push(Affine::new(coeffs, c));
            }
        }
    }
    Ok(out)
}

/// Convex program of one SCA step.
#[derive(Debug, Clone)]
pub struct TrajProgram {
    pub program: ConvexProgram,
    pub layout: TrajLayout,
    pub eta_var: usize,
    /// Index of the first per-user row among the inequalities.
    user_rows: usize,
    /// Inequality index of the first row of every link with a variable.
    link_rows: Vec<(usize, std::ops::Range<usize>)>,
    /// Constant per-user contribution of pinned links.
    pub user_constants: Vec<f64>,
}

pub fn build_program(it: &TrajIterate, state: &AllocationState, s: &Scenario) -> Result<TrajProgram, TrajError> {
    let d = Dims::of(s);
    let layout = TrajLayout::new(state, s);
    let mut p = ConvexProgram::new(layout.num_local, 1);
    let eta_var = p.global(0);
    p.maximize(Term::Linear(Affine::var(eta_var)));

    let step = s.max_step();
    for m in 0..d.uavs {
        for w in 0..d.slots {
            let (a, b) = (layout.position(&it.traj, m, w), layout.position(&it.traj, m, w + 1));
            if layout.coord(w, m).is_none() && layout.coord(w + 1, m).is_none() {
                continue;
            }
            let rows = vec![
                Affine::new(
                    b[0].coeffs().iter().copied().chain(a[0].coeffs().iter().map(|&(j, v)| (j, -v))),
                    b[0].offset() - a[0].offset(),
                ),
                Affine::new(
                    b[1].coeffs().iter().copied().chain(a[1].coeffs().iter().map(|&(j, v)| (j, -v))),
                    b[1].offset() - a[1].offset(),
                ),
            ];
            p.add_inequality(
                Expr::new()
                    .with(Term::Linear(Affine::constant(step * step)))
                    .with(Term::NegSquares { weight: 1.0, rows }),
            );
        }
    }
    for g in linearized_geometry(it, &layout, s)? {
        p.add_ge(g, 0.0);
    }

    let rows = rate_lower_bounds(it, &layout, state, s);
    let mut link_rows: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    for (li, row) in rows {
        let at = p.inequalities.len();
        match link_rows.last_mut() {
            Some((l, r)) if *l == li => r.end = at + 1,
            _ => link_rows.push((li, at..at + 1)),
        }
        p.add_inequality(row);
    }

    // Pinned links contribute constants.
    let gains = LinkGains::new(&it.traj, s);
    let mut user_constants = vec![0.0; d.users];
    let mut user_coeffs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d.users];
    let scale = 1.0 / d.slots as f64;
    for link in &layout.links {
        match link.z {
            Some(z) => user_coeffs[link.user].push((z, scale)),
            None => {
                let v = crate::rates::secrecy_term(link.slot, link.sender, link.user, link.subcarrier, state, &gains, s.noise_power);
                user_constants[link.user] += v * scale;
            }
        }
    }
    let user_rows = p.inequalities.len();
    for k in 0..d.users {
        let mut coeffs = std::mem::take(&mut user_coeffs[k]);
        coeffs.push((eta_var, -1.0));
        p.add_ge(Affine::new(coeffs, user_constants[k]), 0.0);
    }
    Ok(TrajProgram {
        program: p,
        layout,
        eta_var,
        user_rows,
        link_rows,
        user_constants,
    })
}

impl TrajProgram {
    /// Start at the iterate's trajectory with every `z` and `η` strictly below its bounds.
    pub fn start(&self, traj: &TrajectorySet) -> Vec<f64> {
        let mut x = self.layout.point(traj, self.program.num_vars());
        for (li, rows) in &self.link_rows {
            let z = self.layout.links[*li].z.expect("rows exist only for free links");
            let lo = self.program.inequalities[rows.clone()]
                .iter()
                .map(|g| g.value(&x).unwrap_or(f64::NEG_INFINITY))
                .fold(f64::INFINITY, f64::min);
            x[z] = lo - 1.0;
        }
        let lowest = self.program.inequalities[self.user_rows..]
            .iter()
            .filter_map(|g| g.value(&x))
            .fold(f64::INFINITY, f64::min);
        x[self.eta_var] = if lowest.is_finite() { lowest - 1.0 } else { 0.0 };
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajOptions {
    /// Relative oracle improvement below which SCA stops.
    pub tol: f64,
    pub max_sca: usize,
    pub solver: SolveOptions,
}

impl Default for TrajOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_sca: 30,
            solver: SolveOptions {
                tol: 1e-7,
                max_iter: 300,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajStatus {
    Updated,
    /// No step improved the oracle; the incoming trajectory is returned.
    KeptIncoming,
    /// The convex solver failed on the first step; the incoming trajectory is returned.
    SolverFailure,
}

#[derive(Debug, Clone)]
pub struct TrajSolution {
    pub traj: TrajectorySet,
    /// Oracle objective at `traj`.
    pub eta: f64,
    pub status: TrajStatus,
    /// Every accepted iterate, starting with the incoming trajectory.
    pub iterates: Vec<TrajectorySet>,
    /// Oracle objective of every accepted iterate.
    pub etas: Vec<f64>,
    pub sca_steps: usize,
}

/// SCA over the trajectories for the fixed allocation in `state`.
pub fn solve_trajectory_sca(
    state: &AllocationState,
    traj_in: &TrajectorySet,
    s: &Scenario,
    opts: &TrajOptions,
) -> Result<TrajSolution, TrajError> {
    let mut it = init_slacks(traj_in, s)?;
    let mut eta = objective(state, traj_in, s);
    it.eta = eta;
    let mut iterates = vec![traj_in.clone()];
    let mut etas = vec![eta];
    let mut status = TrajStatus::KeptIncoming;
    let mut steps = 0;
    for _ in 0..opts.max_sca {
        let prog = build_program(&it, state, s)?;
        if prog.layout.num_local == 0 {
            break;
        }
        let x0 = prog.start(&it.traj);
        let sol = solve_from(&prog.program, Some(&x0), opts.solver);
        steps += 1;
        if !sol.is_usable() {
            log::warn!("trajectory surrogate failed with {:?}", sol.status);
            if steps == 1 && sol.status != SolveStatus::Infeasible {
                status = TrajStatus::SolverFailure;
            }
            break;
        }
        let next = prog.layout.read(&sol.x, &it.traj);
        if check_geometry(&next, s, 1e-7).is_err() {
            log::warn!("trajectory step left the feasible set; stopping");
            break;
        }
        let next_eta = objective(state, &next, s);
        if next_eta <= eta {
            break;
        }
        let gain = (next_eta - eta) / eta.abs().max(1.0);
        it = init_slacks(&next, s)?;
        it.eta = next_eta;
        eta = next_eta;
        iterates.push(next);
        etas.push(eta);
        status = TrajStatus::Updated;
        if gain < opts.tol {
            break;
        }
    }
    Ok(TrajSolution {
        traj: it.traj,
        eta,
        status,
        iterates,
        etas,
        sca_steps: steps,
    })
}

/// Unclipped oracle at `traj`, the quantity each SCA step lower-bounds.
pub fn surrogate_target(state: &AllocationState, traj: &TrajectorySet, s: &Scenario) -> f64 {
    objective_unclipped(state, &LinkGains::new(traj, s), s.noise_power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm_alloc::{solve_subproblem1, CommOptions};
    use crate::scenario::{default_scenario, NoFlyZone, UavSpec};
    use approx::assert_relative_eq;

    fn single(n: usize) -> Scenario {
        Scenario {
            num_slots: n,
            slot_duration: 1.0,
            uavs: vec![UavSpec {
                start: Point::new(0.0, 0.0),
                end: Point::new(400.0, 0.0),
                peak_power: 1.0,
            }],
            users: vec![Point::new(200.0, 150.0)],
            eves: vec![Point::new(200.0, -250.0)],
            nfzs: vec![],
            altitude: 100.0,
            max_speed: 20.0,
            safety_distance: 10.0,
            num_subcarriers: 2,
            ref_gain: 1e-5,
            noise_power: 1e-13,
            bandwidth_hz: None,
        }
    }

    #[test]
    fn slack_initialization() {
        let mut s = single(2);
        s.uavs[0].end = Point::new(0.0, 0.0);
        s.users = vec![Point::new(0.0, 0.0)];
        let traj = TrajectorySet::straight_lines(&s);
        let it = init_slacks(&traj, &s).unwrap();
        assert_eq!(it.t_user[0], 1e4);
        assert_eq!(it.t_user, it.t_user_lo);
        s.nfzs.push(NoFlyZone {
            center: Point::new(0.0, 10.0),
            radius: 20.0,
            height: 150.0,
        });
        assert!(matches!(init_slacks(&traj, &s), Err(TrajError::InsideNfz { .. })));
    }

    #[test]
    fn nfz_half_plane_example() {
        let mut s = single(2);
        s.nfzs.push(NoFlyZone {
            center: Point::new(150.0, 325.0),
            radius: 60.0,
            height: 150.0,
        });
        let mut traj = TrajectorySet::straight_lines(&s);
        traj.waypoints[0][1] = Point::new(90.0, 325.0);
        let it = TrajIterate {
            traj: traj.clone(),
            t_user: vec![],
            t_eve: vec![],
            t_user_lo: vec![],
            t_eve_lo: vec![],
            eta: 0.0,
        };
        let layout = TrajLayout::new(&AllocationState::zeros(Dims::of(&s)), &s);
        let g = linearized_geometry(&it, &layout, &s).unwrap();
        // 3600 − 120(x − 90) ≥ 3600  ⇔  x ≤ 90.
        let j = layout.coord(1, 0).unwrap();
        let mut x = vec![0.0; layout.num_local];
        x[j] = 90.0;
        x[j + 1] = 325.0;
        assert_relative_eq!(g[0].eval(&x), 0.0, epsilon = 1e-9);
        x[j] = 89.0;
        assert_relative_eq!(g[0].eval(&x), 120.0, epsilon = 1e-9);
        x[j] = 91.0;
        assert!(g[0].eval(&x) < 0.0);

        traj.waypoints[0][1] = Point::new(150.0, 325.0);
        let it = TrajIterate { traj, ..it };
        assert!(matches!(
            linearized_geometry(&it, &layout, &s),
            Err(TrajError::DegenerateLinearization { .. })
        ));
    }

    #[test]
    fn separation_at_exact_distance_is_active() {
        let mut s = single(2);
        s.uavs.push(UavSpec {
            start: Point::new(0.0, 10.0),
            end: Point::new(400.0, 10.0),
            peak_power: 1.0,
        });
        let traj = TrajectorySet::straight_lines(&s);
        let it = init_slacks(&traj, &s).unwrap();
        let layout = TrajLayout::new(&AllocationState::zeros(Dims::of(&s)), &s);
        let g = linearized_geometry(&it, &layout, &s).unwrap();
        let x = layout.point(&traj, layout.num_local);
        assert_relative_eq!(g[0].eval(&x), 0.0, epsilon = 1e-9);
    }

    fn served(s: &Scenario, jam: bool) -> AllocationState {
        let d = Dims::of(s);
        let mut st = AllocationState::zeros(d);
        for n in 0..d.slots {
            st.comm_sched[d.comm(n, 0, 0, 0)] = true;
            st.comm_power[d.comm(n, 0, 0, 0)] = 0.3;
            if jam && d.uavs > 1 {
                st.jam_sched[d.jam(n, 1, 0)] = true;
                st.jam_power[d.jam(n, 1, 0)] = 0.2;
            }
        }
        st
    }

    fn two_uavs() -> Scenario {
        let mut s = single(4);
        s.uavs.push(UavSpec {
            start: Point::new(0.0, -200.0),
            end: Point::new(60.0, -200.0),
            peak_power: 1.0,
        });
        s.eves.push(Point::new(100.0, 50.0));
        s
    }

    #[test]
    fn surrogate_is_tight_at_expansion() {
        for s in [single(4), two_uavs()] {
            let traj = TrajectorySet::straight_lines(&s);
            let st = served(&s, true);
            let it = init_slacks(&traj, &s).unwrap();
            let prog = build_program(&it, &st, &s).unwrap();
            let x = prog.layout.point(&traj, prog.program.num_vars());
            let gains = LinkGains::new(&traj, &s);
            for (li, rows) in &prog.link_rows {
                let l = prog.layout.links[*li];
                let exact_r = crate::rates::rate_user(l.slot, l.sender, l.user, l.subcarrier, &st, &gains, s.noise_power);
                for (e, row) in prog.program.inequalities[rows.clone()].iter().enumerate() {
                    let leak = crate::rates::leakage_rate(l.slot, l.sender, l.user, e, l.subcarrier, &st, &gains, s.noise_power);
                    assert_relative_eq!(row.value(&x).unwrap(), exact_r - leak, max_relative = 1e-9, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn jammer_gradient_sign() {
        // Moving the jammer away from the user raises the minorant of the user rate.
        let s = two_uavs();
        let traj = TrajectorySet::straight_lines(&s);
        let st = served(&s, true);
        let it = init_slacks(&traj, &s).unwrap();
        let layout = TrajLayout::new(&st, &s);
        let rows = rate_lower_bounds(&it, &layout, &st, &s);
        let (_, row) = &rows[0];
        let x = layout.point(&traj, layout.num_local + 1);
        let g = row.gradient(&x, layout.num_local + 1);
        let j = layout.coord(1, 1).unwrap();
        let away = traj.waypoints[1][1] - s.users[0];
        assert!(g[j] * away.x + g[j + 1] * away.y > 0.0);
    }

    #[test]
    fn zero_allocation_keeps_trajectory() {
        let s = single(6);
        let traj = TrajectorySet::straight_lines(&s);
        let st = AllocationState::zeros(Dims::of(&s));
        let sol = solve_trajectory_sca(&st, &traj, &s, &TrajOptions::default()).unwrap();
        assert_eq!(sol.traj, traj);
        assert_eq!(sol.status, TrajStatus::KeptIncoming);
    }

    #[test]
    fn path_bends_toward_the_user() {
        let s = single(40);
        let traj = TrajectorySet::straight_lines(&s);
        let comm = solve_subproblem1(&AllocationState::zeros(Dims::of(&s)), &traj, &s, &CommOptions::default());
        let sol = solve_trajectory_sca(&comm.state, &traj, &s, &TrajOptions::default()).unwrap();
        assert_eq!(sol.status, TrajStatus::Updated);
        assert!(sol.eta > comm.eta);
        let closest = |t: &TrajectorySet| t.waypoints[0].iter().map(|p| p.dist(s.users[0])).fold(f64::INFINITY, f64::min);
        assert!(closest(&sol.traj) < closest(&traj) - 1.0);
        for w in sol.etas.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for t in &sol.iterates {
            check_geometry(t, &s, 1e-6).unwrap();
            assert_eq!(t.waypoints[0][0], s.uavs[0].start);
            assert_eq!(t.waypoints[0][40], s.uavs[0].end);
        }
    }

    #[test]
    fn detour_clears_blocked_path() {
        let mut s = single(40);
        s.nfzs.push(NoFlyZone {
            center: Point::new(200.0, 10.0),
            radius: 60.0,
            height: 150.0,
        });
        let traj = initial_trajectory(&s).unwrap();
        for p in &traj.waypoints[0] {
            assert!(p.dist(s.nfzs[0].center) >= 60.0);
        }
        check_geometry(&traj, &s, 1e-9).unwrap();
        let comm = solve_subproblem1(&AllocationState::zeros(Dims::of(&s)), &traj, &s, &CommOptions::default());
        let sol = solve_trajectory_sca(&comm.state, &traj, &s, &TrajOptions::default()).unwrap();
        for t in &sol.iterates {
            for p in &t.waypoints[0] {
                assert!(p.dist(s.nfzs[0].center) >= 60.0 - 1e-6);
            }
        }
    }

    #[test]
    fn unreachable_end_point() {
        let mut s = single(10);
        s.uavs[0].end = Point::new(500.0, 0.0);
        assert!(matches!(initial_trajectory(&s), Err(TrajError::Unreachable { .. })));
    }

    #[test]
    fn user_tour_passes_every_user_when_time_allows() {
        let s = default_scenario();
        let traj = user_tour_trajectory(&s, 1).unwrap();
        check_geometry(&traj, &s, 1e-9).unwrap();
        assert_eq!(traj.waypoints[0], initial_trajectory(&s).unwrap().waypoints[0]);
        for u in &s.users {
            let closest = traj.waypoints[1].iter().map(|p| p.dist(*u)).fold(f64::INFINITY, f64::min);
            assert!(closest <= s.max_step(), "closest approach {closest}");
        }
        assert!(user_tour_trajectory(&s.with_mission_time(45.0), 1).is_none());
    }

    #[test]
    fn default_scenario_step_is_feasible() {
        let s = default_scenario().with_subcarriers(4);
        let traj = initial_trajectory(&s).unwrap();
        let comm = solve_subproblem1(&AllocationState::zeros(Dims::of(&s)), &traj, &s, &CommOptions::default());
        let opts = TrajOptions {
            max_sca: 2,
            ..TrajOptions::default()
        };
        let sol = solve_trajectory_sca(&comm.state, &traj, &s, &opts).unwrap();
        assert!(sol.eta >= comm.eta);
        for t in &sol.iterates {
            check_geometry(t, &s, 1e-6).unwrap();
        }
    }
}
