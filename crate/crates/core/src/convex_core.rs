//! Small log-barrier interior-point solver for the convex inner problems.
//!
//! A program maximizes a concave objective subject to `g_j(x) ≥ 0` (each
//! `g_j` concave) and affine equalities. Objective and constraints are sums
//! of four concave term types: linear, weighted log of an affine expression,
//! negated weighted sums of squares of affine expressions, and
//! `−w·ln(c0 + Σ c_j / u_j)` with every `u_j` affine.
//!
//! The variable vector is split into `num_local` local variables followed by
//! `num_global` global ones. Hessian couplings between local variables must
//! be banded (the bandwidth is detected from the program); constraints whose
//! gradients reach across the band enter the Newton system as rank-one
//! updates. Global variables may couple with anything. This keeps Newton
//! steps linear in the number of local variables.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

/// Widest local coupling a single constraint may have before its barrier
/// curvature is handled as a rank-one update instead of inside the band.
const MAX_LOCAL_SPAN: usize = 96;

/// Affine expression `Σ a_i x_i + b`, coefficients sorted and merged.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Affine {
    coeffs: Vec<(usize, f64)>,
    constant: f64,
}

impl Affine {
    pub fn new(coeffs: impl IntoIterator<Item = (usize, f64)>, constant: f64) -> Self {
        let mut c: Vec<(usize, f64)> = coeffs.into_iter().collect();
        c.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(c.len());
        for (i, v) in c {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|e| e.1 != 0.0);
        Self {
            coeffs: merged,
            constant,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            coeffs: Vec::new(),
            constant: c,
        }
    }

    /// The single variable `x_i`.
    pub fn var(i: usize) -> Self {
        Self::new([(i, 1.0)], 0.0)
    }

    pub fn coeffs(&self) -> &[(usize, f64)] {
        &self.coeffs
    }

    pub fn offset(&self) -> f64 {
        self.constant
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().fold(self.constant, |acc, &(i, a)| acc + a * x[i])
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.coeffs.iter().map(|&(i, a)| (i, a * k)), self.constant * k)
    }

    pub fn shifted(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }
}

/// One concave building block.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `aᵀx + b`.
    Linear(Affine),
    /// `w·ln(aᵀx + b)`, `w ≥ 0`.
    Log { weight: f64, arg: Affine },
    /// `−w·Σ_r (a_rᵀx + b_r)²`, `w ≥ 0`.
    NegSquares { weight: f64, rows: Vec<Affine> },
    /// `−w·ln(c0 + Σ_j c_j / (a_jᵀx + b_j))`, `w, c0, c_j ≥ 0`.
    NegLogInvSum {
        weight: f64,
        base: f64,
        parts: Vec<(f64, Affine)>,
    },
}

impl Term {
    fn value(&self, x: &[f64]) -> Option<f64> {
        match self {
            Term::Linear(a) => Some(a.eval(x)),
            Term::Log { weight, arg } => {
                let u = arg.eval(x);
                (u > 0.0).then(|| weight * u.ln())
            }
            Term::NegSquares { weight, rows } => Some(-weight * rows.iter().map(|r| r.eval(x).powi(2)).sum::<f64>()),
            Term::NegLogInvSum { weight, base, parts } => {
                let mut g = *base;
                for (c, a) in parts {
                    let u = a.eval(x);
                    if u <= 0.0 {
                        return None;
                    }
                    g += c / u;
                }
                (g > 0.0).then(|| -weight * g.ln())
            }
        }
    }

    /// Adds `scale·∇term` through `f`.
    fn add_grad(&self, x: &[f64], scale: f64, f: &mut impl FnMut(usize, f64)) {
        match self {
            Term::Linear(a) => a.coeffs.iter().for_each(|&(i, v)| f(i, scale * v)),
            Term::Log { weight, arg } => {
                let k = scale * weight / arg.eval(x);
                arg.coeffs.iter().for_each(|&(i, v)| f(i, k * v));
            }
            Term::NegSquares { weight, rows } => {
                for r in rows {
                    let k = -2.0 * scale * weight * r.eval(x);
                    r.coeffs.iter().for_each(|&(i, v)| f(i, k * v));
                }
            }
            Term::NegLogInvSum { weight, base, parts } => {
                let us: Vec<f64> = parts.iter().map(|(_, a)| a.eval(x)).collect();
                let g = base + parts.iter().zip(&us).map(|((c, _), u)| c / u).sum::<f64>();
                for ((c, a), u) in parts.iter().zip(&us) {
                    let k = scale * weight * c / (u * u * g);
                    a.coeffs.iter().for_each(|&(i, v)| f(i, k * v));
                }
            }
        }
    }

    /// Adds `scale·∇²term` to `sys`.
    fn add_hess(&self, x: &[f64], scale: f64, sys: &mut System) {
        match self {
            Term::Linear(_) => {}
            Term::Log { weight, arg } => {
                let u = arg.eval(x);
                sys.add_outer(&arg.coeffs, -scale * weight / (u * u));
            }
            Term::NegSquares { weight, rows } => {
                for r in rows {
                    sys.add_outer(&r.coeffs, -2.0 * scale * weight);
                }
            }
            Term::NegLogInvSum { weight, base, parts } => {
                let us: Vec<f64> = parts.iter().map(|(_, a)| a.eval(x)).collect();
                let g = base + parts.iter().zip(&us).map(|((c, _), u)| c / u).sum::<f64>();
                let mut v = Vec::new();
                for ((c, a), u) in parts.iter().zip(&us) {
                    sys.add_outer(&a.coeffs, -scale * weight * 2.0 * c / (u * u * u * g));
                    let k = c / (u * u);
                    v.extend(a.coeffs.iter().map(|&(i, a)| (i, k * a)));
                }
                let v = Affine::new(v, 0.0);
                sys.add_outer(&v.coeffs, scale * weight / (g * g));
            }
        }
    }

    /// Affine expressions that must stay strictly positive.
    fn domain_args(&self) -> Vec<&Affine> {
        match self {
            Term::Log { arg, .. } => vec![arg],
            Term::NegLogInvSum { parts, .. } => parts.iter().map(|(_, a)| a).collect(),
            _ => Vec::new(),
        }
    }

    /// Index sets whose Hessian entries couple with each other.
    fn hessian_supports(&self) -> Vec<Vec<usize>> {
        let idx = |a: &Affine| a.coeffs.iter().map(|e| e.0).collect::<Vec<_>>();
        match self {
            Term::Linear(_) => Vec::new(),
            Term::Log { arg, .. } => vec![idx(arg)],
            Term::NegSquares { rows, .. } => rows.iter().map(idx).collect(),
            Term::NegLogInvSum { parts, .. } => vec![parts.iter().flat_map(|(_, a)| idx(a)).collect()],
        }
    }

    fn variables(&self) -> Vec<usize> {
        match self {
            Term::Linear(a) => a.coeffs.iter().map(|e| e.0).collect(),
            _ => self.hessian_supports().concat(),
        }
    }
}

/// Sum of concave terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Expr {
    pub terms: Vec<Term>,
}

impl Expr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn linear(a: Affine) -> Self {
        Self {
            terms: vec![Term::Linear(a)],
        }
    }

    pub fn push(&mut self, t: Term) -> &mut Self {
        self.terms.push(t);
        self
    }

    pub fn with(mut self, t: Term) -> Self {
        self.terms.push(t);
        self
    }

    /// `None` outside the domain of some log term.
    pub fn value(&self, x: &[f64]) -> Option<f64> {
        let mut s = 0.0;
        for t in &self.terms {
            s += t.value(x)?;
        }
        Some(s)
    }

    pub fn gradient(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for t in &self.terms {
            t.add_grad(x, 1.0, &mut |i, v| g[i] += v);
        }
        g
    }

    pub fn is_affine(&self) -> bool {
        self.terms.iter().all(|t| matches!(t, Term::Linear(_)))
    }
}

/// Maximize a concave objective subject to concave `g_j(x) ≥ 0` and affine `e_k(x) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    num_local: usize,
    num_global: usize,
    blocks: Vec<(String, Range<usize>)>,
    pub objective: Expr,
    pub inequalities: Vec<Expr>,
    pub equalities: Vec<Affine>,
}

impl ConvexProgram {
    pub fn new(num_local: usize, num_global: usize) -> Self {
        Self {
            num_local,
            num_global,
            blocks: Vec::new(),
            objective: Expr::new(),
            inequalities: Vec::new(),
            equalities: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_local + self.num_global
    }

    /// Index of global variable `g`.
    pub fn global(&self, g: usize) -> usize {
        assert!(g < self.num_global, "global variable {g} out of range");
        self.num_local + g
    }

    pub fn name_block(&mut self, name: &str, range: Range<usize>) {
        self.blocks.push((name.to_string(), range));
    }

    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks.iter().find(|b| b.0 == name).map(|b| b.1.clone())
    }

    pub fn maximize(&mut self, t: Term) -> &mut Self {
        self.objective.terms.push(t);
        self
    }

    /// `expr ≥ 0`.
    pub fn add_inequality(&mut self, expr: Expr) {
        self.inequalities.push(expr);
    }

    /// `a ≤ bound`.
    pub fn add_le(&mut self, a: Affine, bound: f64) {
        self.add_inequality(Expr::linear(a.scaled(-1.0).shifted(bound)));
    }

    /// `a ≥ bound`.
    pub fn add_ge(&mut self, a: Affine, bound: f64) {
        self.add_inequality(Expr::linear(a.shifted(-bound)));
    }

    pub fn add_bounds(&mut self, i: usize, lo: f64, hi: f64) {
        self.add_ge(Affine::var(i), lo);
        self.add_le(Affine::var(i), hi);
    }

    /// `a = 0`.
    pub fn add_equality(&mut self, a: Affine) {
        self.equalities.push(a);
    }

    pub fn objective_value(&self, x: &[f64]) -> Option<f64> {
        self.objective.value(x)
    }

    /// Smallest `g_j(x)`, `None` outside a log domain; `+∞` without constraints.
    pub fn min_slack(&self, x: &[f64]) -> Option<f64> {
        let mut m = f64::INFINITY;
        for g in &self.inequalities {
            m = m.min(g.value(x)?);
        }
        Some(m)
    }

    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        self.equalities.iter().map(|e| e.eval(x).abs()).fold(0.0, f64::max)
    }

    fn domain_ok(&self, x: &[f64]) -> bool {
        self.objective.value(x).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `‖∇f0 + Σ λ_j ∇g_j + Eᵀν‖∞ / max(1, ‖∇f0‖∞)`.
    pub stationarity: f64,
    /// Largest inequality or equality violation.
    pub primal: f64,
    /// Largest `λ_j·g_j`.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub residuals: KktResiduals,
    /// Newton steps taken, Phase 1 included.
    pub iterations: usize,
}

impl Solution {
    /// True when `x` is a strictly feasible point that may be used even without optimality.
    pub fn is_usable(&self) -> bool {
        matches!(self.status, SolveStatus::Optimal | SolveStatus::MaxIter) && self.objective.is_finite()
    }

    pub fn values<'a>(&'a self, p: &ConvexProgram, name: &str) -> Option<&'a [f64]> {
        p.block(name).map(|r| &self.x[r])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    /// Newton step cap for each phase.
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

pub fn solve(p: &ConvexProgram, tol: f64, max_iter: usize) -> Solution {
    solve_from(p, None, SolveOptions { tol, max_iter })
}

/// Solves from `x0` (zeros if absent); runs Phase 1 when `x0` is not strictly feasible.
pub fn solve_from(p: &ConvexProgram, x0: Option<&[f64]>, opts: SolveOptions) -> Solution {
    let n = p.num_vars();
    let mut x = x0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    assert_eq!(x.len(), n, "start point has wrong dimension");
    let fail = |x: Vec<f64>, status, iterations| Solution {
        x,
        objective: f64::NEG_INFINITY,
        status,
        residuals: KktResiduals::default(),
        iterations,
    };

    if !p.equalities.is_empty() && p.equality_residual(&x) > opts.tol {
        match project_equalities(p, &x) {
            Some(y) => x = y,
            None => return fail(x, SolveStatus::Infeasible, 0),
        }
    }

    let mut iterations = 0;
    let domain: Vec<Affine> = p
        .objective
        .terms
        .iter()
        .chain(p.inequalities.iter().flat_map(|g| g.terms.iter()))
        .flat_map(|t| t.domain_args().into_iter().cloned())
        .collect();
    let affine_ok = domain.iter().all(|a| a.eval(&x) > 0.0)
        && p.inequalities
            .iter()
            .filter(|g| g.is_affine())
            .all(|g| g.value(&x).is_some_and(|v| v > 0.0));
    if !affine_ok {
        let mut cons: Vec<Expr> = domain.iter().cloned().map(Expr::linear).collect();
        cons.extend(p.inequalities.iter().filter(|g| g.is_affine()).cloned());
        match phase_one(p, cons, Vec::new(), &x, opts, &mut iterations) {
            Ok(y) => x = y,
            Err(status) => return fail(x, status, iterations),
        }
    }
    if !p.min_slack(&x).is_some_and(|m| m > 0.0) || !p.domain_ok(&x) {
        let keep: Vec<Expr> = domain.iter().cloned().map(Expr::linear).collect();
        match phase_one(p, p.inequalities.clone(), keep, &x, opts, &mut iterations) {
            Ok(y) => x = y,
            Err(status) => return fail(x, status, iterations),
        }
    }

    let out = barrier(p, x, opts, None);
    iterations += out.iterations;
    let objective = p.objective_value(&out.x).unwrap_or(f64::NEG_INFINITY);
    Solution {
        objective,
        status: out.status,
        residuals: out.residuals,
        iterations,
        x: out.x,
    }
}

/// Finds a point with `cons_j > 0` (and `keep_j > 0` preserved) by maximizing `−s`
/// subject to `cons_j + s ≥ 0`.
fn phase_one(
    p: &ConvexProgram,
    cons: Vec<Expr>,
    keep: Vec<Expr>,
    x0: &[f64],
    opts: SolveOptions,
    iterations: &mut usize,
) -> Result<Vec<f64>, SolveStatus> {
    let mut aux = ConvexProgram::new(p.num_local, p.num_global + 1);
    let s = aux.global(p.num_global);
    aux.equalities = p.equalities.clone();
    aux.maximize(Term::Linear(Affine::new([(s, -1.0)], 0.0)));
    let mut worst = 0.0f64;
    for g in cons {
        worst = worst.max(-g.value(x0).ok_or(SolveStatus::NumericalFailure)?);
        aux.add_inequality(g.with(Term::Linear(Affine::var(s))));
    }
    for g in keep {
        aux.add_inequality(g);
    }
    let mut x = x0.to_vec();
    x.push(worst + 1.0 + 0.1 * worst.abs());
    let out = barrier(&aux, x, opts, Some(s));
    *iterations += out.iterations;
    if out.x[s] < 0.0 {
        let mut x = out.x;
        x.truncate(p.num_vars());
        Ok(x)
    } else if matches!(out.status, SolveStatus::NumericalFailure) {
        Err(SolveStatus::NumericalFailure)
    } else {
        Err(SolveStatus::Infeasible)
    }
}

fn project_equalities(p: &ConvexProgram, x: &[f64]) -> Option<Vec<f64>> {
    let n = p.num_vars();
    let k = p.equalities.len();
    let e = DMatrix::from_fn(k, n, |r, c| {
        p.equalities[r].coeffs.iter().find(|e| e.0 == c).map_or(0.0, |e| e.1)
    });
    let r = DVector::from_iterator(k, p.equalities.iter().map(|a| -a.eval(x)));
    let eet = &e * e.transpose();
    let y = eet.clone().cholesky().map(|c| c.solve(&r)).or_else(|| eet.lu().solve(&r))?;
    let dx = e.transpose() * y;
    let out: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect();
    (p.equality_residual(&out) <= 1e-9 * (1.0 + out.iter().fold(0.0f64, |m, v| m.max(v.abs())))).then_some(out)
}

// ---------------------------------------------------------------------------
// Newton system
// ---------------------------------------------------------------------------

struct Structure {
    bw: usize,
    spanning: Vec<bool>,
}

fn analyze(p: &ConvexProgram) -> Structure {
    let nl = p.num_local;
    let span = |idx: &[usize]| -> usize {
        let local: Vec<usize> = idx.iter().copied().filter(|&i| i < nl).collect();
        match (local.iter().min(), local.iter().max()) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    };
    let mut bw = 0;
    for t in p.objective.terms.iter().chain(p.inequalities.iter().flat_map(|g| g.terms.iter())) {
        for s in t.hessian_supports() {
            bw = bw.max(span(&s));
        }
    }
    let spanning = p
        .inequalities
        .iter()
        .map(|g| {
            let vars: Vec<usize> = g.terms.iter().flat_map(Term::variables).collect();
            let w = span(&vars);
            if w <= MAX_LOCAL_SPAN.max(bw) {
                bw = bw.max(w);
                false
            } else {
                true
            }
        })
        .collect();
    Structure {
        bw: bw.min(nl.saturating_sub(1)),
        spanning,
    }
}

/// `H = [[A, B], [Bᵀ, C]] + Σ v vᵀ` with `A` banded over local variables.
struct System {
    nl: usize,
    ng: usize,
    bw: usize,
    band: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    low: Vec<Vec<f64>>,
}

impl System {
    fn new(nl: usize, ng: usize, bw: usize) -> Self {
        Self {
            nl,
            ng,
            bw,
            band: vec![0.0; nl * (bw + 1)],
            b: vec![0.0; ng * nl],
            c: vec![0.0; ng * ng],
            low: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.band.iter_mut().for_each(|v| *v = 0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
        self.c.iter_mut().for_each(|v| *v = 0.0);
        self.low.clear();
    }

    /// Adds `v` at `(i, j)` and `(j, i)` (once on the diagonal).
    #[inline]
    fn add_sym(&mut self, i: usize, j: usize, v: f64) {
        let nl = self.nl;
        match (i < nl, j < nl) {
            (true, true) => {
                let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
                debug_assert!(hi - lo <= self.bw, "coupling outside band");
                self.band[hi * (self.bw + 1) + (lo + self.bw - hi)] += v;
            }
            (true, false) => self.b[(j - nl) * nl + i] += v,
            (false, true) => self.b[(i - nl) * nl + j] += v,
            (false, false) => {
                let (gi, gj) = (i - nl, j - nl);
                self.c[gi * self.ng + gj] += v;
                if gi != gj {
                    self.c[gj * self.ng + gi] += v;
                }
            }
        }
    }

    /// Adds `scale·a aᵀ` for a sorted, merged sparse `a`.
    fn add_outer(&mut self, a: &[(usize, f64)], scale: f64) {
        for (p, &(i, ai)) in a.iter().enumerate() {
            for &(j, aj) in &a[..=p] {
                self.add_sym(i, j, scale * ai * aj);
            }
        }
    }

    /// `H·x` with the regularization-free matrix.
    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let (nl, ng, w) = (self.nl, self.ng, self.bw + 1);
        let mut y = vec![0.0; nl + ng];
        for i in 0..nl {
            for j in i.saturating_sub(self.bw)..=i {
                let a = self.band[i * w + (j + self.bw - i)];
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        for g in 0..ng {
            let col = &self.b[g * nl..(g + 1) * nl];
            let mut acc = 0.0;
            for i in 0..nl {
                y[i] += col[i] * x[nl + g];
                acc += col[i] * x[i];
            }
            y[nl + g] += acc;
            for h in 0..ng {
                y[nl + g] += self.c[g * ng + h] * x[nl + h];
            }
        }
        for v in &self.low {
            let d: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
            y.iter_mut().zip(v).for_each(|(yi, vi)| *yi += d * vi);
        }
        y
    }

    /// Factored solve polished by iterative refinement against the exact `H`.
    fn solve_refined(&self, f: &Factor, r: &[f64]) -> Vec<f64> {
        let mut x = f.solve(r);
        for _ in 0..2 {
            let hx = self.mul(&x);
            let res: Vec<f64> = r.iter().zip(&hx).map(|(a, b)| a - b).collect();
            let dx = f.solve(&res);
            x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        x
    }

    fn factor(&self) -> Option<Factor> {
        let scale = 1.0 + self.band_max_diag().max(self.c_max_diag());
        let mut reg = 1e-13 * scale;
        for _ in 0..6 {
            if let Some(f) = Factor::build(self, reg) {
                return Some(f);
            }
            reg *= 1e3;
        }
        None
    }

    fn band_max_diag(&self) -> f64 {
        (0..self.nl).map(|i| self.band[i * (self.bw + 1) + self.bw].abs()).fold(0.0, f64::max)
    }

    fn c_max_diag(&self) -> f64 {
        (0..self.ng).map(|g| self.c[g * self.ng + g].abs()).fold(0.0, f64::max)
    }
}

struct Factor {
    nl: usize,
    ng: usize,
    bw: usize,
    chol: Vec<f64>,
    z: Vec<Vec<f64>>,
    vl: Vec<Vec<f64>>,
    cap: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    hlg: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    schur: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Factor {
    fn build(sys: &System, reg: f64) -> Option<Self> {
        let (nl, ng, bw) = (sys.nl, sys.ng, sys.bw);
        let mut chol = sys.band.clone();
        for i in 0..nl {
            chol[i * (bw + 1) + bw] += reg;
        }
        band_cholesky(&mut chol, nl, bw)?;
        let mut f = Factor {
            nl,
            ng,
            bw,
            chol,
            z: Vec::new(),
            vl: sys.low.iter().map(|v| v[..nl].to_vec()).collect(),
            cap: None,
            hlg: Vec::new(),
            w: Vec::new(),
            schur: None,
        };
        if !f.vl.is_empty() {
            f.z = f.vl.iter().map(|v| f.band_solve(v)).collect();
            let k = f.vl.len();
            let cap = DMatrix::from_fn(k, k, |a, b| {
                f64::from(a == b) + f.vl[a].iter().zip(&f.z[b]).map(|(x, y)| x * y).sum::<f64>()
            });
            f.cap = Some(cap.cholesky()?);
        }
        if ng > 0 {
            f.hlg = (0..ng)
                .map(|g| {
                    let mut col = sys.b[g * nl..(g + 1) * nl].to_vec();
                    for v in &sys.low {
                        let vg = v[nl + g];
                        if vg != 0.0 {
                            col.iter_mut().zip(&v[..nl]).for_each(|(c, x)| *c += vg * x);
                        }
                    }
                    col
                })
                .collect();
            f.w = f.hlg.iter().map(|c| f.local_solve(c)).collect();
            let mut s = DMatrix::from_fn(ng, ng, |a, b| {
                let low: f64 = sys.low.iter().map(|v| v[nl + a] * v[nl + b]).sum();
                sys.c[a * ng + b] + low - f.hlg[a].iter().zip(&f.w[b]).map(|(x, y)| x * y).sum::<f64>()
            });
            let sd = (0..ng).map(|g| s[(g, g)].abs()).fold(0.0, f64::max);
            for g in 0..ng {
                s[(g, g)] += reg + 1e-14 * sd;
            }
            f.schur = Some(s.cholesky()?);
        }
        Some(f)
    }

    fn band_solve(&self, r: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.nl, self.bw);
        let l = |i: usize, j: usize| self.chol[i * (bw + 1) + (j + bw - i)];
        let mut y = r.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in i.saturating_sub(bw)..i {
                s -= l(i, j) * y[j];
            }
            y[i] = s / l(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..(i + bw + 1).min(n) {
                s -= l(j, i) * y[j];
            }
            y[i] = s / l(i, i);
        }
        y
    }

    /// Solves `(A + V_L V_Lᵀ) y = r` by Woodbury.
    fn local_solve(&self, r: &[f64]) -> Vec<f64> {
        let mut y = self.band_solve(r);
        if let Some(cap) = &self.cap {
            let k = self.z.len();
            let t = DVector::from_fn(k, |a, _| self.vl[a].iter().zip(&y).map(|(x, y)| x * y).sum());
            let c = cap.solve(&t);
            for (a, z) in self.z.iter().enumerate() {
                y.iter_mut().zip(z).for_each(|(yi, zi)| *yi -= c[a] * zi);
            }
        }
        y
    }

    fn solve(&self, r: &[f64]) -> Vec<f64> {
        let nl = self.nl;
        let mut yl = self.local_solve(&r[..nl]);
        let Some(schur) = &self.schur else {
            return yl;
        };
        let rhs = DVector::from_fn(self.ng, |g, _| {
            r[nl + g] - self.hlg[g].iter().zip(&yl).map(|(a, b)| a * b).sum::<f64>()
        });
        let xg = schur.solve(&rhs);
        for (g, w) in self.w.iter().enumerate() {
            yl.iter_mut().zip(w).for_each(|(y, wi)| *y -= xg[g] * wi);
        }
        yl.extend(xg.iter());
        yl
    }
}

/// In-place banded Cholesky; row `i` stores columns `i−bw..=i`.
fn band_cholesky(a: &mut [f64], n: usize, bw: usize) -> Option<()> {
    let w = bw + 1;
    for i in 0..n {
        let j0 = i.saturating_sub(bw);
        for j in j0..=i {
            let k0 = j0.max(j.saturating_sub(bw));
            let mut s = a[i * w + (j + bw - i)];
            for k in k0..j {
                s -= a[i * w + (k + bw - i)] * a[j * w + (k + bw - j)];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                a[i * w + bw] = s.sqrt();
            } else {
                a[i * w + (j + bw - i)] = s / a[j * w + bw];
            }
        }
    }
    Some(())
}

// ---------------------------------------------------------------------------
// Barrier method
// ---------------------------------------------------------------------------

struct BarrierOutput {
    x: Vec<f64>,
    status: SolveStatus,
    residuals: KktResiduals,
    iterations: usize,
}

struct Scratch {
    dense: Vec<f64>,
    mark: Vec<bool>,
    touched: Vec<usize>,
}

impl Scratch {
    fn add(&mut self, i: usize, v: f64) {
        if !self.mark[i] {
            self.mark[i] = true;
            self.touched.push(i);
        }
        self.dense[i] += v;
    }

    fn drain(&mut self) -> Vec<(usize, f64)> {
        self.touched.sort_unstable();
        let out = self.touched.iter().map(|&i| (i, self.dense[i])).collect();
        for &i in &self.touched {
            self.dense[i] = 0.0;
            self.mark[i] = false;
        }
        self.touched.clear();
        out
    }
}

/// `−t·f0 − Σ ln g_j`, `None` outside the domain.
fn phi(p: &ConvexProgram, x: &[f64], t: f64) -> Option<f64> {
    let mut v = -t * p.objective.value(x)?;
    for g in &p.inequalities {
        let gv = g.value(x)?;
        if gv <= 0.0 {
            return None;
        }
        v -= gv.ln();
    }
    v.is_finite().then_some(v)
}

struct Step {
    grad: Vec<f64>,
    dx: Vec<f64>,
    nu: Vec<f64>,
}

fn newton_step(
    p: &ConvexProgram,
    st: &Structure,
    sys: &mut System,
    scratch: &mut Scratch,
    x: &[f64],
    t: f64,
) -> Option<Step> {
    let n = p.num_vars();
    let mut grad = vec![0.0; n];
    sys.reset();
    for term in &p.objective.terms {
        term.add_grad(x, -t, &mut |i, v| grad[i] += v);
        term.add_hess(x, -t, sys);
    }
    for (j, g) in p.inequalities.iter().enumerate() {
        let gv = g.value(x)?;
        for term in &g.terms {
            term.add_grad(x, 1.0, &mut |i, v| scratch.add(i, v));
            term.add_hess(x, -1.0 / gv, sys);
        }
        let dg = scratch.drain();
        for &(i, v) in &dg {
            grad[i] -= v / gv;
        }
        if st.spanning[j] {
            let mut col = vec![0.0; n];
            for &(i, v) in &dg {
                col[i] = v / gv;
            }
            sys.low.push(col);
        } else {
            sys.add_outer(&dg, 1.0 / (gv * gv));
        }
    }
    let f = sys.factor()?;
    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut dx = sys.solve_refined(&f, &neg);
    let mut nu = Vec::new();
    if !p.equalities.is_empty() {
        let cols: Vec<Vec<f64>> = p
            .equalities
            .iter()
            .map(|e| {
                let mut v = vec![0.0; n];
                e.coeffs.iter().for_each(|&(i, a)| v[i] = a);
                sys.solve_refined(&f, &v)
            })
            .collect();
        let k = cols.len();
        let dot = |e: &Affine, v: &[f64]| e.coeffs.iter().map(|&(i, a)| a * v[i]).sum::<f64>();
        let mut m = DMatrix::from_fn(k, k, |a, b| dot(&p.equalities[a], &cols[b]));
        let md = (0..k).map(|a| m[(a, a)].abs()).fold(0.0, f64::max);
        for a in 0..k {
            m[(a, a)] += 1e-14 * md;
        }
        let rhs = DVector::from_fn(k, |a, _| dot(&p.equalities[a], &dx));
        let sol = m.clone().cholesky().map(|c| c.solve(&rhs)).or_else(|| m.lu().solve(&rhs))?;
        for (a, col) in cols.iter().enumerate() {
            dx.iter_mut().zip(col).for_each(|(d, c)| *d -= sol[a] * c);
        }
        nu = sol.iter().copied().collect();
    }
    dx.iter().all(|v| v.is_finite()).then_some(Step { grad, dx, nu })
}

fn barrier(p: &ConvexProgram, mut x: Vec<f64>, opts: SolveOptions, stop_below_zero: Option<usize>) -> BarrierOutput {
    let st = analyze(p);
    let n = p.num_vars();
    let mut sys = System::new(p.num_local, p.num_global, st.bw);
    let mut scratch = Scratch {
        dense: vec![0.0; n],
        mark: vec![false; n],
        touched: Vec::new(),
    };
    let mut mu = 1.0;
    let mut iterations = 0;
    let mut status = SolveStatus::Optimal;
    let newton_eps: f64 = 1e-10;

    'stages: loop {
        let t = 1.0 / mu;
        let mut prev_dec = f64::INFINITY;
        loop {
            let Some(step) = newton_step(p, &st, &mut sys, &mut scratch, &x, t) else {
                status = SolveStatus::NumericalFailure;
                break 'stages;
            };
            let slope: f64 = step.grad.iter().zip(&step.dx).map(|(g, d)| g * d).sum();
            let mut pg = step.grad.clone();
            for (e, nu) in p.equalities.iter().zip(&step.nu) {
                e.coeffs.iter().for_each(|&(i, a)| pg[i] += nu * a);
            }
            let dec = -pg.iter().zip(&step.dx).map(|(g, d)| g * d).sum::<f64>();
            log::trace!("mu={mu:e} newton decrement={dec:e}");
            let Some(f0) = phi(p, &x, t) else {
                status = SolveStatus::NumericalFailure;
                break 'stages;
            };
            // Round-off floor: tiny and no longer contracting.
            let floored = dec < 1e-6 && dec > 0.5 * prev_dec;
            if dec / 2.0 <= newton_eps || !(dec > 0.0) || floored {
                break;
            }
            prev_dec = dec;
            if iterations >= opts.max_iter {
                status = SolveStatus::MaxIter;
                break 'stages;
            }
            let mut a = 1.0;
            let mut accepted = None;
            let mut stalled = false;
            while a > 1e-12 {
                let xn: Vec<f64> = x.iter().zip(&step.dx).map(|(xi, d)| xi + a * d).collect();
                if let Some(fnew) = phi(p, &xn, t) {
                    // Pure Newton is safe this close to the center, and Φ is too
                    // large here for an Armijo test to resolve the decrease.
                    if a == 1.0 && dec < 0.2 {
                        accepted = Some(xn);
                        break;
                    }
                    if fnew <= f0 + 0.01 * a * slope + 1e-13 * f0.abs() {
                        stalled = fnew >= f0;
                        accepted = Some(xn);
                        break;
                    }
                }
                a *= 0.5;
            }
            iterations += 1;
            match accepted {
                Some(xn) if stalled && dec < 1e-4 => {
                    x = xn;
                    break;
                }
                Some(xn) => x = xn,
                // Round-off floor: the point is as centered as double precision allows.
                None if dec < 1e-4 => break,
                None => {
                    status = SolveStatus::NumericalFailure;
                    break 'stages;
                }
            }
            if let Some(s) = stop_below_zero {
                if x[s] < 0.0 {
                    return BarrierOutput {
                        x,
                        status: SolveStatus::Optimal,
                        residuals: KktResiduals::default(),
                        iterations,
                    };
                }
            }
        }
        if mu < opts.tol / 10.0 {
            break;
        }
        mu /= 10.0;
    }

    let (x, residuals) = kkt_residuals(p, &st, &mut sys, &mut scratch, &x, 1.0 / mu);
    if status == SolveStatus::Optimal && residuals.stationarity > opts.tol.max(1e-6) {
        status = SolveStatus::MaxIter;
    }
    BarrierOutput {
        x,
        status,
        residuals,
        iterations,
    }
}

/// KKT residuals at the Newton-updated primal point `x⁺ = x + dx` with duals
/// `λ_j = μ/g_j·(1 − ∇g_jᵀdx/g_j)`; returns `x⁺` when it is strictly feasible.
fn kkt_residuals(
    p: &ConvexProgram,
    st: &Structure,
    sys: &mut System,
    scratch: &mut Scratch,
    x: &[f64],
    t: f64,
) -> (Vec<f64>, KktResiduals) {
    let n = p.num_vars();
    let Some(step) = newton_step(p, st, sys, scratch, x, t) else {
        let r = KktResiduals {
            stationarity: f64::INFINITY,
            primal: 0.0,
            complementarity: 1.0 / t,
        };
        return (x.to_vec(), r);
    };
    let xp: Vec<f64> = x.iter().zip(&step.dx).map(|(a, d)| a + d).collect();
    let feasible = phi(p, &xp, t).is_some();
    let at = if feasible { &xp } else { x };
    let mut r = p.objective.gradient(at, n);
    let scale = r.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut primal = p.equality_residual(at);
    let mut complementarity = 0.0f64;
    for g in &p.inequalities {
        let g0 = g.value(x).unwrap_or(f64::NAN);
        for term in &g.terms {
            term.add_grad(x, 1.0, &mut |i, v| scratch.add(i, v));
        }
        let dg = scratch.drain();
        let along: f64 = dg.iter().map(|&(i, v)| v * step.dx[i]).sum();
        let lambda = (1.0 - along / g0).max(0.0) / (t * g0);
        let gp = g.value(at).unwrap_or(f64::NEG_INFINITY);
        primal = primal.max(-gp);
        complementarity = complementarity.max(lambda * gp.max(0.0));
        for term in &g.terms {
            term.add_grad(at, lambda, &mut |i, v| r[i] += v);
        }
    }
    for (e, nu) in p.equalities.iter().zip(&step.nu) {
        e.coeffs.iter().for_each(|&(i, a)| r[i] -= nu * a / t);
    }
    let stationarity = r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
    let res = KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity,
    };
    (at.to_vec(), res)
}
