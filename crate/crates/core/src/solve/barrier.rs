//! Primal log-barrier path following over linear, second-order and power
//! cone blocks, with equalities handled in the Newton system.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reform::{ConvexProgram, LinExpr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Target relative duality gap; also the primal feasibility bound.
    pub tol: f64,
    /// Budget of Newton steps over both phases.
    pub max_iter: usize,
    /// Initial barrier weight.
    pub t0: f64,
    /// Barrier weight growth per outer iteration.
    pub mu: f64,
    /// Kept for interface stability; the method itself is deterministic.
    pub seed: u64,
    /// Overrides the program's box radius.
    pub radius: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 1000, t0: 1.0, mu: 20.0, seed: 0, radius: None }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.t0 > 0.0) || !(self.mu > 1.0) || self.max_iter == 0 {
            return Err(Error::Invalid("solver options need tol > 0, t0 > 0, mu > 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    MaxIter,
    Infeasible,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::MaxIter => "max_iter",
            Self::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub newton_steps: usize,
    pub outer_iterations: usize,
    pub barrier_weight: f64,
    /// Barrier gap bound `nu / t`.
    pub gap: f64,
    pub relative_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Constraint shift used when the feasible set has no strict interior.
    pub relaxation: f64,
    /// Some variable sits within 10% of the box radius.
    pub near_bound: bool,
}

/// Barrier output in program coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSolution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Multipliers of the program's `nonnegatives`, in order.
    pub nonneg_duals: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
struct Row {
    idx: Vec<usize>,
    val: Vec<f64>,
    c: f64,
}

impl Row {
    fn from_expr(e: &LinExpr) -> Self {
        let mut m = BTreeMap::new();
        for (j, v) in &e.terms {
            *m.entry(*j).or_insert(0.0) += v;
        }
        m.retain(|_, v| *v != 0.0);
        Self { idx: m.keys().copied().collect(), val: m.values().copied().collect(), c: e.constant }
    }

    fn var(j: usize, coef: f64, c: f64) -> Self {
        Self { idx: vec![j], val: vec![coef], c }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.c + self.dot(x)
    }

    fn dot(&self, d: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(j, v)| v * d[*j]).sum()
    }

    fn shifted(&self, sigma: Option<usize>, delta: f64) -> Self {
        let mut r = self.clone();
        r.c += delta;
        if let Some(s) = sigma {
            r.idx.push(s);
            r.val.push(1.0);
        }
        r
    }

    fn add_to(&self, coef: f64, out: &mut [f64]) {
        for (j, v) in self.idx.iter().zip(&self.val) {
            out[*j] += coef * v;
        }
    }
}

fn add_outer(h: &mut DMatrix<f64>, a: &Row, b: &Row, coef: f64) {
    if coef == 0.0 {
        return;
    }
    for (i, va) in a.idx.iter().zip(&a.val) {
        let s = coef * va;
        for (j, vb) in b.idx.iter().zip(&b.val) {
            h[(*i, *j)] += s * vb;
        }
    }
}

/// Dense `v v^T` over the union of the rows' supports.
fn add_combination_outer(h: &mut DMatrix<f64>, parts: &[(&Row, f64)], coef: f64) {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for (row, w) in parts {
        for (j, v) in row.idx.iter().zip(&row.val) {
            *m.entry(*j).or_insert(0.0) += w * v;
        }
    }
    let entries: Vec<(usize, f64)> = m.into_iter().filter(|(_, v)| *v != 0.0).collect();
    for (i, vi) in &entries {
        for (j, vj) in &entries {
            h[(*i, *j)] += coef * vi * vj;
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Lin(Row),
    Soc { t: Row, x: Vec<Row> },
    /// `u^a b^(1-a) >= 1`.
    Pow { u: Row, b: Row, a: f64 },
}

fn soc_slack(t: f64, xs: &[f64]) -> f64 {
    let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
    (t - norm) * (t + norm)
}

/// Log of `u^(2a) b^(2-2a)` and the power block's pieces.
fn pow_terms(u: f64, b: f64, a: f64) -> Option<(f64, f64)> {
    if !(u > 0.0 && b > 0.0) {
        return None;
    }
    let l = 2.0 * a * u.ln() + (2.0 - 2.0 * a) * b.ln();
    let psi = l.exp_m1();
    (psi > 0.0).then_some((l, psi))
}

impl Block {
    fn nu(&self) -> f64 {
        match self {
            Self::Lin(_) => 1.0,
            Self::Soc { .. } => 2.0,
            Self::Pow { .. } => 3.0,
        }
    }

    fn shifted(&self, sigma: Option<usize>, delta: f64) -> Self {
        match self {
            Self::Lin(r) => Self::Lin(r.shifted(sigma, delta)),
            Self::Soc { t, x } => Self::Soc { t: t.shifted(sigma, delta), x: x.clone() },
            Self::Pow { u, b, a } => Self::Pow { u: u.shifted(sigma, delta), b: b.shifted(sigma, delta), a: *a },
        }
    }

    /// Smallest shift making the block strictly satisfiable at `x`.
    fn required_shift(&self, x: &[f64]) -> f64 {
        match self {
            Self::Lin(r) => -r.eval(x),
            Self::Soc { t, x: args } => {
                let n = args.iter().map(|a| a.eval(x).powi(2)).sum::<f64>().sqrt();
                n - t.eval(x)
            }
            Self::Pow { u, b, .. } => (1.0 - u.eval(x)).max(1.0 - b.eval(x)),
        }
    }

    fn interior(&self, x: &[f64]) -> bool {
        match self {
            Self::Lin(r) => r.eval(x) > 0.0,
            Self::Soc { t, x: args } => {
                let tv = t.eval(x);
                let xs: Vec<f64> = args.iter().map(|a| a.eval(x)).collect();
                tv > 0.0 && soc_slack(tv, &xs) > 0.0
            }
            Self::Pow { u, b, a } => pow_terms(u.eval(x), b.eval(x), *a).is_some(),
        }
    }

    /// Adds gradient and Hessian; assumes `x` interior.
    fn accumulate(&self, x: &[f64], g: &mut [f64], h: &mut DMatrix<f64>) {
        match self {
            Self::Lin(r) => {
                let v = r.eval(x);
                r.add_to(-1.0 / v, g);
                add_outer(h, r, r, 1.0 / (v * v));
            }
            Self::Soc { t, x: args } => {
                let tv = t.eval(x);
                let xs: Vec<f64> = args.iter().map(|a| a.eval(x)).collect();
                let s = soc_slack(tv, &xs);
                // f = -ln s, grad s = (2t, -2x)
                t.add_to(-2.0 * tv / s, g);
                for (a, xv) in args.iter().zip(&xs) {
                    a.add_to(2.0 * xv / s, g);
                }
                add_outer(h, t, t, -2.0 / s);
                for a in args {
                    add_outer(h, a, a, 2.0 / s);
                }
                let mut parts: Vec<(&Row, f64)> = vec![(t, 2.0 * tv)];
                parts.extend(args.iter().zip(&xs).map(|(a, xv)| (a, -2.0 * xv)));
                add_combination_outer(h, &parts, 1.0 / (s * s));
            }
            Self::Pow { u, b, a } => {
                let (uv, bv) = (u.eval(x), b.eval(x));
                let (l, psi) = pow_terms(uv, bv, *a).expect("interior point");
                let gv = l.exp();
                let gu = 2.0 * a * gv / uv;
                let gb = (2.0 - 2.0 * a) * gv / bv;
                let guu = 2.0 * a * (2.0 * a - 1.0) * gv / (uv * uv);
                let gbb = (2.0 - 2.0 * a) * (1.0 - 2.0 * a) * gv / (bv * bv);
                let gub = 2.0 * a * (2.0 - 2.0 * a) * gv / (uv * bv);
                u.add_to(-gu / psi - (1.0 - a) / uv, g);
                b.add_to(-gb / psi - a / bv, g);
                let huu = -guu / psi + gu * gu / (psi * psi) + (1.0 - a) / (uv * uv);
                let hbb = -gbb / psi + gb * gb / (psi * psi) + a / (bv * bv);
                let hub = -gub / psi + gu * gb / (psi * psi);
                add_outer(h, u, u, huu);
                add_outer(h, b, b, hbb);
                add_outer(h, u, b, hub);
                add_outer(h, b, u, hub);
            }
        }
    }

    /// `f(x + s d) - f(x)`, or `None` if the step leaves the domain.
    fn delta(&self, x: &[f64], d: &[f64], s: f64) -> Option<f64> {
        match self {
            Self::Lin(r) => {
                let ratio = s * r.dot(d) / r.eval(x);
                (ratio > -1.0).then(|| -ratio.ln_1p())
            }
            Self::Soc { t, x: args } => {
                let (tv, dt) = (t.eval(x), t.dot(d));
                if !(tv + s * dt > 0.0) {
                    return None;
                }
                let xs: Vec<f64> = args.iter().map(|a| a.eval(x)).collect();
                let dx: Vec<f64> = args.iter().map(|a| a.dot(d)).collect();
                let slack = soc_slack(tv, &xs);
                let cross = tv * dt - xs.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
                let quad = dt * dt - dx.iter().map(|v| v * v).sum::<f64>();
                let ratio = (2.0 * s * cross + s * s * quad) / slack;
                (ratio > -1.0).then(|| -ratio.ln_1p())
            }
            Self::Pow { u, b, a } => {
                let (uv, bv) = (u.eval(x), b.eval(x));
                let ru = s * u.dot(d) / uv;
                let rb = s * b.dot(d) / bv;
                if !(ru > -1.0 && rb > -1.0) {
                    return None;
                }
                let (lu, lb) = (ru.ln_1p(), rb.ln_1p());
                let (l, psi) = pow_terms(uv, bv, *a)?;
                let dl = 2.0 * a * lu + (2.0 - 2.0 * a) * lb;
                // psi' / psi = 1 + e^l expm1(dl) / psi
                let ratio = l.exp() * dl.exp_m1() / psi;
                (ratio > -1.0).then(|| -ratio.ln_1p() - (1.0 - a) * lu - a * lb)
            }
        }
    }

    fn max_step(&self, x: &[f64], d: &[f64]) -> f64 {
        match self {
            Self::Lin(r) => {
                let dv = r.dot(d);
                if dv < 0.0 { -r.eval(x) / dv } else { f64::INFINITY }
            }
            _ => f64::INFINITY,
        }
    }
}

/// Phase-two restarts with a larger initial weight after losing the path.
const RESTARTS: usize = 2;
/// Squared Newton decrement accepted as centered.
const NEWTON_TOL: f64 = 1e-9;
/// Decrement still accepted when the line search stalls at working precision.
const STALL_TOL: f64 = 1e-4;

struct Barrier {
    n: usize,
    c: Vec<f64>,
    eq: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    blocks: Vec<Block>,
    nu: f64,
}

struct Centering {
    steps: usize,
    converged: bool,
    stopped: bool,
    eq_mult: DVector<f64>,
    dual_residual: f64,
    /// Squared Newton decrement at the last iterate.
    decrement: f64,
}

impl Barrier {
    fn new(n: usize, c: Vec<f64>, eq: DMatrix<f64>, eq_rhs: DVector<f64>, blocks: Vec<Block>) -> Self {
        let nu = blocks.iter().map(Block::nu).sum();
        Self { n, c, eq, eq_rhs, blocks, nu }
    }

    fn interior(&self, x: &[f64]) -> bool {
        self.blocks.iter().all(|b| b.interior(x))
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn newton_direction(&self, g: &DVector<f64>, h: &DMatrix<f64>, r: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.n;
        let scale = DVector::from_fn(n, |i, _| {
            let d = h[(i, i)];
            if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }
        });
        let hs = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * scale[i] * scale[j]);
        let mut reg = 0.0;
        let chol = loop {
            let mut m = hs.clone();
            if reg > 0.0 {
                for i in 0..n {
                    m[(i, i)] += reg;
                }
            }
            if let Some(c) = m.cholesky() {
                break c;
            }
            reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
            if reg > 1e-2 {
                return Err(Error::Cholesky(n));
            }
        };
        let gs = g.component_mul(&scale);
        let solve_once = |rhs_g: &DVector<f64>, rhs_r: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            let m = self.eq.nrows();
            if m == 0 {
                return (chol.solve(&(-rhs_g)), DVector::zeros(0));
            }
            let es = DMatrix::from_fn(m, n, |i, j| self.eq[(i, j)] * scale[j]);
            let hinv_et = chol.solve(&es.transpose());
            let schur = &es * &hinv_et;
            let hinv_g = chol.solve(rhs_g);
            let rhs = -(&es * &hinv_g) + rhs_r;
            let w = match schur.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => schur.pseudo_inverse(1e-14).map(|p| p * &rhs).unwrap_or_else(|_| DVector::zeros(m)),
            };
            let d = -(hinv_g + hinv_et * &w);
            (d, w)
        };
        // Newton step keeps E (x + d) on the equality manifold
        let (mut d, mut w) = solve_once(&gs, r);
        for _ in 0..2 {
            let res_g = &hs * &d + self.eq_scaled_t(&scale, &w) + &gs;
            let res_r = self.eq_scaled(&scale, &d) + r;
            if res_g.amax() <= 1e-14 * (1.0 + gs.amax()) && res_r.amax() <= 1e-14 * (1.0 + r.amax()) {
                break;
            }
            let (dd, dw) = solve_once(&res_g, &res_r);
            d += dd;
            w += dw;
        }
        Ok((d.component_mul(&scale), w))
    }

    fn eq_scaled(&self, scale: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        &self.eq * d.component_mul(scale)
    }

    fn eq_scaled_t(&self, scale: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        if self.eq.nrows() == 0 {
            return DVector::zeros(self.n);
        }
        (self.eq.transpose() * w).component_mul(scale)
    }

    fn center(
        &self,
        x: &mut Vec<f64>,
        t: f64,
        budget: &mut usize,
        stop: &dyn Fn(&[f64]) -> bool,
    ) -> Result<Centering> {
        let n = self.n;
        let mut out = Centering { steps: 0, converged: false, stopped: false, eq_mult: DVector::zeros(self.eq.nrows()), dual_residual: 0.0, decrement: f64::INFINITY };
        let mut near = 0;
        for _ in 0..100 {
            if *budget == 0 {
                return Ok(out);
            }
            let mut g = vec![0.0; n];
            let mut h = DMatrix::zeros(n, n);
            for b in &self.blocks {
                b.accumulate(x, &mut g, &mut h);
            }
            for (gi, ci) in g.iter_mut().zip(&self.c) {
                *gi += t * ci;
            }
            let g = DVector::from_vec(g);
            let xv = DVector::from_column_slice(x);
            let r = if self.eq.nrows() > 0 { &self.eq * &xv - &self.eq_rhs } else { DVector::zeros(0) };
            let (d, w) = self.newton_direction(&g, &h, &r)?;
            out.eq_mult = w;
            out.dual_residual = (&h * &d).amax() / t;
            let dec = d.dot(&(&h * &d));
            out.decrement = dec;
            if dec <= NEWTON_TOL {
                out.converged = true;
                return Ok(out);
            }
            let slope = g.dot(&d);
            let mut s = self.blocks.iter().map(|b| b.max_step(x, d.as_slice())).fold(1.0f64, |a, m| a.min(0.99 * m));
            let lin: f64 = t * self.c.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f64>();
            let accepted = slope < 0.0 && loop {
                if s < 1e-14 {
                    break false;
                }
                let total: Option<f64> = self.blocks.iter().map(|b| b.delta(x, d.as_slice(), s)).sum();
                if let Some(phi) = total {
                    let change = s * lin + phi;
                    if change <= 0.25 * s * slope {
                        break true;
                    }
                }
                s *= 0.5;
            };
            *budget -= 1;
            out.steps += 1;
            if !accepted {
                // stalled at working precision
                out.converged = dec < STALL_TOL;
                return Ok(out);
            }
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + s * b).collect();
            if !self.interior(&trial) {
                out.converged = dec < STALL_TOL;
                return Ok(out);
            }
            *x = trial;
            if stop(x) {
                out.stopped = true;
                return Ok(out);
            }
            // rounding of x + s d limits centering accuracy at large t
            if dec < STALL_TOL {
                near += 1;
                if near >= 5 || s < 1e-6 {
                    out.converged = true;
                    return Ok(out);
                }
            }
        }
        Ok(out)
    }
}

struct Extended {
    n: usize,
    c: Vec<f64>,
    c0: f64,
    eq: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    /// Program nonnegatives first, then cones, powers, norm epigraphs, box rows.
    blocks: Vec<Block>,
    /// Block index of each program nonnegative row, if it was kept.
    lin_map: Vec<Option<usize>>,
    radius: f64,
}

/// Constant blocks are checked once and dropped; they have no interior
/// when tight.
fn constant_block(b: &Block) -> Option<bool> {
    const SLACK: f64 = 1e-12;
    match b {
        Block::Lin(r) if r.idx.is_empty() => Some(r.c >= -SLACK),
        Block::Soc { t, x } if t.idx.is_empty() && x.iter().all(|a| a.idx.is_empty()) => {
            Some(x.iter().map(|a| a.c * a.c).sum::<f64>().sqrt() <= t.c + SLACK)
        }
        Block::Pow { u, b, a } if u.idx.is_empty() && b.idx.is_empty() => {
            Some(b.c > 0.0 && u.c >= b.c.powf(1.0 - 1.0 / a) - SLACK * (1.0 + u.c.abs()))
        }
        _ => None,
    }
}

fn extend(p: &ConvexProgram, radius: f64) -> Result<Extended> {
    let n = p.num_vars + p.norm_terms.len();
    let mut c = vec![0.0; n];
    Row::from_expr(&p.objective).add_to(1.0, &mut c);
    let mut blocks: Vec<Block> = p.nonnegatives.iter().map(|e| Block::Lin(Row::from_expr(e))).collect();
    for cone in &p.cones {
        blocks.push(Block::Soc { t: Row::from_expr(&cone.t), x: cone.args.iter().map(Row::from_expr).collect() });
    }
    for pw in &p.powers {
        let a = 1.0 / (1.0 + pw.alpha);
        blocks.push(Block::Pow { u: Row::from_expr(&pw.u), b: Row::from_expr(&pw.base), a });
    }
    let mut lin_map = Vec::with_capacity(p.nonnegatives.len());
    let mut kept_blocks = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.into_iter().enumerate() {
        match constant_block(&b) {
            Some(true) => {
                if i < p.nonnegatives.len() {
                    lin_map.push(None);
                }
            }
            Some(false) => return Err(Error::Infeasible(format!("constant constraint {i} violated"))),
            None => {
                if i < p.nonnegatives.len() {
                    lin_map.push(Some(kept_blocks.len()));
                }
                kept_blocks.push(b);
            }
        }
    }
    let mut blocks = kept_blocks;
    for (k, term) in p.norm_terms.iter().enumerate() {
        let s = p.num_vars + k;
        c[s] = term.weight;
        blocks.push(Block::Soc { t: Row::var(s, 1.0, 0.0), x: term.args.iter().map(Row::from_expr).collect() });
    }
    for j in 0..n {
        blocks.push(Block::Lin(Row::var(j, -1.0, radius)));
        blocks.push(Block::Lin(Row::var(j, 1.0, radius)));
    }
    let rows: Vec<Row> = p.equalities.iter().map(Row::from_expr).collect();
    let mut kept = Vec::new();
    for r in rows {
        if r.idx.is_empty() {
            if r.c.abs() > 1e-12 {
                return Err(Error::Infeasible(format!("constant equality {} = 0", r.c)));
            }
        } else {
            kept.push(r);
        }
    }
    let mut eq = DMatrix::zeros(kept.len(), n);
    let mut eq_rhs = DVector::zeros(kept.len());
    for (i, r) in kept.iter().enumerate() {
        for (j, v) in r.idx.iter().zip(&r.val) {
            eq[(i, *j)] = *v;
        }
        eq_rhs[i] = -r.c;
    }
    Ok(Extended { n, c, c0: p.objective.constant, eq, eq_rhs, blocks, lin_map, radius })
}

fn infeasible(p: &ConvexProgram, report: SolveReport) -> RawSolution {
    RawSolution {
        status: Status::Infeasible,
        x: vec![0.0; p.num_vars],
        objective: f64::NAN,
        nonneg_duals: vec![0.0; p.nonnegatives.len()],
        eq_duals: vec![0.0; p.equalities.len()],
        report,
    }
}

fn manifold_point(eq: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<Option<Vec<f64>>> {
    if eq.nrows() == 0 {
        return Ok(Some(vec![0.0; eq.ncols()]));
    }
    let pinv = eq.clone().pseudo_inverse(1e-12).map_err(|e| Error::Invalid(e.to_string()))?;
    let x0 = pinv * rhs;
    let res = (eq * &x0 - rhs).amax();
    Ok((res <= 1e-8 * (1.0 + rhs.amax())).then(|| x0.as_slice().to_vec()))
}

/// Minimize a common shift `sigma` of every block. Returns whether a strictly
/// feasible point was reached, the point and the final shift.
fn phase_one(ext: &Extended, x: &[f64], opts: &SolverOptions, budget: &mut usize, report: &mut SolveReport) -> Result<(bool, Vec<f64>, f64)> {
    let n = ext.n;
    let sigma = n;
    let need = ext.blocks.iter().map(|b| b.required_shift(x)).fold(0.0f64, f64::max);
    let mut blocks: Vec<Block> = ext.blocks.iter().map(|b| b.shifted(Some(sigma), 0.0)).collect();
    blocks.push(Block::Lin(Row::var(sigma, 1.0, 1.0)));
    let mut eq = DMatrix::zeros(ext.eq.nrows(), n + 1);
    eq.view_mut((0, 0), (ext.eq.nrows(), n)).copy_from(&ext.eq);
    let mut c = vec![0.0; n + 1];
    c[sigma] = 1.0;
    let phase1 = Barrier::new(n + 1, c, eq, ext.eq_rhs.clone(), blocks);
    let mut z = x.to_vec();
    z.push(need + 1.0);
    let stop = |z: &[f64]| z[sigma] < 0.0;
    let mut t = opts.t0;
    loop {
        let cen = phase1.center(&mut z, t, budget, &stop)?;
        report.newton_steps += cen.steps;
        if cen.stopped {
            let s = z[sigma];
            z.pop();
            return Ok((true, z, s));
        }
        if *budget == 0 || phase1.nu / t < 1e-10 {
            break;
        }
        t *= opts.mu;
    }
    let s = z[sigma];
    z.pop();
    Ok((false, z, s))
}

/// Turn the given linear blocks into equality rows.
fn promote(ext: &mut Extended, tight: &[usize]) {
    let n = ext.n;
    let m0 = ext.eq.nrows();
    let mut eq = DMatrix::zeros(m0 + tight.len(), n);
    eq.view_mut((0, 0), (m0, n)).copy_from(&ext.eq);
    let mut rhs = DVector::zeros(m0 + tight.len());
    rhs.rows_mut(0, m0).copy_from(&ext.eq_rhs);
    for (k, &b) in tight.iter().enumerate() {
        let Block::Lin(r) = &ext.blocks[b] else { unreachable!() };
        for (j, v) in r.idx.iter().zip(&r.val) {
            eq[(m0 + k, *j)] = *v;
        }
        rhs[m0 + k] = -r.c;
    }
    let mut new_index = vec![None; ext.blocks.len()];
    let mut kept = Vec::with_capacity(ext.blocks.len());
    for (i, b) in ext.blocks.drain(..).enumerate() {
        if !tight.contains(&i) {
            new_index[i] = Some(kept.len());
            kept.push(b);
        }
    }
    ext.blocks = kept;
    for m in &mut ext.lin_map {
        *m = m.and_then(|i| new_index[i]);
    }
    ext.eq = eq;
    ext.eq_rhs = rhs;
}

/// Run the two-phase barrier method on `p`.
pub fn solve_raw(p: &ConvexProgram, opts: &SolverOptions) -> Result<RawSolution> {
    p.validate()?;
    opts.validate()?;
    let radius = opts.radius.or(p.radius).unwrap_or(1e6);
    let ext = match extend(p, radius) {
        Ok(e) => e,
        Err(Error::Infeasible(_)) => return Ok(infeasible(p, SolveReport::default())),
        Err(e) => return Err(e),
    };
    let n = ext.n;
    let mut report = SolveReport::default();
    let mut budget = opts.max_iter;

    let mut ext = ext;
    let mut relax = 0.0;
    let mut x: Vec<f64>;
    let mut rounds = 0;
    loop {
        x = match manifold_point(&ext.eq, &ext.eq_rhs)? {
            Some(x) => x,
            None => return Ok(infeasible(p, report)),
        };
        if x.iter().any(|v| v.abs() >= radius) {
            return Err(Error::Invalid(format!("box radius {radius} too small for the equality constraints")));
        }
        if ext.blocks.iter().all(|b| b.interior(&x)) {
            break;
        }
        let (found, z, s) = phase_one(&ext, &x, opts, &mut budget, &mut report)?;
        x = z;
        if found {
            break;
        }
        let scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if s > 1e-8 * scale {
            report.primal_residual = s;
            let status = if budget == 0 { Status::MaxIter } else { Status::Infeasible };
            return Ok(RawSolution { status, ..infeasible(p, report) });
        }
        // rows pinned at zero are implicit equalities; promote and retry
        let tight: Vec<usize> = ext
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b, Block::Lin(r) if r.eval(&x) + s <= 1e-6))
            .map(|(i, _)| i)
            .collect();
        if tight.is_empty() || rounds >= 3 {
            relax = 2.0 * s.max(0.0) + 1e-10;
            break;
        }
        rounds += 1;
        promote(&mut ext, &tight);
    }

    let blocks: Vec<Block> = if relax > 0.0 {
        ext.blocks.iter().map(|b| b.shifted(None, relax)).collect()
    } else {
        ext.blocks.clone()
    };
    let phase2 = Barrier::new(n, ext.c.clone(), ext.eq.clone(), ext.eq_rhs.clone(), blocks);
    let start = x.clone();
    let mut t0 = opts.t0;
    let mut t = t0;
    let mut status = Status::MaxIter;
    let mut eq_mult = DVector::zeros(phase2.eq.nrows());
    'restart: for attempt in 0..=RESTARTS {
        t = t0;
        loop {
            let cen = phase2.center(&mut x, t, &mut budget, &|_| false)?;
            report.newton_steps += cen.steps;
            report.outer_iterations += 1;
            report.dual_residual = cen.dual_residual;
            eq_mult = cen.eq_mult;
            let obj = phase2.objective(&x) + ext.c0;
            // near the central point the barrier suboptimality is at most the
            // squared decrement, so (nu + dec) / t bounds the gap
            let near_center = cen.converged || cen.decrement < 0.25;
            if near_center && (phase2.nu + cen.decrement.min(phase2.nu)) / t <= opts.tol * obj.abs().max(1.0) {
                status = Status::Optimal;
                break 'restart;
            }
            if budget == 0 {
                break 'restart;
            }
            if t > 1e18 {
                break;
            }
            t *= opts.mu;
        }
        // lost the central path; start again closer to the objective
        if attempt < RESTARTS {
            x.clone_from(&start);
            t0 *= 10.0;
        }
    }
    let objective = phase2.objective(&x) + ext.c0;
    report.barrier_weight = t;
    report.gap = phase2.nu / t;
    report.relative_gap = report.gap / objective.abs().max(1.0);
    report.relaxation = relax;
    report.near_bound = x.iter().any(|v| v.abs() > 0.9 * ext.radius);
    let xp = x[..p.num_vars].to_vec();
    report.primal_residual = p.max_violation(&xp).max(0.0);
    let nonneg_duals = ext
        .lin_map
        .iter()
        .map(|m| match m.map(|i| &phase2.blocks[i]) {
            Some(Block::Lin(r)) => 1.0 / (t * r.eval(&x)),
            _ => 0.0,
        })
        .collect();
    Ok(RawSolution {
        status,
        x: xp,
        objective: p.objective_value(&x[..p.num_vars]),
        nonneg_duals,
        eq_duals: (eq_mult / t).as_slice().to_vec(),
        report,
    })
}
