//! Solving convex programs, checking solutions, rounding and oracles.

mod barrier;
pub mod oracle;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use barrier::{solve_raw, RawSolution, SolveReport, SolverOptions, Status};
pub use oracle::{oracle_inner_max, oracle_minimax, InnerMax, OracleConfig};

use crate::error::{Error, Result};
use crate::model::{self, DecisionVars, DispatchInstance};
use crate::reform::{self, ConvexProgram, LinExpr, ReformulationKind, RobustProblemSpec};
use crate::textfmt;
use crate::uncertainty::UncertaintySet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    pub objective: f64,
    /// Full program vector.
    pub x: Vec<f64>,
    /// Dispatch and fleet, when the program carries a dispatch layout.
    pub vars: Option<DecisionVars>,
    /// Multipliers `lambda` or epigraph vector `z`.
    pub duals: Vec<f64>,
    pub report: SolveReport,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    /// Dispatch variables of an optimal solution.
    pub fn dispatch(&self) -> Result<&DecisionVars> {
        if !self.is_optimal() {
            return Err(Error::Infeasible(format!("solver status {}", self.status.as_str())));
        }
        self.vars.as_ref().ok_or_else(|| Error::Invalid("program has no dispatch layout".into()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line("solution".into());
        line(format!("status {}", self.status.as_str()));
        line(format!("objective {}", textfmt::real(self.objective)));
        if let Some(v) = &self.vars {
            for (k, x) in v.x.iter().enumerate() {
                line(format!("X {}", k + 1));
                for i in 0..x.nrows() {
                    line(textfmt::reals(x.row(i).iter()));
                }
            }
            for (k, l) in v.l.iter().enumerate() {
                line(format!("L {} {}", k + 2, textfmt::reals(l.iter())));
            }
        }
        line(format!("duals {} {}", self.duals.len(), textfmt::reals(&self.duals)).trim_end().to_string());
        line(format!("x {} {}", self.x.len(), textfmt::reals(&self.x)).trim_end().to_string());
        let r = &self.report;
        line(format!("primal_residual {}", textfmt::real(r.primal_residual)));
        line(format!("dual_residual {}", textfmt::real(r.dual_residual)));
        line(format!("gap {}", textfmt::real(r.gap)));
        line(format!("relative_gap {}", textfmt::real(r.relative_gap)));
        line(format!("relaxation {}", textfmt::real(r.relaxation)));
        line(format!("newton_steps {}", r.newton_steps));
        s
    }
}

/// Solve a program; dispatch quantities are extracted through its layout.
pub fn solve(program: &ConvexProgram, opts: &SolverOptions) -> Result<Solution> {
    let raw = solve_raw(program, opts)?;
    let (vars, duals) = match (&program.layout, raw.status) {
        (Some(layout), Status::Optimal | Status::MaxIter) => (Some(layout.extract(&raw.x)), layout.duals(&raw.x)),
        _ => (None, Vec::new()),
    };
    Ok(Solution { status: raw.status, objective: raw.objective, x: raw.x, vars, duals, report: raw.report })
}

/// Solve and fail unless the status is optimal.
pub fn solve_optimal(program: &ConvexProgram, opts: &SolverOptions) -> Result<Solution> {
    let sol = solve(program, opts)?;
    match sol.status {
        Status::Optimal => Ok(sol),
        Status::Infeasible => Err(Error::Infeasible("solver found no feasible point".into())),
        Status::MaxIter => Err(Error::Infeasible(format!(
            "solver stopped at the iteration limit (relative gap {:e})",
            sol.report.relative_gap
        ))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub feasible: bool,
    /// Largest violation of linear rows and equalities.
    pub primal_residual: f64,
    /// Largest violation of cone and power constraints.
    pub cone_residual: f64,
    /// Barrier gap bound recorded by the solver.
    pub complementarity: f64,
    pub objective: f64,
    /// Largest `min(X_ij, X_ji)` over stages.
    pub max_antiparallel: f64,
    /// Stage and pair of each anti-parallel flow above 1e-6.
    pub antiparallel: Vec<(usize, usize, usize)>,
    pub dispatch_feasible: bool,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.feasible && self.dispatch_feasible && self.antiparallel.is_empty()
    }
}

fn max_antiparallel(vars: &DecisionVars) -> (f64, Vec<(usize, usize, usize)>) {
    let mut worst = 0.0f64;
    let mut flagged = Vec::new();
    for (k, x) in vars.x.iter().enumerate() {
        for i in 0..x.nrows() {
            for j in i + 1..x.ncols() {
                let m = x[(i, j)].min(x[(j, i)]);
                worst = worst.max(m);
                if m > 1e-6 {
                    flagged.push((k, i, j));
                }
            }
        }
    }
    (worst, flagged)
}

/// Check a solution against the program it claims to solve.
pub fn verify_solution(sol: &Solution, program: &ConvexProgram, inst: Option<&DispatchInstance>, tol: f64) -> VerifyReport {
    let x = &sol.x;
    let mut rep = VerifyReport { complementarity: sol.report.gap, ..Default::default() };
    if x.len() != program.num_vars {
        return rep;
    }
    let linear = ConvexProgram { cones: vec![], powers: vec![], ..program.clone() };
    rep.primal_residual = linear.max_violation(x).max(0.0);
    let conic = ConvexProgram { equalities: vec![], nonnegatives: vec![], ..program.clone() };
    rep.cone_residual = conic.max_violation(x).max(0.0);
    rep.feasible = rep.primal_residual <= tol && rep.cone_residual <= tol;
    rep.objective = program.objective_value(x);
    rep.dispatch_feasible = true;
    if let Some(v) = &sol.vars {
        let (worst, flagged) = max_antiparallel(v);
        rep.max_antiparallel = worst;
        rep.antiparallel = flagged;
        if let Some(inst) = inst {
            rep.dispatch_feasible = model::check_feasible(inst, v, tol).is_ok();
        }
    }
    rep
}

/// `X'_ij = max(X_ij - X_ji, 0)`.
pub fn normalize_antiparallel(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - x[(j, i)]).max(0.0))
}

/// Substitute fixed values for the dispatch variables of `program`.
pub fn fix_dispatch(program: &ConvexProgram, vars: &DecisionVars) -> Result<ConvexProgram> {
    let layout = program.layout.as_ref().ok_or_else(|| Error::Invalid("program has no dispatch layout".into()))?;
    let full = layout.embed(vars, program.num_vars);
    let mut fixed = BTreeMap::new();
    for idx in layout.x_index.iter().flatten().flatten() {
        fixed.insert(*idx, full[*idx]);
    }
    for idx in layout.l_index.iter().flatten() {
        fixed.insert(*idx, full[*idx]);
    }
    // masked entries carry no variable, so the layout must agree with vars
    let n = layout.n;
    for (k, x) in vars.x.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if i != j && layout.x_index[k][i * n + j].is_none() && x[(i, j)].abs() > 0.0 {
                    return Err(Error::Infeasible(format!("X{}[{i},{j}] is not reachable", k + 1)));
                }
            }
        }
    }
    let sub = |e: &LinExpr| {
        let mut out = LinExpr::constant(e.constant);
        for (j, c) in &e.terms {
            match fixed.get(j) {
                Some(v) => out.constant += c * v,
                None => {
                    out.add(*j, *c);
                }
            }
        }
        out
    };
    let mut p = program.clone();
    p.objective = sub(&p.objective);
    for t in &mut p.norm_terms {
        t.args = t.args.iter().map(&sub).collect();
    }
    p.equalities = p.equalities.iter().map(&sub).collect();
    p.nonnegatives = p.nonnegatives.iter().map(&sub).collect();
    for c in &mut p.cones {
        c.t = sub(&c.t);
        c.args = c.args.iter().map(&sub).collect();
    }
    for pw in &mut p.powers {
        pw.u = sub(&pw.u);
        pw.base = sub(&pw.base);
    }
    Ok(p)
}

/// Best completion of a fixed dispatch: the remaining variables are
/// optimized and the result is expressed in the original program's
/// coordinates.
pub fn solve_at(program: &ConvexProgram, vars: &DecisionVars, opts: &SolverOptions) -> Result<Solution> {
    let fixed = fix_dispatch(program, vars)?;
    let mut sol = solve_optimal(&fixed, opts)?;
    let layout = program.layout.as_ref().expect("checked by fix_dispatch");
    let placed = layout.embed(vars, program.num_vars);
    for idx in layout.x_index.iter().flatten().flatten().chain(layout.l_index.iter().flatten()) {
        sol.x[*idx] = placed[*idx];
    }
    sol.vars = Some(vars.clone());
    sol.duals = layout.duals(&sol.x);
    Ok(sol)
}

/// Optimal program value with the dispatch held at `vars`.
pub fn program_value_at(program: &ConvexProgram, vars: &DecisionVars, opts: &SolverOptions) -> Result<f64> {
    Ok(solve_at(program, vars, opts)?.objective)
}

/// `max_{r in set} J(r, x)` for a fixed dispatch.
pub fn worst_case_cost(inst: &DispatchInstance, set: &UncertaintySet, vars: &DecisionVars, opts: &SolverOptions) -> Result<f64> {
    if let UncertaintySet::Box(b) = set {
        return model::total_cost(inst, vars, &b.upper);
    }
    let spec = RobustProblemSpec { instance: inst.clone(), set: set.clone(), kind: ReformulationKind::Auto };
    let program = reform::robust_counterpart(&spec)?;
    program_value_at(&program, vars, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundedSolution {
    pub vars: DecisionVars,
    /// Every stage ended on an integer dispatch.
    pub integral: bool,
    pub continuous_objective: f64,
    pub rounded_objective: f64,
    /// `(rounded - continuous) / |continuous|`.
    pub degradation: f64,
}

const FEAS_TOL: f64 = 1e-9;

fn stage_ok(inst: &DispatchInstance, k: usize, x: &DMatrix<f64>, l: &nalgebra::DVector<f64>) -> bool {
    let mask = inst.mask(k);
    let n = inst.n;
    let reach = (0..n).all(|i| (0..n).all(|j| i == j || mask[(i, j)] || x[(i, j)] == 0.0));
    reach && x.iter().all(|v| *v >= 0.0) && model::supply(x, l).iter().all(|b| *b >= 1.0 - FEAS_TOL)
}

/// Floor, then re-add the dropped mass along the largest remainders.
fn round_stage(inst: &DispatchInstance, k: usize, xs: &DMatrix<f64>, l: &nalgebra::DVector<f64>) -> Option<DMatrix<f64>> {
    let n = inst.n;
    let xs = xs.map(|v| v.max(0.0));
    let mut x = xs.map(|v| (v + 1e-9).floor());
    let mut fracs: Vec<(f64, usize, usize)> = Vec::new();
    let mut dropped = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                x[(i, j)] = 0.0;
                continue;
            }
            let f = xs[(i, j)] - x[(i, j)];
            if f > 1e-9 {
                dropped += f;
                fracs.push((f, i, j));
            }
        }
    }
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let target = dropped.round() as usize;
    let mut added = 0;
    for &(_, i, j) in &fracs {
        if added >= target {
            break;
        }
        x[(i, j)] += 1.0;
        if stage_ok(inst, k, &x, l) {
            added += 1;
        } else {
            x[(i, j)] -= 1.0;
        }
    }
    // repair deficits left by flooring inflows
    let mut guard = 0;
    while !stage_ok(inst, k, &x, l) && guard < n * n * 4 {
        guard += 1;
        let b = model::supply(&x, l);
        let Some(i) = (0..n).find(|&i| b[i] < 1.0 - FEAS_TOL) else { break };
        let mut fixed = false;
        for j in 0..n {
            if j != i && x[(i, j)] >= 1.0 && b[j] - 1.0 >= 1.0 - FEAS_TOL {
                x[(i, j)] -= 1.0;
                fixed = true;
                break;
            }
        }
        if !fixed {
            for j in 0..n {
                if j != i && inst.mask(k)[(j, i)] && b[j] - 1.0 >= 1.0 - FEAS_TOL {
                    x[(j, i)] += 1.0;
                    fixed = true;
                    break;
                }
            }
        }
        if !fixed {
            break;
        }
    }
    if stage_ok(inst, k, &x, l) {
        return Some(normalize_antiparallel(&x));
    }
    let zero = DMatrix::zeros(n, n);
    stage_ok(inst, k, &zero, l).then_some(zero)
}

/// Integer dispatch from an optimal continuous solution. Stages are rounded
/// in order and the fleet is rolled forward after each one; a stage that
/// admits no feasible integer dispatch keeps its continuous values.
pub fn round_solution(
    inst: &DispatchInstance,
    program: &ConvexProgram,
    sol: &Solution,
    opts: &SolverOptions,
) -> Result<RoundedSolution> {
    let cont = sol.dispatch()?;
    let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(inst.tau);
    let mut integral = true;
    let mut l = inst.l1.clone();
    for k in 0..inst.tau {
        let x = match round_stage(inst, k, &cont.x[k], &l) {
            Some(x) => x,
            None => {
                integral = false;
                cont.x[k].clone()
            }
        };
        if k + 1 < inst.tau {
            l = model::propagate_fleet(&x, &l, &inst.p[k]);
        }
        xs.push(x);
    }
    let vars = model::rollout(inst, xs);
    model::check_feasible(inst, &vars, 1e-7)?;
    let rounded = program_value_at(program, &vars, opts)?;
    let continuous = sol.objective;
    Ok(RoundedSolution {
        degradation: (rounded - continuous) / continuous.abs().max(1e-12),
        vars,
        integral,
        continuous_objective: continuous,
        rounded_objective: rounded,
    })
}
