//! Solver-neutral convex programs and the builders for the nominal and
//! robust dispatch problems.
//!
//! Every builder shares the dispatch core: masked off-diagonal dispatch
//! variables `X^k_ij >= 0`, fleet variables `L^2..L^tau` tied by the
//! dynamics, supply `b^k_i >= 1` and the idle cost. The fairness term enters
//! through epigraph auxiliaries `u^k_i >= (b^k_i)^-alpha`.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecisionVars, DispatchInstance};
use crate::textfmt::{self, Lines};
use crate::uncertainty::{box_to_polytope, PolytopeSet, SocSet, StagePolytope, UncertaintySet};

/// Sparse affine expression `sum coef * x_j + constant`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(j: usize) -> Self {
        Self { terms: vec![(j, 1.0)], constant: 0.0 }
    }

    pub fn add(&mut self, j: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((j, coef));
        }
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(j, c)| c * x[*j]).sum::<f64>() + self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|(_, c)| *c == 0.0)
    }

    fn to_text(&self) -> String {
        let mut s = format!("{} {}", textfmt::real(self.constant), self.terms.len());
        for (j, c) in &self.terms {
            s.push_str(&format!(" {j} {}", textfmt::real(*c)));
        }
        s
    }

    fn from_tokens(toks: &[&str]) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed expression `{}`", toks.join(" ")));
        let constant: f64 = toks.first().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let count: usize = toks.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if toks.len() != 2 + 2 * count {
            return Err(bad());
        }
        let mut terms = Vec::with_capacity(count);
        for t in 0..count {
            let j = toks[2 + 2 * t].parse().map_err(|_| bad())?;
            let c = toks[3 + 2 * t].parse().map_err(|_| bad())?;
            terms.push((j, c));
        }
        Ok(Self { terms, constant })
    }
}

/// `|| args ||_2 <= t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocConstraint {
    pub t: LinExpr,
    pub args: Vec<LinExpr>,
}

/// `u >= base^-alpha` with `base > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEpigraph {
    pub u: LinExpr,
    pub base: LinExpr,
    pub alpha: f64,
}

/// Objective term `weight * || args ||_2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTerm {
    pub weight: f64,
    pub args: Vec<LinExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Where the dispatch quantities live inside a program's variable vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchLayout {
    pub n: usize,
    pub tau: usize,
    pub l1: DVector<f64>,
    /// `x_index[k][i * n + j]` for allowed off-diagonal entries.
    pub x_index: Vec<Vec<Option<usize>>>,
    /// Variables of L^{k+2}.
    pub l_index: Vec<Vec<usize>>,
    /// Dual vector (lambda blocks or z), if any.
    pub dual: Option<(usize, usize)>,
}

impl DispatchLayout {
    pub fn supply_expr(&self, k: usize, i: usize) -> LinExpr {
        let n = self.n;
        let mut e = LinExpr::default();
        for j in 0..n {
            if let Some(v) = self.x_index[k][j * n + i] {
                e.add(v, 1.0);
            }
            if let Some(v) = self.x_index[k][i * n + j] {
                e.add(v, -1.0);
            }
        }
        if k == 0 {
            e.constant = self.l1[i];
        } else {
            e.add(self.l_index[k - 1][i], 1.0);
        }
        e
    }

    pub fn extract(&self, x: &[f64]) -> DecisionVars {
        let n = self.n;
        let xs = self
            .x_index
            .iter()
            .map(|idx| {
                DMatrix::from_fn(n, n, |i, j| idx[i * n + j].map_or(0.0, |v| x[v]))
            })
            .collect();
        let ls = self
            .l_index
            .iter()
            .map(|idx| DVector::from_fn(n, |i, _| x[idx[i]]))
            .collect();
        DecisionVars { x: xs, l: ls }
    }

    pub fn duals(&self, x: &[f64]) -> Vec<f64> {
        self.dual.map_or_else(Vec::new, |(s, len)| x[s..s + len].to_vec())
    }

    /// Program variable vector placing `vars`; other entries are zero.
    pub fn embed(&self, vars: &DecisionVars, num_vars: usize) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; num_vars];
        for (k, idx) in self.x_index.iter().enumerate() {
            for (e, v) in idx.iter().enumerate() {
                if let Some(v) = v {
                    out[*v] = vars.x[k][(e / n, e % n)];
                }
            }
        }
        for (k, idx) in self.l_index.iter().enumerate() {
            for (i, v) in idx.iter().enumerate() {
                out[*v] = vars.l[k][i];
            }
        }
        out
    }
}

/// A convex program: minimize a linear objective plus weighted two-norms
/// subject to linear equalities, nonnegativity of affine forms, second-order
/// cones and power epigraphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvexProgram {
    pub num_vars: usize,
    pub blocks: Vec<VarBlock>,
    pub objective: LinExpr,
    pub norm_terms: Vec<NormTerm>,
    /// `expr == 0`.
    pub equalities: Vec<LinExpr>,
    /// `expr >= 0`.
    pub nonnegatives: Vec<LinExpr>,
    pub cones: Vec<SocConstraint>,
    pub powers: Vec<PowerEpigraph>,
    /// Box radius the solver may assume contains an optimal solution.
    pub radius: Option<f64>,
    pub layout: Option<DispatchLayout>,
}

impl ConvexProgram {
    pub fn add_block(&mut self, name: &str, len: usize) -> usize {
        let start = self.num_vars;
        self.blocks.push(VarBlock { name: name.to_string(), start, len });
        self.num_vars += len;
        start
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Objective value including the norm terms.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let norms: f64 = self
            .norm_terms
            .iter()
            .map(|t| t.weight * t.args.iter().map(|a| a.eval(x).powi(2)).sum::<f64>().sqrt())
            .sum();
        self.objective.eval(x) + norms
    }

    /// Largest constraint violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for e in &self.equalities {
            worst = worst.max(e.eval(x).abs());
        }
        for e in &self.nonnegatives {
            worst = worst.max(-e.eval(x));
        }
        for c in &self.cones {
            let norm = c.args.iter().map(|a| a.eval(x).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(norm - c.t.eval(x));
        }
        for p in &self.powers {
            let b = p.base.eval(x);
            let u = p.u.eval(x);
            let v = if b > 0.0 { b.powf(-p.alpha) - u } else { f64::INFINITY };
            worst = worst.max(v);
        }
        worst
    }

    fn check_indices(&self) -> Result<()> {
        let n = self.num_vars;
        let exprs = std::iter::once(&self.objective)
            .chain(self.norm_terms.iter().flat_map(|t| t.args.iter()))
            .chain(self.equalities.iter())
            .chain(self.nonnegatives.iter())
            .chain(self.cones.iter().flat_map(|c| std::iter::once(&c.t).chain(c.args.iter())))
            .chain(self.powers.iter().flat_map(|p| [&p.u, &p.base]));
        for e in exprs {
            if let Some((j, _)) = e.terms.iter().find(|(j, _)| *j >= n) {
                return Err(Error::Invalid(format!("variable {j} not declared")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_indices()?;
        if self.powers.iter().any(|p| !(p.alpha > 0.0)) {
            return Err(Error::Invalid("power epigraph exponent must be positive".into()));
        }
        if self.norm_terms.iter().any(|t| !(t.weight >= 0.0)) {
            return Err(Error::Invalid("norm weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Text dump listing variables, sparse rows and cones.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line("# expressions are: constant count (index coefficient)*".into());
        line(format!("variables {}", self.num_vars));
        for b in &self.blocks {
            line(format!("block {} {} {}", b.name, b.start, b.len));
        }
        if let Some(r) = self.radius {
            line(format!("radius {}", textfmt::real(r)));
        }
        line(format!("objective {}", self.objective.to_text()));
        for t in &self.norm_terms {
            line(format!("norm {} {}", textfmt::real(t.weight), t.args.len()));
            for a in &t.args {
                line(format!("arg {}", a.to_text()));
            }
        }
        for e in &self.equalities {
            line(format!("eq {}", e.to_text()));
        }
        for e in &self.nonnegatives {
            line(format!("nonneg {}", e.to_text()));
        }
        for c in &self.cones {
            line(format!("soc {}", c.args.len()));
            line(format!("t {}", c.t.to_text()));
            for a in &c.args {
                line(format!("arg {}", a.to_text()));
            }
        }
        for p in &self.powers {
            line(format!("pow {}", textfmt::real(p.alpha)));
            line(format!("u {}", p.u.to_text()));
            line(format!("base {}", p.base.to_text()));
        }
        s
    }

    /// Parse a text dump (the dispatch layout is not part of the format).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let mut p = ConvexProgram { num_vars: lines.expect_usize("variables")?, ..Default::default() };
        let expr = |lines: &mut Lines, key: &str| -> Result<LinExpr> {
            LinExpr::from_tokens(&lines.expect(key)?)
        };
        while let Some(l) = lines.peek() {
            let key = l.split_whitespace().next().unwrap_or("");
            match key {
                "block" => {
                    let toks = lines.expect("block")?;
                    let [name, start, len] = toks.as_slice() else {
                        return Err(Error::Parse("bad block line".into()));
                    };
                    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse("bad block".into()));
                    p.blocks.push(VarBlock { name: name.to_string(), start: num(start)?, len: num(len)? });
                }
                "radius" => p.radius = Some(lines.expect_real("radius")?),
                "objective" => p.objective = expr(&mut lines, "objective")?,
                "norm" => {
                    let toks = lines.expect("norm")?;
                    let [w, k] = toks.as_slice() else { return Err(Error::Parse("bad norm".into())) };
                    let weight = w.parse().map_err(|_| Error::Parse("bad weight".into()))?;
                    let k: usize = k.parse().map_err(|_| Error::Parse("bad count".into()))?;
                    let args = (0..k).map(|_| expr(&mut lines, "arg")).collect::<Result<_>>()?;
                    p.norm_terms.push(NormTerm { weight, args });
                }
                "eq" => p.equalities.push(expr(&mut lines, "eq")?),
                "nonneg" => p.nonnegatives.push(expr(&mut lines, "nonneg")?),
                "soc" => {
                    let k = lines.expect_usize("soc")?;
                    let t = expr(&mut lines, "t")?;
                    let args = (0..k).map(|_| expr(&mut lines, "arg")).collect::<Result<_>>()?;
                    p.cones.push(SocConstraint { t, args });
                }
                "pow" => {
                    let alpha = lines.expect_real("pow")?;
                    let u = expr(&mut lines, "u")?;
                    let base = expr(&mut lines, "base")?;
                    p.powers.push(PowerEpigraph { u, base, alpha });
                }
                other => return Err(Error::Parse(format!("unknown line `{other}`"))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Shared dispatch skeleton. Returns the program, its layout and the
/// epigraph auxiliaries `u[k][i]` (present where `need_u(k, i)`).
fn dispatch_core(
    inst: &DispatchInstance,
    need_u: impl Fn(usize, usize) -> bool,
) -> Result<(ConvexProgram, DispatchLayout, Vec<Vec<Option<usize>>>)> {
    inst.validate()?;
    let (n, tau) = (inst.n, inst.tau);
    let mut prog = ConvexProgram::default();
    let mut x_index = Vec::with_capacity(tau);
    for k in 0..tau {
        let mask = inst.mask(k);
        let allowed: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && mask[(i, j)])
            .collect();
        let start = prog.add_block(&format!("X{}", k + 1), allowed.len());
        let mut idx = vec![None; n * n];
        for (e, &(i, j)) in allowed.iter().enumerate() {
            idx[i * n + j] = Some(start + e);
            prog.nonnegatives.push(LinExpr::var(start + e));
            prog.objective.add(start + e, inst.w[(i, j)]);
        }
        x_index.push(idx);
    }
    let l_index: Vec<Vec<usize>> = (1..tau)
        .map(|k| {
            let s = prog.add_block(&format!("L{}", k + 1), n);
            (s..s + n).collect()
        })
        .collect();
    let layout = DispatchLayout { n, tau, l1: inst.l1.clone(), x_index, l_index, dual: None };

    for k in 0..tau {
        for i in 0..n {
            let mut e = layout.supply_expr(k, i);
            e.constant -= 1.0;
            if e.is_constant() {
                if e.constant < 0.0 {
                    return Err(Error::Infeasible(format!(
                        "region {i} cannot reach one vacant taxi at stage {}",
                        k + 1
                    )));
                }
            } else {
                prog.nonnegatives.push(e);
            }
        }
        if k + 1 < tau {
            // L^{k+1}_j - sum_i b^k_i P^k_ij = 0
            let p = &inst.p[k].0;
            for j in 0..n {
                let mut e = LinExpr::var(layout.l_index[k][j]);
                for i in 0..n {
                    let pij = p[(i, j)];
                    if pij == 0.0 {
                        continue;
                    }
                    let b = layout.supply_expr(k, i);
                    for (v, c) in &b.terms {
                        e.add(*v, -pij * c);
                    }
                    e.constant -= pij * b.constant;
                }
                prog.equalities.push(e);
            }
        }
    }

    let mut u = vec![vec![None; n]; tau];
    let wanted: Vec<(usize, usize)> = (0..tau)
        .flat_map(|k| (0..n).map(move |i| (k, i)))
        .filter(|&(k, i)| need_u(k, i))
        .collect();
    if !wanted.is_empty() {
        let start = prog.add_block("u", wanted.len());
        for (e, &(k, i)) in wanted.iter().enumerate() {
            u[k][i] = Some(start + e);
            prog.powers.push(PowerEpigraph {
                u: LinExpr::var(start + e),
                base: layout.supply_expr(k, i),
                alpha: inst.alpha,
            });
        }
    }
    Ok((prog, layout, u))
}

fn finish(mut prog: ConvexProgram, layout: DispatchLayout, scale: f64) -> ConvexProgram {
    prog.radius = Some(1e3 * scale.max(1.0));
    prog.layout = Some(layout);
    prog
}

fn instance_scale(inst: &DispatchInstance, extra: f64) -> f64 {
    inst.fleet_size().max(inst.beta).max(extra)
}

/// Nominal program: objective `sum_k j_d + beta sum r^k_i u^k_i`.
pub fn nominal_program(inst: &DispatchInstance, r: &[DVector<f64>]) -> Result<ConvexProgram> {
    if r.len() != inst.tau || r.iter().any(|v| v.len() != inst.n) {
        return Err(Error::Dimension { expected: inst.tau * inst.n, got: r.iter().map(|v| v.len()).sum() });
    }
    if r.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(Error::Invalid("demand must be nonnegative".into()));
    }
    // zero-demand regions contribute nothing; leaving u out avoids a free direction
    let (mut prog, layout, u) = dispatch_core(inst, |k, i| r[k][i] > 0.0)?;
    for k in 0..inst.tau {
        for i in 0..inst.n {
            if let Some(v) = u[k][i] {
                prog.objective.add(v, inst.beta * r[k][i]);
            }
        }
    }
    let rmax = r.iter().flatten().fold(0.0f64, |a, b| a.max(*b));
    Ok(finish(prog, layout, instance_scale(inst, rmax)))
}

fn check_stage_shapes(inst: &DispatchInstance, stages: &[StagePolytope]) -> Result<()> {
    if stages.len() != inst.tau {
        return Err(Error::Dimension { expected: inst.tau, got: stages.len() });
    }
    for s in stages {
        if s.a.ncols() != inst.n || s.a.nrows() != s.b.len() {
            return Err(Error::Dimension { expected: inst.n, got: s.a.ncols() });
        }
    }
    Ok(())
}

/// Single-stage polytope dual: `min j_d + b^T lambda` s.t. `A^T lambda >= c(X)`.
pub fn dualize_single_polytope(inst: &DispatchInstance, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<ConvexProgram> {
    if inst.tau != 1 {
        return Err(Error::Invalid(format!("single-stage dual needs tau = 1, got {}", inst.tau)));
    }
    dualize_per_stage_polytopes(inst, &[StagePolytope { a: a.clone(), b: b.clone() }])
}

/// One multiplier block per stage polytope.
pub fn dualize_per_stage_polytopes(inst: &DispatchInstance, stages: &[StagePolytope]) -> Result<ConvexProgram> {
    check_stage_shapes(inst, stages)?;
    let set = PolytopeSet::PerStage(stages.to_vec());
    polytope_nonempty(&set)?;
    let (mut prog, mut layout, u) = dispatch_core(inst, |_, _| true)?;
    let total: usize = stages.iter().map(|s| s.b.len()).sum();
    let dual_start = prog.num_vars;
    for (k, st) in stages.iter().enumerate() {
        let start = prog.add_block(&format!("lambda{}", k + 1), st.b.len());
        for (row, bv) in st.b.iter().enumerate() {
            prog.nonnegatives.push(LinExpr::var(start + row));
            prog.objective.add(start + row, *bv);
        }
        for i in 0..inst.n {
            let mut e = LinExpr::default();
            for row in 0..st.b.len() {
                e.add(start + row, st.a[(row, i)]);
            }
            e.add(u[k][i].expect("u allocated"), -inst.beta);
            prog.nonnegatives.push(e);
        }
    }
    layout.dual = Some((dual_start, total));
    let bmax = stages.iter().flat_map(|s| s.b.iter()).fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(finish(prog, layout, instance_scale(inst, bmax)))
}

/// Shared multiplier for `sum_k A_k r^k <= b`.
pub fn dualize_coupled_polytope(inst: &DispatchInstance, blocks: &[DMatrix<f64>], rhs: &DVector<f64>) -> Result<ConvexProgram> {
    if blocks.len() != inst.tau {
        return Err(Error::Dimension { expected: inst.tau, got: blocks.len() });
    }
    if blocks.iter().any(|a| a.ncols() != inst.n || a.nrows() != rhs.len()) {
        return Err(Error::Dimension { expected: inst.n, got: blocks[0].ncols() });
    }
    let set = PolytopeSet::Coupled { blocks: blocks.to_vec(), rhs: rhs.clone() };
    polytope_nonempty(&set)?;
    let (mut prog, mut layout, u) = dispatch_core(inst, |_, _| true)?;
    let start = prog.add_block("lambda", rhs.len());
    for (row, bv) in rhs.iter().enumerate() {
        prog.nonnegatives.push(LinExpr::var(start + row));
        prog.objective.add(start + row, *bv);
    }
    for (k, a) in blocks.iter().enumerate() {
        for i in 0..inst.n {
            let mut e = LinExpr::default();
            for row in 0..rhs.len() {
                e.add(start + row, a[(row, i)]);
            }
            e.add(u[k][i].expect("u allocated"), -inst.beta);
            prog.nonnegatives.push(e);
        }
    }
    layout.dual = Some((start, rhs.len()));
    let bmax = rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    Ok(finish(prog, layout, instance_scale(inst, bmax)))
}

/// SOC counterpart: `min j_d + beta (mean^T z + gamma1 |z| + kappa |C z|)`
/// s.t. `z >= u`, `u >= b^-alpha`.
pub fn reformulate_soc(inst: &DispatchInstance, set: &SocSet) -> Result<ConvexProgram> {
    if !(set.epsilon > 0.0 && set.epsilon < 1.0) {
        return Err(Error::Invalid(format!("epsilon = {} not in (0,1)", set.epsilon)));
    }
    let d = inst.tau * inst.n;
    if set.dim() != d {
        return Err(Error::Dimension { expected: d, got: set.dim() });
    }
    let (mut prog, mut layout, u) = dispatch_core(inst, |_, _| true)?;
    let start = prog.add_block("z", d);
    for l in 0..d {
        let (k, i) = (l / inst.n, l % inst.n);
        let mut e = LinExpr::var(start + l);
        e.add(u[k][i].expect("u allocated"), -1.0);
        prog.nonnegatives.push(e);
        prog.objective.add(start + l, inst.beta * set.mean[l]);
    }
    if set.gamma1 > 0.0 {
        prog.norm_terms.push(NormTerm {
            weight: inst.beta * set.gamma1,
            args: (0..d).map(|l| LinExpr::var(start + l)).collect(),
        });
    }
    let rows: Vec<LinExpr> = (0..d)
        .map(|i| {
            let mut e = LinExpr::default();
            for j in 0..d {
                e.add(start + j, set.chol[(i, j)]);
            }
            e
        })
        .filter(|e| !e.terms.is_empty())
        .collect();
    if !rows.is_empty() && set.kappa() > 0.0 {
        prog.norm_terms.push(NormTerm { weight: inst.beta * set.kappa(), args: rows });
    }
    layout.dual = Some((start, d));
    let mmax = set.mean.amax();
    Ok(finish(prog, layout, instance_scale(inst, mmax)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReformulationKind {
    /// Pick from the set type.
    #[default]
    Auto,
    SingleStage,
    PerStage,
    Coupled,
    Soc,
}

impl FromStr for ReformulationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "single" | "single-stage" => Ok(Self::SingleStage),
            "per-stage" => Ok(Self::PerStage),
            "coupled" => Ok(Self::Coupled),
            "soc" => Ok(Self::Soc),
            other => Err(Error::Invalid(format!("unknown reformulation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustProblemSpec {
    pub instance: DispatchInstance,
    pub set: UncertaintySet,
    pub kind: ReformulationKind,
}

/// Route a robust problem to the matching builder.
pub fn robust_counterpart(spec: &RobustProblemSpec) -> Result<ConvexProgram> {
    use ReformulationKind as K;
    let inst = &spec.instance;
    let d = inst.tau * inst.n;
    if spec.set.dim() != d {
        return Err(Error::Dimension { expected: d, got: spec.set.dim() });
    }
    let polytope = match &spec.set {
        UncertaintySet::Soc(s) => {
            return match spec.kind {
                K::Auto | K::Soc => reformulate_soc(inst, s),
                other => Err(Error::Invalid(format!("{other:?} reformulation needs a polytope set"))),
            };
        }
        UncertaintySet::Box(b) => box_to_polytope(b, inst.tau)?,
        UncertaintySet::Polytope(p) => {
            p.validate()?;
            if p.n() != inst.n || p.tau() != inst.tau {
                return Err(Error::Dimension { expected: d, got: p.dim() });
            }
            p.clone()
        }
    };
    match (&polytope, spec.kind) {
        (PolytopeSet::PerStage(st), K::Auto | K::PerStage) => dualize_per_stage_polytopes(inst, st),
        (PolytopeSet::PerStage(st), K::SingleStage) => dualize_single_polytope(inst, &st[0].a, &st[0].b),
        (PolytopeSet::PerStage(_), K::Coupled) | (PolytopeSet::Coupled { .. }, K::Auto | K::Coupled) => {
            let PolytopeSet::Coupled { blocks, rhs } = polytope.to_coupled() else { unreachable!() };
            dualize_coupled_polytope(inst, &blocks, &rhs)
        }
        (_, kind) => Err(Error::Invalid(format!(
            "{kind:?} reformulation does not apply to a {} set",
            spec.set.kind()
        ))),
    }
}

/// Feasibility probe: `min s` over `r >= 0, A r <= b + s`.
pub fn polytope_nonempty(set: &PolytopeSet) -> Result<()> {
    set.validate()?;
    let coupled = set.to_coupled();
    let PolytopeSet::Coupled { blocks, rhs } = &coupled else { unreachable!() };
    let n = set.n();
    let d = set.dim();
    let mut prog = ConvexProgram::default();
    let r = prog.add_block("r", d);
    let s = prog.add_block("s", 1);
    prog.objective.add(s, 1.0);
    for j in 0..d {
        prog.nonnegatives.push(LinExpr::var(r + j));
    }
    let mut slack = LinExpr::var(s);
    slack.constant = 1.0;
    prog.nonnegatives.push(slack);
    for row in 0..rhs.len() {
        let mut e = LinExpr::var(s);
        e.constant = rhs[row];
        for (k, a) in blocks.iter().enumerate() {
            for i in 0..n {
                e.add(r + k * n + i, -a[(row, i)]);
            }
        }
        prog.nonnegatives.push(e);
    }
    let scale = 1.0 + rhs.amax();
    prog.radius = Some(1e3 * scale);
    let sol = crate::solve::solve(&prog, &crate::solve::SolverOptions::default())?;
    if sol.x[s] > 1e-7 * scale {
        return Err(Error::EmptySet);
    }
    Ok(())
}
