//! Brute-force minimax oracles for tiny instances.
//!
//! The outer minimization searches over net flows per region pair, which
//! loses nothing because optimal dispatches carry no anti-parallel flow.
//! Fleet vectors follow from the dynamics. The inner maximization is exact
//! for boxes and polytopes (vertex enumeration, the cost being affine in the
//! demand) and a lower bound for SOC sets unless the support point of the
//! unconstrained set is itself a member.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DecisionVars, DispatchInstance};
use crate::uncertainty::{PolytopeSet, SocSet, UncertaintySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Odd number of grid points per flow coordinate.
    pub grid: usize,
    /// Ray directions used to discretize SOC sets.
    pub soc_directions: usize,
    /// Enumerate polytope vertices (otherwise grid the bounding box).
    pub vertex_enumeration: bool,
    /// Resolution per demand coordinate when gridding polytopes.
    pub set_resolution: usize,
    /// Cap on candidate subsets during vertex enumeration.
    pub vertex_cap: usize,
    /// Stop once the search radius falls below this fraction of the fleet.
    pub min_step: f64,
    pub max_moves: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid: 5,
            soc_directions: 4000,
            vertex_enumeration: true,
            set_resolution: 11,
            vertex_cap: 2_000_000,
            min_step: 1e-10,
            max_moves: 2000,
            seed: 7,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 3 || self.grid % 2 == 0 || self.set_resolution < 2 {
            return Err(Error::Invalid("oracle grid must be odd and >= 3, set resolution >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerMax {
    pub value: f64,
    /// False when the value is only a lower bound.
    pub exact: bool,
}

/// Precomputed inner maximizer for one set.
enum Inner {
    Upper(Vec<f64>),
    /// Pareto-maximal vertices per stage.
    Stages(Vec<Vec<DVector<f64>>>),
    Joint(Vec<DVector<f64>>),
    Points(Vec<DVector<f64>>),
    Soc { set: SocSet, cloud: Vec<DVector<f64>> },
}

fn pareto_prune(points: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let dominated = |a: &DVector<f64>, b: &DVector<f64>| a.iter().zip(b.iter()).all(|(x, y)| x <= y) && a != b;
    let mut keep: Vec<DVector<f64>> = Vec::new();
    for p in &points {
        if !points.iter().any(|q| dominated(p, q)) && !keep.iter().any(|k| (k - p).amax() <= 1e-12) {
            keep.push(p.clone());
        }
    }
    keep
}

/// Vertices of `{r >= 0 : A r <= b}` by solving every square subsystem.
pub fn enumerate_vertices(a: &DMatrix<f64>, b: &DVector<f64>, cap: usize) -> Result<Vec<DVector<f64>>> {
    let d = a.ncols();
    let m = a.nrows();
    let total = m + d;
    let mut rows = DMatrix::zeros(total, d);
    let mut rhs = DVector::zeros(total);
    rows.view_mut((0, 0), (m, d)).copy_from(a);
    rhs.rows_mut(0, m).copy_from(b);
    for i in 0..d {
        rows[(m + i, i)] = -1.0;
    }
    let count = binomial(total, d);
    if count > cap as f64 {
        return Err(Error::VertexCap(cap));
    }
    let scale = 1.0 + b.amax();
    let mut out = Vec::new();
    let mut subset: Vec<usize> = (0..d).collect();
    loop {
        let sys = DMatrix::from_fn(d, d, |i, j| rows[(subset[i], j)]);
        let r = DVector::from_fn(d, |i, _| rhs[subset[i]]);
        if let Some(lu) = Some(sys.lu()).filter(|lu| lu.determinant().abs() > 1e-12) {
            if let Some(v) = lu.solve(&r) {
                let feasible = (0..total).all(|i| rows.row(i).transpose().dot(&v) <= rhs[i] + 1e-9 * scale);
                if feasible {
                    out.push(v);
                }
            }
        }
        if !next_subset(&mut subset, total) {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn next_subset(s: &mut [usize], n: usize) -> bool {
    let k = s.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if s[i] < n - k + i {
            s[i] += 1;
            for j in i + 1..k {
                s[j] = s[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn polytope_grid(set: &PolytopeSet, res: usize) -> Result<Vec<DVector<f64>>> {
    // bounding box from the largest rhs; only usable for tiny dimensions
    let d = set.dim();
    let PolytopeSet::Coupled { rhs, .. } = set.to_coupled() else { unreachable!() };
    let hi = rhs.amax().max(1.0) * 2.0;
    let total = res.pow(d as u32);
    let pts: Vec<DVector<f64>> = (0..total)
        .map(|mut idx| {
            DVector::from_fn(d, |_, _| {
                let c = idx % res;
                idx /= res;
                hi * c as f64 / (res - 1) as f64
            })
        })
        .filter(|p| set.contains(p.as_slice(), 1e-12))
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(pareto_prune(pts))
}

/// Boundary point along `dir` from the mean, by bisection on membership.
fn ray_boundary(set: &SocSet, dir: &DVector<f64>, reach: f64) -> DVector<f64> {
    let (mut lo, mut hi) = (0.0, reach);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let p = &set.mean + dir * mid;
        if set.contains(p.as_slice(), 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    &set.mean + dir * lo
}

fn soc_cloud(set: &SocSet, directions: usize, seed: u64) -> Vec<DVector<f64>> {
    let d = set.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reach = set.gamma1 + set.kappa() * set.chol.norm() + 1.0;
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(directions + 2 * d);
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(d);
            e[i] = s;
            dirs.push(e);
        }
    }
    while dirs.len() < directions + 2 * d {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            dirs.push(v / n);
        }
    }
    let mut cloud: Vec<DVector<f64>> = dirs.par_iter().map(|dir| ray_boundary(set, dir, reach)).collect();
    cloud.push(set.mean.clone());
    pareto_prune(cloud)
}

impl Inner {
    fn new(set: &UncertaintySet, tau: usize, cfg: &OracleConfig) -> Result<Self> {
        Ok(match set {
            UncertaintySet::Box(b) => Self::Upper(b.upper.clone()),
            UncertaintySet::Polytope(p) => {
                p.validate()?;
                if !cfg.vertex_enumeration {
                    Self::Points(polytope_grid(p, cfg.set_resolution)?)
                } else {
                    match p {
                        PolytopeSet::PerStage(st) => {
                            if st.len() != tau {
                                return Err(Error::Dimension { expected: tau, got: st.len() });
                            }
                            Self::Stages(
                                st.iter()
                                    .map(|s| enumerate_vertices(&s.a, &s.b, cfg.vertex_cap).map(pareto_prune))
                                    .collect::<Result<_>>()?,
                            )
                        }
                        PolytopeSet::Coupled { blocks, rhs } => {
                            let a = DMatrix::from_fn(rhs.len(), p.dim(), |i, j| blocks[j / p.n()][(i, j % p.n())]);
                            Self::Joint(pareto_prune(enumerate_vertices(&a, rhs, cfg.vertex_cap)?))
                        }
                    }
                }
            }
            UncertaintySet::Soc(s) => Self::Soc { set: s.clone(), cloud: soc_cloud(s, cfg.soc_directions, cfg.seed) },
        })
    }

    /// `max_r c^T r` over the set.
    fn max(&self, c: &[f64]) -> InnerMax {
        let dot = |v: &DVector<f64>, off: usize| v.iter().enumerate().map(|(i, x)| x * c[off + i]).sum::<f64>();
        let best = |pts: &[DVector<f64>], off: usize| pts.iter().map(|v| dot(v, off)).fold(f64::NEG_INFINITY, f64::max);
        match self {
            Self::Upper(u) => InnerMax { value: u.iter().zip(c).map(|(a, b)| a * b).sum(), exact: true },
            Self::Stages(st) => {
                let n = c.len() / st.len();
                InnerMax { value: st.iter().enumerate().map(|(k, v)| best(v, k * n)).sum(), exact: true }
            }
            Self::Joint(v) => InnerMax { value: best(v, 0), exact: true },
            Self::Points(v) => InnerMax { value: best(v, 0), exact: false },
            Self::Soc { set, cloud } => {
                let mut value = best(cloud, 0);
                let cv = DVector::from_column_slice(c);
                let cc = &set.chol * &cv;
                let mut support = set.mean.clone();
                if cv.norm() > 0.0 {
                    support += &cv * (set.gamma1 / cv.norm());
                }
                if cc.norm() > 0.0 {
                    support += set.chol.transpose() * &cc * (set.kappa() / cc.norm());
                }
                // the support point of the unconstrained set is the exact maximizer when it is a member
                let exact = set.contains(support.as_slice(), 1e-9);
                if exact {
                    value = value.max(cv.dot(&support));
                }
                InnerMax { value, exact }
            }
        }
    }
}

/// `max_{r in set} J(r, x)` for a fixed feasible dispatch.
pub fn oracle_inner_max(inst: &DispatchInstance, vars: &DecisionVars, set: &UncertaintySet, cfg: &OracleConfig) -> Result<InnerMax> {
    cfg.validate()?;
    if set.dim() != inst.tau * inst.n {
        return Err(Error::Dimension { expected: inst.tau * inst.n, got: set.dim() });
    }
    let inner = Inner::new(set, inst.tau, cfg)?;
    let c = model::stacked_coefficients(inst, vars)?;
    let m = inner.max(&c);
    Ok(InnerMax { value: model::total_idle(inst, vars) + m.value, ..m })
}

/// A flow coordinate: stage, pair and which directions are reachable.
#[derive(Debug, Clone, Copy)]
struct Coord {
    k: usize,
    i: usize,
    j: usize,
    fwd: bool,
    back: bool,
}

struct Search<'a> {
    inst: &'a DispatchInstance,
    coords: Vec<Coord>,
    inner: Inner,
}

impl Search<'_> {
    fn dispatch(&self, f: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        let n = self.inst.n;
        let mut xs = vec![DMatrix::zeros(n, n); self.inst.tau];
        for (c, v) in self.coords.iter().zip(f) {
            if *v > 0.0 {
                if !c.fwd {
                    return None;
                }
                xs[c.k][(c.i, c.j)] = *v;
            } else if *v < 0.0 {
                if !c.back {
                    return None;
                }
                xs[c.k][(c.j, c.i)] = -v;
            }
        }
        Some(xs)
    }

    fn value(&self, f: &[f64]) -> f64 {
        let Some(xs) = self.dispatch(f) else { return f64::INFINITY };
        let vars = model::rollout(self.inst, xs);
        for k in 0..self.inst.tau {
            if vars.supply(self.inst, k).iter().any(|b| *b < 1.0) {
                return f64::INFINITY;
            }
        }
        match model::stacked_coefficients(self.inst, &vars) {
            Ok(c) => model::total_idle(self.inst, &vars) + self.inner.max(&c).value,
            Err(_) => f64::INFINITY,
        }
    }

    fn clamp(&self, f: &mut [f64], bound: f64) {
        for (c, v) in self.coords.iter().zip(f.iter_mut()) {
            let lo = if c.back { -bound } else { 0.0 };
            let hi = if c.fwd { bound } else { 0.0 };
            *v = v.clamp(lo, hi);
        }
    }

    /// Pattern search on a `grid^D` stencil that moves to the best point and
    /// halves the stencil when the center wins.
    fn run(&self, start: Vec<f64>, width: f64, cfg: &OracleConfig) -> (f64, Vec<f64>) {
        let d = self.coords.len();
        let g = cfg.grid;
        let half = (g / 2) as i64;
        let total = g.pow(d as u32);
        let bound = self.inst.fleet_size();
        let mut center = start;
        let mut best = self.value(&center);
        let mut h = width;
        let stop = cfg.min_step * bound.max(1.0);
        let mut moves = 0;
        while h > stop && moves < cfg.max_moves {
            moves += 1;
            let step = h / half as f64;
            // lowest index wins ties so the reduction is order independent
            let cand = (0..total)
                .into_par_iter()
                .map(|mut idx| {
                    let mut f = center.clone();
                    for v in f.iter_mut() {
                        let o = (idx % g) as i64 - half;
                        idx /= g;
                        *v += o as f64 * step;
                    }
                    self.clamp(&mut f, bound);
                    (self.value(&f), f)
                })
                .reduce_with(|a, b| if b.0 < a.0 { b } else { a });
            match cand {
                Some((v, f)) if v < best - 1e-15 * best.abs().max(1.0) => {
                    best = v;
                    center = f;
                }
                _ => h *= 0.5,
            }
        }
        (best, center)
    }
}

/// Minimum over gridded dispatches of the inner maximum.
pub fn oracle_minimax(inst: &DispatchInstance, set: &UncertaintySet, cfg: &OracleConfig) -> Result<f64> {
    Ok(oracle_minimax_point(inst, set, cfg)?.0)
}

/// As [`oracle_minimax`], also returning the best dispatch found.
pub fn oracle_minimax_point(inst: &DispatchInstance, set: &UncertaintySet, cfg: &OracleConfig) -> Result<(f64, DecisionVars)> {
    cfg.validate()?;
    inst.validate()?;
    if set.dim() != inst.tau * inst.n {
        return Err(Error::Dimension { expected: inst.tau * inst.n, got: set.dim() });
    }
    let n = inst.n;
    let mut coords = Vec::new();
    for k in 0..inst.tau {
        let mask = inst.mask(k);
        for i in 0..n {
            for j in i + 1..n {
                let (fwd, back) = (mask[(i, j)], mask[(j, i)]);
                if fwd || back {
                    coords.push(Coord { k, i, j, fwd, back });
                }
            }
        }
    }
    let search = Search { inst, coords, inner: Inner::new(set, inst.tau, cfg)? };
    let d = search.coords.len();
    let fleet = inst.fleet_size();
    // restarts from the zero dispatch and from coarse offsets
    let starts: Vec<(Vec<f64>, f64)> = vec![
        (vec![0.0; d], fleet),
        (vec![0.0; d], 0.37 * fleet),
        (vec![0.0; d], 0.11 * fleet),
    ];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for (s, w) in starts {
        let (v, f) = search.run(s, w, cfg);
        if best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, f));
        }
        if d == 0 {
            break;
        }
    }
    let (v, f) = best.expect("at least one start");
    if !v.is_finite() {
        return Err(Error::Infeasible("no gridded dispatch satisfies the constraints".into()));
    }
    let xs = search.dispatch(&f).expect("finite value implies valid dispatch");
    Ok((v, model::rollout(inst, xs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{box_to_polytope, BoxSet, StagePolytope};

    fn inst(l: [f64; 2], m: f64) -> DispatchInstance {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        DispatchInstance::new(w, vec![], DVector::from_vec(l.to_vec()), vec![m], 0.1, 10.0).unwrap()
    }

    #[test]
    fn vertices_of_unit_square() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let v = enumerate_vertices(&a, &b, 1000).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(pareto_prune(v), vec![DVector::from_vec(vec![1.0, 1.0])]);
    }

    #[test]
    fn vertex_cap_is_enforced() {
        let a = DMatrix::identity(6, 6);
        let b = DVector::from_element(6, 1.0);
        assert!(matches!(enumerate_vertices(&a, &b, 10), Err(Error::VertexCap(10))));
    }

    #[test]
    fn singleton_inner_max_is_cost() {
        let i = inst([5.0, 3.0], 2.0);
        let r = [2.0, 3.0];
        let set = UncertaintySet::Box(BoxSet::singleton(&r).unwrap());
        let vars = DecisionVars::zeros(&i);
        let got = oracle_inner_max(&i, &vars, &set, &OracleConfig::default()).unwrap();
        let expect = model::total_cost(&i, &vars, &r).unwrap();
        assert!((got.value - expect).abs() < 1e-12 && got.exact);
    }

    #[test]
    fn polytope_inner_max_matches_grid() {
        let i = inst([5.0, 3.0], 2.0);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![5.0, 4.0, 3.0]);
        let set = UncertaintySet::Polytope(PolytopeSet::PerStage(vec![StagePolytope { a, b }]));
        let vars = DecisionVars::zeros(&i);
        let exact = oracle_inner_max(&i, &vars, &set, &OracleConfig::default()).unwrap().value;
        let cfg = OracleConfig { vertex_enumeration: false, set_resolution: 101, ..Default::default() };
        let grid = oracle_inner_max(&i, &vars, &set, &cfg).unwrap().value;
        assert!(grid <= exact + 1e-9 && exact - grid < 0.2, "{grid} vs {exact}");
    }

    #[test]
    fn unreachable_pairs_leave_zero_dispatch() {
        let i = inst([5.0, 3.0], 0.5);
        let set = UncertaintySet::Box(BoxSet::new(vec![1.0, 1.0], vec![2.0, 3.0]).unwrap());
        let v = oracle_minimax(&i, &set, &OracleConfig::default()).unwrap();
        let direct = oracle_inner_max(&i, &DecisionVars::zeros(&i), &set, &OracleConfig::default()).unwrap().value;
        assert_eq!(v, direct);
    }

    #[test]
    fn box_and_polytope_oracles_agree() {
        let i = inst([6.0, 2.0], 2.0);
        let b = BoxSet::new(vec![1.0, 2.0], vec![2.0, 6.0]).unwrap();
        let cfg = OracleConfig::default();
        let vb = oracle_minimax(&i, &UncertaintySet::Box(b.clone()), &cfg).unwrap();
        let vp = oracle_minimax(&i, &UncertaintySet::Polytope(box_to_polytope(&b, 1).unwrap()), &cfg).unwrap();
        assert!((vb - vp).abs() < 1e-9 * vb);
    }
}
