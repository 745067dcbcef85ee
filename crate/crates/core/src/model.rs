//! Dispatch instance data, cost functions and fleet dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TransitionMatrix;
use crate::reform::{self, ConvexProgram};
use crate::textfmt::{self, Lines};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 10.0;

/// Static data of a multi-stage dispatch problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchInstance {
    pub n: usize,
    pub tau: usize,
    /// Region distances, zero diagonal.
    pub w: DMatrix<f64>,
    /// Transition matrices P^1..P^{tau-1}.
    pub p: Vec<TransitionMatrix>,
    /// Initial vacant taxis per region.
    pub l1: DVector<f64>,
    /// Reachability threshold per stage.
    pub m: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl DispatchInstance {
    pub fn new(
        w: DMatrix<f64>,
        p: Vec<TransitionMatrix>,
        l1: DVector<f64>,
        m: Vec<f64>,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        let inst = Self { n: l1.len(), tau: m.len(), w, p, l1, m, alpha, beta };
        inst.validate()?;
        Ok(inst)
    }

    /// Same threshold `m` at every stage.
    pub fn with_scalar_m(
        w: DMatrix<f64>,
        p: Vec<TransitionMatrix>,
        l1: DVector<f64>,
        tau: usize,
        m: f64,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        Self::new(w, p, l1, vec![m; tau], alpha, beta)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 || self.tau == 0 {
            return Err(Error::Invalid("need n >= 1 and tau >= 1".into()));
        }
        if self.w.shape() != (n, n) {
            return Err(Error::Dimension { expected: n, got: self.w.nrows() });
        }
        if self.w.iter().any(|v| !(*v >= 0.0)) || (0..n).any(|i| self.w[(i, i)] != 0.0) {
            return Err(Error::Invalid("W must be nonnegative with zero diagonal".into()));
        }
        if self.p.len() + 1 != self.tau {
            return Err(Error::Invalid(format!(
                "need {} transition matrices, got {}",
                self.tau - 1,
                self.p.len()
            )));
        }
        for p in &self.p {
            if p.n() != n {
                return Err(Error::Dimension { expected: n, got: p.n() });
            }
            TransitionMatrix::new(p.0.clone())?;
        }
        if self.l1.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("L1 must be nonnegative".into()));
        }
        if self.fleet_size() < n as f64 {
            return Err(Error::Infeasible(format!(
                "fleet of {} taxis cannot cover {n} regions",
                self.fleet_size()
            )));
        }
        if self.m.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Invalid("reachability thresholds must be positive".into()));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Invalid("alpha and beta must be positive".into()));
        }
        Ok(())
    }

    pub fn fleet_size(&self) -> f64 {
        self.l1.sum()
    }

    pub fn mask(&self, k: usize) -> DMatrix<bool> {
        reachability_mask(&self.w, self.m[k])
    }

    /// Copy with a different initial fleet.
    pub fn with_l1(&self, l1: DVector<f64>) -> Result<Self> {
        let inst = Self { l1, ..self.clone() };
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line("instance".into());
        line(format!("n {}", self.n));
        line(format!("tau {}", self.tau));
        line(format!("alpha {}", textfmt::real(self.alpha)));
        line(format!("beta {}", textfmt::real(self.beta)));
        line(format!("m {}", textfmt::reals(&self.m)));
        line(format!("L1 {}", textfmt::reals(self.l1.iter())));
        line("W".into());
        for i in 0..self.n {
            line(textfmt::reals(self.w.row(i).iter()));
        }
        for (k, p) in self.p.iter().enumerate() {
            line(format!("P {}", k + 1));
            for i in 0..self.n {
                line(textfmt::reals(p.0.row(i).iter()));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        lines.expect("instance")?;
        let n = lines.expect_usize("n")?;
        let tau = lines.expect_usize("tau")?;
        let alpha = lines.expect_real("alpha")?;
        let beta = lines.expect_real("beta")?;
        let m = lines.expect_reals("m", tau)?;
        let l1 = DVector::from_vec(lines.expect_reals("L1", n)?);
        let read = |lines: &mut Lines| -> Result<DMatrix<f64>> {
            let mut out = DMatrix::zeros(n, n);
            for i in 0..n {
                for (j, v) in lines.row(n)?.into_iter().enumerate() {
                    out[(i, j)] = v;
                }
            }
            Ok(out)
        };
        lines.expect("W")?;
        let w = read(&mut lines)?;
        let mut p = Vec::new();
        for k in 1..tau {
            if lines.expect_usize("P")? != k {
                return Err(Error::Parse("transition matrices out of order".into()));
            }
            p.push(TransitionMatrix::new(read(&mut lines)?)?);
        }
        Self::new(w, p, l1, m, alpha, beta)
    }
}

/// Dispatch matrices X^1..X^tau and fleet vectors L^2..L^tau.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVars {
    pub x: Vec<DMatrix<f64>>,
    pub l: Vec<DVector<f64>>,
}

impl DecisionVars {
    pub fn zeros(inst: &DispatchInstance) -> Self {
        rollout(inst, vec![DMatrix::zeros(inst.n, inst.n); inst.tau])
    }

    /// Vacant taxis at stage `k` (0-based) before dispatch.
    pub fn fleet<'a>(&'a self, inst: &'a DispatchInstance, k: usize) -> &'a DVector<f64> {
        if k == 0 { &inst.l1 } else { &self.l[k - 1] }
    }

    pub fn supply(&self, inst: &DispatchInstance, k: usize) -> DVector<f64> {
        supply(&self.x[k], self.fleet(inst, k))
    }
}

/// Fleet vectors implied by the dynamics for the given dispatch matrices.
pub fn rollout(inst: &DispatchInstance, x: Vec<DMatrix<f64>>) -> DecisionVars {
    let mut l = Vec::with_capacity(inst.tau.saturating_sub(1));
    let mut current = inst.l1.clone();
    for k in 0..inst.tau.saturating_sub(1) {
        current = propagate_fleet(&x[k], &current, &inst.p[k]);
        l.push(current.clone());
    }
    DecisionVars { x, l }
}

/// Idle-driving cost `sum_ij X_ij W_ij`.
pub fn j_d(x: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    x.component_mul(w).sum()
}

/// `b_i = sum_j X_ji - sum_j X_ij + L_i`.
pub fn supply(x: &DMatrix<f64>, l: &DVector<f64>) -> DVector<f64> {
    let n = l.len();
    DVector::from_fn(n, |i, _| {
        let inflow: f64 = (0..n).map(|j| x[(j, i)]).sum();
        let outflow: f64 = (0..n).map(|j| x[(i, j)]).sum();
        inflow - outflow + l[i]
    })
}

fn positive_supply(x: &DMatrix<f64>, l: &DVector<f64>) -> Result<DVector<f64>> {
    let b = supply(x, l);
    match b.iter().position(|v| !(*v > 0.0)) {
        Some(index) => Err(Error::Domain { index, value: b[index] }),
        None => Ok(b),
    }
}

/// Fairness cost `sum_i r_i / b_i^alpha`.
pub fn j_e(x: &DMatrix<f64>, l: &DVector<f64>, r: &[f64], alpha: f64) -> Result<f64> {
    let b = positive_supply(x, l)?;
    if r.len() != b.len() {
        return Err(Error::Dimension { expected: b.len(), got: r.len() });
    }
    Ok(r.iter().zip(b.iter()).map(|(ri, bi)| ri * bi.powf(-alpha)).sum())
}

/// `sum_i |r_i / b_i - sum_j r_j / N|` with N the fleet size.
pub fn mismatch(x: &DMatrix<f64>, l: &DVector<f64>, r: &[f64]) -> Result<f64> {
    let b = positive_supply(x, l)?;
    if r.len() != b.len() {
        return Err(Error::Dimension { expected: b.len(), got: r.len() });
    }
    let global = r.iter().sum::<f64>() / l.sum();
    Ok(r.iter().zip(b.iter()).map(|(ri, bi)| (ri / bi - global).abs()).sum())
}

/// `L_next^T = supply(X, L)^T P`.
pub fn propagate_fleet(x: &DMatrix<f64>, l: &DVector<f64>, p: &TransitionMatrix) -> DVector<f64> {
    p.0.tr_mul(&supply(x, l))
}

/// `mask_ij = W_ij <= m`.
pub fn reachability_mask(w: &DMatrix<f64>, m: f64) -> DMatrix<bool> {
    w.map(|v| v <= m)
}

/// `c_i = beta b_i^-alpha` for one stage.
pub fn fairness_coefficients(
    x: &DMatrix<f64>,
    l: &DVector<f64>,
    alpha: f64,
    beta: f64,
) -> Result<DVector<f64>> {
    Ok(positive_supply(x, l)?.map(|b| beta * b.powf(-alpha)))
}

/// Concatenated `c(X^1), ..., c(X^tau)`.
pub fn stacked_coefficients(inst: &DispatchInstance, vars: &DecisionVars) -> Result<Vec<f64>> {
    let mut c = Vec::with_capacity(inst.tau * inst.n);
    for k in 0..inst.tau {
        c.extend(fairness_coefficients(&vars.x[k], vars.fleet(inst, k), inst.alpha, inst.beta)?.iter());
    }
    Ok(c)
}

pub fn total_idle(inst: &DispatchInstance, vars: &DecisionVars) -> f64 {
    vars.x.iter().map(|x| j_d(x, &inst.w)).sum()
}

/// `J(r_c, x) = sum_k j_d(X^k) + beta j_e(X^k, L^k, r^k)`.
pub fn total_cost(inst: &DispatchInstance, vars: &DecisionVars, r_c: &[f64]) -> Result<f64> {
    if r_c.len() != inst.tau * inst.n {
        return Err(Error::Dimension { expected: inst.tau * inst.n, got: r_c.len() });
    }
    let c = stacked_coefficients(inst, vars)?;
    Ok(total_idle(inst, vars) + c.iter().zip(r_c).map(|(a, b)| a * b).sum::<f64>())
}

/// Summed per-stage mismatch.
pub fn total_mismatch(inst: &DispatchInstance, vars: &DecisionVars, r_c: &[f64]) -> Result<f64> {
    let n = inst.n;
    (0..inst.tau)
        .map(|k| mismatch(&vars.x[k], vars.fleet(inst, k), &r_c[k * n..(k + 1) * n]))
        .sum()
}

/// Checks every hard constraint within `tol`.
pub fn check_feasible(inst: &DispatchInstance, vars: &DecisionVars, tol: f64) -> Result<()> {
    let n = inst.n;
    if vars.x.len() != inst.tau || vars.l.len() + 1 != inst.tau {
        return Err(Error::Dimension { expected: inst.tau, got: vars.x.len() });
    }
    for k in 0..inst.tau {
        let x = &vars.x[k];
        let mask = inst.mask(k);
        for i in 0..n {
            for j in 0..n {
                if x[(i, j)] < -tol {
                    return Err(Error::Infeasible(format!("X{}[{i},{j}] negative", k + 1)));
                }
                if i != j && !mask[(i, j)] && x[(i, j)] > tol {
                    return Err(Error::Infeasible(format!("X{}[{i},{j}] unreachable", k + 1)));
                }
            }
        }
        let b = vars.supply(inst, k);
        if let Some(i) = b.iter().position(|v| *v < 1.0 - tol) {
            return Err(Error::Infeasible(format!("stage {} supply b[{i}] = {}", k + 1, b[i])));
        }
        if k + 1 < inst.tau {
            let next = propagate_fleet(x, vars.fleet(inst, k), &inst.p[k]);
            if (&next - &vars.l[k]).amax() > tol * (1.0 + next.amax()) {
                return Err(Error::Infeasible(format!("fleet dynamics violated at stage {}", k + 2)));
            }
        }
    }
    Ok(())
}

/// Nominal program with fixed per-stage demand `r[k]`.
pub fn build_nominal(inst: &DispatchInstance, r: &[DVector<f64>]) -> Result<ConvexProgram> {
    reform::nominal_program(inst, r)
}
