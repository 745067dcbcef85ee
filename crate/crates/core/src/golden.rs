//! Seeded tiny instances used as a regression suite against the
//! brute-force oracle.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::TransitionMatrix;
use crate::model::DispatchInstance;
use crate::uncertainty::{BoxSet, PolytopeSet, SocSet, StagePolytope, UncertaintySet};

#[derive(Debug, Clone)]
pub struct GoldenCase {
    pub name: String,
    pub instance: DispatchInstance,
    pub set: UncertaintySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoldenSet {
    Box,
    PerStage,
    Coupled,
    Soc,
}

impl GoldenSet {
    pub const ALL: [GoldenSet; 4] = [Self::Box, Self::PerStage, Self::Coupled, Self::Soc];

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::PerStage => "per-stage",
            Self::Coupled => "coupled",
            Self::Soc => "soc",
        }
    }
}

/// Random instance on `n` regions laid out on a line with unit spacing.
pub fn tiny_instance(n: usize, tau: usize, seed: u64) -> DispatchInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<f64> = (0..n).map(|i| i as f64 + 0.3 * rng.random::<f64>()).collect();
    let scale = 0.2 + 0.6 * rng.random::<f64>();
    let w = DMatrix::from_fn(n, n, |i, j| scale * (pos[i] - pos[j]).abs());
    let p = (1..tau)
        .map(|_| {
            let mut m = DMatrix::from_fn(n, n, |i, j| rng.random::<f64>() + if i == j { 1.0 } else { 0.2 });
            for i in 0..n {
                let s = m.row(i).sum();
                m.row_mut(i).scale_mut(1.0 / s);
            }
            TransitionMatrix::new(m).expect("rows normalized")
        })
        .collect();
    let l1 = DVector::from_fn(n, |_, _| (1.0 + 6.0 * rng.random::<f64>()).round());
    let mut l1 = l1;
    if l1.sum() < n as f64 + 2.0 {
        l1[0] += 3.0;
    }
    // reach every pair except, now and then, the farthest one
    let far = w.max();
    let m = (0..tau).map(|_| if rng.random::<f64>() < 0.3 { 0.99 * far } else { far + 1.0 }).collect();
    let alpha = [0.1, 0.5, 1.0][rng.random_range(0..3)];
    DispatchInstance::new(w, p, l1, m, alpha, 10.0).expect("valid tiny instance")
}

fn demand_box(d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let lower: Vec<f64> = (0..d).map(|_| 1.0 + 4.0 * rng.random::<f64>()).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + 0.5 + 4.0 * rng.random::<f64>()).collect();
    (lower, upper)
}

pub fn tiny_set(kind: GoldenSet, n: usize, tau: usize, seed: u64) -> UncertaintySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = n * tau;
    let (lower, upper) = demand_box(d, &mut rng);
    match kind {
        GoldenSet::Box => UncertaintySet::Box(BoxSet::new(lower, upper).expect("ordered bounds")),
        GoldenSet::PerStage => {
            // box rows plus a per-stage budget that cuts the upper corner
            let stages = (0..tau)
                .map(|k| {
                    let mut a = DMatrix::zeros(2 * n + 1, n);
                    let mut b = DVector::zeros(2 * n + 1);
                    for i in 0..n {
                        a[(i, i)] = 1.0;
                        a[(n + i, i)] = -1.0;
                        b[i] = upper[k * n + i];
                        b[n + i] = -lower[k * n + i];
                        a[(2 * n, i)] = 1.0;
                    }
                    let lo: f64 = lower[k * n..(k + 1) * n].iter().sum();
                    let hi: f64 = upper[k * n..(k + 1) * n].iter().sum();
                    b[2 * n] = lo + (0.4 + 0.4 * rng.random::<f64>()) * (hi - lo);
                    StagePolytope { a, b }
                })
                .collect();
            UncertaintySet::Polytope(PolytopeSet::PerStage(stages))
        }
        GoldenSet::Coupled => {
            // box rows per stage plus one budget across all stages
            let rows = 2 * d + 1;
            let mut rhs = DVector::zeros(rows);
            let blocks = (0..tau)
                .map(|k| {
                    let mut a = DMatrix::zeros(rows, n);
                    for i in 0..n {
                        let l = k * n + i;
                        a[(l, i)] = 1.0;
                        a[(d + l, i)] = -1.0;
                        a[(2 * d, i)] = 1.0;
                    }
                    a
                })
                .collect();
            for l in 0..d {
                rhs[l] = upper[l];
                rhs[d + l] = -lower[l];
            }
            let lo: f64 = lower.iter().sum();
            let hi: f64 = upper.iter().sum();
            rhs[2 * d] = lo + (0.3 + 0.4 * rng.random::<f64>()) * (hi - lo);
            UncertaintySet::Polytope(PolytopeSet::Coupled { blocks, rhs })
        }
        GoldenSet::Soc => {
            let mean = DVector::from_fn(d, |i, _| 0.5 * (lower[i] + upper[i]) + 2.0);
            let g = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
            let sigma = &g * g.transpose() * 0.5;
            let gamma1 = 0.2 + 0.6 * rng.random::<f64>();
            let gamma2 = 0.05 + 0.2 * rng.random::<f64>();
            let eps = [0.2, 0.3, 0.5][rng.random_range(0..3)];
            UncertaintySet::Soc(SocSet::from_moments(mean, sigma, gamma1, gamma2, eps).expect("psd"))
        }
    }
}

/// 24 cases: every set kind on every `(n, tau)` in `{2,3} x {1,2}`, with an
/// extra seed for the two-region shapes.
pub fn golden_suite() -> Vec<GoldenCase> {
    let mut out = Vec::new();
    let shapes = [(2, 1, 2), (2, 2, 2), (3, 1, 1), (3, 2, 1)];
    for (si, &(n, tau, reps)) in shapes.iter().enumerate() {
        for rep in 0..reps {
            for (ki, kind) in GoldenSet::ALL.iter().enumerate() {
                let seed = 1000 * si as u64 + 100 * rep as u64 + ki as u64;
                out.push(GoldenCase {
                    name: format!("{}-n{n}-t{tau}-s{seed}", kind.tag()),
                    instance: tiny_instance(n, tau, seed),
                    set: tiny_set(*kind, n, tau, seed),
                });
            }
        }
    }
    out
}
