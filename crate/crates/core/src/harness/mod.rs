//! Policy evaluation: receding-horizon simulation, cross-validation,
//! empirical guarantees and parameter sweeps.

pub mod config;
pub mod output;

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DemandSample, SampleSet, TransitionMatrix};
use crate::model::{self, DecisionVars, DispatchInstance};
use crate::reform::{self, ReformulationKind, RobustProblemSpec};
use crate::solve::{self, SolverOptions};
use crate::uncertainty::{self, BootstrapConfig, MatrixNorm, UncertaintySet};

pub use config::Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Plans against the training mean.
    Nonrobust,
    /// Plans against a bootstrapped box set.
    Box,
    /// Plans against a bootstrapped SOC set.
    Soc,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Nonrobust => "nonrobust",
            Self::Box => "box",
            Self::Soc => "soc",
        }
    }

    pub fn is_robust(&self) -> bool {
        *self != Self::Nonrobust
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonrobust" | "nominal" => Ok(Self::Nonrobust),
            "box" | "robust-box" => Ok(Self::Box),
            "soc" | "robust-soc" => Ok(Self::Soc),
            _ => Err(Error::Invalid(format!("unknown policy `{s}`"))),
        }
    }
}

/// Settings for building uncertainty sets from training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetConfig {
    pub epsilon: f64,
    pub alpha_h: f64,
    /// Number of bootstrap resamples.
    pub n_boot: usize,
    /// N_B of the s-index; raised to the smallest size giving a non-empty box.
    pub resample_size: Option<usize>,
    pub gamma2_norm: MatrixNorm,
}

impl Default for SetConfig {
    fn default() -> Self {
        Self { epsilon: 0.25, alpha_h: 0.05, n_boot: 200, resample_size: None, gamma2_norm: MatrixNorm::Frobenius }
    }
}

impl SetConfig {
    pub fn bootstrap(&self, tau: usize, n: usize, seed: u64) -> BootstrapConfig {
        let needed = uncertainty::required_resample_size(self.alpha_h, self.epsilon, tau, n);
        let m = self.resample_size.unwrap_or(needed).max(needed);
        BootstrapConfig {
            n_boot: self.n_boot,
            resample_size: m,
            alpha_h: self.alpha_h,
            epsilon: self.epsilon,
            seed,
            gamma2_norm: self.gamma2_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub solver: SolverOptions,
    pub sets: SetConfig,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, solver: SolverOptions::default(), sets: SetConfig::default() }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut p = self.clone();
        p.sets.epsilon = epsilon;
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.kind.is_robust() {
            BootstrapConfig::new(2, self.sets.alpha_h, self.sets.epsilon, 0).validate()?;
            if self.sets.n_boot < 2 {
                return Err(Error::Invalid("n_boot must be at least 2".into()));
            }
        }
        Ok(())
    }
}

/// What a policy knows about demand at one start slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    /// Mean concatenated demand of the training samples.
    pub mean: Vec<f64>,
    /// Uncertainty set for robust policies.
    pub set: Option<UncertaintySet>,
}

fn mean_vector(samples: &SampleSet) -> Vec<f64> {
    let d = samples.dim();
    let mut m = vec![0.0; d];
    for s in &samples.samples {
        for (a, b) in m.iter_mut().zip(&s.r_c) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= samples.len() as f64);
    m
}

pub fn build_demand_model(policy: &Policy, samples: &SampleSet, tau: usize, n: usize, seed: u64) -> Result<DemandModel> {
    if samples.is_empty() {
        return Err(Error::Invalid(format!("no training samples for slot {} `{}`", samples.t, samples.label)));
    }
    if samples.dim() != tau * n {
        return Err(Error::Dimension { expected: tau * n, got: samples.dim() });
    }
    let boot = policy.sets.bootstrap(tau, n, seed);
    let set = match policy.kind {
        PolicyKind::Nonrobust => None,
        PolicyKind::Box => Some(UncertaintySet::Box(uncertainty::bootstrap_box(samples, &boot, tau, n)?)),
        PolicyKind::Soc => Some(UncertaintySet::Soc(uncertainty::bootstrap_soc(samples, &boot)?)),
    };
    Ok(DemandModel { mean: mean_vector(samples), set })
}

/// Optimal plan of a policy for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub vars: DecisionVars,
    /// Optimal value: the robust bound M, or the nominal cost.
    pub objective: f64,
}

pub fn plan(inst: &DispatchInstance, kind: PolicyKind, dm: &DemandModel, opts: &SolverOptions) -> Result<Plan> {
    let program = match (kind, &dm.set) {
        (PolicyKind::Nonrobust, _) => {
            let n = inst.n;
            if dm.mean.len() != inst.tau * n {
                return Err(Error::Dimension { expected: inst.tau * n, got: dm.mean.len() });
            }
            let r: Vec<DVector<f64>> =
                (0..inst.tau).map(|k| DVector::from_column_slice(&dm.mean[k * n..(k + 1) * n])).collect();
            reform::nominal_program(inst, &r)?
        }
        (_, Some(set)) => reform::robust_counterpart(&RobustProblemSpec {
            instance: inst.clone(),
            set: set.clone(),
            kind: ReformulationKind::Auto,
        })?,
        (_, None) => return Err(Error::Invalid(format!("policy {} needs an uncertainty set", kind.as_str()))),
    };
    let sol = solve::solve_optimal(&program, opts)?;
    Ok(Plan { vars: sol.dispatch()?.clone(), objective: sol.objective })
}

/// Counts over fixed bin edges; `counts[0]` is below the first edge and the
/// last entry is at or above the last edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(edges: &[f64], values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0; edges.len() + 1];
        for v in values {
            counts[edges.partition_point(|e| *e <= v)] += 1;
        }
        Self { edges: edges.to_vec(), counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mismatch: f64,
    /// Idle driving distance of the applied dispatch.
    pub idle: f64,
    /// `idle + beta * j_e` against the realized demand.
    pub cost: f64,
    pub fleet: f64,
    pub dispatched: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub policy: PolicyKind,
    pub steps: Vec<StepMetrics>,
    pub mean_mismatch: f64,
    pub mean_idle: f64,
    pub mean_cost: f64,
    pub total_idle: f64,
    pub cost_histogram: Histogram,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 { 0.0 } else { v.sum::<f64>() / n as f64 }
}

impl RunMetrics {
    pub fn from_steps(policy: PolicyKind, steps: Vec<StepMetrics>, edges: &[f64]) -> Self {
        Self {
            policy,
            mean_mismatch: mean(steps.iter().map(|s| s.mismatch)),
            mean_idle: mean(steps.iter().map(|s| s.idle)),
            mean_cost: mean(steps.iter().map(|s| s.cost)),
            total_idle: steps.iter().map(|s| s.idle).sum(),
            cost_histogram: Histogram::new(edges, steps.iter().map(|s| s.cost)),
            steps,
        }
    }
}

/// Inputs of a receding-horizon run. Models and transitions are indexed by
/// step and repeat cyclically.
#[derive(Debug, Clone)]
pub struct Horizon<'a> {
    pub template: &'a DispatchInstance,
    /// Demand model used when planning at each step.
    pub models: &'a [DemandModel],
    /// `transitions[t]` moves the fleet from step t to t+1.
    pub transitions: &'a [TransitionMatrix],
    /// Realized regional demand per step.
    pub stream: &'a [Vec<f64>],
    pub histogram_edges: &'a [f64],
}

/// Plan at every step, apply the first-stage dispatch, score it against the
/// realized demand and roll the fleet forward.
pub fn run_receding_horizon(h: &Horizon, policy: &Policy) -> Result<RunMetrics> {
    policy.validate()?;
    let tmpl = h.template;
    let n = tmpl.n;
    if h.models.is_empty() || h.transitions.is_empty() {
        return Err(Error::Invalid("need at least one demand model and transition matrix".into()));
    }
    if let Some(bad) = h.stream.iter().position(|r| r.len() != n) {
        return Err(Error::StepFailed { step: bad, reason: format!("realized demand has length {}", h.stream[bad].len()) });
    }
    let mut fleet = tmpl.l1.clone();
    let mut steps = Vec::with_capacity(h.stream.len());
    for (t, realized) in h.stream.iter().enumerate() {
        let fail = |e: Error| Error::StepFailed { step: t, reason: e.to_string() };
        let p = (0..tmpl.tau - 1).map(|k| h.transitions[(t + k) % h.transitions.len()].clone()).collect();
        let inst = DispatchInstance { l1: fleet.clone(), p, ..tmpl.clone() };
        inst.validate().map_err(fail)?;
        let plan = plan(&inst, policy.kind, &h.models[t % h.models.len()], &policy.solver).map_err(fail)?;
        let x = &plan.vars.x[0];
        let idle = model::j_d(x, &tmpl.w);
        let je = model::j_e(x, &fleet, realized, tmpl.alpha).map_err(fail)?;
        steps.push(StepMetrics {
            step: t,
            mismatch: model::mismatch(x, &fleet, realized).map_err(fail)?,
            idle,
            cost: idle + tmpl.beta * je,
            fleet: fleet.sum(),
            dispatched: x.sum(),
        });
        fleet = model::propagate_fleet(x, &fleet, &h.transitions[t % h.transitions.len()]);
    }
    Ok(RunMetrics::from_steps(policy.kind, steps, h.histogram_edges))
}

/// Fraction of `samples` whose cost under `vars` is at most `bound`.
pub fn empirical_guarantee(inst: &DispatchInstance, bound: f64, vars: &DecisionVars, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(1.0);
    }
    // absorbs rounding in the solver's reported optimum
    let slack = 1e-9 * bound.abs().max(1.0);
    let mut hits = 0usize;
    for r in samples {
        if model::total_cost(inst, vars, r)? <= bound + slack {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Date-level train/test split; both sides are non-empty.
pub fn split_dates(samples: &[DemandSample], split_ratio: f64, seed: u64) -> Result<(Vec<NaiveDate>, Vec<NaiveDate>)> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Invalid(format!("split ratio {split_ratio} not in [0,1]")));
    }
    let mut dates: Vec<NaiveDate> = samples.iter().map(|s| s.date).collect::<BTreeSet<_>>().into_iter().collect();
    let n_train = (split_ratio * dates.len() as f64).round() as usize;
    if n_train == 0 || n_train >= dates.len() {
        return Err(Error::Invalid(format!(
            "split ratio {split_ratio} over {} dates leaves an empty side",
            dates.len()
        )));
    }
    dates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = dates.split_off(n_train);
    dates.sort();
    test.sort();
    Ok((dates, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub split_ratio: f64,
    pub seed: u64,
    /// Build one model per sample label instead of pooling.
    pub partition: bool,
    pub histogram_edges: Vec<f64>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { split_ratio: 0.7, seed: 0, partition: false, histogram_edges: Vec::new() }
    }
}

/// Metrics of both policies on one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub date: NaiveDate,
    pub t: usize,
    pub label: String,
    pub cost: [f64; 2],
    pub mismatch: [f64; 2],
    pub idle: [f64; 2],
    /// Cost within the policy's optimal value.
    pub within_bound: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: PolicyKind,
    pub epsilon: f64,
    /// Mean over models of the optimal value M.
    pub optimum: f64,
    pub mean_cost: f64,
    pub mean_mismatch: f64,
    pub mean_idle: f64,
    pub guarantee: f64,
    pub cost_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub train_dates: Vec<NaiveDate>,
    pub test_dates: Vec<NaiveDate>,
    pub rows: Vec<PairedRow>,
    pub summaries: [PolicySummary; 2],
}

fn model_key(s: &DemandSample, partition: bool) -> (usize, String) {
    (s.t, if partition { s.label.clone() } else { "all".into() })
}

fn group(samples: &[&DemandSample], partition: bool) -> BTreeMap<(usize, String), SampleSet> {
    let mut out: BTreeMap<(usize, String), SampleSet> = BTreeMap::new();
    for s in samples {
        let key = model_key(s, partition);
        out.entry(key.clone())
            .or_insert_with(|| SampleSet { t: key.0, label: key.1, samples: Vec::new() })
            .samples
            .push((*s).clone());
    }
    out
}

/// Plans built on the training dates, then both policies scored on the same
/// test samples.
pub fn cross_validate(
    template: &DispatchInstance,
    samples: &[DemandSample],
    policies: [&Policy; 2],
    opts: &CvOptions,
) -> Result<CrossValidation> {
    if samples.len() < 10 {
        return Err(Error::Invalid(format!("cross-validation needs at least 10 samples, got {}", samples.len())));
    }
    for p in policies {
        p.validate()?;
    }
    let (train_dates, test_dates) = split_dates(samples, opts.split_ratio, opts.seed)?;
    let train_set: BTreeSet<_> = train_dates.iter().collect();
    let (train, test): (Vec<&DemandSample>, Vec<&DemandSample>) =
        samples.iter().partition(|s| train_set.contains(&s.date));
    let groups = group(&train, opts.partition);
    for s in &test {
        if !groups.contains_key(&model_key(s, opts.partition)) {
            return Err(Error::Invalid(format!("no training samples for slot {} `{}`", s.t, s.label)));
        }
    }

    let mut plans: Vec<BTreeMap<(usize, String), Plan>> = Vec::new();
    for p in policies {
        let built = groups
            .iter()
            .map(|(key, set)| {
                let dm = build_demand_model(p, set, template.tau, template.n, opts.seed)?;
                Ok((key.clone(), plan(template, p.kind, &dm, &p.solver)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        plans.push(built);
    }

    let mut rows = Vec::with_capacity(test.len());
    for s in &test {
        let key = model_key(s, opts.partition);
        let mut row = PairedRow {
            date: s.date,
            t: s.t,
            label: s.label.clone(),
            cost: [0.0; 2],
            mismatch: [0.0; 2],
            idle: [0.0; 2],
            within_bound: [false; 2],
        };
        for (a, ps) in plans.iter().enumerate() {
            let pl = &ps[&key];
            row.cost[a] = model::total_cost(template, &pl.vars, &s.r_c)?;
            row.mismatch[a] = model::total_mismatch(template, &pl.vars, &s.r_c)?;
            row.idle[a] = model::total_idle(template, &pl.vars);
            row.within_bound[a] = empirical_guarantee(template, pl.objective, &pl.vars, std::slice::from_ref(&s.r_c))? == 1.0;
        }
        rows.push(row);
    }

    let summary = |a: usize| PolicySummary {
        policy: policies[a].kind,
        epsilon: policies[a].sets.epsilon,
        optimum: mean(plans[a].values().map(|p| p.objective).collect::<Vec<_>>().into_iter()),
        mean_cost: mean(rows.iter().map(|r| r.cost[a])),
        mean_mismatch: mean(rows.iter().map(|r| r.mismatch[a])),
        mean_idle: mean(rows.iter().map(|r| r.idle[a])),
        guarantee: mean(rows.iter().map(|r| if r.within_bound[a] { 1.0 } else { 0.0 })),
        cost_histogram: Histogram::new(&opts.histogram_edges, rows.iter().map(|r| r.cost[a])),
    };
    let summaries = [summary(0), summary(1)];
    Ok(CrossValidation { train_dates, test_dates, rows, summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub policy: PolicyKind,
    /// `None` for the nonrobust baseline.
    pub epsilon: Option<f64>,
    pub optimum: f64,
    pub mean_test_cost: f64,
    pub guarantee: f64,
}

/// One cross-validation per epsilon, run in parallel, followed by the
/// nonrobust baseline row.
pub fn sweep_epsilon(
    template: &DispatchInstance,
    samples: &[DemandSample],
    policy: &Policy,
    epsilons: &[f64],
    opts: &CvOptions,
) -> Result<Vec<EpsilonRow>> {
    if !policy.kind.is_robust() {
        return Err(Error::Invalid("epsilon sweep needs a robust policy".into()));
    }
    let baseline = Policy { kind: PolicyKind::Nonrobust, ..policy.clone() };
    let cells: Vec<Result<CrossValidation>> = epsilons
        .par_iter()
        .map(|&eps| cross_validate(template, samples, [&policy.with_epsilon(eps), &baseline], opts))
        .collect();
    let mut rows = Vec::with_capacity(epsilons.len() + 1);
    let mut base = None;
    for (cell, &eps) in cells.into_iter().zip(epsilons) {
        let cv = cell?;
        let s = &cv.summaries[0];
        rows.push(EpsilonRow {
            policy: policy.kind,
            epsilon: Some(eps),
            optimum: s.optimum,
            mean_test_cost: s.mean_cost,
            guarantee: s.guarantee,
        });
        base.get_or_insert_with(|| cv.summaries[1].clone());
    }
    let base = match base {
        Some(b) => b,
        None => cross_validate(template, samples, [&baseline, &baseline], opts)?.summaries[0].clone(),
    };
    rows.push(EpsilonRow {
        policy: PolicyKind::Nonrobust,
        epsilon: None,
        optimum: base.optimum,
        mean_test_cost: base.mean_cost,
        guarantee: base.guarantee,
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub mismatch: f64,
    pub fairness: f64,
}

/// Minimize the fairness cost alone for each alpha and report the mismatch
/// of the optimal dispatch.
/// Weight left on idle distance when minimizing fairness cost alone.
const TIE_BREAK: f64 = 1e-6;

pub fn sweep_alpha(inst: &DispatchInstance, r: &[DVector<f64>], alphas: &[f64], opts: &SolverOptions) -> Result<Vec<AlphaRow>> {
    if r.iter().flatten().any(|v| *v < 1.0) {
        return Err(Error::Invalid("alpha sweep needs demand of at least 1 in every region".into()));
    }
    let r_c: Vec<f64> = r.iter().flat_map(|v| v.iter().copied()).collect();
    alphas
        .par_iter()
        .map(|&alpha| {
            let inst = DispatchInstance { alpha, ..inst.clone() };
            inst.validate()?;
            let mut program = reform::nominal_program(&inst, r)?;
            let layout = program.layout.as_ref().expect("nominal program has a layout");
            let dispatch: BTreeSet<usize> = layout.x_index.iter().flatten().flatten().copied().collect();
            // a vanishing idle-distance weight keeps cyclic flows bounded
            for (j, c) in program.objective.terms.iter_mut() {
                if dispatch.contains(j) {
                    *c *= TIE_BREAK;
                }
            }
            let sol = solve::solve_optimal(&program, opts)?;
            let vars = sol.dispatch()?;
            let fairness: f64 = (0..inst.tau)
                .map(|k| model::j_e(&vars.x[k], vars.fleet(&inst, k), r[k].as_slice(), alpha))
                .sum::<Result<f64>>()?;
            Ok(AlphaRow { alpha, mismatch: model::total_mismatch(&inst, vars, &r_c)?, fairness })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn line3() -> DispatchInstance {
        let w = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64).abs());
        DispatchInstance::new(w, vec![], DVector::from_vec(vec![6.0, 2.0, 1.0]), vec![5.0], 0.5, 10.0).unwrap()
    }

    fn samples(n_days: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Vec<DemandSample> {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        (0..n_days)
            .map(|i| DemandSample {
                date: start + chrono::Days::new(i as u64),
                t: 0,
                label: if i % 2 == 0 { "a".into() } else { "b".into() },
                r_c: (0..d).map(|j| f(i, j)).collect(),
            })
            .collect()
    }

    #[test]
    fn policy_tags() {
        for k in [PolicyKind::Nonrobust, PolicyKind::Box, PolicyKind::Soc] {
            assert_eq!(k.as_str().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("robust".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(&[0.0, 1.0, 2.0], [-1.0, 0.0, 0.5, 1.0, 5.0]);
        assert_eq!(h.counts, vec![1, 2, 1, 1]);
        assert_eq!(Histogram::new(&[], [1.0, 2.0]).counts, vec![2]);
    }

    #[test]
    fn zero_demand_stream_dispatches_nothing() {
        let inst = line3();
        let models = [DemandModel { mean: vec![0.0; 3], set: None }];
        let stream = vec![vec![0.0; 3]; 4];
        let tr = [TransitionMatrix::uniform(3)];
        let h = Horizon { template: &inst, models: &models, transitions: &tr, stream: &stream, histogram_edges: &[] };
        let m = run_receding_horizon(&h, &Policy::new(PolicyKind::Nonrobust)).unwrap();
        assert_eq!(m.steps.len(), 4);
        for s in &m.steps {
            assert!(s.dispatched < 1e-6 && s.idle < 1e-6, "{s:?}");
            assert!((s.fleet - 9.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_step_window_is_one_solve() {
        let inst = line3();
        let r = vec![1.0, 4.0, 6.0];
        let dm = DemandModel { mean: r.clone(), set: None };
        let stream = vec![r.clone()];
        let tr = [TransitionMatrix::identity(3)];
        let h = Horizon {
            template: &inst,
            models: std::slice::from_ref(&dm),
            transitions: &tr,
            stream: &stream,
            histogram_edges: &[],
        };
        let m = run_receding_horizon(&h, &Policy::new(PolicyKind::Nonrobust)).unwrap();
        let p = plan(&inst, PolicyKind::Nonrobust, &dm, &SolverOptions::default()).unwrap();
        assert!((m.steps[0].cost - p.objective).abs() < 1e-6 * p.objective);
        assert!((m.steps[0].mismatch - model::total_mismatch(&inst, &p.vars, &r).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fleet_is_conserved() {
        let inst = line3();
        let models = [DemandModel { mean: vec![5.0, 1.0, 3.0], set: None }];
        let stream: Vec<Vec<f64>> = (0..5).map(|t| vec![1.0 + t as f64, 2.0, 5.0 - t as f64]).collect();
        let p = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4]);
        let tr = [TransitionMatrix::new(p).unwrap()];
        let h = Horizon { template: &inst, models: &models, transitions: &tr, stream: &stream, histogram_edges: &[] };
        let m = run_receding_horizon(&h, &Policy::new(PolicyKind::Nonrobust)).unwrap();
        for s in &m.steps {
            assert!((s.fleet - 9.0).abs() <= 1e-9 * 9.0);
        }
    }

    #[test]
    fn split_rejects_degenerate_ratios() {
        let s = samples(12, 3, |_, _| 1.0);
        assert!(split_dates(&s, 1.0, 0).is_err());
        assert!(split_dates(&s, 0.0, 0).is_err());
        let (a, b) = split_dates(&s, 0.5, 3).unwrap();
        assert_eq!(a.len() + b.len(), 12);
        assert!(a.iter().all(|d| !b.contains(d)));
        assert_eq!(split_dates(&s, 0.5, 3).unwrap(), (a, b));
    }

    #[test]
    fn cross_validation_needs_ten_samples() {
        let inst = line3();
        let p = Policy::new(PolicyKind::Nonrobust);
        let few = samples(9, 3, |_, _| 1.0);
        assert!(cross_validate(&inst, &few, [&p, &p], &CvOptions::default()).is_err());
        let ok = samples(12, 3, |_, _| 1.0);
        let opts = CvOptions { split_ratio: 1.0, ..CvOptions::default() };
        assert!(cross_validate(&inst, &ok, [&p, &p], &opts).is_err());
    }

    #[test]
    fn identical_samples_give_identical_policies() {
        let inst = line3();
        let s = samples(20, 3, |_, j| [2.0, 3.0, 4.0][j]);
        let cv = cross_validate(
            &inst,
            &s,
            [&Policy::new(PolicyKind::Box), &Policy::new(PolicyKind::Nonrobust)],
            &CvOptions::default(),
        )
        .unwrap();
        let (a, b) = (&cv.summaries[0], &cv.summaries[1]);
        assert!((a.mean_cost - b.mean_cost).abs() < 1e-6 * b.mean_cost);
        assert!((a.mean_mismatch - b.mean_mismatch).abs() < 1e-5);
        assert_eq!(a.guarantee, 1.0);
    }

    #[test]
    fn guarantee_is_one_inside_the_set() {
        let inst = line3();
        let s = samples(40, 3, |i, j| 1.0 + ((i * 7 + j * 3) % 5) as f64);
        let set = SampleSet { t: 0, label: "all".into(), samples: s.clone() };
        let policy = Policy::new(PolicyKind::Box);
        let dm = build_demand_model(&policy, &set, 1, 3, 1).unwrap();
        let pl = plan(&inst, PolicyKind::Box, &dm, &policy.solver).unwrap();
        let UncertaintySet::Box(b) = dm.set.as_ref().unwrap() else { unreachable!() };
        let inside: Vec<Vec<f64>> =
            s.iter().map(|x| x.r_c.iter().zip(&b.upper).zip(&b.lower).map(|((v, u), l)| v.clamp(*l, *u)).collect()).collect();
        assert_eq!(empirical_guarantee(&inst, pl.objective, &pl.vars, &inside).unwrap(), 1.0);
    }

    #[test]
    fn single_region_alpha_sweep_is_zero() {
        let inst = DispatchInstance::new(DMatrix::zeros(1, 1), vec![], DVector::from_vec(vec![3.0]), vec![1.0], 1.0, 1.0)
            .unwrap();
        let rows = sweep_alpha(&inst, &[DVector::from_vec(vec![4.0])], &[1.0, 0.5, 0.1], &SolverOptions::default()).unwrap();
        assert!(rows.iter().all(|r| r.mismatch.abs() < 1e-9));
    }

    #[test]
    fn balanced_alpha_sweep_is_near_zero() {
        // the fairness optimum puts b proportional to r^(1/(1+alpha)), so only
        // uniform demand on a uniform fleet keeps X = 0 optimal for every alpha
        let inst = line3().with_l1(DVector::from_vec(vec![3.0, 3.0, 3.0])).unwrap();
        let zero = DMatrix::zeros(3, 3);
        assert!(model::mismatch(&zero, &line3().l1, &[12.0, 4.0, 2.0]).unwrap() < 1e-12);
        let r = DVector::from_vec(vec![5.0, 5.0, 5.0]);
        let rows = sweep_alpha(&inst, &[r], &[1.0, 0.5, 0.25, 0.1], &SolverOptions::default()).unwrap();
        for row in rows {
            assert!(row.mismatch < 1e-5, "{row:?}");
        }
    }

    #[test]
    fn epsilon_sweep_has_baseline_row() {
        let inst = line3();
        let s = samples(30, 3, |i, j| 1.0 + ((i * 5 + j * 2) % 7) as f64);
        let rows = sweep_epsilon(&inst, &s, &Policy::new(PolicyKind::Box), &[0.2, 0.4], &CvOptions::default()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].policy, PolicyKind::Nonrobust);
        assert!(rows[2].epsilon.is_none());
        assert!(rows[0].optimum >= rows[1].optimum - 1e-6 * rows[1].optimum);
    }
}
