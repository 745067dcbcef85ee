use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use serde::Serialize;

use dispatch_core::harness::output::{self, to_json};
use dispatch_core::harness::{self, Config, CrossValidation, DemandModel, Horizon, PolicyKind, RunMetrics};
use dispatch_core::ingest::{self, DemandSample, SampleSet, TimeDiscretization};
use dispatch_core::reform::{self, ReformulationKind, RobustProblemSpec};
use dispatch_core::solve;
use dispatch_core::textfmt::real;
use dispatch_core::uncertainty::{self, UncertaintySet};

use crate::{Common, DataArgs};

struct Ctx {
    cfg: Config,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let cfg = Config::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
        let seed = common.seed.unwrap_or(cfg.seed);
        fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self { cfg, seed, out: common.out.clone() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn summary<T: Serialize>(&self, command: &str, body: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a, T> {
            command: &'a str,
            seed: u64,
            #[serde(flatten)]
            body: &'a T,
        }
        self.write("summary.json", &to_json(&Summary { command, seed: self.seed, body })?)
    }

    fn samples(&self, data: &DataArgs) -> Result<Vec<DemandSample>> {
        let samples = match &data.samples {
            Some(p) => output::read_samples(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
            None => ingest::synth_generate(&self.cfg.generator, self.seed)?,
        };
        let d = self.cfg.n * self.cfg.tau;
        if let Some(bad) = samples.iter().find(|s| s.r_c.len() != d) {
            bail!("sample for {} has {} entries, expected {d}", bad.date, bad.r_c.len());
        }
        if samples.is_empty() {
            bail!("no demand samples");
        }
        Ok(samples)
    }

    fn groups(&self, samples: &[DemandSample]) -> BTreeMap<ingest::SetKey, SampleSet> {
        if self.cfg.harness.partition {
            let labels: BTreeMap<_, _> = samples.iter().map(|s| (s.date, s.label.clone())).collect();
            ingest::partition(samples, |d| labels[&d].clone())
        } else {
            ingest::partition(samples, |_| "all".to_string())
        }
    }
}

pub fn ingest(common: &Common, input: &Path) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let parsed = ingest::parse_trips(file, &cfg.schema)?;
    let grid = cfg.region_grid()?;
    let disc = TimeDiscretization::new(cfg.slot_seconds)?;
    let dates = ingest::trip_dates(&parsed.records);
    let samples = ingest::aggregate_demand(&parsed.records, &grid, &disc, cfg.tau, &dates);
    output::write_samples(ctx.create("samples.csv")?, &samples)?;

    let mut w = ctx.create("transitions.csv")?;
    {
        use std::io::Write;
        writeln!(w, "slot,from,to,probability")?;
        for k in 0..disc.k() {
            let p = ingest::estimate_transition(&parsed.records, &grid, &disc, k);
            for i in 0..grid.n() {
                for j in 0..grid.n() {
                    writeln!(w, "{k},{i},{j},{}", real(p.0[(i, j)]))?;
                }
            }
        }
    }

    #[derive(Serialize)]
    struct Body {
        records: usize,
        skipped: usize,
        dates: usize,
        samples: usize,
        regions: usize,
        slots_per_day: usize,
    }
    ctx.summary(
        "ingest",
        &Body {
            records: parsed.records.len(),
            skipped: parsed.skipped,
            dates: dates.len(),
            samples: samples.len(),
            regions: grid.n(),
            slots_per_day: disc.k(),
        },
    )
}

pub fn synth(common: &Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let days = ingest::synth_days(&ctx.cfg.generator, ctx.seed)?;
    let samples = ingest::samples_from_days(&days, ctx.cfg.n, ctx.cfg.tau);
    output::write_samples(ctx.create("samples.csv")?, &samples)?;

    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for d in &days {
        *labels.entry(d.label.clone()).or_default() += 1;
    }
    let d = ctx.cfg.n * ctx.cfg.tau;
    let mean: Vec<f64> = (0..d)
        .map(|i| samples.iter().map(|s| s.r_c[i]).sum::<f64>() / samples.len().max(1) as f64)
        .collect();

    #[derive(Serialize)]
    struct Body {
        days: usize,
        samples: usize,
        days_per_label: BTreeMap<String, usize>,
        mean_demand: Vec<f64>,
    }
    ctx.summary("synth", &Body { days: days.len(), samples: samples.len(), days_per_label: labels, mean_demand: mean })
}

#[derive(Serialize)]
struct SetSummary {
    t: usize,
    label: String,
    samples: usize,
    resample_size: usize,
    box_width: f64,
    gamma1: f64,
    gamma2: f64,
    box_file: String,
    soc_file: String,
}

pub fn build_sets(common: &Common, data: &DataArgs) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let samples = ctx.samples(data)?;
    let boot = cfg.sets.bootstrap(cfg.tau, cfg.n, ctx.seed);
    let mut sets = Vec::new();
    for (key, group) in ctx.groups(&samples) {
        let b = uncertainty::bootstrap_box(&group, &boot, cfg.tau, cfg.n)?;
        let s = uncertainty::bootstrap_soc(&group, &boot)?;
        let box_file = format!("sets/box_t{}_{}.txt", key.t, key.label);
        let soc_file = format!("sets/soc_t{}_{}.txt", key.t, key.label);
        let width = uncertainty::set_width(&b);
        let (gamma1, gamma2) = (s.gamma1, s.gamma2);
        ctx.write(&box_file, &UncertaintySet::Box(b).to_text())?;
        ctx.write(&soc_file, &UncertaintySet::Soc(s).to_text())?;
        sets.push(SetSummary {
            t: key.t,
            label: key.label,
            samples: group.len(),
            resample_size: boot.resample_size,
            box_width: width,
            gamma1,
            gamma2,
            box_file,
            soc_file,
        });
    }

    #[derive(Serialize)]
    struct Body {
        epsilon: f64,
        alpha_h: f64,
        s_index: usize,
        sets: Vec<SetSummary>,
    }
    let s_index = uncertainty::compute_s_index(boot.resample_size, boot.alpha_h, boot.epsilon, cfg.tau, cfg.n);
    ctx.summary("build-sets", &Body { epsilon: boot.epsilon, alpha_h: boot.alpha_h, s_index, sets })
}

pub fn solve_once(common: &Common, data: &DataArgs, slot: usize) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let samples: Vec<DemandSample> = ctx.samples(data)?.into_iter().filter(|s| s.t == slot).collect();
    if samples.is_empty() {
        bail!("no samples start at slot {slot}");
    }
    let set = SampleSet { t: slot, label: "all".into(), samples };
    let policy = cfg.policy(cfg.policy);
    let dm = harness::build_demand_model(&policy, &set, cfg.tau, cfg.n, ctx.seed)?;
    let inst = cfg.instance()?;
    let program = match &dm.set {
        Some(s) => reform::robust_counterpart(&RobustProblemSpec {
            instance: inst.clone(),
            set: s.clone(),
            kind: ReformulationKind::Auto,
        })?,
        None => {
            let n = cfg.n;
            let r: Vec<DVector<f64>> =
                (0..cfg.tau).map(|k| DVector::from_column_slice(&dm.mean[k * n..(k + 1) * n])).collect();
            reform::nominal_program(&inst, &r)?
        }
    };
    let sol = solve::solve_optimal(&program, &policy.solver)?;
    let verify = solve::verify_solution(&sol, &program, Some(&inst), 1e-6);
    let rounded = solve::round_solution(&inst, &program, &sol, &policy.solver)?;

    ctx.write("instance.txt", &inst.to_text())?;
    ctx.write("program.txt", &program.to_text())?;
    ctx.write("solution.txt", &sol.to_text())?;
    if let Some(s) = &dm.set {
        ctx.write("set.txt", &s.to_text())?;
    }
    {
        use std::io::Write;
        let mut w = ctx.create("dispatch.csv")?;
        writeln!(w, "stage,from,to,continuous,rounded")?;
        let vars = sol.dispatch()?;
        for (k, x) in vars.x.iter().enumerate() {
            for i in 0..cfg.n {
                for j in 0..cfg.n {
                    if i != j {
                        writeln!(w, "{},{i},{j},{},{}", k + 1, real(x[(i, j)]), real(rounded.vars.x[k][(i, j)]))?;
                    }
                }
            }
        }
    }

    #[derive(Serialize)]
    struct Body<'a> {
        policy: PolicyKind,
        slot: usize,
        status: &'a str,
        objective: f64,
        newton_steps: usize,
        relative_gap: f64,
        verify: &'a solve::VerifyReport,
        rounded_objective: f64,
        rounding_degradation: f64,
        rounded_integral: bool,
    }
    ctx.summary(
        "solve-once",
        &Body {
            policy: cfg.policy,
            slot,
            status: sol.status.as_str(),
            objective: sol.objective,
            newton_steps: sol.report.newton_steps,
            relative_gap: sol.report.relative_gap,
            verify: &verify,
            rounded_objective: rounded.rounded_objective,
            rounding_degradation: rounded.degradation,
            rounded_integral: rounded.integral,
        },
    )
}

#[derive(Serialize)]
struct RunSummary {
    policy: PolicyKind,
    steps: usize,
    mean_mismatch: f64,
    mean_idle: f64,
    mean_cost: f64,
    total_idle: f64,
    cost_histogram: harness::Histogram,
}

impl From<&RunMetrics> for RunSummary {
    fn from(m: &RunMetrics) -> Self {
        Self {
            policy: m.policy,
            steps: m.steps.len(),
            mean_mismatch: m.mean_mismatch,
            mean_idle: m.mean_idle,
            mean_cost: m.mean_cost,
            total_idle: m.total_idle,
            cost_histogram: m.cost_histogram.clone(),
        }
    }
}

pub fn simulate(common: &Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let gen = &cfg.generator;
    let days = ingest::synth_days(gen, ctx.seed)?;
    let all = ingest::samples_from_days(&days, cfg.n, cfg.tau);
    let (train_dates, test_dates) = harness::split_dates(&all, cfg.harness.split_ratio, ctx.seed)?;
    let train: Vec<DemandSample> = all.into_iter().filter(|s| train_dates.contains(&s.date)).collect();

    let mut stream: Vec<Vec<f64>> =
        days.iter().filter(|d| test_dates.contains(&d.date)).flat_map(|d| d.slots.iter().cloned()).collect();
    if cfg.harness.steps > 0 {
        stream.truncate(cfg.harness.steps);
    }
    let k = gen.slots_per_day;
    let last = k - cfg.tau;
    let inst = cfg.instance()?;
    let transitions = [cfg.mobility()];
    let mut runs = Vec::new();
    for kind in [cfg.policy, PolicyKind::Nonrobust] {
        let policy = cfg.policy(kind);
        let by_slot: Vec<DemandModel> = (0..=last)
            .map(|t| {
                let set = SampleSet {
                    t,
                    label: "all".into(),
                    samples: train.iter().filter(|s| s.t == t).cloned().collect(),
                };
                harness::build_demand_model(&policy, &set, cfg.tau, cfg.n, ctx.seed)
            })
            .collect::<dispatch_core::Result<_>>()?;
        // late slots have no full window left in the day and reuse the last one
        let models: Vec<DemandModel> = (0..k).map(|s| by_slot[s.min(last)].clone()).collect();
        let h = Horizon {
            template: &inst,
            models: &models,
            transitions: &transitions,
            stream: &stream,
            histogram_edges: &cfg.harness.histogram_edges,
        };
        runs.push(harness::run_receding_horizon(&h, &policy)?);
        if kind == PolicyKind::Nonrobust {
            break;
        }
    }
    output::write_steps(ctx.create("steps.csv")?, &runs)?;

    #[derive(Serialize)]
    struct Body {
        train_days: usize,
        test_days: usize,
        runs: Vec<RunSummary>,
    }
    ctx.summary(
        "simulate",
        &Body { train_days: train_dates.len(), test_days: test_dates.len(), runs: runs.iter().map(Into::into).collect() },
    )
}

pub fn cross_validate(common: &Common, data: &DataArgs) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let samples = ctx.samples(data)?;
    let inst = cfg.instance()?;
    let cv: CrossValidation = harness::cross_validate(
        &inst,
        &samples,
        [&cfg.policy(cfg.policy), &cfg.policy(PolicyKind::Nonrobust)],
        &cfg.cv_options(ctx.seed),
    )?;
    output::write_cross_validation(ctx.create("cross_validation.csv")?, &cv)?;

    #[derive(Serialize)]
    struct Body<'a> {
        train_dates: usize,
        test_samples: usize,
        summaries: &'a [harness::PolicySummary; 2],
    }
    ctx.summary(
        "cross-validate",
        &Body { train_dates: cv.train_dates.len(), test_samples: cv.rows.len(), summaries: &cv.summaries },
    )
}

pub fn sweep_epsilon(common: &Common, data: &DataArgs) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    if !cfg.policy.is_robust() {
        bail!("sweep-epsilon needs a robust policy in the config");
    }
    let samples = ctx.samples(data)?;
    let inst = cfg.instance()?;
    let rows = harness::sweep_epsilon(
        &inst,
        &samples,
        &cfg.policy(cfg.policy),
        &cfg.harness.epsilons,
        &cfg.cv_options(ctx.seed),
    )?;
    output::write_epsilon_sweep(ctx.create("sweep_epsilon.csv")?, &rows)?;

    #[derive(Serialize)]
    struct Body<'a> {
        policy: PolicyKind,
        rows: &'a [harness::EpsilonRow],
    }
    ctx.summary("sweep-epsilon", &Body { policy: cfg.policy, rows: &rows })
}

pub fn sweep_alpha(common: &Common, data: &DataArgs, slot: usize) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let cfg = &ctx.cfg;
    let samples: Vec<DemandSample> = ctx.samples(data)?.into_iter().filter(|s| s.t == slot).collect();
    if samples.is_empty() {
        bail!("no samples start at slot {slot}");
    }
    let n = cfg.n;
    let d = n * cfg.tau;
    let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|s| s.r_c[i]).sum::<f64>() / samples.len() as f64).collect();
    let r: Vec<DVector<f64>> = (0..cfg.tau).map(|k| DVector::from_column_slice(&mean[k * n..(k + 1) * n])).collect();
    let rows = harness::sweep_alpha(&cfg.instance()?, &r, &cfg.harness.alphas, &cfg.solver)?;
    output::write_alpha_sweep(ctx.create("sweep_alpha.csv")?, &rows)?;

    #[derive(Serialize)]
    struct Body<'a> {
        slot: usize,
        demand: &'a [f64],
        rows: &'a [harness::AlphaRow],
    }
    ctx.summary("sweep-alpha", &Body { slot, demand: &mean, rows: &rows })
}
