//! TOML experiment configuration.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CvOptions, Policy, PolicyKind, SetConfig};
use crate::error::{Error, Result};
use crate::ingest::{self, GeneratorConfig, RegionGrid, TimeDiscretization, TransitionMatrix, TripSchema};
use crate::model::{DispatchInstance, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::solve::SolverOptions;

/// A scalar applied everywhere, or one value per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn expand(&self, len: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Self::One(v) => Ok(vec![*v; len]),
            Self::Many(v) if v.len() == len => Ok(v.clone()),
            Self::Many(v) => Err(Error::Invalid(format!("{what} needs {len} values, got {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// `[lon_min, lat_min, lon_max, lat_max]`.
    pub bbox: [f64; 4],
    pub rows: usize,
    pub cols: usize,
}

impl GridConfig {
    pub fn grid(&self) -> Result<RegionGrid> {
        let [a, b, c, d] = self.bbox;
        RegionGrid::new((a, b, c, d), self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub split_ratio: f64,
    /// Build one model per generator label instead of pooling all days.
    pub partition: bool,
    pub histogram_edges: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Simulated steps; 0 runs the whole test stream.
    pub steps: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.7,
            partition: false,
            histogram_edges: (0..=20).map(|i| 10.0 * i as f64).collect(),
            epsilons: vec![0.1, 0.2, 0.25, 0.3, 0.5],
            alphas: vec![1.0, 0.5, 0.25, 0.1],
            steps: 0,
        }
    }
}

fn default_slot() -> u32 {
    3600
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_stay() -> f64 {
    0.7
}

fn unit() -> f64 {
    1.0
}

fn default_policy() -> PolicyKind {
    PolicyKind::Soc
}

/// Experiment configuration shared by all CLI commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Number of regions; must equal `grid.rows * grid.cols`.
    pub n: usize,
    pub tau: usize,
    pub grid: GridConfig,
    #[serde(default = "default_slot")]
    pub slot_seconds: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Reachability threshold, scalar or per stage.
    pub m: OneOrMany,
    /// Multiplier on the one-norm distance between cell centers.
    #[serde(default = "unit")]
    pub weight_scale: f64,
    /// Initial vacant taxis, scalar per region or one value per region.
    pub initial_fleet: OneOrMany,
    /// Passenger mobility `P = s I + (1 - s) / n` when no trips are given.
    #[serde(default = "default_stay")]
    pub stay_probability: f64,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub sets: SetConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schema: TripSchema,
    pub generator: GeneratorConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.grid()?;
        if grid.n() != self.n {
            return Err(Error::Invalid(format!("n = {} but the grid has {} cells", self.n, grid.n())));
        }
        if self.generator.n != self.n || self.generator.tau != self.tau {
            return Err(Error::Invalid("generator n and tau must match the top-level values".into()));
        }
        if self.tau > self.generator.slots_per_day {
            return Err(Error::Invalid("tau exceeds the slots per day".into()));
        }
        TimeDiscretization::new(self.slot_seconds)?;
        if !(0.0..=1.0).contains(&self.stay_probability) {
            return Err(Error::Invalid("stay_probability must lie in [0,1]".into()));
        }
        let h = &self.harness;
        if h.histogram_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid("histogram edges must increase".into()));
        }
        self.policy(self.policy).validate()?;
        self.instance()?;
        Ok(())
    }

    pub fn region_grid(&self) -> Result<RegionGrid> {
        self.grid.grid()
    }

    pub fn mobility(&self) -> TransitionMatrix {
        let n = self.n;
        let s = self.stay_probability;
        TransitionMatrix(DMatrix::from_fn(n, n, |i, j| {
            (1.0 - s) / n as f64 + if i == j { s } else { 0.0 }
        }))
    }

    /// Instance template; the harness replaces `l1` and `p` as it runs.
    pub fn instance(&self) -> Result<DispatchInstance> {
        let grid = self.region_grid()?;
        let w = ingest::build_weight_matrix(&grid, self.weight_scale);
        let l1 = DVector::from_vec(self.initial_fleet.expand(self.n, "initial_fleet")?);
        let m = self.m.expand(self.tau, "m")?;
        DispatchInstance::new(w, vec![self.mobility(); self.tau - 1], l1, m, self.alpha, self.beta)
    }

    pub fn policy(&self, kind: PolicyKind) -> Policy {
        Policy { kind, solver: self.solver.clone(), sets: self.sets.clone() }
    }

    pub fn cv_options(&self, seed: u64) -> CvOptions {
        CvOptions {
            split_ratio: self.harness.split_ratio,
            seed,
            partition: self.harness.partition,
            histogram_edges: self.harness.histogram_edges.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
n = 4
tau = 2
m = 0.3
initial_fleet = 5.0
grid = { bbox = [0.0, 0.0, 0.4, 0.4], rows = 2, cols = 2 }

[sets]
epsilon = 0.25

[generator]
n = 4
tau = 2
slots_per_day = 4
days = 30

[[generator.components]]
label = "all"
mean = [5.0, 8.0, 3.0, 6.0]
covariance = { kind = "isotropic", variance = 2.0 }
"#;

    #[test]
    fn parses_and_builds_instance() {
        let cfg = Config::from_toml(SAMPLE).unwrap();
        let inst = cfg.instance().unwrap();
        assert_eq!((inst.n, inst.tau), (4, 2));
        assert_eq!(inst.fleet_size(), 20.0);
        assert_eq!(inst.p.len(), 1);
        assert!((inst.w[(0, 3)] - 0.4).abs() < 1e-12);
        assert_eq!(cfg.policy, PolicyKind::Soc);
    }

    #[test]
    fn rejects_inconsistent_sizes() {
        let bad = SAMPLE.replacen("n = 4", "n = 3", 1);
        assert!(Config::from_toml(&bad).is_err());
        let bad = SAMPLE.replace("initial_fleet = 5.0", "initial_fleet = [1.0, 2.0]");
        assert!(Config::from_toml(&bad).is_err());
        let bad = SAMPLE.replace("tau = 2\nm", "tau = 2\nbogus = 1\nm");
        assert!(Config::from_toml(&bad).is_err());
    }
}
