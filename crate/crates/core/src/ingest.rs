//! Trip ingestion, space/time discretization, demand aggregation and the
//! synthetic demand generator used in place of real trip archives.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: u32 = 86_400;

/// One taxi trip. Times are seconds since midnight of `date`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub date: NaiveDate,
    pub pickup_time: u32,
    pub dropoff_time: u32,
    pub pickup_pos: (f64, f64),
    pub dropoff_pos: (f64, f64),
}

/// Column names used to locate trip fields in a CSV header.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TripSchema {
    pub date: String,
    pub pickup_time: String,
    pub dropoff_time: String,
    pub pickup_lon: String,
    pub pickup_lat: String,
    pub dropoff_lon: String,
    pub dropoff_lat: String,
}

impl Default for TripSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            pickup_time: "pickup_time".into(),
            dropoff_time: "dropoff_time".into(),
            pickup_lon: "pickup_lon".into(),
            pickup_lat: "pickup_lat".into(),
            dropoff_lon: "dropoff_lon".into(),
            dropoff_lat: "dropoff_lat".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<TripRecord>,
    pub skipped: usize,
}

pub fn parse_time_of_day(s: &str) -> Option<u32> {
    let mut it = s.trim().split(':');
    let h: u32 = it.next()?.parse().ok()?;
    let m: u32 = it.next()?.parse().ok()?;
    let sec: u32 = it.next()?.parse().ok()?;
    if it.next().is_some() || h >= 24 || m >= 60 || sec >= 60 {
        return None;
    }
    Some(h * 3600 + m * 60 + sec)
}

pub fn format_time_of_day(secs: u32) -> String {
    format!("{:02}:{:02}:{:02}", secs / 3600, (secs / 60) % 60, secs % 60)
}

fn parse_coord(s: &str, limit: f64) -> Option<f64> {
    let v: f64 = s.trim().parse().ok()?;
    (v.is_finite() && v.abs() <= limit).then_some(v)
}

/// Parse a trip CSV. Rows that fail validation are skipped and tallied;
/// a missing column is a hard error.
pub fn parse_trips<R: Read>(reader: R, schema: &TripSchema) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx = [
        col(&schema.date)?,
        col(&schema.pickup_time)?,
        col(&schema.dropoff_time)?,
        col(&schema.pickup_lon)?,
        col(&schema.pickup_lat)?,
        col(&schema.dropoff_lon)?,
        col(&schema.dropoff_lat)?,
    ];

    let mut out = ParseOutcome::default();
    for row in rdr.records() {
        let Ok(row) = row else {
            out.skipped += 1;
            continue;
        };
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let parsed = (|| {
            let date = NaiveDate::parse_from_str(field(0).trim(), "%Y-%m-%d").ok()?;
            let pickup_time = parse_time_of_day(field(1))?;
            let dropoff_time = parse_time_of_day(field(2))?;
            // cross-midnight trips are rejected
            if dropoff_time < pickup_time {
                return None;
            }
            Some(TripRecord {
                date,
                pickup_time,
                dropoff_time,
                pickup_pos: (parse_coord(field(3), 180.0)?, parse_coord(field(4), 90.0)?),
                dropoff_pos: (parse_coord(field(5), 180.0)?, parse_coord(field(6), 90.0)?),
            })
        })();
        match parsed {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

/// Write trips in the canonical column order.
pub fn write_trips<W: Write>(writer: W, trips: &[TripRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "date",
        "pickup_time",
        "dropoff_time",
        "pickup_lon",
        "pickup_lat",
        "dropoff_lon",
        "dropoff_lat",
    ])?;
    for t in trips {
        w.write_record([
            t.date.format("%Y-%m-%d").to_string(),
            format_time_of_day(t.pickup_time),
            format_time_of_day(t.dropoff_time),
            t.pickup_pos.0.to_string(),
            t.pickup_pos.1.to_string(),
            t.dropoff_pos.0.to_string(),
            t.dropoff_pos.1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Equal-size rectangular partition of a bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl RegionGrid {
    pub fn new(bbox: (f64, f64, f64, f64), rows: usize, cols: usize) -> Result<Self> {
        let (lon_min, lat_min, lon_max, lat_max) = bbox;
        let ok = [lon_min, lat_min, lon_max, lat_max].iter().all(|v| v.is_finite())
            && lon_max > lon_min
            && lat_max > lat_min
            && rows > 0
            && cols > 0;
        if !ok {
            return Err(Error::Invalid(format!(
                "degenerate grid: bbox {bbox:?}, {rows}x{cols}"
            )));
        }
        Ok(Self { lon_min, lat_min, lon_max, lat_max, rows, cols })
    }

    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    fn cell_size(&self) -> (f64, f64) {
        (
            (self.lon_max - self.lon_min) / self.cols as f64,
            (self.lat_max - self.lat_min) / self.rows as f64,
        )
    }

    /// Center of region `i` as (lon, lat).
    pub fn cell_center(&self, i: usize) -> (f64, f64) {
        let (w, h) = self.cell_size();
        let (row, col) = (i / self.cols, i % self.cols);
        (
            self.lon_min + (col as f64 + 0.5) * w,
            self.lat_min + (row as f64 + 0.5) * h,
        )
    }
}

fn bin(v: f64, lo: f64, hi: f64, count: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let k = ((v - lo) / (hi - lo) * count as f64).floor() as usize;
    // top/right edge belongs to the last cell
    Some(k.min(count - 1))
}

/// Row-major region index of a (lon, lat) position.
pub fn assign_region(pos: (f64, f64), grid: &RegionGrid) -> Result<usize> {
    let (lon, lat) = pos;
    let col = bin(lon, grid.lon_min, grid.lon_max, grid.cols);
    let row = bin(lat, grid.lat_min, grid.lat_max, grid.rows);
    match (row, col) {
        (Some(r), Some(c)) => Ok(r * grid.cols + c),
        _ => Err(Error::OutOfBounds { lon, lat }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDiscretization {
    pub slot_seconds: u32,
}

impl TimeDiscretization {
    pub fn new(slot_seconds: u32) -> Result<Self> {
        if slot_seconds == 0 || SECONDS_PER_DAY % slot_seconds != 0 {
            return Err(Error::Invalid(format!(
                "slot length {slot_seconds}s does not divide a day"
            )));
        }
        Ok(Self { slot_seconds })
    }

    /// Slots per day.
    pub fn k(&self) -> usize {
        (SECONDS_PER_DAY / self.slot_seconds) as usize
    }

    pub fn slot_of(&self, seconds: u32) -> usize {
        (seconds / self.slot_seconds) as usize
    }
}

/// Concatenated demand vector `r_c` for horizon starting at slot `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSample {
    pub date: NaiveDate,
    pub t: usize,
    pub label: String,
    pub r_c: Vec<f64>,
}

impl DemandSample {
    /// The k-th length-n block (0-based stage index).
    pub fn block(&self, k: usize, n: usize) -> &[f64] {
        &self.r_c[k * n..(k + 1) * n]
    }
}

/// Distinct trip dates in ascending order.
pub fn trip_dates(trips: &[TripRecord]) -> Vec<NaiveDate> {
    trips.iter().map(|t| t.date).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Count pickups per (date, slot, region) and emit one sample per (date, t)
/// with `t + tau <= K`. Pickups outside the grid are ignored.
pub fn aggregate_demand(
    trips: &[TripRecord],
    grid: &RegionGrid,
    disc: &TimeDiscretization,
    tau: usize,
    dates: &[NaiveDate],
) -> Vec<DemandSample> {
    let n = grid.n();
    let k = disc.k();
    let mut counts: BTreeMap<NaiveDate, Vec<f64>> =
        dates.iter().map(|d| (*d, vec![0.0; k * n])).collect();
    for trip in trips {
        let Some(day) = counts.get_mut(&trip.date) else { continue };
        let Ok(region) = assign_region(trip.pickup_pos, grid) else { continue };
        day[disc.slot_of(trip.pickup_time) * n + region] += 1.0;
    }
    windows_from_days(
        counts.iter().map(|(d, c)| (*d, "all".to_string(), c.as_slice())),
        n,
        k,
        tau,
    )
}

fn windows_from_days<'a>(
    days: impl Iterator<Item = (NaiveDate, String, &'a [f64])>,
    n: usize,
    k: usize,
    tau: usize,
) -> Vec<DemandSample> {
    let mut out = Vec::new();
    if tau == 0 || tau > k {
        return out;
    }
    for (date, label, slots) in days {
        for t in 0..=(k - tau) {
            out.push(DemandSample {
                date,
                t,
                label: label.clone(),
                r_c: slots[t * n..(t + tau) * n].to_vec(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SetKey {
    pub t: usize,
    pub label: String,
}

/// Samples sharing a start slot and a category label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub t: usize,
    pub label: String,
    pub samples: Vec<DemandSample>,
}

impl SampleSet {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.r_c.len())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples as rows of a matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(self.len(), d, |i, j| self.samples[i].r_c[j])
    }
}

pub fn weekday_label(date: NaiveDate) -> String {
    match date.weekday() {
        Weekday::Sat | Weekday::Sun => "weekend".into(),
        _ => "weekday".into(),
    }
}

/// Group samples by (t, label_fn(date)). The label is written into each sample.
pub fn partition(
    samples: &[DemandSample],
    label_fn: impl Fn(NaiveDate) -> String,
) -> BTreeMap<SetKey, SampleSet> {
    let mut out: BTreeMap<SetKey, SampleSet> = BTreeMap::new();
    for s in samples {
        let label = label_fn(s.date);
        let key = SetKey { t: s.t, label: label.clone() };
        let set = out.entry(key).or_insert_with(|| SampleSet {
            t: s.t,
            label: label.clone(),
            samples: Vec::new(),
        });
        set.samples.push(DemandSample { label, ..s.clone() });
    }
    out
}

/// Row-stochastic matrix of region-to-region transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix(pub DMatrix<f64>);

impl TransitionMatrix {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::Invalid("transition matrix must be square".into()));
        }
        for i in 0..p.nrows() {
            let row = p.row(i);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("transition row {i} has entries outside [0,1]")));
            }
            if (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("transition row {i} sums to {}", row.sum())));
            }
        }
        Ok(Self(p))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn uniform(n: usize) -> Self {
        Self(DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

/// Pickup-to-dropoff frequencies of trips starting in slot `k`.
/// Rows without any trip fall back to uniform.
pub fn estimate_transition(
    trips: &[TripRecord],
    grid: &RegionGrid,
    disc: &TimeDiscretization,
    k: usize,
) -> TransitionMatrix {
    let n = grid.n();
    let mut p = DMatrix::zeros(n, n);
    for trip in trips.iter().filter(|t| disc.slot_of(t.pickup_time) == k) {
        if let (Ok(i), Ok(j)) = (
            assign_region(trip.pickup_pos, grid),
            assign_region(trip.dropoff_pos, grid),
        ) {
            p[(i, j)] += 1.0;
        }
    }
    for i in 0..n {
        let s: f64 = p.row(i).sum();
        if s > 0.0 {
            p.row_mut(i).scale_mut(1.0 / s);
        } else {
            p.row_mut(i).fill(1.0 / n as f64);
        }
    }
    TransitionMatrix(p)
}

/// One-norm distance between cell centers times `scale`.
pub fn build_weight_matrix(grid: &RegionGrid, scale: f64) -> DMatrix<f64> {
    let n = grid.n();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 0.0;
        }
        let (a, b) = (grid.cell_center(i), grid.cell_center(j));
        scale * ((a.0 - b.0).abs() + (a.1 - b.1).abs())
    })
}

/// Covariance of the per-slot regional demand of a generator component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Isotropic { variance: f64 },
    Diagonal { variances: Vec<f64> },
    Full { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tails {
    #[default]
    Gaussian,
    /// Multivariate Student-t with the covariance used as scale matrix.
    StudentT { dof: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub label: String,
    #[serde(default = "one")]
    pub weight: f64,
    /// Mean demand per region (length n).
    pub mean: Vec<f64>,
    /// Multiplier on the mean for each slot of the day (length K); all ones if absent.
    #[serde(default)]
    pub slot_profile: Vec<f64>,
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub tails: Tails,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Each day draws a component by mixture weight.
    #[default]
    Random,
    /// Each day uses the component labelled with `weekday_label(date)`.
    Weekday,
}

/// Synthetic demand generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub tau: usize,
    pub slots_per_day: usize,
    pub days: usize,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    #[serde(default = "yes")]
    pub truncate: bool,
    #[serde(default)]
    pub selection: Selection,
    pub components: Vec<Component>,
}

/// Demand of one generated day: `slots[t]` is the regional vector of slot t.
#[derive(Debug, Clone, PartialEq)]
pub struct DayDemand {
    pub date: NaiveDate,
    pub label: String,
    pub slots: Vec<Vec<f64>>,
}

struct Sampler {
    mean: Vec<f64>,
    profile: Vec<f64>,
    factor: DMatrix<f64>,
    tails: Tails,
}

fn covariance_matrix(spec: &CovarianceSpec, n: usize) -> Result<DMatrix<f64>> {
    let m = match spec {
        CovarianceSpec::Isotropic { variance } => DMatrix::identity(n, n) * *variance,
        CovarianceSpec::Diagonal { variances } => {
            if variances.len() != n {
                return Err(Error::Dimension { expected: n, got: variances.len() });
            }
            DMatrix::from_diagonal(&DVector::from_column_slice(variances))
        }
        CovarianceSpec::Full { matrix } => {
            if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                return Err(Error::Invalid(format!("covariance must be {n}x{n}")));
            }
            DMatrix::from_fn(n, n, |i, j| matrix[i][j])
        }
    };
    if (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::Invalid("covariance is not symmetric".into()));
    }
    Ok(m)
}

/// Square-root factor F with F Fᵀ = cov, via eigendecomposition so that
/// singular (e.g. zero) covariances are accepted.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    let scale = cov.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPsd(min));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

impl Sampler {
    fn new(c: &Component, n: usize, k: usize) -> Result<Self> {
        if c.mean.len() != n {
            return Err(Error::Dimension { expected: n, got: c.mean.len() });
        }
        let profile = if c.slot_profile.is_empty() {
            vec![1.0; k]
        } else if c.slot_profile.len() == k {
            c.slot_profile.clone()
        } else {
            return Err(Error::Dimension { expected: k, got: c.slot_profile.len() });
        };
        if let Tails::StudentT { dof } = c.tails {
            if !(dof > 0.0) {
                return Err(Error::Invalid("student-t dof must be positive".into()));
            }
        }
        Ok(Self {
            mean: c.mean.clone(),
            profile,
            factor: psd_factor(&covariance_matrix(&c.covariance, n)?)?,
            tails: c.tails.clone(),
        })
    }

    fn draw(&self, slot: usize, truncate: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.mean.len();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &self.factor * z;
        if let Tails::StudentT { dof } = self.tails {
            let chi: f64 = ChiSquared::new(dof).expect("positive dof").sample(rng);
            x *= (dof / chi.max(f64::MIN_POSITIVE)).sqrt();
        }
        (0..n)
            .map(|i| {
                let v = self.mean[i] * self.profile[slot] + x[i];
                if truncate { v.max(0.0) } else { v }
            })
            .collect()
    }
}

/// Generate day-level demand profiles.
pub fn synth_days(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<DayDemand>> {
    if cfg.components.is_empty() {
        return Err(Error::Invalid("generator needs at least one component".into()));
    }
    if cfg.n == 0 || cfg.slots_per_day == 0 {
        return Err(Error::Invalid("generator needs n > 0 and slots_per_day > 0".into()));
    }
    let samplers = cfg
        .components
        .iter()
        .map(|c| Sampler::new(c, cfg.n, cfg.slots_per_day))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = cfg.components.iter().map(|c| c.weight).sum();
    if cfg.components.iter().any(|c| c.weight < 0.0) || !(total > 0.0) {
        return Err(Error::Invalid("mixture weights must be nonnegative with positive sum".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut days = Vec::with_capacity(cfg.days);
    for d in 0..cfg.days {
        let date = cfg.start_date + chrono::Days::new(d as u64);
        let ci = match cfg.selection {
            Selection::Random => {
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = cfg.components.len() - 1;
                for (i, c) in cfg.components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
            Selection::Weekday => {
                let label = weekday_label(date);
                cfg.components
                    .iter()
                    .position(|c| c.label == label)
                    .ok_or_else(|| Error::Invalid(format!("no component labelled `{label}`")))?
            }
        };
        let slots = (0..cfg.slots_per_day)
            .map(|t| samplers[ci].draw(t, cfg.truncate, &mut rng))
            .collect();
        days.push(DayDemand { date, label: cfg.components[ci].label.clone(), slots });
    }
    Ok(days)
}

/// Horizon windows of generated days, labelled by mixture component.
pub fn synth_generate(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<DemandSample>> {
    let days = synth_days(cfg, seed)?;
    Ok(samples_from_days(&days, cfg.n, cfg.tau))
}

pub fn samples_from_days(days: &[DayDemand], n: usize, tau: usize) -> Vec<DemandSample> {
    let flat: Vec<(NaiveDate, String, Vec<f64>)> = days
        .iter()
        .map(|d| (d.date, d.label.clone(), d.slots.concat()))
        .collect();
    let k = days.first().map_or(0, |d| d.slots.len());
    windows_from_days(
        flat.iter().map(|(d, l, v)| (*d, l.clone(), v.as_slice())),
        n,
        k,
        tau,
    )
}

/// Write a sample set as CSV rows `date,r0,r1,...`.
pub fn write_sample_set<W: Write>(writer: W, set: &SampleSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = set.dim();
    let mut header = vec!["date".to_string()];
    header.extend((0..d).map(|i| format!("r{i}")));
    w.write_record(&header)?;
    for s in &set.samples {
        let mut row = vec![s.date.format("%Y-%m-%d").to_string()];
        row.extend(s.r_c.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample_set<R: Read>(reader: R, t: usize, label: &str) -> Result<SampleSet> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut samples = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let date = NaiveDate::parse_from_str(row.get(0).unwrap_or(""), "%Y-%m-%d")
            .map_err(|e| Error::Parse(e.to_string()))?;
        let r_c = row
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        samples.push(DemandSample { date, t, label: label.to_string(), r_c });
    }
    Ok(SampleSet { t, label: label.to_string(), samples })
}
