//! Data-driven uncertainty sets: bootstrapped box sets from marginal order
//! statistics, polytopes, and second-order-cone sets from moment tests.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SampleSet;
use crate::textfmt::{self, Lines};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    #[default]
    Frobenius,
    Spectral,
}

/// Settings for Algorithm-style bootstrap threshold estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of bootstrap resamples.
    pub n_boot: usize,
    /// Size of each resample; also the N_B used by the s-index.
    pub resample_size: usize,
    pub alpha_h: f64,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default)]
    pub gamma2_norm: MatrixNorm,
}

impl BootstrapConfig {
    pub fn new(n_b: usize, alpha_h: f64, epsilon: f64, seed: u64) -> Self {
        Self {
            n_boot: n_b,
            resample_size: n_b,
            alpha_h,
            epsilon,
            seed,
            gamma2_norm: MatrixNorm::Frobenius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_h > 0.0 && self.alpha_h < 1.0) {
            return Err(Error::Invalid(format!("alpha_h = {} not in (0,1)", self.alpha_h)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon = {} not in (0,1)", self.epsilon)));
        }
        if self.n_boot < 2 || self.resample_size < 2 {
            return Err(Error::Invalid("bootstrap count and resample size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Smallest k whose binomial upper tail
/// `sum_{j>=k} C(N,j) q^(N-j) (1-q)^j`, q = eps/(tau n), is at most
/// `alpha_h / (2 tau n)`; `n_b + 1` if no such k exists.
pub fn compute_s_index(n_b: usize, alpha_h: f64, epsilon: f64, tau: usize, n: usize) -> usize {
    let dims = (tau * n) as f64;
    let q = epsilon / dims;
    let threshold = (alpha_h / (2.0 * dims)).ln();
    let (ln_q, ln_p) = (q.ln(), (-q).ln_1p());

    let mut ln_fact = vec![0.0f64; n_b + 1];
    for i in 1..=n_b {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let ln_pmf = |j: usize| {
        ln_fact[n_b] - ln_fact[j] - ln_fact[n_b - j] + (n_b - j) as f64 * ln_q + j as f64 * ln_p
    };

    // tail(k) grows as k decreases; walk down from the top
    let mut tail = f64::NEG_INFINITY;
    let mut s = n_b + 1;
    for k in (1..=n_b).rev() {
        let t = ln_pmf(k);
        let hi = tail.max(t);
        tail = hi + ((tail - hi).exp() + (t - hi).exp()).ln();
        if tail <= threshold {
            s = k;
        } else {
            break;
        }
    }
    s
}

/// Smallest resample size for which the box set is non-empty and the
/// order-statistic bounds do not cross.
pub fn required_resample_size(alpha_h: f64, epsilon: f64, tau: usize, n: usize) -> usize {
    let ok = |m: usize| {
        let s = compute_s_index(m, alpha_h, epsilon, tau, n);
        s <= m && m + 1 < 2 * s
    };
    let mut hi = 2;
    while !ok(hi) {
        hi *= 2;
        if hi > 1 << 26 {
            return hi;
        }
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if ok(mid) { hi = mid } else { lo = mid }
    }
    hi
}

/// `(r^(N-s+1), r^(s))` with 1-indexed ascending order statistics.
pub fn marginal_order_stats(values: &[f64], s: usize) -> Result<(f64, f64)> {
    let n = values.len();
    if s == 0 || s > n {
        return Err(Error::EmptyBox { have: n, required: s });
    }
    let mut v = values.to_vec();
    let (_, lo, _) = v.select_nth_unstable_by(n - s, f64::total_cmp);
    let lower = *lo;
    let (_, hi, _) = v.select_nth_unstable_by(s - 1, f64::total_cmp);
    Ok((lower, *hi))
}

/// k-th largest (1-indexed) of `values`.
fn kth_largest(values: &mut [f64], k: usize) -> f64 {
    let n = values.len();
    let k = k.clamp(1, n);
    let (_, v, _) = values.select_nth_unstable_by(n - k, f64::total_cmp);
    *v
}

fn resample_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

fn resample_indices(rng: &mut ChaCha8Rng, pool: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..pool)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(0.0 <= *l && l <= u)) {
            return Err(Error::Invalid("box bounds must satisfy 0 <= lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn singleton(r: &[f64]) -> Result<Self> {
        Self::new(r.to_vec(), r.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, r: &[f64], tol: f64) -> bool {
        r.len() == self.dim()
            && r.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }
}

fn ceil_rank(count: usize, frac: f64) -> usize {
    ((count as f64 * frac).ceil() as usize).max(1)
}

/// Box set from bootstrapped marginal order statistics.
pub fn bootstrap_box(set: &SampleSet, cfg: &BootstrapConfig, tau: usize, n: usize) -> Result<BoxSet> {
    cfg.validate()?;
    let d = set.dim();
    if set.is_empty() || d != tau * n {
        return Err(Error::Dimension { expected: tau * n, got: d });
    }
    let m = cfg.resample_size;
    let s = compute_s_index(m, cfg.alpha_h, cfg.epsilon, tau, n);
    if s > m || m + 1 >= 2 * s {
        return Err(Error::EmptyBox {
            have: m,
            required: required_resample_size(cfg.alpha_h, cfg.epsilon, tau, n),
        });
    }
    let data = set.matrix();
    let pool = set.len();

    let bounds: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_boot)
        .into_par_iter()
        .map(|j| {
            let mut rng = resample_rng(cfg.seed, j);
            let idx = resample_indices(&mut rng, pool, m);
            let mut col = vec![0.0; m];
            let mut lo = vec![0.0; d];
            let mut hi = vec![0.0; d];
            for i in 0..d {
                for (slot, &k) in col.iter_mut().zip(&idx) {
                    *slot = data[(k, i)];
                }
                let (l, u) = marginal_order_stats(&col, s).expect("s checked above");
                lo[i] = l;
                hi[i] = u;
            }
            (lo, hi)
        })
        .collect();

    let mut lower = vec![0.0; d];
    let mut upper = vec![0.0; d];
    let mut buf = vec![0.0; cfg.n_boot];
    for i in 0..d {
        for (b, (_, hi)) in buf.iter_mut().zip(&bounds) {
            *b = hi[i];
        }
        upper[i] = kth_largest(&mut buf, ceil_rank(cfg.n_boot, 1.0 - cfg.alpha_h));
        for (b, (lo, _)) in buf.iter_mut().zip(&bounds) {
            *b = lo[i];
        }
        let l = kth_largest(&mut buf, ceil_rank(cfg.n_boot, cfg.alpha_h)).max(0.0);
        // when s sits near the median the two bootstrap quantiles can cross
        lower[i] = l.min(upper[i]);
        upper[i] = upper[i].max(lower[i]);
    }
    BoxSet::new(lower, upper)
}

/// Sum of interval lengths.
pub fn set_width(b: &BoxSet) -> f64 {
    b.lower.iter().zip(&b.upper).map(|(l, u)| u - l).sum()
}

/// `{r >= 0 : A_k r^k <= b_k}` for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePolytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolytopeSet {
    /// Product of per-stage polytopes.
    PerStage(Vec<StagePolytope>),
    /// `{r >= 0 : sum_k A_k r^k <= b}`.
    Coupled { blocks: Vec<DMatrix<f64>>, rhs: DVector<f64> },
}

impl PolytopeSet {
    pub fn tau(&self) -> usize {
        match self {
            Self::PerStage(st) => st.len(),
            Self::Coupled { blocks, .. } => blocks.len(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Self::PerStage(st) => st.first().map_or(0, |s| s.a.ncols()),
            Self::Coupled { blocks, .. } => blocks.first().map_or(0, |a| a.ncols()),
        }
    }

    pub fn dim(&self) -> usize {
        self.tau() * self.n()
    }

    pub fn is_per_stage(&self) -> bool {
        matches!(self, Self::PerStage(_))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let ok = match self {
            Self::PerStage(st) => {
                !st.is_empty() && st.iter().all(|s| s.a.ncols() == n && s.a.nrows() == s.b.len())
            }
            Self::Coupled { blocks, rhs } => {
                !blocks.is_empty()
                    && blocks.iter().all(|a| a.ncols() == n && a.nrows() == rhs.len())
            }
        };
        if !ok || n == 0 {
            return Err(Error::Invalid("inconsistent polytope block shapes".into()));
        }
        Ok(())
    }

    /// Block-diagonal coupled representation of the same set.
    pub fn to_coupled(&self) -> Self {
        match self {
            Self::Coupled { .. } => self.clone(),
            Self::PerStage(st) => {
                let n = self.n();
                let rows: usize = st.iter().map(|s| s.b.len()).sum();
                let mut rhs = DVector::zeros(rows);
                let mut blocks = Vec::with_capacity(st.len());
                let mut offset = 0;
                for s in st {
                    let m = s.b.len();
                    let mut a = DMatrix::zeros(rows, n);
                    a.view_mut((offset, 0), (m, n)).copy_from(&s.a);
                    rhs.rows_mut(offset, m).copy_from(&s.b);
                    blocks.push(a);
                    offset += m;
                }
                Self::Coupled { blocks, rhs }
            }
        }
    }

    pub fn contains(&self, r: &[f64], tol: f64) -> bool {
        let n = self.n();
        if r.len() != self.dim() || r.iter().any(|v| *v < -tol) {
            return false;
        }
        let stage = |k: usize| DVector::from_column_slice(&r[k * n..(k + 1) * n]);
        match self {
            Self::PerStage(st) => st.iter().enumerate().all(|(k, s)| {
                (&s.a * stage(k) - &s.b).iter().all(|v| *v <= tol)
            }),
            Self::Coupled { blocks, rhs } => {
                let mut lhs = DVector::zeros(rhs.len());
                for (k, a) in blocks.iter().enumerate() {
                    lhs += a * stage(k);
                }
                (lhs - rhs).iter().all(|v| *v <= tol)
            }
        }
    }
}

/// Per-stage `[I; -I]` rows with right-hand side `[upper; -lower]`.
pub fn box_to_polytope(b: &BoxSet, tau: usize) -> Result<PolytopeSet> {
    if tau == 0 || b.dim() % tau != 0 {
        return Err(Error::Dimension { expected: tau, got: b.dim() });
    }
    let n = b.dim() / tau;
    let stages = (0..tau)
        .map(|k| {
            let mut a = DMatrix::zeros(2 * n, n);
            let mut rhs = DVector::zeros(2 * n);
            for i in 0..n {
                a[(i, i)] = 1.0;
                a[(n + i, i)] = -1.0;
                rhs[i] = b.upper[k * n + i];
                rhs[n + i] = -b.lower[k * n + i];
            }
            StagePolytope { a, b: rhs }
        })
        .collect();
    Ok(PolytopeSet::PerStage(stages))
}

/// `{r >= 0 : r = mean + y + C^T w, |y| <= gamma1, |w| <= sqrt(1/eps - 1)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocSet {
    pub mean: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Upper-triangular, `C^T C = sigma + gamma2 I`.
    pub chol: DMatrix<f64>,
    pub epsilon: f64,
}

impl SocSet {
    /// Build from moments, factoring `sigma + gamma2 I`.
    pub fn from_moments(
        mean: DVector<f64>,
        sigma: DMatrix<f64>,
        gamma1: f64,
        gamma2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Invalid(format!("epsilon = {epsilon} not in (0,1)")));
        }
        if gamma1 < 0.0 || gamma2 < 0.0 {
            return Err(Error::Invalid("thresholds must be nonnegative".into()));
        }
        let d = mean.len();
        if sigma.shape() != (d, d) {
            return Err(Error::Dimension { expected: d, got: sigma.nrows() });
        }
        let m = &sigma + DMatrix::identity(d, d) * gamma2;
        let chol = upper_cholesky(&m)?;
        Ok(Self { mean, sigma, gamma1, gamma2, chol, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kappa(&self) -> f64 {
        (1.0 / self.epsilon - 1.0).sqrt()
    }

    /// Distance from `r - mean` to the ellipsoid `{C^T w : |w| <= kappa}`.
    pub fn ellipsoid_distance(&self, r: &[f64]) -> f64 {
        let d = DVector::from_column_slice(r) - &self.mean;
        let (w, _) = trust_region_ls(&self.chol, &d, self.kappa());
        (d - self.chol.transpose() * w).norm()
    }

    pub fn contains(&self, r: &[f64], tol: f64) -> bool {
        r.len() == self.dim()
            && r.iter().all(|v| *v >= -tol)
            && self.ellipsoid_distance(r) <= self.gamma1 + tol
    }
}

/// Minimize `|d - C^T w|` over `|w| <= radius`.
/// Returns the minimizer and whether the ball constraint is active.
pub fn trust_region_ls(c: &DMatrix<f64>, d: &DVector<f64>, radius: f64) -> (DVector<f64>, bool) {
    let dim = c.nrows();
    let g = c * d;
    let eig = SymmetricEigen::new(c * c.transpose());
    let gt = eig.eigenvectors.transpose() * &g;
    let lmax = eig.eigenvalues.amax();
    let cut = 1e-12 * lmax.max(f64::MIN_POSITIVE);
    let w_of = |mu: f64| {
        let coef = DVector::from_fn(dim, |i, _| {
            let l = eig.eigenvalues[i];
            if mu == 0.0 && l <= cut { 0.0 } else { gt[i] / (l + mu) }
        });
        &eig.eigenvectors * coef
    };
    let w0 = w_of(0.0);
    if w0.norm() <= radius || lmax <= 0.0 {
        return (if lmax <= 0.0 { DVector::zeros(dim) } else { w0 }, false);
    }
    // |w(mu)| decreases in mu; bracket and bisect
    let (mut lo, mut hi) = (0.0, lmax.max(1.0));
    while w_of(hi).norm() > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if w_of(mid).norm() > radius { lo = mid } else { hi = mid }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    (w_of(hi), true)
}

/// Upper factor C with `C^T C = m`; zero matrices map to C = 0, otherwise
/// jitter of `1e-10 trace/dim` is doubled up to 8 times on failure.
pub fn upper_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch.l().transpose());
    }
    let mut jitter = 1e-10 * m.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    for _ in 0..8 {
        let shifted = m + DMatrix::identity(d, d) * jitter;
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok(ch.l().transpose());
        }
        jitter *= 2.0;
    }
    Err(Error::Cholesky(8))
}

fn mean_cov(data: &DMatrix<f64>, rows: impl Iterator<Item = usize> + Clone) -> (DVector<f64>, DMatrix<f64>) {
    let d = data.ncols();
    let mut mean = DVector::zeros(d);
    let mut count = 0usize;
    for r in rows.clone() {
        mean += data.row(r).transpose();
        count += 1;
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let x = data.row(r).transpose() - &mean;
        cov.syger(1.0, &x, &x, 1.0);
    }
    cov.fill_lower_triangle_with_upper_triangle();
    cov /= (count.max(2) - 1) as f64;
    (mean, cov)
}

fn matrix_norm(m: &DMatrix<f64>, norm: MatrixNorm) -> f64 {
    match norm {
        MatrixNorm::Frobenius => m.norm(),
        MatrixNorm::Spectral => SymmetricEigen::new(m.clone()).eigenvalues.amax(),
    }
}

/// SOC set from the sample mean/covariance with bootstrapped thresholds.
pub fn bootstrap_soc(set: &SampleSet, cfg: &BootstrapConfig) -> Result<SocSet> {
    cfg.validate()?;
    if set.len() < 2 {
        return Err(Error::Invalid("SOC set needs at least two samples".into()));
    }
    let data = set.matrix();
    let pool = set.len();
    let (mean, sigma) = mean_cov(&data, 0..pool);

    let stats: Vec<(f64, f64)> = (0..cfg.n_boot)
        .into_par_iter()
        .map(|j| {
            let mut rng = resample_rng(cfg.seed, j);
            let idx = resample_indices(&mut rng, pool, cfg.resample_size);
            let (m, c) = mean_cov(&data, idx.iter().copied());
            ((m - &mean).norm(), matrix_norm(&(c - &sigma), cfg.gamma2_norm))
        })
        .collect();
    let k = ceil_rank(cfg.n_boot, 1.0 - cfg.alpha_h);
    let mut g1: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let mut g2: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let gamma1 = kth_largest(&mut g1, k);
    let gamma2 = kth_largest(&mut g2, k);
    SocSet::from_moments(mean, sigma, gamma1, gamma2, cfg.epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UncertaintySet {
    Box(BoxSet),
    Polytope(PolytopeSet),
    Soc(SocSet),
}

impl UncertaintySet {
    pub fn dim(&self) -> usize {
        match self {
            Self::Box(b) => b.dim(),
            Self::Polytope(p) => p.dim(),
            Self::Soc(s) => s.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Box(_) => "box",
            Self::Polytope(_) => "polytope",
            Self::Soc(_) => "soc",
        }
    }

    /// Serialize to the tagged text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line(format!("type {}", self.kind()));
        line(format!("dim {}", self.dim()));
        let matrix = |line: &mut dyn FnMut(String), m: &DMatrix<f64>| {
            for i in 0..m.nrows() {
                line(textfmt::reals(m.row(i).iter()));
            }
        };
        match self {
            Self::Box(b) => {
                line(format!("lower {}", textfmt::reals(&b.lower)));
                line(format!("upper {}", textfmt::reals(&b.upper)));
            }
            Self::Polytope(p) => {
                line(format!("stages {}", p.tau()));
                line(format!("n {}", p.n()));
                match p {
                    PolytopeSet::PerStage(st) => {
                        line("layout per_stage".into());
                        for (k, sp) in st.iter().enumerate() {
                            line(format!("stage {k} rows {}", sp.b.len()));
                            matrix(&mut line, &sp.a);
                            line(format!("b {}", textfmt::reals(sp.b.iter())));
                        }
                    }
                    PolytopeSet::Coupled { blocks, rhs } => {
                        line("layout coupled".into());
                        line(format!("rows {}", rhs.len()));
                        for (k, a) in blocks.iter().enumerate() {
                            line(format!("block {k}"));
                            matrix(&mut line, a);
                        }
                        line(format!("b {}", textfmt::reals(rhs.iter())));
                    }
                }
            }
            Self::Soc(c) => {
                line(format!("epsilon {}", textfmt::real(c.epsilon)));
                line(format!("gamma1 {}", textfmt::real(c.gamma1)));
                line(format!("gamma2 {}", textfmt::real(c.gamma2)));
                line(format!("mean {}", textfmt::reals(c.mean.iter())));
                line("sigma".into());
                matrix(&mut line, &c.sigma);
                line("chol".into());
                matrix(&mut line, &c.chol);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let tag = lines.expect("type")?;
        let dim = lines.expect_usize("dim")?;
        let read_matrix = |lines: &mut Lines, r: usize, c: usize| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(r, c);
            for i in 0..r {
                let row = lines.row(c)?;
                for j in 0..c {
                    m[(i, j)] = row[j];
                }
            }
            Ok(m)
        };
        let set = match tag.as_slice() {
            ["box"] => {
                let lower = lines.expect_reals("lower", dim)?;
                let upper = lines.expect_reals("upper", dim)?;
                Self::Box(BoxSet::new(lower, upper)?)
            }
            ["polytope"] => {
                let tau = lines.expect_usize("stages")?;
                let n = lines.expect_usize("n")?;
                if tau * n != dim {
                    return Err(Error::Dimension { expected: dim, got: tau * n });
                }
                let p = match lines.expect("layout")?.as_slice() {
                    ["per_stage"] => {
                        let mut st = Vec::with_capacity(tau);
                        for k in 0..tau {
                            let toks = lines.expect("stage")?;
                            let rows = match toks.as_slice() {
                                [idx, "rows", m] if idx.parse::<usize>().ok() == Some(k) => m
                                    .parse::<usize>()
                                    .map_err(|_| Error::Parse("bad row count".into()))?,
                                _ => return Err(Error::Parse("bad stage header".into())),
                            };
                            let a = read_matrix(&mut lines, rows, n)?;
                            let b = DVector::from_vec(lines.expect_reals("b", rows)?);
                            st.push(StagePolytope { a, b });
                        }
                        PolytopeSet::PerStage(st)
                    }
                    ["coupled"] => {
                        let rows = lines.expect_usize("rows")?;
                        let mut blocks = Vec::with_capacity(tau);
                        for k in 0..tau {
                            if lines.expect_usize("block")? != k {
                                return Err(Error::Parse("blocks out of order".into()));
                            }
                            blocks.push(read_matrix(&mut lines, rows, n)?);
                        }
                        let rhs = DVector::from_vec(lines.expect_reals("b", rows)?);
                        PolytopeSet::Coupled { blocks, rhs }
                    }
                    _ => return Err(Error::Parse("unknown polytope layout".into())),
                };
                p.validate()?;
                Self::Polytope(p)
            }
            ["soc"] => {
                let epsilon = lines.expect_real("epsilon")?;
                let gamma1 = lines.expect_real("gamma1")?;
                let gamma2 = lines.expect_real("gamma2")?;
                let mean = DVector::from_vec(lines.expect_reals("mean", dim)?);
                lines.expect("sigma")?;
                let sigma = read_matrix(&mut lines, dim, dim)?;
                lines.expect("chol")?;
                let chol = read_matrix(&mut lines, dim, dim)?;
                Self::Soc(SocSet { mean, sigma, gamma1, gamma2, chol, epsilon })
            }
            other => return Err(Error::Parse(format!("unknown set type {other:?}"))),
        };
        Ok(set)
    }
}

/// Membership test with absolute tolerance `tol`.
pub fn membership(set: &UncertaintySet, r: &[f64], tol: f64) -> bool {
    match set {
        UncertaintySet::Box(b) => b.contains(r, tol),
        UncertaintySet::Polytope(p) => p.contains(r, tol),
        UncertaintySet::Soc(s) => s.contains(r, tol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DemandSample;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::{Binomial, DiscreteCDF};

    fn sample_set(rows: Vec<Vec<f64>>) -> SampleSet {
        let date = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        SampleSet {
            t: 0,
            label: "all".into(),
            samples: rows
                .into_iter()
                .map(|r_c| DemandSample { date, t: 0, label: "all".into(), r_c })
                .collect(),
        }
    }

    // Independent oracle: smallest k with P(Bin >= k) <= thr via statrs.
    fn s_index_oracle(n_b: u64, alpha_h: f64, eps: f64, dims: f64) -> u64 {
        let bin = Binomial::new(1.0 - eps / dims, n_b).unwrap();
        let thr = alpha_h / (2.0 * dims);
        (1..=n_b).find(|&k| bin.sf(k - 1) <= thr).unwrap_or(n_b + 1)
    }

    #[test]
    fn s_index_literal_values() {
        // values of the tail definition evaluated exactly (checked against scipy)
        assert_eq!(compute_s_index(10_000, 0.1, 0.2, 2, 50), 9994);
        assert_eq!(compute_s_index(10_000, 0.1, 0.5, 2, 50), 9972);
        assert_eq!(compute_s_index(10_000, 0.3, 0.2, 2, 50), 9993);
        assert_eq!(compute_s_index(10_000, 0.1, 0.2, 2, 1000), 10_001);
        assert_eq!(compute_s_index(10_000, 0.1, 0.5, 2, 1000), 10_001);
    }

    #[test]
    fn s_index_matches_statrs_oracle() {
        for &(nb, ah, eps, tau, n) in &[
            (200usize, 0.1, 0.3, 1usize, 2usize),
            (500, 0.05, 0.2, 2, 4),
            (1000, 0.1, 0.5, 2, 3),
            (50, 0.2, 0.9, 1, 1),
            (3000, 0.1, 0.1, 2, 8),
        ] {
            let want = s_index_oracle(nb as u64, ah, eps, (tau * n) as f64) as usize;
            assert_eq!(compute_s_index(nb, ah, eps, tau, n), want, "{nb} {ah} {eps} {tau} {n}");
        }
    }

    #[test]
    fn order_stats_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(marginal_order_stats(&v, 9).unwrap(), (2.0, 9.0));
        assert_eq!(marginal_order_stats(&v, 10).unwrap(), (1.0, 10.0));
        assert_eq!(marginal_order_stats(&[4.0; 6], 5).unwrap(), (4.0, 4.0));
        assert!(matches!(marginal_order_stats(&v, 11), Err(Error::EmptyBox { .. })));
    }

    #[test]
    fn box_from_identical_samples_is_singleton() {
        let set = sample_set(vec![vec![1.0, 2.0, 3.0, 4.0]; 30]);
        let cfg = BootstrapConfig::new(200, 0.1, 0.3, 5);
        let b = bootstrap_box(&set, &cfg, 2, 2).unwrap();
        assert_eq!(b.lower, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.upper, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn box_too_small_resample_names_required_size() {
        let set = sample_set(vec![vec![1.0, 2.0]; 5]);
        let cfg = BootstrapConfig::new(10, 0.1, 0.1, 1);
        match bootstrap_box(&set, &cfg, 1, 2) {
            Err(Error::EmptyBox { have, required }) => {
                assert_eq!(have, 10);
                let s = compute_s_index(required, 0.1, 0.1, 1, 2);
                assert!(s <= required && required + 1 < 2 * s);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn uniform_set(rows: usize, d: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_set((0..rows).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect())
    }

    #[test]
    fn box_is_deterministic() {
        let set = uniform_set(100, 2, 3);
        let cfg = BootstrapConfig::new(300, 0.1, 0.3, 9);
        assert_eq!(bootstrap_box(&set, &cfg, 1, 2).unwrap(), bootstrap_box(&set, &cfg, 1, 2).unwrap());
    }

    #[test]
    fn uniform_box_covers_marginal_quantile() {
        // per component, the box should contain the (1 - eps/(tau n)) fraction of fresh draws
        let (tau, n, eps) = (1, 2, 0.3);
        let set = uniform_set(2000, 2, 11);
        let cfg = BootstrapConfig::new(400, 0.1, eps, 4);
        let b = bootstrap_box(&set, &cfg, tau, n).unwrap();
        let fresh = uniform_set(20_000, 2, 99);
        let q = 1.0 - eps / (tau * n) as f64;
        for i in 0..2 {
            let below = fresh.samples.iter().filter(|s| s.r_c[i] <= b.upper[i]).count() as f64 / 20_000.0;
            let above = fresh.samples.iter().filter(|s| s.r_c[i] >= b.lower[i]).count() as f64 / 20_000.0;
            assert!(below >= q - 0.01, "component {i} upper: {below}");
            assert!(above >= q - 0.01, "component {i} lower: {above}");
        }
    }

    #[test]
    fn width_examples() {
        assert_eq!(set_width(&BoxSet::singleton(&[1.0, 2.0]).unwrap()), 0.0);
        assert_eq!(set_width(&BoxSet::new(vec![0.0, 1.0], vec![2.0, 4.0]).unwrap()), 5.0);
    }

    #[test]
    fn box_to_polytope_scalar() {
        let p = box_to_polytope(&BoxSet::new(vec![1.0], vec![2.0]).unwrap(), 1).unwrap();
        let PolytopeSet::PerStage(st) = &p else { panic!() };
        assert_eq!(st[0].a, DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
        assert_eq!(st[0].b, DVector::from_vec(vec![2.0, -1.0]));
    }

    #[test]
    fn box_vertices_are_active() {
        let b = BoxSet::new(vec![0.5, 1.0, 0.0, 2.0], vec![1.5, 3.0, 1.0, 2.5]).unwrap();
        let p = box_to_polytope(&b, 2).unwrap();
        let PolytopeSet::PerStage(st) = &p else { panic!() };
        for mask in 0..16u32 {
            let v: Vec<f64> = (0..4).map(|i| if mask >> i & 1 == 1 { b.upper[i] } else { b.lower[i] }).collect();
            assert!(p.contains(&v, 0.0));
            for k in 0..2 {
                let slack = &st[k].b - &st[k].a * DVector::from_column_slice(&v[2 * k..2 * k + 2]);
                for i in 0..2 {
                    let active = if mask >> (2 * k + i) & 1 == 1 { i } else { 2 + i };
                    assert_eq!(slack[active], 0.0);
                }
            }
        }
    }

    #[test]
    fn box_interior_points_are_strict() {
        let b = BoxSet::new(vec![0.5, 1.0], vec![1.5, 3.0]).unwrap();
        let PolytopeSet::PerStage(st) = box_to_polytope(&b, 1).unwrap() else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r: Vec<f64> = (0..2).map(|i| b.lower[i] + (0.01 + 0.98 * rng.random::<f64>()) * (b.upper[i] - b.lower[i])).collect();
            let slack = &st[0].b - &st[0].a * DVector::from_vec(r);
            assert!(slack.iter().all(|s| *s > 0.0));
        }
    }

    #[test]
    fn soc_from_identical_samples_is_singleton() {
        let set = sample_set(vec![vec![2.0, 3.0]; 20]);
        let cfg = BootstrapConfig::new(100, 0.1, 0.2, 1);
        let s = bootstrap_soc(&set, &cfg).unwrap();
        assert_eq!(s.gamma1, 0.0);
        assert_eq!(s.gamma2, 0.0);
        assert!(s.sigma.iter().all(|v| *v == 0.0));
        assert!(s.contains(&[2.0, 3.0], 0.0));
        assert!(!s.contains(&[2.0, 3.01], 1e-6));
    }

    fn gaussian_set(rows: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        sample_set(
            (0..rows)
                .map(|_| {
                    let z0 = nrm.sample(&mut rng);
                    let z1 = nrm.sample(&mut rng);
                    vec![10.0 + 2.0 * z0, 8.0 + z0 + z1, 5.0 + 0.5 * z1]
                })
                .collect(),
        )
    }

    #[test]
    fn soc_is_deterministic_and_factor_reproduces() {
        let set = gaussian_set(80, 4);
        let cfg = BootstrapConfig::new(200, 0.1, 0.2, 3);
        let a = bootstrap_soc(&set, &cfg).unwrap();
        assert_eq!(a, bootstrap_soc(&set, &cfg).unwrap());
        let target = &a.sigma + DMatrix::identity(3, 3) * a.gamma2;
        let err = (a.chol.transpose() * &a.chol - &target).norm() / target.norm();
        assert!(err <= 1e-8);
        assert!(a.gamma1 > 0.0 && a.gamma2 > 0.0);
        for i in 0..3 {
            for j in 0..i {
                assert_eq!(a.chol[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn soc_membership_witnesses() {
        let set = gaussian_set(80, 4);
        let s = bootstrap_soc(&set, &BootstrapConfig::new(200, 0.1, 0.2, 3)).unwrap();
        assert!(s.contains(s.mean.as_slice(), 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut y = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            y *= 0.5 * s.gamma1 / y.norm();
            let mut w = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            w *= 0.5 * s.kappa() / w.norm();
            let r = &s.mean + y + s.chol.transpose() * w;
            assert!(s.contains(r.as_slice(), 1e-9));
        }
        // far away along a direction is outside
        let far = &s.mean + DVector::from_element(3, 1000.0);
        assert!(!s.contains(far.as_slice(), 1e-9));
    }

    #[test]
    fn box_membership_tolerance() {
        let b = BoxSet::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let set = UncertaintySet::Box(b);
        assert!(membership(&set, &[1.0, 2.0], 1e-9));
        assert!(!membership(&set, &[1.0 - 1e-8, 2.0], 1e-9));
    }

    #[test]
    fn set_text_round_trip() {
        let sets = vec![
            UncertaintySet::Box(BoxSet::new(vec![0.1, 1.0 / 3.0], vec![2.0, 4.0]).unwrap()),
            UncertaintySet::Polytope(box_to_polytope(&BoxSet::new(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 2).unwrap()),
            UncertaintySet::Polytope(box_to_polytope(&BoxSet::new(vec![0.1, 0.2], vec![1.0, 2.0]).unwrap(), 2).unwrap().to_coupled()),
            UncertaintySet::Soc(bootstrap_soc(&gaussian_set(30, 1), &BootstrapConfig::new(50, 0.1, 0.2, 3)).unwrap()),
        ];
        for s in sets {
            let text = s.to_text();
            let back = UncertaintySet::from_text(&text).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_text(), text);
        }
        assert!(UncertaintySet::from_text("type ellipse\ndim 2\n").is_err());
    }

    proptest! {
        #[test]
        fn s_index_monotone(nb in 20usize..400, ah in 0.01f64..0.9, da in 0.0f64..0.09, eps in 0.05f64..0.95, n in 1usize..6, tau in 1usize..3) {
            let base = compute_s_index(nb, ah, eps, tau, n);
            prop_assert!(base >= 1 && base <= nb + 1);
            prop_assert!(compute_s_index(nb, (ah + da).min(0.99), eps, tau, n) <= base);
            prop_assert!(compute_s_index(nb, ah, eps, tau, n + 1) >= base);
        }

        #[test]
        fn box_brackets_median(seed in 0u64..1000) {
            let set = uniform_set(60, 2, seed);
            let b = bootstrap_box(&set, &BootstrapConfig::new(100, 0.1, 0.3, seed), 1, 2).unwrap();
            for i in 0..2 {
                let mut col: Vec<f64> = set.samples.iter().map(|s| s.r_c[i]).collect();
                col.sort_by(f64::total_cmp);
                let median = 0.5 * (col[29] + col[30]);
                prop_assert!(b.lower[i] <= median && median <= b.upper[i]);
            }
        }

        #[test]
        fn box_and_polytope_membership_agree(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lower: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let upper: Vec<f64> = lower.iter().map(|l| l + rng.random::<f64>()).collect();
            let b = BoxSet::new(lower, upper).unwrap();
            let p = box_to_polytope(&b, 2).unwrap();
            for _ in 0..1000 {
                let r: Vec<f64> = (0..4).map(|_| 2.5 * rng.random::<f64>() - 0.2).collect();
                prop_assert_eq!(b.contains(&r, 0.0), p.contains(&r, 0.0));
            }
        }
    }
}
