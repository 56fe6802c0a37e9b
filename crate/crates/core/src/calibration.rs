//! Coverage calibration of probability maps and presence reliability.
//!
//! A map is coverage-calibrated when the ground truth falls in its top
//! `q`-mass region with frequency `q`. Binning each sample's coverage in 5%
//! steps should then give a flat histogram; a single temperature is fitted
//! to flatten it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ActivationWindow, Rect};
use crate::probmap::{coverage_of_point, temperature_scale, ProbabilityMap};

pub const COVERAGE_BINS: usize = 20;
pub const COVERAGE_BIN_WIDTH: f64 = 1.0 / COVERAGE_BINS as f64;

/// One map with the cell holding its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub map: ProbabilityMap,
    pub col: usize,
    pub row: usize,
}

impl CalibrationSample {
    pub fn new(map: ProbabilityMap, col: usize, row: usize) -> Result<Self> {
        if col >= map.window().grid_w() || row >= map.window().grid_h() {
            return Err(Error::InvalidArgument(format!("cell ({col}, {row}) outside the grid")));
        }
        Ok(Self { map, col, row })
    }

    pub fn coverage(&self) -> f64 {
        coverage_of_point(&self.map, self.col, self.row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageHistogram {
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

impl CoverageHistogram {
    /// Bin `i` holds coverages in `(0.05 i, 0.05 (i + 1)]`.
    pub fn bin_of(coverage: f64) -> usize {
        // The slack keeps sums that land a few ulps above a bin edge in the lower bin.
        let i = (coverage / COVERAGE_BIN_WIDTH - 1e-9).ceil() as i64 - 1;
        i.clamp(0, COVERAGE_BINS as i64 - 1) as usize
    }

    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() != COVERAGE_BINS {
            return Err(Error::InvalidArgument(format!("expected {COVERAGE_BINS} bins, got {}", counts.len())));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("coverage samples"));
        }
        let fractions = counts.iter().map(|c| *c as f64 / total as f64).collect();
        Ok(Self { counts, fractions })
    }

    pub fn from_coverages(coverages: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut counts = vec![0u64; COVERAGE_BINS];
        for c in coverages {
            counts[Self::bin_of(c)] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pools two histograms; fractions become the count-weighted mixture.
    pub fn merge(&self, other: &CoverageHistogram) -> CoverageHistogram {
        let counts = self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect();
        Self::from_counts(counts).expect("merged histogram has samples")
    }

    /// `Σ (fraction − 0.05)²`; zero for a flat histogram.
    pub fn objective(&self) -> f64 {
        self.fractions.iter().map(|f| (f - COVERAGE_BIN_WIDTH).powi(2)).sum()
    }

    pub fn max_deviation(&self) -> f64 {
        self.fractions.iter().map(|f| (f - COVERAGE_BIN_WIDTH).abs()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,fraction\n");
        for (i, (c, f)) in self.counts.iter().zip(&self.fractions).enumerate() {
            let lo = i as f64 * COVERAGE_BIN_WIDTH;
            out.push_str(&format!("{lo:.2},{:.2},{c},{f:.6}\n", lo + COVERAGE_BIN_WIDTH));
        }
        out
    }
}

pub fn coverage_histogram(samples: &[CalibrationSample]) -> Result<CoverageHistogram> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    CoverageHistogram::from_coverages(samples.iter().map(CalibrationSample::coverage))
}

/// 61 log-spaced temperatures from 0.25 to 4; 1 and 2 are grid points.
pub fn default_t_grid() -> Vec<f64> {
    (0..61).map(|k| 2f64.powf((k as f64 - 30.0) / 15.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub objective: f64,
    /// `(T, objective)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
    pub histogram: CoverageHistogram,
}

impl TemperatureFit {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("temperature,objective\n");
        for (t, o) in &self.curve {
            out.push_str(&format!("{t:.6},{o:.9}\n"));
        }
        out
    }
}

/// Scaled-coverage evaluator for one sample: log-values relative to the
/// peak, with the cells at or above the ground-truth level flagged.
struct ScaledCoverage {
    logs: Vec<f64>,
    upper: Vec<bool>,
    gt_is_zero: bool,
}

impl ScaledCoverage {
    fn new(sample: &CalibrationSample) -> Self {
        let values = sample.map.values();
        let max = values.iter().copied().fold(0.0, f64::max);
        let level = values[[sample.row, sample.col]];
        let mut logs = Vec::new();
        let mut upper = Vec::new();
        for v in values.iter().filter(|v| **v > 0.0) {
            logs.push((v / max).ln());
            upper.push(*v >= level);
        }
        Self { logs, upper, gt_is_zero: level == 0.0 }
    }

    /// Coverage of the ground truth after `temperature_scale(T)`. Power
    /// scaling keeps the cell order, so the upper set is fixed.
    fn at(&self, inv_t: f64) -> f64 {
        if self.gt_is_zero {
            return 1.0;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (l, up) in self.logs.iter().zip(&self.upper) {
            let w = (inv_t * l).exp();
            den += w;
            if *up {
                num += w;
            }
        }
        num / den
    }
}

/// Picks the grid temperature whose rescaled maps give the flattest
/// coverage histogram. Ties go to the temperature closest to 1.
pub fn fit_temperature(samples: &[CalibrationSample], t_grid: &[f64]) -> Result<TemperatureFit> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    if t_grid.is_empty() {
        return Err(Error::Empty("temperature grid"));
    }
    if let Some(t) = t_grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(format!("temperature {t} must be positive")));
    }
    let inv: Vec<f64> = t_grid.iter().map(|t| 1.0 / t).collect();
    let mut counts = vec![vec![0u64; COVERAGE_BINS]; t_grid.len()];
    for sample in samples {
        let sc = ScaledCoverage::new(sample);
        for (j, a) in inv.iter().enumerate() {
            counts[j][CoverageHistogram::bin_of(sc.at(*a))] += 1;
        }
    }
    let hists = counts.into_iter().map(CoverageHistogram::from_counts).collect::<Result<Vec<_>>>()?;
    let curve: Vec<(f64, f64)> = t_grid.iter().zip(&hists).map(|(t, h)| (*t, h.objective())).collect();

    let mut best = 0;
    for (j, (t, obj)) in curve.iter().enumerate() {
        let (bt, bobj) = curve[best];
        let tie = (obj - bobj).abs() <= 1e-15;
        if (!tie && *obj < bobj) || (tie && t.ln().abs() < bt.ln().abs()) {
            best = j;
        }
    }
    let (temperature, objective) = curve[best];
    Ok(TemperatureFit { temperature, objective, curve, histogram: hists[best].clone() })
}

/// Applies one temperature to every map.
pub fn apply_temperature(samples: &[CalibrationSample], temperature: f64) -> Result<Vec<CalibrationSample>> {
    samples
        .iter()
        .map(|s| Ok(CalibrationSample { map: temperature_scale(&s.map, temperature)?, ..s.clone() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub centers: Vec<f64>,
    /// `None` for empty bins.
    pub mean_score: Vec<Option<f64>>,
    pub frequency: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub curve: ReliabilityCurve,
    pub ece: f64,
}

impl Reliability {
    pub fn to_csv(&self) -> String {
        let c = &self.curve;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("bin_center,mean_score,frequency,count\n");
        for i in 0..c.centers.len() {
            out.push_str(&format!(
                "{:.6},{},{},{}\n",
                c.centers[i],
                opt(c.mean_score[i]),
                opt(c.frequency[i]),
                c.counts[i]
            ));
        }
        out
    }
}

/// Equal-width reliability diagram of presence scores against labels,
/// with expected calibration error `Σ (n_b / N) |mean score − frequency|`.
pub fn presence_reliability(flags: &[bool], scores: &[f64], n_bins: usize) -> Result<Reliability> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    if flags.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} flags but {} scores", flags.len(), scores.len())));
    }
    if flags.is_empty() {
        return Err(Error::Empty("presence scores"));
    }
    let mut sum_score = vec![0.0; n_bins];
    let mut positives = vec![0u64; n_bins];
    let mut counts = vec![0u64; n_bins];
    for (i, (f, s)) in flags.iter().zip(scores).enumerate() {
        if !(0.0..=1.0).contains(s) {
            return Err(Error::InvalidArgument(format!("score {s} at index {i} outside [0, 1]")));
        }
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        sum_score[b] += s;
        positives[b] += *f as u64;
        counts[b] += 1;
    }
    let n = flags.len() as f64;
    let mut ece = 0.0;
    let mut mean_score = Vec::with_capacity(n_bins);
    let mut frequency = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if counts[b] == 0 {
            mean_score.push(None);
            frequency.push(None);
            continue;
        }
        let m = sum_score[b] / counts[b] as f64;
        let f = positives[b] as f64 / counts[b] as f64;
        ece += counts[b] as f64 / n * (m - f).abs();
        mean_score.push(Some(m));
        frequency.push(Some(f));
    }
    let centers = (0..n_bins).map(|b| (b as f64 + 0.5) / n_bins as f64).collect();
    Ok(Reliability { curve: ReliabilityCurve { centers, mean_score, frequency, counts }, ece })
}

/// Gaussian blobs with random subpixel centers and widths; each ground truth
/// is drawn from its own map, so the set is calibrated by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub grid: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { grid: 32, sigma_min: 3.0, sigma_max: 6.0 }
    }
}

pub fn synthetic_blob<R: Rng>(window: &ActivationWindow, cfg: &SyntheticConfig, rng: &mut R) -> Result<ProbabilityMap> {
    let n = cfg.grid as f64;
    let sigma = rng.random_range(cfg.sigma_min..=cfg.sigma_max);
    let cx = rng.random_range(0.25 * n..0.75 * n);
    let cy = rng.random_range(0.25 * n..0.75 * n);
    let mut values = ndarray::Array2::from_shape_fn((cfg.grid, cfg.grid), |(r, c)| {
        let dx = c as f64 + 0.5 - cx;
        let dy = r as f64 + 0.5 - cy;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    values /= values.sum();
    ProbabilityMap::new(*window, values, 0)
}

pub fn synthetic_calibrated(n: usize, cfg: &SyntheticConfig, seed: u64) -> Result<Vec<CalibrationSample>> {
    if cfg.grid == 0 || !(cfg.sigma_min > 0.0 && cfg.sigma_min <= cfg.sigma_max) {
        return Err(Error::InvalidArgument(format!("invalid synthetic config {cfg:?}")));
    }
    let side = cfg.grid as f64;
    let window = ActivationWindow::new(Rect::new(0.0, 0.0, side, side)?, cfg.grid, cfg.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let map = synthetic_blob(&window, cfg, &mut rng)?;
            let dist =
                WeightedIndex::new(map.values().iter().copied()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let idx = dist.sample(&mut rng);
            CalibrationSample::new(map, idx % cfg.grid, idx / cfg.grid)
        })
        .collect()
}
