//! Gradient-descent fits of single probability maps to a target keypoint.
//!
//! Logits are optimized through the normalizer's Jacobian against the dense
//! OKS loss. Each step is accepted only if the loss does not increase; on an
//! increase the step is halved and retried.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::expected_oks_decode;
use crate::error::{Error, Result};
use crate::geometry::{ActivationWindow, Point, Rect};
use crate::oks::{DenseOksLoss, LossConfig, OksParams};
use crate::probmap::{softmax, softmax_jvp, sparsemax, sparsemax_jvp, ProbabilityMap};

pub const MAX_HALVINGS: usize = 40;
pub const DEFAULT_RADII: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Mass level of [`FitReport::mass_radius`].
pub const MASS_RADIUS_LEVEL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    Sparsemax,
    /// Comparison only: softmax never produces exact zeros.
    Softmax,
}

impl Normalizer {
    fn forward(self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Normalizer::Sparsemax => sparsemax(z),
            Normalizer::Softmax => softmax(z),
        }
    }

    /// Both Jacobians are symmetric, so the JVP is also the VJP.
    fn vjp(self, z: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        match self {
            Normalizer::Sparsemax => sparsemax_jvp(z, g),
            Normalizer::Softmax => softmax_jvp(z, g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// Logits uniform in `[-scale, scale]`, drawn from the config seed.
    Random {
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub window: ActivationWindow,
    pub params: OksParams,
    pub loss: LossConfig,
    pub step: f64,
    pub iterations: usize,
    pub seed: u64,
    pub normalizer: Normalizer,
    pub init: Init,
}

impl FitConfig {
    /// 48×64 grid of 1 px cells, step 0.5, 500 iterations, zero logits.
    pub fn new(params: OksParams, loss: LossConfig) -> Self {
        let window =
            ActivationWindow::new(Rect::new(0.0, 0.0, 48.0, 64.0).expect("valid rect"), 48, 64).expect("valid window");
        Self {
            window,
            params,
            loss,
            step: 0.5,
            iterations: 500,
            seed: 0,
            normalizer: Normalizer::Sparsemax,
            init: Init::Zeros,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step {} must be positive", self.step)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if let Init::Random { scale } = self.init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::InvalidArgument(format!("init scale {scale} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_loss: f64,
    /// Distance from the expected-OKS decode to the target, in image px.
    pub location_error: f64,
    pub support_size: usize,
    /// `(radius, mass)` pairs for [`DEFAULT_RADII`].
    pub mass_within: Vec<(f64, f64)>,
    /// Radius holding 90% of the mass.
    pub mass_radius: f64,
    pub entropy: f64,
    pub iterations: usize,
    pub halvings: usize,
    /// Loss before the first step and after every accepted step.
    pub trace: Vec<f64>,
}

impl FitReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.trace.iter().enumerate() {
            out.push_str(&format!("{i},{l:.12e}\n"));
        }
        out
    }
}

/// Fits a map to `gt` and reports its shape.
pub fn fit_map(gt: &Point, cfg: &FitConfig) -> Result<(ProbabilityMap, FitReport)> {
    cfg.validate()?;
    let loss = DenseOksLoss::new(&cfg.window, gt, &cfg.params, cfg.loss)?;
    let shape = (cfg.window.grid_h(), cfg.window.grid_w());
    let n = cfg.window.cell_count();
    let mut z: Vec<f64> = match cfg.init {
        Init::Zeros => vec![0.0; n],
        Init::Random { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
        }
    };
    let eval = |z: &[f64]| -> Result<(Vec<f64>, f64)> {
        let p = cfg.normalizer.forward(z)?;
        let grid = Array2::from_shape_vec(shape, p).expect("cell count matches grid");
        let value = loss.value(&grid);
        Ok((grid.into_raw_vec_and_offset().0, value))
    };

    let (mut p, mut current) = eval(&z)?;
    let mut trace = vec![current];
    if !current.is_finite() {
        return Err(Error::Diverged { iteration: 0, loss: current, trace });
    }
    let mut halvings = 0;
    let mut iterations = 0;
    for it in 1..=cfg.iterations {
        let grid = Array2::from_shape_vec(shape, p.clone()).expect("cell count matches grid");
        let dp = loss.gradient(&grid);
        let dz = cfg.normalizer.vjp(&z, dp.as_slice().expect("standard layout"))?;
        if dz.iter().all(|g| *g == 0.0) {
            break;
        }
        let mut step = cfg.step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = z.iter().zip(&dz).map(|(a, g)| a - step * g).collect();
            let (cp, cl) = eval(&cand)?;
            if !cl.is_finite() {
                return Err(Error::Diverged { iteration: it, loss: cl, trace });
            }
            if cl <= current {
                accepted = Some((cand, cp, cl));
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        iterations = it;
        match accepted {
            Some((cand, cp, cl)) => {
                z = cand;
                p = cp;
                current = cl;
                trace.push(cl);
            }
            // No descent even at a vanishing step: stationary up to rounding.
            None if is_stationary(&dz, current) => break,
            None => return Err(Error::Diverged { iteration: it, loss: current, trace }),
        }
    }

    let values = Array2::from_shape_vec(shape, p).expect("cell count matches grid");
    let map = ProbabilityMap::new(cfg.window, values, 0)?;
    let decoded = expected_oks_decode(&map, &cfg.params);
    let report = FitReport {
        final_loss: current,
        location_error: decoded.location.distance(gt),
        support_size: map.support_size(),
        mass_within: sharpness_report(&map, gt, &DEFAULT_RADII),
        mass_radius: mass_radius(&map, gt, MASS_RADIUS_LEVEL),
        entropy: map.entropy(),
        iterations,
        halvings,
        trace,
    };
    Ok((map, report))
}

fn is_stationary(dz: &[f64], loss: f64) -> bool {
    let norm = dz.iter().map(|g| g * g).sum::<f64>().sqrt();
    norm * 0.5f64.powi(MAX_HALVINGS as i32) <= 1e-12 * (1.0 + loss.abs())
}

/// Mass of the cells whose centers lie within each radius of `gt`.
pub fn sharpness_report(map: &ProbabilityMap, gt: &Point, radii: &[f64]) -> Vec<(f64, f64)> {
    let w = map.window();
    radii
        .iter()
        .map(|r| {
            let mass = map
                .values()
                .indexed_iter()
                .filter(|((row, col), _)| w.cell_center(*col, *row).distance(gt) <= *r)
                .map(|(_, v)| *v)
                .sum::<f64>();
            (*r, mass.min(1.0))
        })
        .collect()
}

/// Radius around `gt` enclosing mass `q`, interpolated linearly between the
/// distances of consecutive cells so that it varies continuously with the map.
pub fn mass_radius(map: &ProbabilityMap, gt: &Point, q: f64) -> f64 {
    let w = map.window();
    let mut cells: Vec<(f64, f64)> = map
        .values()
        .indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((row, col), v)| (w.cell_center(col, row).distance(gt), *v))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Cells at the same distance form one shell.
    let mut shells: Vec<(f64, f64)> = Vec::new();
    for (d, m) in cells {
        match shells.last_mut() {
            Some((sd, sm)) if *sd == d => *sm += m,
            _ => shells.push((d, m)),
        }
    }
    let (mut cum, mut prev_d) = (0.0, 0.0);
    for (d, m) in shells {
        if cum + m >= q {
            return prev_d + (q - cum) / m * (d - prev_d);
        }
        cum += m;
        prev_d = d;
    }
    prev_d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(kappa: f64) -> OksParams {
        OksParams::new(40.0, kappa).unwrap()
    }

    fn small_cfg(kappa: f64, alpha: f64) -> FitConfig {
        let mut cfg = FitConfig::new(params(kappa), LossConfig::new(alpha, 1e-12).unwrap());
        cfg.window = ActivationWindow::new(Rect::new(0.0, 0.0, 16.0, 16.0).unwrap(), 16, 16).unwrap();
        cfg.iterations = 200;
        cfg
    }

    #[test]
    fn alpha_zero_converges_to_nearest_cell() {
        let gt = Point::new(7.3, 9.6);
        let (map, report) = fit_map(&gt, &small_cfg(0.1, 0.0)).unwrap();
        assert_eq!(map.support_size(), 1);
        assert_eq!(map.at(7, 9), 1.0);
        assert!(report.location_error < 0.5);
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn trace_is_monotone_with_regularizer_and_random_start() {
        let mut cfg = small_cfg(0.1, 0.08);
        cfg.init = Init::Random { scale: 0.05 };
        cfg.seed = 3;
        cfg.step = 5.0;
        let (_, report) = fit_map(&Point::new(8.0, 8.0), &cfg).unwrap();
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(report.final_loss < report.trace[0]);
    }

    #[test]
    fn softmax_keeps_full_support() {
        let mut cfg = small_cfg(0.1, 0.0);
        cfg.normalizer = Normalizer::Softmax;
        cfg.iterations = 50;
        let (map, _) = fit_map(&Point::new(8.0, 8.0), &cfg).unwrap();
        assert_eq!(map.support_size(), 256);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg(0.1, 0.0);
        assert!(matches!(fit_map(&Point::new(20.0, 1.0), &cfg), Err(Error::OutsideWindow { .. })));
        cfg.step = 0.0;
        assert!(fit_map(&Point::new(1.0, 1.0), &cfg).is_err());
        cfg.step = 0.5;
        cfg.iterations = 0;
        assert!(fit_map(&Point::new(1.0, 1.0), &cfg).is_err());
    }

    #[test]
    fn sharpness_examples() {
        let w = ActivationWindow::new(Rect::new(0.0, 0.0, 20.0, 20.0).unwrap(), 20, 20).unwrap();
        let hot = ProbabilityMap::one_hot(w, 4, 6, 0).unwrap();
        let gt = Point::new(4.5, 6.5);
        for (_, m) in sharpness_report(&hot, &gt, &[0.0, 0.71, 3.0]) {
            assert_eq!(m, 1.0);
        }
        // Uniform map: disc of radius 5 fully inside the window.
        let uni = ProbabilityMap::uniform(w, 0);
        let table = sharpness_report(&uni, &Point::new(10.0, 10.0), &[1.0, 3.0, 5.0, 8.0]);
        let expected = std::f64::consts::PI * 25.0 / 400.0;
        assert!((table[2].1 - expected).abs() < 0.01, "{} vs {expected}", table[2].1);
        assert!(table.windows(2).all(|p| p[0].1 <= p[1].1));
    }

    #[test]
    fn mass_radius_interpolates() {
        let w = ActivationWindow::new(Rect::new(0.0, 0.0, 3.0, 1.0).unwrap(), 3, 1).unwrap();
        let values = Array2::from_shape_vec((1, 3), vec![0.25, 0.5, 0.25]).unwrap();
        let map = ProbabilityMap::new(w, values, 0).unwrap();
        let gt = Point::new(1.5, 0.5);
        assert_abs_diff_eq!(mass_radius(&map, &gt, 0.5), 0.0);
        // 0.5 at d = 0, then 0.5 more spread over the two cells at d = 1.
        assert_abs_diff_eq!(mass_radius(&map, &gt, 0.9), 0.8, epsilon = 1e-12);
    }
}
