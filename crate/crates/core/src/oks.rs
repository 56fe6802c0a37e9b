//! Object Keypoint Similarity and the dense OKS loss.
//!
//! OKS between two points at image distance `d` is `exp(−d² / (2 s² κ²))`,
//! with `s` the object scale (√area, pixels) and `κ` a per-keypoint constant.
//! The COCO constants are stored here already doubled, so `κ_nose = 0.052`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ActivationWindow, Point};
use crate::pose::{KEYPOINT_NAMES, NUM_KEYPOINTS};
use crate::probmap::ProbabilityMap;

/// COCO per-keypoint sigmas.
const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089,
    0.089,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub scale: f64,
    pub kappa: f64,
}

impl OksParams {
    pub fn new(scale: f64, kappa: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("object scale {scale} must be positive")));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa {kappa} must be positive")));
        }
        Ok(Self { scale, kappa })
    }

    /// Standard deviation of the OKS Gaussian in image pixels.
    pub fn sigma_px(&self) -> f64 {
        self.scale * self.kappa
    }

    fn inv_two_var(&self) -> f64 {
        1.0 / (2.0 * self.scale * self.scale * self.kappa * self.kappa)
    }
}

pub fn oks_similarity(d: f64, params: &OksParams) -> f64 {
    (-d * d * params.inv_two_var()).exp()
}

/// Per-keypoint κ constants, indexed by keypoint type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaTable(pub [f64; NUM_KEYPOINTS]);

impl Default for KappaTable {
    fn default() -> Self {
        Self(COCO_SIGMAS.map(|s| 2.0 * s))
    }
}

impl KappaTable {
    pub fn get(&self, keypoint_type: usize) -> f64 {
        self.0[keypoint_type]
    }

    pub fn params(&self, scale: f64, keypoint_type: usize) -> Result<OksParams> {
        if keypoint_type >= NUM_KEYPOINTS {
            return Err(Error::InvalidArgument(format!("keypoint type {keypoint_type} out of range")));
        }
        OksParams::new(scale, self.0[keypoint_type])
    }

    pub fn index_of(name: &str) -> Option<usize> {
        KEYPOINT_NAMES
            .iter()
            .position(|n| *n == name)
            .or_else(|| name.parse::<usize>().ok().filter(|i| *i < NUM_KEYPOINTS))
    }
}

/// Parses `name = value` lines (keypoint name or index; `#` starts a comment).
/// Keys not mentioned keep their default value.
impl FromStr for KappaTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut table = KappaTable::default();
        for (lineno, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::InvalidArgument(format!("kappa table line {}: {why}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let index = Self::index_of(key.trim()).ok_or_else(|| bad("unknown keypoint"))?;
            let value: f64 = value.trim().parse().map_err(|_| bad("value is not a number"))?;
            if !(value > 0.0 && value.is_finite()) {
                return Err(bad("kappa must be positive"));
            }
            table.0[index] = value;
        }
        Ok(table)
    }
}

impl fmt::Display for KappaTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, k) in KEYPOINT_NAMES.iter().zip(self.0) {
            writeln!(f, "{name}={k}")?;
        }
        Ok(())
    }
}

/// OKS evaluated at grid-cell offsets, `(2r+1) × (2r+1)`, center value 1.
pub fn oks_kernel(params: &OksParams, window: &ActivationWindow, radius_cells: usize) -> Array2<f64> {
    let n = 2 * radius_cells + 1;
    let r = radius_cells as f64;
    let (cw, ch) = (window.cell_w(), window.cell_h());
    Array2::from_shape_fn((n, n), |(row, col)| {
        let dx = (col as f64 - r) * cw;
        let dy = (row as f64 - r) * ch;
        oks_similarity(dx.hypot(dy), params)
    })
}

/// Smallest kernel radius (in cells) whose disc holds at least `mass` of the
/// OKS Gaussian.
pub fn kernel_radius_for_mass(params: &OksParams, window: &ActivationWindow, mass: f64) -> usize {
    let sigma_cells = params.sigma_px() / window.cell_w().min(window.cell_h());
    let radius = sigma_cells * (-2.0 * (1.0 - mass).ln()).sqrt();
    radius.ceil() as usize
}

fn axis_weights(n: usize, cell: f64, params: &OksParams) -> Vec<f64> {
    // weight[k] = OKS factor for an offset of k cells along one axis
    let inv = params.inv_two_var();
    (0..n).map(|k| (-(k as f64 * cell).powi(2) * inv).exp()).collect()
}

/// Expected OKS at every cell center: `E[u] = Σ_x p(x) · OKS(‖u − x‖)`.
///
/// The Gaussian kernel factors into per-axis terms, so this runs as two 1-D
/// passes over the full grid extent with no truncation.
pub fn expected_oks_map(map: &ProbabilityMap, params: &OksParams) -> Array2<f64> {
    let w = map.window();
    let (gh, gw) = (w.grid_h(), w.grid_w());
    let wx = axis_weights(gw, w.cell_w(), params);
    let wy = axis_weights(gh, w.cell_h(), params);
    let p = map.values();

    let mut rows = Array2::<f64>::zeros((gh, gw));
    for r in 0..gh {
        for col in 0..gw {
            let mut acc = 0.0;
            for c in 0..gw {
                acc += p[[r, c]] * wx[col.abs_diff(c)];
            }
            rows[[r, col]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((gh, gw));
    for row in 0..gh {
        for col in 0..gw {
            let mut acc = 0.0;
            for r in 0..gh {
                acc += rows[[r, col]] * wy[row.abs_diff(r)];
            }
            out[[row, col]] = acc.min(1.0);
        }
    }
    out
}

/// Expected OKS at an arbitrary image point.
pub fn expected_oks_at(map: &ProbabilityMap, params: &OksParams, u: &Point) -> f64 {
    let w = map.window();
    map.values()
        .indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((row, col), v)| v * oks_similarity(w.cell_center(col, row).distance(u), params))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the Sobel smoothness term, in `[0, 1]`.
    pub alpha: f64,
    pub sobel_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.02, sobel_epsilon: 1e-12 }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, sobel_epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
        if sobel_epsilon.is_nan() || sobel_epsilon <= 0.0 {
            return Err(Error::InvalidArgument("sobel epsilon must be positive".into()));
        }
        Ok(Self { alpha, sobel_epsilon })
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Dense OKS loss for one ground-truth location, with the per-cell risk
/// weights precomputed:
///
/// `L(p) = Σ_i (1−α)(1 − OKS(x_i, gt)) p_i + α Σ_i √(Gx_i² + Gy_i² + ε)`
///
/// where `Gx, Gy` are 3×3 Sobel responses of `p` with replicate padding.
/// The loss is defined for any real grid, which keeps finite-difference
/// checks off the simplex possible.
#[derive(Debug, Clone)]
pub struct DenseOksLoss {
    risk: Array2<f64>,
    cfg: LossConfig,
}

impl DenseOksLoss {
    pub fn new(window: &ActivationWindow, gt: &Point, params: &OksParams, cfg: LossConfig) -> Result<Self> {
        if !window.contains(gt) {
            return Err(Error::OutsideWindow { x: gt.x, y: gt.y });
        }
        let cfg = LossConfig::new(cfg.alpha, cfg.sobel_epsilon)?;
        let risk = Array2::from_shape_fn((window.grid_h(), window.grid_w()), |(row, col)| {
            (1.0 - cfg.alpha) * (1.0 - oks_similarity(window.cell_center(col, row).distance(gt), params))
        });
        Ok(Self { risk, cfg })
    }

    /// `(1−α)(1 − OKS(x_i, gt))` per cell.
    pub fn risk_weights(&self) -> &Array2<f64> {
        &self.risk
    }

    pub fn value(&self, p: &Array2<f64>) -> f64 {
        let risk: f64 = self.risk.iter().zip(p.iter()).map(|(r, v)| r * v).sum();
        if self.cfg.alpha == 0.0 {
            return risk;
        }
        let (gx, gy) = sobel(p);
        let eps = self.cfg.sobel_epsilon;
        let reg: f64 = gx.iter().zip(gy.iter()).map(|(a, b)| (a * a + b * b + eps).sqrt()).sum();
        risk + self.cfg.alpha * reg
    }

    pub fn gradient(&self, p: &Array2<f64>) -> Array2<f64> {
        let mut grad = self.risk.clone();
        if self.cfg.alpha == 0.0 {
            return grad;
        }
        let (gh, gw) = p.dim();
        let (gx, gy) = sobel(p);
        let eps = self.cfg.sobel_epsilon;
        let alpha = self.cfg.alpha;
        // Adjoint of the padded Sobel: scatter each response's sensitivity
        // back to the (clamped) source cells it read from.
        for row in 0..gh {
            for col in 0..gw {
                let (a, b) = (gx[[row, col]], gy[[row, col]]);
                let g = (a * a + b * b + eps).sqrt();
                let (ux, uy) = (alpha * a / g, alpha * b / g);
                for (dr, (kx_row, ky_row)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                    let sr = clamp_index(row, dr, gh);
                    for dc in 0..3 {
                        let sc = clamp_index(col, dc, gw);
                        grad[[sr, sc]] += kx_row[dc] * ux + ky_row[dc] * uy;
                    }
                }
            }
        }
        grad
    }
}

fn clamp_index(center: usize, tap: usize, len: usize) -> usize {
    (center + tap).saturating_sub(1).min(len - 1)
}

/// Sobel responses `(Gx, Gy)` with replicate padding.
pub fn sobel(p: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (gh, gw) = p.dim();
    let mut gx = Array2::zeros((gh, gw));
    let mut gy = Array2::zeros((gh, gw));
    for row in 0..gh {
        for col in 0..gw {
            let (mut ax, mut ay) = (0.0, 0.0);
            for dr in 0..3 {
                let sr = clamp_index(row, dr, gh);
                for dc in 0..3 {
                    let v = p[[sr, clamp_index(col, dc, gw)]];
                    ax += SOBEL_X[dr][dc] * v;
                    ay += SOBEL_Y[dr][dc] * v;
                }
            }
            gx[[row, col]] = ax;
            gy[[row, col]] = ay;
        }
    }
    (gx, gy)
}

pub fn dense_oks_loss(map: &ProbabilityMap, gt: &Point, params: &OksParams, cfg: LossConfig) -> Result<f64> {
    Ok(DenseOksLoss::new(map.window(), gt, params, cfg)?.value(map.values()))
}

/// `∂L/∂p` for [`dense_oks_loss`].
pub fn dense_oks_loss_grad(
    map: &ProbabilityMap,
    gt: &Point,
    params: &OksParams,
    cfg: LossConfig,
) -> Result<Array2<f64>> {
    Ok(DenseOksLoss::new(map.window(), gt, params, cfg)?.gradient(map.values()))
}
