//! Probability maps over activation windows.
//!
//! A map is a nonnegative `grid_h × grid_w` array (row-major, indexed
//! `[row, col]`) that sums to one. Maps are produced from logits with
//! Sparsemax, which can assign exact zeros.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ActivationWindow;

/// Deviation from unit mass that construction silently renormalizes.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    window: ActivationWindow,
    values: Array2<f64>,
    keypoint_type: usize,
}

impl ProbabilityMap {
    /// Validates shape, sign and mass. Maps within 1e-6 of unit mass are
    /// renormalized; anything further off is rejected.
    pub fn new(window: ActivationWindow, values: Array2<f64>, keypoint_type: usize) -> Result<Self> {
        if values.dim() != (window.grid_h(), window.grid_w()) {
            return Err(Error::InvalidArgument(format!(
                "map shape {:?} does not match grid {}x{}",
                values.dim(),
                window.grid_w(),
                window.grid_h()
            )));
        }
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if *v < 0.0 {
                return Err(Error::InvalidArgument(format!("negative mass {v} at index {index}")));
            }
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::NotNormalized { sum });
        }
        let values = if sum == 1.0 { values } else { values / sum };
        Ok(Self { window, values, keypoint_type })
    }

    /// Sparsemax of `logits` over `window`.
    pub fn from_logits(window: ActivationWindow, logits: &Array2<f64>, keypoint_type: usize) -> Result<Self> {
        let values = sparsemax_grid(logits)?;
        Self::new(window, values, keypoint_type)
    }

    /// Uniform mass over every cell.
    pub fn uniform(window: ActivationWindow, keypoint_type: usize) -> Self {
        let n = window.cell_count() as f64;
        let values = Array2::from_elem((window.grid_h(), window.grid_w()), 1.0 / n);
        Self { window, values, keypoint_type }
    }

    /// All mass on cell `(col, row)`.
    pub fn one_hot(window: ActivationWindow, col: usize, row: usize, keypoint_type: usize) -> Result<Self> {
        if col >= window.grid_w() || row >= window.grid_h() {
            return Err(Error::InvalidArgument(format!("cell ({col}, {row}) outside grid")));
        }
        let mut values = Array2::zeros((window.grid_h(), window.grid_w()));
        values[[row, col]] = 1.0;
        Ok(Self { window, values, keypoint_type })
    }

    pub fn window(&self) -> &ActivationWindow {
        &self.window
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn keypoint_type(&self) -> usize {
        self.keypoint_type
    }

    /// Value of cell `(col, row)`.
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[[row, col]]
    }

    pub fn support_size(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.values.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    /// Same map placed over a different window with the same grid.
    pub fn with_window(&self, window: ActivationWindow) -> Result<Self> {
        if window.grid_w() != self.window.grid_w() || window.grid_h() != self.window.grid_h() {
            return Err(Error::InvalidArgument("grid size mismatch".into()));
        }
        Ok(Self { window, ..self.clone() })
    }
}

/// Probability that a keypoint lies inside the activation window.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PresenceProbability(f64);

impl PresenceProbability {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!("presence {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_present(self, threshold: f64) -> bool {
        self.0 >= threshold
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    match z.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Inputs are shifted by their maximum first, so adding a constant that is
/// exactly representable alongside the inputs leaves the output bit-identical.
pub fn sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("sparsemax input"));
    }
    check_finite(z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|v| v - max).collect();
    let tau = sparsemax_threshold(&shifted);
    Ok(shifted.iter().map(|v| (v - tau).max(0.0)).collect())
}

fn sparsemax_threshold(z: &[f64]) -> f64 {
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    let mut support = 1usize;
    for (k, v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = k + 1;
        if 1.0 + k as f64 * v > cumsum {
            support = k;
            support_sum = cumsum;
        } else {
            break;
        }
    }
    (support_sum - 1.0) / support as f64
}

pub fn sparsemax_grid(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let flat: Vec<f64> = logits.iter().copied().collect();
    let out = sparsemax(&flat)?;
    Ok(Array2::from_shape_vec(logits.dim(), out).expect("shape preserved"))
}

/// Jacobian-vector product of Sparsemax at `z`.
///
/// The Jacobian is `diag(s) − s sᵀ / |S|` with `s` the support indicator, so
/// it is symmetric and this is also the vector-Jacobian product.
pub fn sparsemax_jvp(z: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
    if z.len() != tangent.len() {
        return Err(Error::InvalidArgument("tangent length mismatch".into()));
    }
    let p = sparsemax(z)?;
    let (sum, count) =
        p.iter().zip(tangent).filter(|(pi, _)| **pi > 0.0).fold((0.0, 0usize), |(s, c), (_, t)| (s + t, c + 1));
    let mean = sum / count as f64;
    Ok(p.iter().zip(tangent).map(|(pi, t)| if *pi > 0.0 { t - mean } else { 0.0 }).collect())
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    check_finite(z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// Vector-Jacobian product of softmax (the Jacobian is symmetric).
pub fn softmax_jvp(z: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
    if z.len() != tangent.len() {
        return Err(Error::InvalidArgument("tangent length mismatch".into()));
    }
    let p = softmax(z)?;
    let dot: f64 = p.iter().zip(tangent).map(|(a, b)| a * b).sum();
    Ok(p.iter().zip(tangent).map(|(pi, t)| pi * (t - dot)).collect())
}

/// Power scaling `v ↦ v^(1/T) / Σ v^(1/T)`.
///
/// Zeros stay zero and the argmax set is preserved for every `T > 0`.
pub fn temperature_scale(map: &ProbabilityMap, temperature: f64) -> Result<ProbabilityMap> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let max = map.values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let inv_t = 1.0 / temperature;
    // Relative to the peak so large 1/T does not underflow everything.
    let mut scaled = map.values.mapv(|v| if v > 0.0 { (v / max).powf(inv_t) } else { 0.0 });
    let sum = scaled.sum();
    scaled /= sum;
    Ok(ProbabilityMap { values: scaled, ..map.clone() })
}

/// Total mass of the cells whose value is at least that of `(col, row)`.
///
/// This is the smallest top-mass level containing the cell; tied cells are
/// all included.
pub fn coverage_of_point(map: &ProbabilityMap, col: usize, row: usize) -> f64 {
    let level = map.values[[row, col]];
    map.values.iter().filter(|v| **v >= level).sum()
}
