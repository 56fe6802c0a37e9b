//! Point estimates from probability maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::oks::{expected_oks_map, OksParams};
use crate::probmap::{PresenceProbability, ProbabilityMap};

/// Maximum subpixel shift per axis, in cells.
pub const MAX_OFFSET: f64 = 0.5;
pub const DEFAULT_BLUR_SIGMA: f64 = 2.0;
const LOG_FLOOR: f64 = 1e-12;
const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMethod {
    Argmax,
    Udp,
    ExpectedOks,
    DoubleHeatmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedKeypoint {
    /// Image pixels.
    pub location: Point,
    /// Grid units of the decoded map's window.
    pub grid_location: Point,
    /// Peak map value (argmax, UDP) or peak expected OKS.
    pub score: f64,
    pub method: DecodeMethod,
    /// False when refinement was skipped (singular Hessian, border cell).
    pub refined: bool,
}

fn first_argmax(values: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((row, col), v) in values.indexed_iter() {
        if *v > best_v {
            best_v = *v;
            best = (col, row);
        }
    }
    best
}

fn finish(map: &ProbabilityMap, grid: Point, score: f64, method: DecodeMethod, refined: bool) -> DecodedKeypoint {
    DecodedKeypoint { location: map.window().grid_to_image(&grid), grid_location: grid, score, method, refined }
}

/// Center of the largest cell; ties go to the lowest row-major index.
pub fn argmax_decode(map: &ProbabilityMap) -> DecodedKeypoint {
    let (col, row) = first_argmax(map.values());
    let grid = Point::new(col as f64 + 0.5, row as f64 + 0.5);
    finish(map, grid, map.at(col, row), DecodeMethod::Argmax, false)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(4σ)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as i64;
    let (gh, gw) = values.dim();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;

    let mut tmp = Array2::zeros((gh, gw));
    for row in 0..gh {
        for col in 0..gw {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * values[[row, clamp(col as i64 + k as i64 - radius, gw)]];
            }
            tmp[[row, col]] = acc;
        }
    }
    let mut out = Array2::zeros((gh, gw));
    for row in 0..gh {
        for col in 0..gw {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[[clamp(row as i64 + k as i64 - radius, gh), col]];
            }
            out[[row, col]] = acc;
        }
    }
    out
}

/// UDP-style decoding: argmax of the raw map, then one Newton step on the log
/// of the blurred map.
pub fn udp_decode(map: &ProbabilityMap, blur_sigma: f64) -> Result<DecodedKeypoint> {
    if !(blur_sigma > 0.0 && blur_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("blur sigma {blur_sigma} must be positive")));
    }
    let (col, row) = first_argmax(map.values());
    let score = map.at(col, row);
    let logmap = gaussian_blur(map.values(), blur_sigma).mapv(|v| v.max(LOG_FLOOR).ln());
    let (gh, gw) = logmap.dim();
    let at = |c: i64, r: i64| logmap[[r.clamp(0, gh as i64 - 1) as usize, c.clamp(0, gw as i64 - 1) as usize]];
    let (c, r) = (col as i64, row as i64);
    let dx = 0.5 * (at(c + 1, r) - at(c - 1, r));
    let dy = 0.5 * (at(c, r + 1) - at(c, r - 1));
    let dxx = at(c + 1, r) - 2.0 * at(c, r) + at(c - 1, r);
    let dyy = at(c, r + 1) - 2.0 * at(c, r) + at(c, r - 1);
    let dxy = 0.25 * (at(c + 1, r + 1) - at(c + 1, r - 1) - at(c - 1, r + 1) + at(c - 1, r - 1));
    let det = dxx * dyy - dxy * dxy;

    let center = Point::new(col as f64 + 0.5, row as f64 + 0.5);
    if !det.is_finite() || det.abs() < SINGULAR_DET {
        return Ok(finish(map, center, score, DecodeMethod::Udp, false));
    }
    let ox = -(dyy * dx - dxy * dy) / det;
    let oy = -(dxx * dy - dxy * dx) / det;
    let grid = Point::new(center.x + ox.clamp(-MAX_OFFSET, MAX_OFFSET), center.y + oy.clamp(-MAX_OFFSET, MAX_OFFSET));
    Ok(finish(map, grid, score, DecodeMethod::Udp, true))
}

/// Vertex offset of the parabola through `(-1, a), (0, b), (1, c)`; zero when
/// `b` is not a strict local maximum of the fit.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom < 0.0 {
        (0.5 * (a - c) / denom).clamp(-MAX_OFFSET, MAX_OFFSET)
    } else {
        0.0
    }
}

/// Argmax of the expected-OKS map refined per axis by a parabola through the
/// two neighbors. Axes where the peak sits on the grid border are not refined.
pub fn expected_oks_decode(map: &ProbabilityMap, params: &OksParams) -> DecodedKeypoint {
    let e = expected_oks_map(map, params);
    let (gh, gw) = e.dim();
    let (col, row) = first_argmax(&e);
    let peak = e[[row, col]];
    let mut grid = Point::new(col as f64 + 0.5, row as f64 + 0.5);
    let mut refined = true;
    if col > 0 && col + 1 < gw {
        grid.x += parabolic_offset(e[[row, col - 1]], peak, e[[row, col + 1]]);
    } else {
        refined = false;
    }
    if row > 0 && row + 1 < gh {
        grid.y += parabolic_offset(e[[row - 1, col]], peak, e[[row + 1, col]]);
    } else {
        refined = false;
    }
    finish(map, grid, peak, DecodeMethod::ExpectedOks, refined)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionSource {
    Large,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedDecode {
    pub keypoint: DecodedKeypoint,
    pub source: FusionSource,
    /// Presence decision of the wide map.
    pub present: bool,
}

/// Double-heatmap decoding. The wide map decides coarse location and
/// presence; when its estimate falls inside the expert window, the expert
/// map's decode replaces it.
pub fn fuse_double(
    large: &ProbabilityMap,
    expert: &ProbabilityMap,
    params: &OksParams,
    large_presence: PresenceProbability,
    presence_threshold: f64,
) -> Result<FusedDecode> {
    if !large.window().rect().contains_rect(expert.window().rect()) {
        return Err(Error::InvalidWindow("expert window is not inside the wide window".into()));
    }
    let coarse = expected_oks_decode(large, params);
    let (mut keypoint, source) = if expert.window().contains(&coarse.location) {
        (expected_oks_decode(expert, params), FusionSource::Expert)
    } else {
        (coarse, FusionSource::Large)
    };
    keypoint.method = DecodeMethod::DoubleHeatmap;
    Ok(FusedDecode { keypoint, source, present: large_presence.is_present(presence_threshold) })
}
