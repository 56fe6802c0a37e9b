//! File formats: COCO keypoint ground truth (optionally with a per-keypoint
//! `presence` array), keypoint predictions, and the PMAP binary container.
//!
//! PMAP layout, all little-endian:
//!
//! ```text
//! magic    "PMAP"                 4 bytes
//! version  u32 (= 1)
//! K        u32                    number of maps
//! grid_h   u32
//! grid_w   u32
//! window   4 × f64                x0, y0, x1, y1 in image pixels
//! presence K × f32
//! values   K × grid_h × grid_w × f32, row-major
//! ```

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{ActivationWindow, Rect};
use crate::pose::{Keypoint, PoseInstance, NUM_KEYPOINTS};
use crate::probmap::ProbabilityMap;

pub const PMAP_MAGIC: [u8; 4] = *b"PMAP";
pub const PMAP_VERSION: u32 = 1;
pub const PMAP_HEADER_LEN: usize = 4 + 4 * 4 + 4 * 8;
/// Allowed deviation of a stored map's mass from 1.
pub const PMAP_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum InteropError {
    #[error("bad magic: expected \"PMAP\"")]
    BadMagic,

    #[error("unsupported PMAP version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input: need {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing bytes: expected {expected} bytes, got {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("map {index} is not normalized (sum = {sum})")]
    NotNormalized { index: usize, sum: f64 },

    #[error("invalid value {value} at {what} {index}")]
    InvalidValue { what: &'static str, index: usize, value: f64 },

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema violation in {}: {reason}", location(.annotation_id, .image_id))]
    Schema { annotation_id: Option<u64>, image_id: Option<u64>, reason: String },
}

fn location(annotation_id: &Option<u64>, image_id: &Option<u64>) -> String {
    match (annotation_id, image_id) {
        (Some(a), _) => format!("annotation {a}"),
        (None, Some(i)) => format!("image {i}"),
        (None, None) => "document".to_string(),
    }
}

impl InteropError {
    /// Stable short code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            InteropError::BadMagic => "bad-magic",
            InteropError::UnsupportedVersion(_) => "bad-version",
            InteropError::Truncated { .. } => "truncated",
            InteropError::TrailingBytes { .. } => "trailing-bytes",
            InteropError::NotNormalized { .. } => "not-normalized",
            InteropError::InvalidValue { .. } => "invalid-value",
            InteropError::InvalidWindow(_) => "invalid-window",
            InteropError::Json(_) => "json",
            InteropError::Schema { .. } => "schema",
        }
    }
}

type Result<T> = std::result::Result<T, InteropError>;

fn schema(annotation_id: Option<u64>, image_id: Option<u64>, reason: impl Into<String>) -> InteropError {
    InteropError::Schema { annotation_id, image_id, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    /// `[x, y, v] × 17`.
    pub keypoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence: Option<Vec<u8>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtDocument {
    pub images: Vec<GtImage>,
    pub annotations: Vec<GtAnnotation>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl GtAnnotation {
    fn validate(&self) -> Result<()> {
        let id = Some(self.id);
        if self.keypoints.len() != 3 * NUM_KEYPOINTS {
            return Err(schema(id, None, format!("keypoints has length {}, expected 51", self.keypoints.len())));
        }
        for (k, triple) in self.keypoints.chunks(3).enumerate() {
            if !triple[0].is_finite() || !triple[1].is_finite() {
                return Err(schema(id, None, format!("keypoint {k} has non-finite coordinates")));
            }
            if ![0.0, 1.0, 2.0].contains(&triple[2]) {
                return Err(schema(id, None, format!("keypoint {k} has visibility {}", triple[2])));
            }
        }
        let [_, _, w, h] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) || !(w > 0.0 && h > 0.0) {
            return Err(schema(id, None, format!("invalid bbox {:?}", self.bbox)));
        }
        if let Some(a) = self.area {
            if !(a.is_finite() && a >= 0.0) {
                return Err(schema(id, None, format!("invalid area {a}")));
            }
        }
        if let Some(p) = &self.presence {
            if p.len() != NUM_KEYPOINTS {
                return Err(schema(id, None, format!("presence has length {}, expected 17", p.len())));
            }
            if let Some(v) = p.iter().find(|v| **v > 1) {
                return Err(schema(id, None, format!("presence value {v} is not 0/1")));
            }
        }
        Ok(())
    }

    pub fn to_instance(&self) -> crate::Result<PoseInstance> {
        let [x, y, w, h] = self.bbox;
        let bbox = Rect::from_xywh(x, y, w, h)?;
        let keypoints = self
            .keypoints
            .chunks(3)
            .enumerate()
            .map(|(k, t)| Keypoint {
                x: t[0],
                y: t[1],
                visibility: t[2] as u8,
                confidence: 0.0,
                presence: self.presence.as_ref().map(|p| p[k] as f64),
            })
            .collect();
        PoseInstance::new(self.id, self.image_id, bbox, self.area, keypoints)
    }

    /// Annotation carrying `inst`'s geometry; unrelated fields come from
    /// `template`. A presence array is written when any keypoint has one.
    pub fn from_instance(inst: &PoseInstance, template: &GtAnnotation) -> GtAnnotation {
        let keypoints = inst.keypoints.iter().flat_map(|k| [k.x, k.y, k.visibility as f64]).collect();
        let presence = inst
            .keypoints
            .iter()
            .any(|k| k.presence.is_some())
            .then(|| inst.keypoints.iter().map(|k| u8::from(k.presence.unwrap_or(0.0) >= 0.5)).collect());
        let mut extra = template.extra.clone();
        if extra.contains_key("num_keypoints") {
            extra.insert("num_keypoints".into(), Value::from(inst.labeled_count() as u64));
        }
        GtAnnotation {
            id: inst.id,
            image_id: inst.image_id,
            bbox: inst.bbox.to_xywh(),
            area: inst.area,
            keypoints,
            presence,
            extra,
        }
    }
}

impl GtDocument {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(schema(None, Some(img.id), "image has zero extent"));
            }
            if !ids.insert(img.id) {
                return Err(schema(None, Some(img.id), "duplicate image id"));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for ann in &self.annotations {
            ann.validate()?;
            if !ids.contains(&ann.image_id) {
                return Err(schema(Some(ann.id), Some(ann.image_id), "unknown image id"));
            }
            if !ann_ids.insert(ann.id) {
                return Err(schema(Some(ann.id), None, "duplicate annotation id"));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&GtImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn instances(&self) -> crate::Result<Vec<PoseInstance>> {
        self.annotations.iter().map(GtAnnotation::to_instance).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("GT documents always serialize")
    }
}

pub fn parse_gt(bytes: &[u8]) -> Result<GtDocument> {
    let doc: GtDocument = serde_json::from_slice(bytes)?;
    doc.validate()?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    pub score: f64,
    /// `[x, y, confidence] × 17`.
    pub keypoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presence: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    /// Optional path of the PMAP file holding this instance's maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmap: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

fn default_category() -> u64 {
    1
}

/// COCO results format: a JSON array of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionDocument(pub Vec<PredictionEntry>);

impl PredictionEntry {
    fn validate(&self, index: usize) -> Result<()> {
        let id = Some(self.id.unwrap_or(index as u64));
        if self.keypoints.len() != 3 * NUM_KEYPOINTS {
            return Err(schema(id, Some(self.image_id), format!("keypoints has length {}", self.keypoints.len())));
        }
        if !self.score.is_finite() {
            return Err(schema(id, Some(self.image_id), "non-finite score"));
        }
        for (k, t) in self.keypoints.chunks(3).enumerate() {
            if !t[0].is_finite() || !t[1].is_finite() {
                return Err(schema(id, Some(self.image_id), format!("keypoint {k} has non-finite coordinates")));
            }
            if !(0.0..=1.0).contains(&t[2]) {
                return Err(schema(
                    id,
                    Some(self.image_id),
                    format!("keypoint {k} confidence {} outside [0, 1]", t[2]),
                ));
            }
        }
        if let Some(p) = &self.presence {
            if p.len() != NUM_KEYPOINTS {
                return Err(schema(id, Some(self.image_id), format!("presence has length {}", p.len())));
            }
            if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(schema(id, Some(self.image_id), format!("presence {v} outside [0, 1]")));
            }
        }
        if let Some(b) = &self.bbox {
            if !b.iter().all(|v| v.is_finite()) || !(b[2] > 0.0 && b[3] > 0.0) {
                return Err(schema(id, Some(self.image_id), "invalid bbox"));
            }
        }
        Ok(())
    }

    pub fn to_instance(&self, index: usize) -> PoseInstance {
        let keypoints: Vec<Keypoint> = self
            .keypoints
            .chunks(3)
            .enumerate()
            .map(|(k, t)| Keypoint::predicted(t[0], t[1], t[2], self.presence.as_ref().map(|p| p[k])))
            .collect();
        let bbox = match self.bbox {
            Some([x, y, w, h]) => Rect::from_xywh(x, y, w, h).ok(),
            None => None,
        };
        let bbox = bbox.unwrap_or_else(|| bounds_or_unit(&keypoints));
        PoseInstance {
            id: self.id.unwrap_or(index as u64),
            image_id: self.image_id,
            bbox,
            area: None,
            score: self.score,
            keypoints,
        }
    }

    pub fn from_instance(inst: &PoseInstance) -> PredictionEntry {
        let has_presence = inst.keypoints.iter().any(|k| k.presence.is_some());
        PredictionEntry {
            id: Some(inst.id),
            image_id: inst.image_id,
            category_id: 1,
            score: inst.score,
            keypoints: inst.keypoints.iter().flat_map(|k| [k.x, k.y, k.confidence]).collect(),
            presence: has_presence.then(|| inst.keypoints.iter().map(|k| k.presence.unwrap_or(1.0)).collect()),
            bbox: None,
            pmap: None,
            extra: Map::new(),
        }
    }
}

fn bounds_or_unit(kps: &[Keypoint]) -> Rect {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for k in kps {
        x0 = x0.min(k.x);
        y0 = y0.min(k.y);
        x1 = x1.max(k.x);
        y1 = y1.max(k.y);
    }
    Rect::new(x0, y0, x1, y1).unwrap_or(Rect { x0, y0, x1: x0 + 1.0, y1: y0 + 1.0 })
}

impl PredictionDocument {
    pub fn validate(&self) -> Result<()> {
        self.0.iter().enumerate().try_for_each(|(i, e)| e.validate(i))
    }

    pub fn instances(&self) -> Vec<PoseInstance> {
        self.0.iter().enumerate().map(|(i, e)| e.to_instance(i)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("prediction documents always serialize")
    }
}

pub fn parse_predictions(bytes: &[u8]) -> Result<PredictionDocument> {
    let doc: PredictionDocument = serde_json::from_slice(bytes)?;
    doc.validate()?;
    Ok(doc)
}

/// Maps for all keypoints of one instance over one window, stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct PmapFile {
    window: ActivationWindow,
    presence: Vec<f32>,
    maps: Vec<Vec<f32>>,
}

fn check_maps(window: &ActivationWindow, presence: &[f32], maps: &[Vec<f32>]) -> Result<()> {
    if presence.len() != maps.len() {
        return Err(InteropError::InvalidWindow("presence and map counts differ".into()));
    }
    for (index, p) in presence.iter().enumerate() {
        if !(0.0..=1.0).contains(p) {
            return Err(InteropError::InvalidValue { what: "presence", index, value: *p as f64 });
        }
    }
    let cells = window.cell_count();
    for (index, m) in maps.iter().enumerate() {
        if m.len() != cells {
            return Err(InteropError::InvalidWindow(format!("map {index} has {} cells, grid has {cells}", m.len())));
        }
        if let Some(v) = m.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(InteropError::InvalidValue { what: "map", index, value: *v as f64 });
        }
        let sum: f64 = m.iter().map(|v| *v as f64).sum();
        if (sum - 1.0).abs() > PMAP_SUM_TOLERANCE {
            return Err(InteropError::NotNormalized { index, sum });
        }
    }
    Ok(())
}

impl PmapFile {
    pub fn new(window: ActivationWindow, presence: Vec<f32>, maps: Vec<Vec<f32>>) -> Result<Self> {
        check_maps(&window, &presence, &maps)?;
        Ok(Self { window, presence, maps })
    }

    /// Converts maps (keypoint type = position) to f32 storage.
    pub fn from_maps(maps: &[ProbabilityMap], presence: &[f64]) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(InteropError::InvalidWindow("no maps; use PmapFile::new for empty files".into()));
        };
        let window = *first.window();
        if maps.iter().any(|m| m.window() != &window) {
            return Err(InteropError::InvalidWindow("maps use different windows".into()));
        }
        let values = maps.iter().map(|m| m.values().iter().map(|v| *v as f32).collect()).collect();
        Self::new(window, presence.iter().map(|p| *p as f32).collect(), values)
    }

    pub fn window(&self) -> &ActivationWindow {
        &self.window
    }

    pub fn presence(&self) -> &[f32] {
        &self.presence
    }

    pub fn raw_maps(&self) -> &[Vec<f32>] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Map `k` widened to f64 and renormalized.
    pub fn map(&self, k: usize) -> crate::Result<ProbabilityMap> {
        let shape = (self.window.grid_h(), self.window.grid_w());
        let values: Vec<f64> = self.maps[k].iter().map(|v| *v as f64).collect();
        let arr = Array2::from_shape_vec(shape, values).expect("length checked on construction");
        ProbabilityMap::new(self.window, arr, k)
    }

    pub fn maps(&self) -> crate::Result<Vec<ProbabilityMap>> {
        (0..self.maps.len()).map(|k| self.map(k)).collect()
    }
}

pub fn write_pmap(file: &PmapFile) -> Vec<u8> {
    let cells = file.window.cell_count();
    let mut out = Vec::with_capacity(PMAP_HEADER_LEN + 4 * file.maps.len() * (1 + cells));
    out.extend_from_slice(&PMAP_MAGIC);
    out.extend_from_slice(&PMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(file.maps.len() as u32).to_le_bytes());
    out.extend_from_slice(&(file.window.grid_h() as u32).to_le_bytes());
    out.extend_from_slice(&(file.window.grid_w() as u32).to_le_bytes());
    let r = file.window.rect();
    for v in [r.x0, r.y0, r.x1, r.y1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &file.presence {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for m in &file.maps {
        for v in m {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

pub fn read_pmap(bytes: &[u8]) -> Result<PmapFile> {
    if bytes.len() < 4 {
        return Err(InteropError::Truncated { expected: PMAP_HEADER_LEN, actual: bytes.len() });
    }
    if bytes[..4] != PMAP_MAGIC {
        return Err(InteropError::BadMagic);
    }
    if bytes.len() < PMAP_HEADER_LEN {
        return Err(InteropError::Truncated { expected: PMAP_HEADER_LEN, actual: bytes.len() });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != PMAP_VERSION {
        return Err(InteropError::UnsupportedVersion(version));
    }
    let k = r.u32() as usize;
    let grid_h = r.u32() as usize;
    let grid_w = r.u32() as usize;
    let (x0, y0, x1, y1) = (r.f64(), r.f64(), r.f64(), r.f64());

    let expected = grid_h
        .checked_mul(grid_w)
        .and_then(|cells| cells.checked_add(1))
        .and_then(|per_map| per_map.checked_mul(k))
        .and_then(|floats| floats.checked_mul(4))
        .and_then(|payload| payload.checked_add(PMAP_HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(InteropError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(InteropError::TrailingBytes { expected, actual: bytes.len() });
    }
    let rect = Rect::new(x0, y0, x1, y1).map_err(|e| InteropError::InvalidWindow(e.to_string()))?;
    let window = ActivationWindow::new(rect, grid_w, grid_h).map_err(|e| InteropError::InvalidWindow(e.to_string()))?;
    let presence: Vec<f32> = (0..k).map(|_| r.f32()).collect();
    let cells = grid_h * grid_w;
    let maps: Vec<Vec<f32>> = (0..k).map(|_| (0..cells).map(|_| r.f32()).collect()).collect();
    PmapFile::new(window, presence, maps)
}
