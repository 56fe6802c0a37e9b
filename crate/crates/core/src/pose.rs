//! Keypoints and person instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};

pub const NUM_KEYPOINTS: usize = 17;

/// COCO keypoint order.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Share of the bbox area used as object area when no segmentation area is
/// available.
pub const BBOX_AREA_FACTOR: f64 = 0.53;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// COCO visibility code: 0 unlabeled, 1 labeled but hidden, 2 visible.
    pub visibility: u8,
    /// Localization confidence (predictions only).
    pub confidence: f64,
    /// Presence in the activation window. Ground truth uses 0/1, predictions
    /// a probability. `None` when the source carries no presence information.
    pub presence: Option<f64>,
}

impl Keypoint {
    pub fn labeled(x: f64, y: f64, visibility: u8) -> Self {
        Self { x, y, visibility, confidence: 0.0, presence: None }
    }

    pub fn unlabeled() -> Self {
        Self { x: 0.0, y: 0.0, visibility: 0, confidence: 0.0, presence: None }
    }

    pub fn predicted(x: f64, y: f64, confidence: f64, presence: Option<f64>) -> Self {
        Self { x, y, visibility: 2, confidence, presence }
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn is_labeled(&self) -> bool {
        self.visibility > 0
    }
}

/// One person: 17 keypoints plus a box. Ground-truth and predicted instances
/// share this type; predictions carry an instance `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub id: u64,
    pub image_id: u64,
    pub bbox: Rect,
    pub area: Option<f64>,
    pub score: f64,
    pub keypoints: Vec<Keypoint>,
}

impl PoseInstance {
    pub fn new(id: u64, image_id: u64, bbox: Rect, area: Option<f64>, keypoints: Vec<Keypoint>) -> Result<Self> {
        if keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::InvalidArgument(format!(
                "instance {id}: expected {NUM_KEYPOINTS} keypoints, got {}",
                keypoints.len()
            )));
        }
        Ok(Self { id, image_id, bbox, area, score: 1.0, keypoints })
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// √area when a positive area is present, else √(0.53 · bbox area).
    pub fn object_scale(&self) -> f64 {
        match self.area {
            Some(a) if a > 0.0 => a.sqrt(),
            _ => (BBOX_AREA_FACTOR * self.bbox.area()).sqrt(),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_labeled()).count()
    }

    /// Smallest box around the labeled keypoints, if it has nonzero extent.
    pub fn keypoint_bounds(&self) -> Option<Rect> {
        let mut it = self.keypoints.iter().filter(|k| k.is_labeled());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in it {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Rect::new(x0, y0, x1, y1).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_scale_prefers_area() {
        let bbox = Rect::from_xywh(0.0, 0.0, 10.0, 20.0).unwrap();
        let kps = vec![Keypoint::unlabeled(); NUM_KEYPOINTS];
        let inst = PoseInstance::new(1, 1, bbox, Some(64.0), kps.clone()).unwrap();
        assert_eq!(inst.object_scale(), 8.0);
        let inst = PoseInstance::new(1, 1, bbox, None, kps).unwrap();
        assert!((inst.object_scale() - (0.53f64 * 200.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wrong_keypoint_count_is_rejected() {
        let bbox = Rect::from_xywh(0.0, 0.0, 10.0, 20.0).unwrap();
        assert!(PoseInstance::new(1, 1, bbox, None, vec![Keypoint::unlabeled(); 16]).is_err());
    }
}
