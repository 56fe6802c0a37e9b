//! Probability-map machinery for top-down 2D human pose estimation.
//!
//! The crate works purely on numbers: probability maps over activation
//! windows, OKS-based losses and decoders, Ex-OKS evaluation, crop-based
//! dataset generation and calibration. No neural network is involved.
//!
//! Module map:
//!
//! - [`geometry`]: rectangles, activation windows, the A–E keypoint areas.
//! - [`pose`]: keypoints and person instances.
//! - [`probmap`]: Sparsemax, temperature scaling, coverage queries.
//! - [`oks`]: OKS similarity, kernels, expected-OKS maps, dense OKS loss.
//! - [`decoder`]: argmax, UDP, expected-OKS and double-heatmap decoding.
//! - [`metrics`]: OKS / Ex-OKS, mAP / Ex-mAP, presence threshold sweeps.
//! - [`cropgen`]: crop augmentation at annotation level.
//! - [`calibration`]: coverage histograms, temperature fitting, reliability.
//! - [`fitlab`]: gradient-descent fitting of maps to targets.
//! - [`interop`]: COCO JSON, prediction JSON and the PMAP binary format.

pub mod calibration;
pub mod cropgen;
pub mod decoder;
pub mod error;
pub mod fitlab;
pub mod geometry;
pub mod interop;
pub mod metrics;
pub mod oks;
pub mod pose;
pub mod probmap;

pub use error::{Error, Result};
pub use geometry::{ActivationWindow, ImageExtent, KeypointArea, Point, Rect, WindowConfig};
pub use oks::{KappaTable, LossConfig, OksParams};
pub use pose::{Keypoint, PoseInstance, NUM_KEYPOINTS};
pub use probmap::{PresenceProbability, ProbabilityMap};
