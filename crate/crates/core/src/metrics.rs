//! OKS and Ex-OKS similarity, COCO-protocol mAP / Ex-mAP, and presence
//! threshold sweeps.
//!
//! Ex-OKS scores a keypoint from its ground-truth and predicted presence:
//!
//! | GT      | prediction | distance                          |
//! |---------|------------|-----------------------------------|
//! | present | present    | GT point to predicted point       |
//! | absent  | present    | predicted point to window border  |
//! | present | absent     | GT point to window border         |
//! | absent  | absent     | 0 (similarity 1)                  |

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_distance, window_from_bbox, ActivationWindow, Point, WindowConfig};
use crate::oks::{oks_similarity, KappaTable, OksParams};
use crate::pose::{Keypoint, PoseInstance};

/// IoU-style thresholds 0.50, 0.55, …, 0.95.
pub const OKS_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
pub const RECALL_POINTS: usize = 101;
pub const MAX_DETS: usize = 20;
pub const SWEEP_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceCase {
    BothIn,
    GtOutPredIn,
    GtInPredOut,
    BothOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointVerdict {
    pub gt_present: bool,
    pub pred_present: bool,
    pub distance_case: DistanceCase,
    pub distance: f64,
    pub similarity: f64,
}

pub fn ex_oks_keypoint(
    gt: &Point,
    gt_present: bool,
    pred: &Point,
    pred_present: bool,
    window: &ActivationWindow,
    params: &OksParams,
) -> KeypointVerdict {
    let (distance_case, distance) = match (gt_present, pred_present) {
        (true, true) => (DistanceCase::BothIn, gt.distance(pred)),
        (false, true) => (DistanceCase::GtOutPredIn, boundary_distance(window.rect(), pred)),
        (true, false) => (DistanceCase::GtInPredOut, boundary_distance(window.rect(), gt)),
        (false, false) => (DistanceCase::BothOut, 0.0),
    };
    let similarity = match distance_case {
        DistanceCase::BothOut => 1.0,
        _ => oks_similarity(distance, params),
    };
    KeypointVerdict { gt_present, pred_present, distance_case, distance, similarity }
}

/// Ground-truth presence of one keypoint, or `None` when it is not evaluated.
///
/// Unlabeled keypoints are skipped. For labeled ones an explicit presence
/// flag wins; without one, the keypoint is present iff it lies in the window.
pub fn gt_presence(kp: &Keypoint, window: &ActivationWindow) -> Option<bool> {
    if !kp.is_labeled() {
        return None;
    }
    Some(match kp.presence {
        Some(p) => p >= 0.5,
        None => window.contains(&kp.point()),
    })
}

pub fn pred_presence(kp: &Keypoint, threshold: f64) -> bool {
    kp.presence.unwrap_or(1.0) >= threshold
}

/// Mean OKS over labeled ground-truth keypoints.
pub fn pose_oks(gt: &PoseInstance, pred: &PoseInstance, kappas: &KappaTable) -> Result<f64> {
    let scale = gt.object_scale();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, (g, p)) in gt.keypoints.iter().zip(&pred.keypoints).enumerate() {
        if !g.is_labeled() {
            continue;
        }
        let params = kappas.params(scale, k)?;
        sum += oks_similarity(g.point().distance(&p.point()), &params);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledKeypoints);
    }
    Ok(sum / count as f64)
}

/// Mean Ex-OKS over the ground-truth keypoints that carry a presence verdict.
pub fn pose_ex_oks(
    gt: &PoseInstance,
    pred: &PoseInstance,
    window: &ActivationWindow,
    kappas: &KappaTable,
    presence_threshold: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&presence_threshold) {
        return Err(Error::InvalidArgument(format!("threshold {presence_threshold} outside [0, 1]")));
    }
    let scale = gt.object_scale();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, (g, p)) in gt.keypoints.iter().zip(&pred.keypoints).enumerate() {
        let Some(present) = gt_presence(g, window) else {
            continue;
        };
        let params = kappas.params(scale, k)?;
        let verdict =
            ex_oks_keypoint(&g.point(), present, &p.point(), pred_presence(p, presence_threshold), window, &params);
        sum += verdict.similarity;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabeledKeypoints);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Similarity {
    Oks,
    /// Windows are rebuilt from each GT box with `window`.
    ExOks {
        window: WindowConfig,
        presence_threshold: f64,
    },
}

impl Similarity {
    /// `None` when the GT has nothing to evaluate.
    fn score(&self, gt: &PoseInstance, pred: &PoseInstance, kappas: &KappaTable) -> Result<Option<f64>> {
        let result = match self {
            Similarity::Oks => pose_oks(gt, pred, kappas),
            Similarity::ExOks { window, presence_threshold } => {
                let w = window_from_bbox(&gt.bbox, window)?;
                pose_ex_oks(gt, pred, &w, kappas, *presence_threshold)
            }
        };
        match result {
            Ok(v) => Ok(Some(v)),
            Err(Error::NoLabeledKeypoints) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Matching outcome of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    pub image_id: u64,
    pub num_gt: usize,
    /// Detections in descending score order, truncated to [`MAX_DETS`].
    pub scores: Vec<f64>,
    /// `matched[t][d]`: detection `d` is a true positive at threshold `t`.
    pub matched: Vec<Vec<bool>>,
}

fn sorted_by_score<'a>(preds: &[&'a PoseInstance]) -> Vec<&'a PoseInstance> {
    let mut v = preds.to_vec();
    // Stable, so equal scores keep input order.
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v.truncate(MAX_DETS);
    v
}

/// Greedy COCO matching for one image, done independently per threshold.
pub fn evaluate_image(
    image_id: u64,
    gts: &[&PoseInstance],
    preds: &[&PoseInstance],
    kappas: &KappaTable,
    similarity: &Similarity,
) -> Result<ImageMatches> {
    let mut evaluable = Vec::with_capacity(gts.len());
    for g in gts {
        let probe = similarity.score(g, g, kappas)?;
        if probe.is_some() {
            evaluable.push(*g);
        }
    }
    let dets = sorted_by_score(preds);
    let mut sims = vec![vec![0.0; evaluable.len()]; dets.len()];
    for (d, pred) in dets.iter().enumerate() {
        for (g, gt) in evaluable.iter().enumerate() {
            sims[d][g] = similarity.score(gt, pred, kappas)?.unwrap_or(0.0);
        }
    }
    let mut matched = Vec::with_capacity(OKS_THRESHOLDS.len());
    for t in OKS_THRESHOLDS {
        let mut gt_taken = vec![false; evaluable.len()];
        let mut tp = vec![false; dets.len()];
        for (d, row) in sims.iter().enumerate() {
            let mut best_sim = t.min(1.0 - 1e-10);
            let mut best = None;
            for (g, s) in row.iter().enumerate() {
                if gt_taken[g] || *s < best_sim {
                    continue;
                }
                best_sim = *s;
                best = Some(g);
            }
            if let Some(g) = best {
                gt_taken[g] = true;
                tp[d] = true;
            }
        }
        matched.push(tp);
    }
    Ok(ImageMatches { image_id, num_gt: evaluable.len(), scores: dets.iter().map(|d| d.score).collect(), matched })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurve {
    pub threshold: f64,
    pub ap: f64,
    /// Recall sample points `0.00, 0.01, …, 1.00`.
    pub recall: Vec<f64>,
    /// Interpolated precision at each recall point.
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCurve {
    pub per_threshold: Vec<ThresholdCurve>,
    pub ap: f64,
    pub num_gt: usize,
    pub num_dets: usize,
}

fn recall_points() -> Vec<f64> {
    // Same sample values as numpy's linspace(0, 1, 101).
    (0..RECALL_POINTS).map(|i| i as f64 * 0.01).collect()
}

/// Accumulates per-image matches into 101-point interpolated AP curves.
/// Images are processed in ascending id order.
pub fn accumulate(mut images: Vec<ImageMatches>) -> ApCurve {
    images.sort_by_key(|m| m.image_id);
    let num_gt: usize = images.iter().map(|m| m.num_gt).sum();
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (i, m) in images.iter().enumerate() {
        for (d, s) in m.scores.iter().enumerate() {
            order.push((*s, i, d));
        }
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let recall_at = recall_points();

    let per_threshold: Vec<ThresholdCurve> = OKS_THRESHOLDS
        .iter()
        .enumerate()
        .map(|(t, &threshold)| {
            let mut precision_raw = Vec::with_capacity(order.len());
            let mut recall_raw = Vec::with_capacity(order.len());
            let (mut tp, mut fp) = (0usize, 0usize);
            for (_, i, d) in &order {
                if images[*i].matched[t][*d] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                precision_raw.push(tp as f64 / (tp + fp) as f64);
                recall_raw.push(if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 });
            }
            for k in (1..precision_raw.len()).rev() {
                if precision_raw[k] > precision_raw[k - 1] {
                    precision_raw[k - 1] = precision_raw[k];
                }
            }
            let precision: Vec<f64> = recall_at
                .iter()
                .map(|r| {
                    let idx = recall_raw.partition_point(|x| x < r);
                    if num_gt > 0 && idx < precision_raw.len() {
                        precision_raw[idx]
                    } else {
                        0.0
                    }
                })
                .collect();
            let ap = precision.iter().sum::<f64>() / RECALL_POINTS as f64;
            ThresholdCurve { threshold, ap, recall: recall_at.clone(), precision }
        })
        .collect();
    let ap = per_threshold.iter().map(|c| c.ap).sum::<f64>() / per_threshold.len() as f64;
    ApCurve { per_threshold, ap, num_gt, num_dets: order.len() }
}

/// Groups instances by image id.
pub fn group_by_image<'a>(
    gts: &'a [PoseInstance],
    preds: &'a [PoseInstance],
) -> BTreeMap<u64, (Vec<&'a PoseInstance>, Vec<&'a PoseInstance>)> {
    let mut by_image: BTreeMap<u64, (Vec<&PoseInstance>, Vec<&PoseInstance>)> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id).or_default().0.push(g);
    }
    for p in preds {
        by_image.entry(p.image_id).or_default().1.push(p);
    }
    by_image
}

/// COCO-protocol mean AP over thresholds 0.50:0.05:0.95.
pub fn mean_ap(
    gts: &[PoseInstance],
    preds: &[PoseInstance],
    kappas: &KappaTable,
    similarity: &Similarity,
) -> Result<ApCurve> {
    let images = group_by_image(gts, preds)
        .into_iter()
        .map(|(id, (g, p))| evaluate_image(id, &g, &p, kappas, similarity))
        .collect::<Result<Vec<_>>>()?;
    Ok(accumulate(images))
}

/// Pairs each GT with its best unclaimed prediction by OKS, visiting
/// predictions in descending score order within each image.
pub fn greedy_pairs<'a>(
    gts: &'a [PoseInstance],
    preds: &'a [PoseInstance],
    kappas: &KappaTable,
) -> Vec<(&'a PoseInstance, &'a PoseInstance)> {
    let mut pairs = Vec::new();
    for (_, (g, p)) in group_by_image(gts, preds) {
        let mut taken = vec![false; g.len()];
        for det in sorted_by_score(&p) {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in g.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let Ok(s) = pose_oks(gt, det, kappas) else { continue };
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((gi, s));
                }
            }
            let Some((gi, _)) = best else { continue };
            taken[gi] = true;
            pairs.push((g[gi], det));
        }
    }
    pairs
}

/// Ground-truth presence of one keypoint next to the two candidate scores
/// for predicting it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresencePair {
    pub present: bool,
    /// Predicted presence probability; 1 when the prediction has none.
    pub presence: f64,
    pub confidence: f64,
}

/// Presence pairs for every GT keypoint with a verdict, over
/// [`greedy_pairs`] matches.
pub fn presence_pairs(
    gts: &[PoseInstance],
    preds: &[PoseInstance],
    kappas: &KappaTable,
    window: &WindowConfig,
) -> Result<Vec<PresencePair>> {
    let mut pairs = Vec::new();
    for (gt, det) in greedy_pairs(gts, preds, kappas) {
        let w = window_from_bbox(&gt.bbox, window)?;
        for (gk, pk) in gt.keypoints.iter().zip(&det.keypoints) {
            if let Some(present) = gt_presence(gk, &w) {
                pairs.push(PresencePair { present, presence: pk.presence.unwrap_or(1.0), confidence: pk.confidence });
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceSweep {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub best_threshold: f64,
    pub best_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Only one class was present, so the optimum is not meaningful.
    pub degenerate: bool,
}

/// Accuracy of `score ≥ t ⇒ present` for `t = 0.00, 0.01, …, 1.00`.
///
/// With `balance_seed`, the majority class is subsampled to the size of the
/// minority class first.
pub fn presence_sweep(flags: &[bool], scores: &[f64], balance_seed: Option<u64>) -> Result<PresenceSweep> {
    if flags.len() != scores.len() {
        return Err(Error::InvalidArgument("flags and scores differ in length".into()));
    }
    if flags.is_empty() {
        return Err(Error::Empty("presence samples"));
    }
    let pos: Vec<usize> = (0..flags.len()).filter(|i| flags[*i]).collect();
    let neg: Vec<usize> = (0..flags.len()).filter(|i| !flags[*i]).collect();
    let selected: Vec<usize> = match balance_seed {
        None => (0..flags.len()).collect(),
        Some(seed) => {
            if pos.is_empty() || neg.is_empty() {
                return Err(Error::InvalidArgument("balancing needs samples of both classes".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (major, minor) = if pos.len() >= neg.len() { (&pos, &neg) } else { (&neg, &pos) };
            let mut keep = sample(&mut rng, major.len(), minor.len()).into_vec();
            keep.sort_unstable();
            let mut idx: Vec<usize> = minor.clone();
            idx.extend(keep.into_iter().map(|k| major[k]));
            idx.sort_unstable();
            idx
        }
    };
    let positives = selected.iter().filter(|i| flags[**i]).count();
    let negatives = selected.len() - positives;
    let thresholds: Vec<f64> = (0..=SWEEP_STEPS).map(|i| i as f64 / SWEEP_STEPS as f64).collect();
    let accuracy: Vec<f64> = thresholds
        .iter()
        .map(|t| {
            let correct = selected.iter().filter(|i| (scores[**i] >= *t) == flags[**i]).count();
            correct as f64 / selected.len() as f64
        })
        .collect();
    let (best, best_accuracy) =
        accuracy
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) });
    Ok(PresenceSweep {
        best_threshold: thresholds[best],
        thresholds,
        accuracy,
        best_accuracy,
        positives,
        negatives,
        degenerate: positives == 0 || negatives == 0,
    })
}

/// Serializable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub similarity: Similarity,
    pub map: f64,
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_dets: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub presence: Option<PresenceSweep>,
}

impl EvalReport {
    pub fn new(similarity: Similarity, curve: &ApCurve, num_images: usize) -> Self {
        Self {
            similarity,
            map: curve.ap,
            ap_per_threshold: curve.per_threshold.iter().map(|c| (c.threshold, c.ap)).collect(),
            num_images,
            num_gt: curve.num_gt,
            num_dets: curve.num_dets,
            presence: None,
        }
    }
}
