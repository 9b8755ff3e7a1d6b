//! Mask and total losses, mask IoU, and COCO-style average precision.

use serde::{Deserialize, Serialize};

use crate::detect::{binary_cross_entropy, binary_cross_entropy_grad};
use crate::error::{Error, Result};
use crate::geometry::Box2D;
use crate::mask::{BinaryMask, ProbMask};

/// Per-box mask head output: one `m x m` channel per class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub channels: Vec<ProbMask>,
}

/// Ground-truth mask of a box and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTarget {
    pub class: usize,
    pub mask: ProbMask,
}

fn check_mask_inputs(preds: &[MaskPrediction], targets: &[MaskTarget]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("mask predictions"));
    }
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "mask predictions and targets",
            left: preds.len(),
            right: targets.len(),
        });
    }
    for (p, t) in preds.iter().zip(targets) {
        let channel = p.channels.get(t.class).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "class {} but only {} mask channels",
                t.class,
                p.channels.len()
            ))
        })?;
        if channel.width != t.mask.width || channel.height != t.mask.height {
            return Err(Error::ShapeMismatch(format!(
                "predicted {}x{} vs target {}x{}",
                channel.width, channel.height, t.mask.width, t.mask.height
            )));
        }
    }
    Ok(())
}

/// Mean over boxes of the per-pixel BCE between the ground-truth class channel
/// and its target; other channels do not contribute.
pub fn mask_loss(preds: &[MaskPrediction], targets: &[MaskTarget]) -> Result<f64> {
    check_mask_inputs(preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let channel = &p.channels[t.class];
            let sum: f64 = channel
                .values
                .iter()
                .zip(&t.mask.values)
                .map(|(&q, &y)| binary_cross_entropy(q, y))
                .sum();
            sum / channel.values.len() as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Gradient of [`mask_loss`] with respect to every predicted probability,
/// shaped like the predictions.
pub fn mask_loss_grad(
    preds: &[MaskPrediction],
    targets: &[MaskTarget],
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_mask_inputs(preds, targets)?;
    let n = preds.len() as f64;
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            p.channels
                .iter()
                .enumerate()
                .map(|(k, ch)| {
                    if k != t.class {
                        return vec![0.0; ch.values.len()];
                    }
                    let scale = 1.0 / (n * ch.values.len() as f64);
                    ch.values
                        .iter()
                        .zip(&t.mask.values)
                        .map(|(&q, &y)| scale * binary_cross_entropy_grad(q, y))
                        .collect()
                })
                .collect()
        })
        .collect())
}

pub fn total_loss(detection: f64, mask: f64) -> f64 {
    detection + mask
}

/// `|a & b| / |a | b|`, 1 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Box2D,
    pub score: f64,
}

/// Detections and ground truth of one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<Box2D>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub frames: Vec<FrameEval>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        for f in &self.frames {
            if let Some(d) = f
                .detections
                .iter()
                .find(|d| !(0.0..=1.0).contains(&d.score))
            {
                return Err(Error::ScoreOutOfRange(d.score));
            }
        }
        Ok(())
    }

    pub fn num_ground_truth(&self) -> usize {
        self.frames.iter().map(|f| f.ground_truth.len()).sum()
    }

    pub fn num_detections(&self) -> usize {
        self.frames.iter().map(|f| f.detections.len()).sum()
    }
}

/// The ten thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Thresholds at which precision-recall curves are reported.
pub const PR_CURVE_THRESHOLDS: [f64; 3] = [0.5, 0.65, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub ap: f64,
    pub recall: f64,
    /// `(recall, interpolated precision)` after each ranked detection.
    pub pr_curve: Vec<[f64; 2]>,
}

/// Greedy score-descending matching at one IoU threshold; returns the TP flag
/// of every detection in ranked order.
pub fn match_detections(records: &EvalRecord, iou_threshold: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, &ScoredBox)> = records
        .frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.detections.iter().map(move |d| (f, d)))
        .collect();
    // stable: equal scores keep frame/detection order
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = records
        .frames
        .iter()
        .map(|f| vec![false; f.ground_truth.len()])
        .collect();
    ranked
        .iter()
        .map(|(f, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in records.frames[*f].ground_truth.iter().enumerate() {
                if taken[*f][g] {
                    continue;
                }
                let iou = d.bbox.iou(gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[*f][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP at one threshold. With no ground truth the AP and
/// recall are 0 by convention.
pub fn average_precision_at(records: &EvalRecord, iou_threshold: f64) -> ThresholdResult {
    let n_gt = records.num_ground_truth();
    let tp_flags = match_detections(records, iou_threshold);
    if n_gt == 0 {
        return ThresholdResult {
            iou_threshold,
            ap: 0.0,
            recall: 0.0,
            pr_curve: Vec::new(),
        };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ThresholdResult {
        iou_threshold,
        ap,
        recall: tp as f64 / n_gt as f64,
        pr_curve: recall
            .iter()
            .zip(&precision)
            .map(|(&r, &p)| [r, p])
            .collect(),
    }
}

pub fn average_precision(records: &EvalRecord, thresholds: &[f64]) -> Vec<ThresholdResult> {
    thresholds
        .iter()
        .map(|&t| average_precision_at(records, t))
        .collect()
}

/// Summary over the standard threshold set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_50_95: f64,
    pub ap_50: f64,
    pub ap_75: f64,
    /// Fraction of ground truth matched at IoU 0.5.
    pub recall: f64,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub per_threshold: Vec<ThresholdSummary>,
    pub pr_curves: Vec<PrCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mask_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub iou_threshold: f64,
    pub ap: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub points: Vec<[f64; 2]>,
}

impl EvalReport {
    /// `iou_threshold,recall,precision` rows for the reported PR curves.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("iou_threshold,recall,precision\n");
        for c in &self.pr_curves {
            for [r, p] in &c.points {
                out.push_str(&format!("{},{},{}\n", c.iou_threshold, r, p));
            }
        }
        out
    }
}

pub fn evaluate(records: &EvalRecord) -> Result<EvalReport> {
    records.validate()?;
    let results = average_precision(records, &coco_thresholds());
    let at = |t: f64| {
        results
            .iter()
            .find(|r| (r.iou_threshold - t).abs() < 1e-12)
            .expect("standard threshold present")
    };
    let ap_50_95 = results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64;
    Ok(EvalReport {
        ap_50_95,
        ap_50: at(0.5).ap,
        ap_75: at(0.75).ap,
        recall: at(0.5).recall,
        num_detections: records.num_detections(),
        num_ground_truth: records.num_ground_truth(),
        per_threshold: results
            .iter()
            .map(|r| ThresholdSummary {
                iou_threshold: r.iou_threshold,
                ap: r.ap,
                recall: r.recall,
            })
            .collect(),
        pr_curves: PR_CURVE_THRESHOLDS
            .iter()
            .map(|&t| PrCurve {
                iou_threshold: t,
                points: at(t).pr_curve.clone(),
            })
            .collect(),
        mean_mask_iou: None,
    })
}
