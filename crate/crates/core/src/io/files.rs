//! JSON file types for annotations, detections, calibration and keypoints.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::rle::{rle_decode, Rle};
use crate::error::{Error, Result};
use crate::geometry::{
    cluster_keypoints, triangulate, Box2D, Box3D, CameraModel, Keypoint2D, Keypoint3D,
};
use crate::mask::BinaryMask;
use crate::metrics::{evaluate, mask_iou, EvalRecord, EvalReport, FrameEval, ScoredBox};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub person: u32,
    /// Pixel box in the result plane.
    pub bbox: Box2D,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box3d: Option<Box3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Rle>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoints2d: Vec<Keypoint2D>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoints3d: Vec<Keypoint3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedFrame {
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    pub objects: Vec<AnnotatedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
    pub frames: Vec<AnnotatedFrame>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        let mut seen_frames = HashSet::new();
        for f in &self.frames {
            if !seen_frames.insert(f.frame) {
                return Err(Error::Format(format!("frame {} annotated twice", f.frame)));
            }
            let mut ids = HashSet::new();
            for o in &f.objects {
                if !ids.insert(o.person) {
                    return Err(Error::Format(format!(
                        "person {} repeated in frame {}",
                        o.person, f.frame
                    )));
                }
                if let Some(rle) = &o.mask {
                    if rle.size != [h, w] {
                        return Err(Error::MalformedRle(format!(
                            "mask size {:?} differs from image size [{h}, {w}]",
                            rle.size
                        )));
                    }
                    rle_decode(rle)?;
                }
                let foreign = o
                    .keypoints2d
                    .iter()
                    .map(|k| k.person)
                    .chain(o.keypoints3d.iter().map(|k| k.person))
                    .flatten()
                    .find(|&p| p != o.person);
                if let Some(p) = foreign {
                    return Err(Error::Format(format!(
                        "keypoint of person {p} attached to person {} in frame {}",
                        o.person, f.frame
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = read_json(path)?;
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub bbox: Box2D,
    /// Box in heatmap cell units, when produced from a heatmap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_cells: Option<Box2D>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Rle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame: usize,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub frames: Vec<DetectionFrame>,
}

fn union_mask(rles: &[&Rle], width: usize, height: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::new(width, height);
    for r in rles {
        out.union_with(&rle_decode(r)?)?;
    }
    Ok(out)
}

/// Joins predictions with ground truth by frame index and evaluates them.
///
/// Frames present on only one side count with an empty list on the other.
/// When both sides carry masks, the top-scoring predicted mask of each frame
/// is compared against the union of ground-truth masks and the mean IoU is
/// reported.
pub fn evaluate_files(pred: &DetectionFile, gt: &AnnotationSet) -> Result<EvalReport> {
    gt.validate()?;
    let (w, h) = gt.image_size;
    let mut joined: BTreeMap<usize, (Option<&DetectionFrame>, Option<&AnnotatedFrame>)> =
        BTreeMap::new();
    for f in &pred.frames {
        let slot = joined.entry(f.frame).or_default();
        if slot.0.is_some() {
            return Err(Error::Format(format!("frame {} predicted twice", f.frame)));
        }
        slot.0 = Some(f);
    }
    for f in &gt.frames {
        joined.entry(f.frame).or_default().1 = Some(f);
    }

    let mut record = EvalRecord::default();
    let mut ious = Vec::new();
    for (p, g) in joined.values() {
        let detections = p
            .map(|p| {
                p.detections
                    .iter()
                    .map(|d| ScoredBox {
                        bbox: d.bbox,
                        score: d.score,
                    })
                    .collect()
            })
            .unwrap_or_default();
        let ground_truth = g
            .map(|g| g.objects.iter().map(|o| o.bbox).collect())
            .unwrap_or_default();
        record.frames.push(FrameEval {
            detections,
            ground_truth,
        });

        let gt_masks: Vec<&Rle> = g
            .map(|g| g.objects.iter().filter_map(|o| o.mask.as_ref()).collect())
            .unwrap_or_default();
        let top = p.and_then(|p| {
            p.detections
                .iter()
                .filter(|d| d.mask.is_some())
                .max_by(|a, b| a.score.total_cmp(&b.score))
        });
        if let (Some(top), false) = (top, gt_masks.is_empty()) {
            let pm = rle_decode(top.mask.as_ref().expect("filtered on mask"))?;
            let gm = union_mask(&gt_masks, w, h)?;
            ious.push(mask_iou(&pm, &gm)?);
        }
    }
    let mut report = evaluate(&record)?;
    if !ious.is_empty() {
        report.mean_mask_iou = Some(ious.iter().sum::<f64>() / ious.len() as f64);
    }
    Ok(report)
}

/// Reads a calibration file: a JSON list of 3x4 row-major matrices.
pub fn load_calibration(path: &Path) -> Result<Vec<CameraModel>> {
    read_json(path)
}

/// Per-view 2D keypoints; view `i` belongs to camera `i` of the calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointViews {
    pub views: Vec<Vec<Keypoint2D>>,
}

/// Triangulates every `(person, joint)` seen in at least two views.
///
/// With `persons = Some(k)` the person ids of the output are replaced by
/// K-means cluster labels over the triangulated points.
pub fn triangulate_views(
    cameras: &[CameraModel],
    kp: &KeypointViews,
    persons: Option<(usize, u64)>,
) -> Result<Vec<Keypoint3D>> {
    if cameras.len() != kp.views.len() {
        return Err(Error::LengthMismatch {
            what: "cameras and keypoint views",
            left: cameras.len(),
            right: kp.views.len(),
        });
    }
    // (person, joint) -> observations
    type Key = (Option<u32>, u32);
    let mut groups: BTreeMap<Key, Vec<(CameraModel, Keypoint2D)>> = BTreeMap::new();
    for (cam, view) in cameras.iter().zip(&kp.views) {
        for k in view {
            groups
                .entry((k.person, k.joint))
                .or_default()
                .push((cam.clone(), *k));
        }
    }
    let mut out = Vec::new();
    for obs in groups.values() {
        if obs.len() >= 2 {
            out.push(triangulate(obs)?);
        }
    }
    if let Some((k, seed)) = persons {
        let pts: Vec<_> = out.iter().map(|p| p.position).collect();
        let clustering = cluster_keypoints(&pts, k, seed)?;
        for (p, &l) in out.iter_mut().zip(&clustering.labels) {
            p.person = Some(l as u32);
        }
    }
    Ok(out)
}
