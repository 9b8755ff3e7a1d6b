//! Classical human localization on horizontal heatmaps, vertical boxes from a
//! fixed height range, RoIAlign cropping and the detection loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::beamform::{PlaneGrid, RealHeatmap};
use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D};
use crate::radar::Vec3;

/// Probabilities entering a log are clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
pub const PROB_CLIP: f64 = 1e-7;

/// Default human height span in meters.
pub const DEFAULT_HEIGHT_RANGE: (f64, f64) = (0.0, 2.0);

pub const DEFAULT_LAMBDA_DET: f64 = 1.0;

/// Sub-samples per RoIAlign bin along each axis.
pub const ROI_SAMPLING: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Background,
    Human,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Background => 0,
            ClassLabel::Human => 1,
        }
    }

    /// One-hot class scores `p^u` over (background, human).
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            ClassLabel::Background => [1.0, 0.0],
            ClassLabel::Human => [0.0, 1.0],
        }
    }
}

/// Cell-averaging CFAR parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfarParams {
    pub guard: usize,
    pub train: usize,
    pub threshold_factor: f64,
    /// Side length of the emitted boxes, in plane meters.
    pub box_extent: f64,
    /// Cells at or below this value never seed a detection.
    pub min_value: f64,
}

impl Default for CfarParams {
    fn default() -> Self {
        Self {
            guard: 2,
            train: 4,
            threshold_factor: 3.0,
            box_extent: 0.6,
            min_value: 0.0,
        }
    }
}

/// A located human on a signal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Box in plane meters.
    pub bbox: Box2D,
    pub score: f64,
    pub class: ClassLabel,
    /// `(col, row)` of the peak cell.
    pub peak: (usize, usize),
}

impl Detection {
    /// The box in continuous cell coordinates of `grid`.
    pub fn box_cells(&self, grid: &PlaneGrid) -> Box2D {
        let lo = grid.to_cells([self.bbox.x1, self.bbox.y1]);
        let hi = grid.to_cells([self.bbox.x2, self.bbox.y2]);
        Box2D::new(lo[0], lo[1], hi[0], hi[1])
    }
}

/// Runs [`cfar_detect_frame`] on every frame.
pub fn cfar_detect(h: &RealHeatmap, params: &CfarParams) -> Result<Vec<Vec<Detection>>> {
    (0..h.frames)
        .map(|t| cfar_detect_frame(h.frame(t), &h.grid, params))
        .collect()
}

/// Cell-averaging CFAR on one frame.
///
/// A cell seeds a detection when it exceeds `threshold_factor` times the mean
/// of its training ring (cells with Chebyshev distance in
/// `guard+1 ..= guard+train`, truncated at the grid edge). 8-connected seeds
/// merge into one detection centered on the component's peak, scored
/// `s / (1 + s)` with `s = peak / ring mean`.
pub fn cfar_detect_frame(
    values: &[f64],
    grid: &PlaneGrid,
    params: &CfarParams,
) -> Result<Vec<Detection>> {
    let (w, h) = (grid.width, grid.height);
    if values.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {w}x{h} grid",
            values.len()
        )));
    }
    if !(params.threshold_factor >= 1.0) {
        return Err(Error::InvalidConfig("threshold_factor must be >= 1".into()));
    }
    if !(params.box_extent > 0.0) {
        return Err(Error::InvalidConfig("box_extent must be positive".into()));
    }
    if params.train == 0 {
        return Err(Error::InvalidConfig(
            "need at least one training cell".into(),
        ));
    }
    let half = params.guard + params.train;
    if 2 * half + 1 > w || 2 * half + 1 > h {
        return Err(Error::RingExceedsGrid {
            half_width: half,
            width: w,
            height: h,
        });
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig(
            "CFAR input must be finite and non-negative".into(),
        ));
    }

    let integral = SummedArea::new(values, w, h);
    let ring_mean = |col: usize, row: usize| -> f64 {
        let (outer_sum, outer_n) = integral.window(col, row, half);
        let (inner_sum, inner_n) = integral.window(col, row, params.guard);
        (outer_sum - inner_sum) / (outer_n - inner_n) as f64
    };

    let mut seed = vec![false; w * h];
    let mut noise = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let mean = ring_mean(col, row).max(0.0);
            noise[i] = mean;
            seed[i] = values[i] > params.min_value && values[i] > params.threshold_factor * mean;
        }
    }

    let bounds = {
        let b = grid.bounds();
        Box2D::new(b[0], b[1], b[2], b[3])
    };
    let mut visited = vec![false; w * h];
    let mut detections = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !seed[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut peak = start;
        while let Some(i) = queue.pop_front() {
            if values[i] > values[peak] || (values[i] == values[peak] && i < peak) {
                peak = i;
            }
            let (col, row) = ((i % w) as isize, (i / w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (c, r) = (col + dc, row + dr);
                    if c < 0 || r < 0 || c >= w as isize || r >= h as isize {
                        continue;
                    }
                    let j = r as usize * w + c as usize;
                    if seed[j] && !visited[j] {
                        visited[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let (col, row) = (peak % w, peak / w);
        let center = grid.cell_center(col, row);
        let ratio = if noise[peak] > 0.0 {
            values[peak] / noise[peak]
        } else {
            f64::INFINITY
        };
        let score = if ratio.is_infinite() {
            1.0
        } else {
            ratio / (1.0 + ratio)
        };
        detections.push(Detection {
            bbox: Box2D::centered(center[0], center[1], params.box_extent, params.box_extent)
                .clip(&bounds),
            score,
            class: ClassLabel::Human,
            peak: (col, row),
        });
    }
    Ok(detections)
}

struct SummedArea {
    table: Vec<f64>,
    w: usize,
    h: usize,
}

impl SummedArea {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let mut table = vec![0.0; (w + 1) * (h + 1)];
        for row in 0..h {
            let mut line = 0.0;
            for col in 0..w {
                line += values[row * w + col];
                table[(row + 1) * (w + 1) + col + 1] = table[row * (w + 1) + col + 1] + line;
            }
        }
        Self { table, w, h }
    }

    /// Sum and count of the in-bounds square of half-width `r` around a cell.
    fn window(&self, col: usize, row: usize, r: usize) -> (f64, usize) {
        let c0 = col.saturating_sub(r);
        let r0 = row.saturating_sub(r);
        let c1 = (col + r + 1).min(self.w);
        let r1 = (row + r + 1).min(self.h);
        let at = |c: usize, r: usize| self.table[r * (self.w + 1) + c];
        let sum = at(c1, r1) - at(c0, r1) - at(c1, r0) + at(c0, r0);
        (sum, (c1 - c0) * (r1 - r0))
    }
}

/// Re-centers a detection box on the value-weighted centroid of the cells
/// inside it that reach `fraction` of the peak value. The box keeps its size
/// and is clipped to the grid again.
pub fn refine_to_centroid(
    det: &Detection,
    values: &[f64],
    grid: &PlaneGrid,
    fraction: f64,
) -> Result<Detection> {
    if values.len() != grid.cells() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {}x{} grid",
            values.len(),
            grid.width,
            grid.height
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "centroid fraction {fraction} outside [0, 1]"
        )));
    }
    let (pc, pr) = det.peak;
    let floor = fraction * values[pr * grid.width + pc];
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for row in 0..grid.height {
        for col in 0..grid.width {
            let [x, y] = grid.cell_center(col, row);
            let v = values[row * grid.width + col];
            if v >= floor && v > 0.0 && det.bbox.contains(x, y) {
                sx += v * x;
                sy += v * y;
                sw += v;
            }
        }
    }
    if sw == 0.0 {
        return Ok(*det);
    }
    let b = grid.bounds();
    let (cx, cy) = (sx / sw, sy / sw);
    let (hw, hh) = (det.bbox.width() / 2.0, det.bbox.height() / 2.0);
    Ok(Detection {
        bbox: Box2D::new(cx - hw, cy - hh, cx + hw, cy + hh)
            .clip(&Box2D::new(b[0], b[1], b[2], b[3])),
        ..*det
    })
}

/// Greedy non-maximum suppression, highest score first.
pub fn non_max_suppression(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Vertical-plane `(y, z)` box from a horizontal `(x, y)` box and a height span.
pub fn vertical_box_from_horizontal(hbox: &Box2D, height_range: (f64, f64)) -> Result<Box2D> {
    let (z_min, z_max) = height_range;
    if !(z_min < z_max) {
        return Err(Error::InvalidHeightRange(z_min, z_max));
    }
    Ok(Box2D::new(hbox.y1, z_min, hbox.y2, z_max))
}

/// 3D box with x from the horizontal box, y shared, z from the vertical box.
pub fn box3d_from_planes(hbox: &Box2D, vbox: &Box2D) -> Result<Box3D> {
    Box3D::new(
        Vec3::new(hbox.x1, hbox.y1.max(vbox.x1), vbox.y1),
        Vec3::new(hbox.x2, hbox.y2.min(vbox.x2), vbox.y2),
    )
}

/// RoIAlign over a `width x height` row-major grid.
///
/// `roi` is in continuous cell coordinates (cell `i` spans `[i, i+1)`, its value
/// sits at `i + 0.5`). Each of the `out x out` bins averages a 2x2 lattice of
/// bilinear samples; nothing is quantized.
pub fn roi_crop(
    values: &[f64],
    width: usize,
    height: usize,
    roi: &Box2D,
    out: usize,
) -> Result<Vec<f64>> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {width}x{height} grid",
            values.len()
        )));
    }
    if !(roi.x2 > roi.x1 && roi.y2 > roi.y1) {
        return Err(Error::EmptyBox);
    }
    if out == 0 {
        return Err(Error::InvalidConfig(
            "RoI output size must be positive".into(),
        ));
    }
    let bin_w = (roi.x2 - roi.x1) / out as f64;
    let bin_h = (roi.y2 - roi.y1) / out as f64;
    let n = ROI_SAMPLING as f64;
    let mut result = Vec::with_capacity(out * out);
    for ph in 0..out {
        for pw in 0..out {
            let mut acc = 0.0;
            for iy in 0..ROI_SAMPLING {
                let y = roi.y1 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / n - 0.5;
                for ix in 0..ROI_SAMPLING {
                    let x = roi.x1 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / n - 0.5;
                    acc += bilinear(values, width, height, x, y);
                }
            }
            result.push(acc / (n * n));
        }
    }
    Ok(result)
}

fn bilinear(values: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return 0.0;
    }
    let (mut x, mut y) = (x.max(0.0), y.max(0.0));
    let (x0, x1) = {
        let lo = x.floor() as usize;
        if lo >= width - 1 {
            x = (width - 1) as f64;
            (width - 1, width - 1)
        } else {
            (lo, lo + 1)
        }
    };
    let (y0, y1) = {
        let lo = y.floor() as usize;
        if lo >= height - 1 {
            y = (height - 1) as f64;
            (height - 1, height - 1)
        } else {
            (lo, lo + 1)
        }
    };
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    let (hx, hy) = (1.0 - lx, 1.0 - ly);
    hy * hx * values[y0 * width + x0]
        + hy * lx * values[y0 * width + x1]
        + ly * hx * values[y1 * width + x0]
        + ly * lx * values[y1 * width + x1]
}

/// Huber-style smooth L1 with transition at `|x| = 1`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Binary cross entropy of probability `p` against target `y`, with `p`
/// clipped away from 0 and 1.
pub fn binary_cross_entropy(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d BCE / d p, zero where `p` is clipped.
#[allow(clippy::manual_range_contains)] // NaN must propagate, not read as clipped
pub fn binary_cross_entropy_grad(p: f64, y: f64) -> f64 {
    if p < PROB_CLIP || p > 1.0 - PROB_CLIP {
        return 0.0;
    }
    (p - y) / (p * (1.0 - p))
}

/// Predicted human probability and box coordinates for one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub human_prob: f64,
    pub coords: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionTarget {
    pub label: ClassLabel,
    pub coords: [f64; 4],
}

impl DetectionTarget {
    pub fn gt_box(&self) -> Box2D {
        self.coords.into()
    }
}

fn check_detection_inputs(preds: &[BoxPrediction], targets: &[DetectionTarget]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "predictions and targets",
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("detection predictions"));
    }
    if let Some(p) = preds.iter().find(|p| !(0.0..=1.0).contains(&p.human_prob)) {
        return Err(Error::ScoreOutOfRange(p.human_prob));
    }
    Ok(())
}

/// Mean over boxes of `L_cls(p, p^u) + lambda [u >= 1] L_box(t^u, v)`.
pub fn detection_loss(
    preds: &[BoxPrediction],
    targets: &[DetectionTarget],
    lambda_det: f64,
) -> Result<f64> {
    check_detection_inputs(preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let y = t.label.one_hot()[1];
            let cls = binary_cross_entropy(p.human_prob, y);
            let reg = if t.label.index() >= 1 {
                p.coords
                    .iter()
                    .zip(&t.coords)
                    .map(|(v, tu)| smooth_l1(v - tu))
                    .sum::<f64>()
            } else {
                0.0
            };
            cls + lambda_det * reg
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Gradient of [`detection_loss`] with respect to each predicted box.
pub fn detection_loss_grad_coords(
    preds: &[BoxPrediction],
    targets: &[DetectionTarget],
    lambda_det: f64,
) -> Result<Vec<[f64; 4]>> {
    check_detection_inputs(preds, targets)?;
    let scale = lambda_det / preds.len() as f64;
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            if t.label.index() >= 1 {
                std::array::from_fn(|i| scale * smooth_l1_grad(p.coords[i] - t.coords[i]))
            } else {
                [0.0; 4]
            }
        })
        .collect())
}
