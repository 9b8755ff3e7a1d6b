//! Independent reference implementations used by the integration tests.
//! They favour the most literal formulation over speed.
#![allow(dead_code)]

use std::f64::consts::PI;

use mmsil_core::beamform::PlaneGrid;
use mmsil_core::fusion::AttentionLayer;
use mmsil_core::metrics::{EvalRecord, FrameEval, ScoredBox};
use mmsil_core::radar::{RadarFrameCube, SPEED_OF_LIGHT};
use mmsil_core::Box2D;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct triple sum with a fresh exponential for every term.
pub fn naive_beamform(cube: &RadarFrameCube, grid: &PlaneGrid) -> Vec<Complex64> {
    let anchor = grid.anchor_for(&cube.array);
    let k_count = cube.num_samples();
    let mut out = Vec::with_capacity(cube.frames * grid.cells());
    for t in 0..cube.frames {
        for row in 0..grid.height {
            for col in 0..grid.width {
                let p = grid.lift(grid.cell_center(col, row), anchor);
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..k_count {
                    let f = cube.config.frequency(k);
                    for m in 0..cube.num_elements() {
                        let d = 2.0 * (cube.array.element_positions[m] - p).norm();
                        let phase = 2.0 * PI * d * f / SPEED_OF_LIGHT;
                        acc += cube.get(k, m, t) * Complex64::from_polar(1.0, phase);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Bilinear sample with zero outside `[-1, len]` and edge clamping inside,
/// written per axis.
fn sample(values: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    if x < -1.0 || x > w as f64 || y < -1.0 || y > h as f64 {
        return 0.0;
    }
    let axis = |c: f64, len: usize| -> (usize, usize, f64) {
        let c = c.max(0.0);
        let lo = c.floor() as usize;
        if lo >= len - 1 {
            (len - 1, len - 1, 0.0)
        } else {
            (lo, lo + 1, c - lo as f64)
        }
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    let at = |c: usize, r: usize| values[r * w + c];
    let top = at(x0, y0) + fx * (at(x1, y0) - at(x0, y0));
    let bottom = at(x0, y1) + fx * (at(x1, y1) - at(x0, y1));
    top + fy * (bottom - top)
}

/// RoIAlign with half-pixel offset and 2x2 samples per bin.
pub fn naive_roi(values: &[f64], w: usize, h: usize, roi: &Box2D, out: usize) -> Vec<f64> {
    let mut result = vec![0.0; out * out];
    for ph in 0..out {
        for pw in 0..out {
            let mut samples = Vec::new();
            for iy in [0.25, 0.75] {
                for ix in [0.25, 0.75] {
                    let fy = (ph as f64 + iy) / out as f64;
                    let fx = (pw as f64 + ix) / out as f64;
                    let y = roi.y1 + fy * (roi.y2 - roi.y1) - 0.5;
                    let x = roi.x1 + fx * (roi.x2 - roi.x1) - 0.5;
                    samples.push(sample(values, w, h, x, y));
                }
            }
            result[ph * out + pw] = samples.iter().sum::<f64>() / 4.0;
        }
    }
    result
}

fn matmul_row(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    (0..d)
        .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * d + j]).sum::<f64>())
        .collect()
}

/// Per-head attention from explicit score matrices. Returns outputs and the
/// per-head `N x N` attention.
pub fn naive_attention(
    seq: &[Vec<f64>],
    layer: &AttentionLayer,
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = seq.len();
    let d = seq[0].len();
    let dh = d / heads;
    let q: Vec<_> = seq
        .iter()
        .map(|x| matmul_row(x, &layer.wq, &layer.bq))
        .collect();
    let k: Vec<_> = seq
        .iter()
        .map(|x| matmul_row(x, &layer.wk, &layer.bk))
        .collect();
    let v: Vec<_> = seq
        .iter()
        .map(|x| matmul_row(x, &layer.wv, &layer.bv))
        .collect();
    let mut concat = vec![vec![0.0; d]; n];
    let mut all = Vec::new();
    for h in 0..heads {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i][h * dh + c] * k[j][h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..n {
                a[i][j] = scores[j].exp() / z;
            }
            for c in 0..dh {
                concat[i][h * dh + c] = (0..n).map(|j| a[i][j] * v[j][h * dh + c]).sum();
            }
        }
        all.push(a);
    }
    let outputs = (0..n)
        .map(|i| {
            let o = matmul_row(&concat[i], &layer.wo, &layer.bo);
            o.iter().zip(&seq[i]).map(|(a, b)| a + b).collect()
        })
        .collect();
    (outputs, all)
}

fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP from the full precision/recall table: every ranked prefix is scored and
/// the interpolated precision at rank `i` is the maximum precision over all
/// ranks `>= i`.
pub fn pr_table_ap(records: &EvalRecord, threshold: f64) -> f64 {
    let n_gt: usize = records.frames.iter().map(|f| f.ground_truth.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked = Vec::new();
    for (f, frame) in records.frames.iter().enumerate() {
        for (i, d) in frame.detections.iter().enumerate() {
            ranked.push((d.score, f, i));
        }
    }
    // insertion sort keeps equal scores in input order
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && ranked[j - 1].0 < ranked[j].0 {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = records
        .frames
        .iter()
        .map(|f| vec![false; f.ground_truth.len()])
        .collect();
    let mut table = Vec::new();
    let mut tp = 0usize;
    for (rank, &(_, f, i)) in ranked.iter().enumerate() {
        let det = &records.frames[f].detections[i].bbox;
        let mut best = None;
        let mut best_iou = -1.0;
        for (g, gt) in records.frames[f].ground_truth.iter().enumerate() {
            let v = iou(det, gt);
            if !used[f][g] && v >= threshold && v > best_iou {
                best = Some(g);
                best_iou = v;
            }
        }
        if let Some(g) = best {
            used[f][g] = true;
            tp += 1;
        }
        table.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..table.len() {
        let interp = table[i..].iter().map(|r| r.1).fold(f64::MIN, f64::max);
        ap += (table[i].0 - prev) * interp;
        prev = table[i].0;
    }
    ap
}

/// Index of the nearest radar timestamp by linear scan; ties go to the earlier frame.
pub fn nearest_radar(t: f64, radar: &[f64]) -> usize {
    let mut best = 0;
    for (i, r) in radar.iter().enumerate() {
        if (t - r).abs() < (t - radar[best]).abs() {
            best = i;
        }
    }
    best
}

/// Random small AP instance: at most 10 detections and 5 ground-truth boxes
/// spread over 1 to 3 frames, with coarse scores so ties occur.
pub fn random_record(rng: &mut ChaCha8Rng) -> EvalRecord {
    let frames = rng.random_range(1..4);
    let mut record = EvalRecord::default();
    let mut dets_left = rng.random_range(0..=10);
    let mut gts_left = rng.random_range(0..=5);
    for f in 0..frames {
        let last = f + 1 == frames;
        let nd = if last {
            dets_left
        } else {
            rng.random_range(0..=dets_left)
        };
        let ng = if last {
            gts_left
        } else {
            rng.random_range(0..=gts_left)
        };
        dets_left -= nd;
        gts_left -= ng;
        let ground_truth: Vec<Box2D> = (0..ng)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
                Box2D::new(
                    x,
                    y,
                    x + rng.random_range(1.0..4.0),
                    y + rng.random_range(1.0..4.0),
                )
            })
            .collect();
        let detections = (0..nd)
            .map(|_| {
                let bbox = if !ground_truth.is_empty() && rng.random_bool(0.7) {
                    let g = ground_truth[rng.random_range(0..ground_truth.len())];
                    let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.6..0.6);
                    Box2D::new(g.x1 + j(rng), g.y1 + j(rng), g.x2 + j(rng), g.y2 + j(rng))
                } else {
                    let (x, y) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
                    Box2D::new(x, y, x + 2.0, y + 2.0)
                };
                let score = (rng.random_range(0..6) as f64) / 5.0;
                ScoredBox { bbox, score }
            })
            .collect();
        record.frames.push(FrameEval {
            detections,
            ground_truth,
        });
    }
    record
}
