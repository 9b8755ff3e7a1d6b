// finite-difference loops index several structures by the same parameter
#![allow(clippy::needless_range_loop)]

mod common;

use mmsil_core::beamform::{background_subtract, beamform_plane, magnitude_normalize, PlaneGrid};
use mmsil_core::detect::{
    cfar_detect_frame, detection_loss, detection_loss_grad_coords, smooth_l1, smooth_l1_grad,
    BoxPrediction, CfarParams, ClassLabel, DetectionTarget,
};
use mmsil_core::fusion::{
    fuse, fused_sum_gradient, multi_head_attention, AttentionWeights, FeatureBlock,
};
use mmsil_core::geometry::{
    cluster_keypoints, paste_mask, reprojection_cost, triangulate, Box2D, CameraModel, Keypoint2D,
};
use mmsil_core::io::{align_streams, rle_decode, rle_encode};
use mmsil_core::mask::{BinaryMask, ProbMask};
use mmsil_core::metrics::{
    average_precision_at, evaluate, mask_iou, mask_loss, mask_loss_grad, EvalRecord, FrameEval,
    MaskPrediction, MaskTarget, ScoredBox,
};
use mmsil_core::radar::{
    synthesize_frame_cube, ChirpConfig, Orientation, RadarFrameCube, Scene, SceneScatterer,
    SynthesisOptions, Vec3, VirtualArray,
};
use nalgebra::{Matrix3, Rotation3, Vector3};
use num_complex::Complex64;
use proptest::prelude::*;

fn small_array() -> (ChirpConfig, VirtualArray) {
    let chirp = ChirpConfig::horizontal(6);
    let array =
        VirtualArray::mimo_equivalent(5, &chirp, Orientation::Horizontal, Vec3::new(0.0, 0.0, 1.0))
            .unwrap();
    (chirp, array)
}

fn small_grid() -> PlaneGrid {
    PlaneGrid::new(Orientation::Horizontal, [-0.4, 1.0], 0.1, 8, 8).unwrap()
}

fn point() -> impl Strategy<Value = Vec3> {
    (-1.0..1.0f64, 1.0..3.0f64, 0.5..1.5f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn walker(frames: usize) -> impl Strategy<Value = SceneScatterer> {
    (point(), 0.1..2.0f64, -0.2..0.2f64, -0.2..0.2f64).prop_map(move |(p, r, vx, vy)| {
        let traj = (0..frames)
            .map(|t| Vec3::new(vx * t as f64, vy * t as f64, 0.0))
            .collect();
        SceneScatterer::moving(p, r, traj)
    })
}

fn cube_of(scene: Vec<SceneScatterer>, frames: usize, noise: f64, seed: u64) -> RadarFrameCube {
    let (chirp, array) = small_array();
    let options = SynthesisOptions {
        frames,
        noise_std: noise,
        seed,
    };
    synthesize_frame_cube(&Scene::new(scene), &chirp, &array, options).unwrap()
}

fn max_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn random_camera(yaw: f64, pitch: f64, f: f64, tx: f64, ty: f64) -> CameraModel {
    let k = Matrix3::new(f, 0.0, 320.0, 0.0, f, 240.0, 0.0, 0.0, 1.0);
    let r = Rotation3::from_euler_angles(pitch, yaw, 0.0).into_inner();
    // place the camera so the origin region sits in front of it
    let t = Vector3::new(tx, ty, 6.0);
    CameraModel::from_parts(k, r, t).unwrap()
}

fn record_strategy() -> impl Strategy<Value = EvalRecord> {
    let gt = (0.0..10.0f64, 0.0..10.0f64, 1.0..4.0f64, 1.0..4.0f64)
        .prop_map(|(x, y, w, h)| Box2D::new(x, y, x + w, y + h));
    let det = (
        0.0..10.0f64,
        0.0..10.0f64,
        1.0..4.0f64,
        1.0..4.0f64,
        0.01..1.0f64,
    )
        .prop_map(|(x, y, w, h, s)| ScoredBox {
            bbox: Box2D::new(x, y, x + w, y + h),
            score: s,
        });
    prop::collection::vec(
        (
            prop::collection::vec(det, 0..5),
            prop::collection::vec(gt, 0..4),
        ),
        1..4,
    )
    .prop_map(|frames| EvalRecord {
        frames: frames
            .into_iter()
            .map(|(detections, ground_truth)| {
                // copy a jittered ground truth in so matches actually happen
                let mut detections = detections;
                if let (Some(g), Some(d)) = (ground_truth.first(), detections.first_mut()) {
                    d.bbox = g.translate(0.1, -0.1);
                }
                FrameEval {
                    detections,
                    ground_truth,
                }
            })
            .collect(),
    })
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), w * h)
        .prop_map(move |data| BinaryMask::from_data(w, h, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthesis_is_linear(a in walker(3), b in walker(3)) {
        let both = cube_of(vec![a.clone(), b.clone()], 3, 0.0, 0);
        let ca = cube_of(vec![a], 3, 0.0, 0);
        let cb = cube_of(vec![b], 3, 0.0, 0);
        let scale = max_norm(&both.data).max(1e-300);
        for ((s, x), y) in both.data.iter().zip(&ca.data).zip(&cb.data) {
            prop_assert!((s - (x + y)).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn synthesis_is_deterministic(a in walker(2), seed in any::<u64>()) {
        let x = cube_of(vec![a.clone()], 2, 0.1, seed);
        let y = cube_of(vec![a], 2, 0.1, seed);
        prop_assert_eq!(x.data, y.data);
    }

    #[test]
    fn static_scatterers_repeat_every_frame(p in point(), r in 0.1..2.0f64) {
        let cube = cube_of(vec![SceneScatterer::fixed(p, r)], 3, 0.0, 0);
        prop_assert_eq!(cube.frame(0), cube.frame(1));
        prop_assert_eq!(cube.frame(1), cube.frame(2));
    }

    #[test]
    fn beamforming_is_linear(a in walker(2), b in walker(2), alpha in -2.0..2.0f64) {
        let (ca, cb) = (cube_of(vec![a], 2, 0.0, 0), cube_of(vec![b], 2, 0.0, 0));
        let mut mixed = ca.clone();
        for (m, v) in mixed.data.iter_mut().zip(&cb.data) {
            *m = *m * alpha + v;
        }
        let grid = small_grid();
        let (ha, hb) = (beamform_plane(&ca, &grid).unwrap(), beamform_plane(&cb, &grid).unwrap());
        let hm = beamform_plane(&mixed, &grid).unwrap();
        let scale = max_norm(&hm.values) + max_norm(&ha.values) + max_norm(&hb.values);
        for ((m, x), y) in hm.values.iter().zip(&ha.values).zip(&hb.values) {
            prop_assert!((m - (x * alpha + y)).norm() <= 1e-10 * scale);
        }
    }

    #[test]
    fn subtraction_commutes_with_beamforming(a in walker(4), lag in 1usize..3) {
        let cube = cube_of(vec![a, SceneScatterer::fixed(Vec3::new(0.1, 1.5, 1.0), 1.0)], 4, 0.05, 1);
        let grid = small_grid();
        let after = background_subtract(&beamform_plane(&cube, &grid).unwrap(), lag).unwrap();
        let before = beamform_plane(&cube.frame_difference(lag).unwrap(), &grid).unwrap();
        prop_assert_eq!(after.frames, before.frames);
        let scale = max_norm(&before.values).max(1e-300);
        for (x, y) in after.values.iter().zip(&before.values) {
            prop_assert!((x - y).norm() <= 1e-9 * scale);
        }
    }

    #[test]
    fn normalized_heatmaps_are_unit_bounded(a in walker(2), noise in 0.0..0.5f64) {
        let cube = cube_of(vec![a], 2, noise, 3);
        let n = magnitude_normalize(&beamform_plane(&cube, &small_grid()).unwrap());
        for t in 0..n.frames {
            let frame = n.frame(t);
            prop_assert!(frame.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = frame.iter().cloned().fold(0.0, f64::max);
            prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn triangulation_beats_the_truth_under_noise(
        p in (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64),
        noise in prop::collection::vec(-1.0..1.0f64, 6),
    ) {
        let truth = Vec3::new(p.0, p.1, p.2);
        let cams = [
            random_camera(0.0, 0.0, 800.0, 0.0, 0.0),
            random_camera(0.5, 0.1, 700.0, 0.3, -0.2),
            random_camera(-0.4, -0.2, 900.0, -0.2, 0.1),
        ];
        let obs: Vec<_> = cams
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let [x, y] = c.project(&truth).unwrap();
                let kp = Keypoint2D { x: x + noise[2 * i], y: y + noise[2 * i + 1], joint: 0, person: None };
                (c.clone(), kp)
            })
            .collect();
        let est = triangulate(&obs).unwrap().position;
        let c_est = reprojection_cost(&obs, &est).unwrap();
        let c_truth = reprojection_cost(&obs, &truth).unwrap();
        prop_assert!(c_est <= c_truth * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn kmeans_inertia_never_increases(
        pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 4..30),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
        let c = cluster_keypoints(&pts, k, seed).unwrap();
        for w in c.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        prop_assert_eq!(c.labels.len(), pts.len());
    }

    #[test]
    fn pasting_is_monotone(
        lo in prop::collection::vec(0.0..1.0f64, 16),
        bump in prop::collection::vec(0.0..0.5f64, 16),
        b in (-4.0..20.0f64, -4.0..14.0f64, 1.0..12.0f64, 1.0..10.0f64),
    ) {
        let hi: Vec<f64> = lo.iter().zip(&bump).map(|(a, d)| (a + d).min(1.0)).collect();
        let bbox = Box2D::new(b.0, b.1, b.0 + b.2, b.1 + b.3);
        let canvas = Box2D::new(0.0, 0.0, 20.0, 14.0);
        prop_assume!(bbox.intersection(&canvas).area() > 0.0);
        let small = paste_mask(&ProbMask::new(4, 4, lo).unwrap(), &bbox, 20, 14).unwrap();
        let large = paste_mask(&ProbMask::new(4, 4, hi).unwrap(), &bbox, 20, 14).unwrap();
        for (s, l) in small.data.iter().zip(&large.data) {
            prop_assert!(!s || *l);
        }
        // nothing outside the box
        for y in 0..14 {
            for x in 0..20 {
                if large.get(x, y) {
                    prop_assert!(bbox.contains(x as f64 + 0.5, y as f64 + 0.5));
                }
            }
        }
    }

    #[test]
    fn cfar_is_translation_equivariant(
        col in 9usize..21,
        row in 9usize..21,
        dx in -3i64..4,
        dy in -3i64..4,
        amp in 5.0..100.0f64,
    ) {
        let grid = PlaneGrid::new(Orientation::Horizontal, [0.0, 0.0], 0.1, 30, 30).unwrap();
        let params = CfarParams { guard: 1, train: 2, ..CfarParams::default() };
        let frame = |c: usize, r: usize| {
            let mut v: Vec<f64> = (0..900).map(|i| 1.0 + 0.1 * ((i * 37 % 11) as f64 / 11.0)).collect();
            v[r * 30 + c] = amp;
            v[r * 30 + c + 1] = amp * 0.5;
            v
        };
        let (c2, r2) = ((col as i64 + dx) as usize, (row as i64 + dy) as usize);
        let a = cfar_detect_frame(&frame(col, row), &grid, &params).unwrap();
        let b = cfar_detect_frame(&frame(c2, r2), &grid, &params).unwrap();
        prop_assert_eq!(a.len(), 1);
        prop_assert_eq!(b.len(), 1);
        prop_assert_eq!(b[0].peak, (c2, r2));
        let shifted = a[0].bbox.translate(dx as f64 * 0.1, dy as f64 * 0.1);
        prop_assert!((shifted.x1 - b[0].bbox.x1).abs() < 1e-9);
        prop_assert!((shifted.y2 - b[0].bbox.y2).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_gradient_matches_difference(x in -3.0..3.0f64) {
        let h = 1e-6;
        let fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2.0 * h);
        prop_assert!((fd - smooth_l1_grad(x)).abs() < 1e-6);
        prop_assert!(smooth_l1(x) >= 0.0 && smooth_l1(x) == smooth_l1(-x));
    }

    #[test]
    fn attention_is_permutation_equivariant(
        seed in any::<u64>(),
        n in 2usize..6,
        raw in prop::collection::vec(-1.0..1.0f64, 24),
        shift in 1usize..5,
    ) {
        let d = 4;
        let w = AttentionWeights::seeded(1, 2, d, seed).unwrap();
        let seq: Vec<Vec<f64>> = (0..n).map(|i| raw[i * d..(i + 1) * d].to_vec()).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| seq[i].clone()).collect();
        let a = multi_head_attention(&seq, &w.layers[0], 2).unwrap();
        let b = multi_head_attention(&permuted, &w.layers[0], 2).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (x, y) in b.outputs[i].iter().zip(&a.outputs[src]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (j, &src_j) in perm.iter().enumerate() {
                for h in 0..2 {
                    let x = b.attention[h][i * n + j];
                    let y = a.attention[h][src * n + src_j];
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fused_rows_are_substochastic(
        c in 1usize..3,
        h in 1usize..3,
        wh in 1usize..5,
        wv in 1usize..5,
        seed in any::<u64>(),
    ) {
        let values = |w: usize, o: f64| (0..c * h * w).map(|i| (i as f64 * 0.7 + o).cos()).collect();
        let hor = FeatureBlock::new(c, h, wh, values(wh, 0.0), Orientation::Horizontal).unwrap();
        let ver = FeatureBlock::new(c, h, wv, values(wv, 1.0), Orientation::Vertical).unwrap();
        let heads = if (c * h) % 2 == 0 { 2 } else { 1 };
        let w = AttentionWeights::seeded(2, heads, c * h, seed).unwrap();
        let out = fuse(&hor, &ver, &w).unwrap();
        prop_assert_eq!((out.rows, out.cols), (wv, wh));
        for r in 0..wv {
            let s: f64 = out.block[r * wh..(r + 1) * wh].iter().sum();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn ap_ignores_monotone_score_rescaling(record in record_strategy(), power in 0.2..5.0f64) {
        let mut rescaled = record.clone();
        for f in &mut rescaled.frames {
            for d in &mut f.detections {
                d.score = 3.0 * d.score.powf(power) + 1.0;
            }
        }
        for t in [0.5, 0.75, 0.9] {
            prop_assert_eq!(average_precision_at(&record, t).ap, average_precision_at(&rescaled, t).ap);
        }
    }

    #[test]
    fn averaged_ap_is_at_most_ap50(record in record_strategy()) {
        let r = evaluate(&record).unwrap();
        prop_assert!(r.ap_50_95 <= r.ap_50 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&r.ap_50));
        prop_assert_eq!(average_precision_at(&record, 0.5).ap, common::pr_table_ap(&record, 0.5));
    }

    #[test]
    fn mask_iou_is_a_similarity(a in mask_strategy(6, 5), b in mask_strategy(6, 5)) {
        let ab = mask_iou(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn alignment_respects_the_residual_bound(
        cam in prop::collection::vec(0.0..2.0f64, 1..10),
        radar in prop::collection::vec(0.0..2.0f64, 1..10),
        bound in 0.0..0.3f64,
    ) {
        let mut cam = cam;
        let mut radar = radar;
        cam.sort_by(f64::total_cmp);
        radar.sort_by(f64::total_cmp);
        for p in align_streams(&cam, &radar, bound).unwrap() {
            prop_assert!(p.residual <= bound);
            let best = radar.iter().map(|r| (p.camera_time - r).abs()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(p.residual, best);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rle_round_trips(w in 1usize..12, h in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
        let m = BinaryMask::from_data(w, h, bits[..w * h].to_vec()).unwrap();
        let rle = rle_encode(&m);
        prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), w * h);
        prop_assert_eq!(rle_decode(&rle).unwrap(), m);
    }
}

fn detection_fixture(values: &[f64]) -> (Vec<BoxPrediction>, Vec<DetectionTarget>) {
    let preds = values
        .chunks(9)
        .map(|c| BoxPrediction {
            human_prob: 0.05 + 0.9 * c[0],
            coords: [c[1] * 4.0, c[2] * 4.0, c[3] * 4.0, c[4] * 4.0],
        })
        .collect();
    let targets = values
        .chunks(9)
        .map(|c| DetectionTarget {
            label: if c[5] > 0.3 {
                ClassLabel::Human
            } else {
                ClassLabel::Background
            },
            coords: [c[6] * 4.0, c[7] * 4.0, c[8] * 4.0, c[6] * 4.0 + 1.0],
        })
        .collect();
    (preds, targets)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn detection_gradient_matches_differences(values in prop::collection::vec(0.0..1.0f64, 27)) {
        let (preds, targets) = detection_fixture(&values);
        let g = detection_loss_grad_coords(&preds, &targets, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..preds.len() {
            for c in 0..4 {
                let mut plus = preds.clone();
                let mut minus = preds.clone();
                plus[i].coords[c] += h;
                minus[i].coords[c] -= h;
                let fd = (detection_loss(&plus, &targets, 1.0).unwrap()
                    - detection_loss(&minus, &targets, 1.0).unwrap())
                    / (2.0 * h);
                prop_assert!((fd - g[i][c]).abs() <= 1e-4 * fd.abs().max(1e-2));
            }
        }
    }

    #[test]
    fn mask_gradient_matches_differences(
        q in prop::collection::vec(0.05..0.95f64, 18),
        y in prop::collection::vec(0.0..1.0f64, 9),
        class in 0usize..2,
    ) {
        let preds = vec![MaskPrediction {
            channels: vec![
                ProbMask::new(3, 3, q[..9].to_vec()).unwrap(),
                ProbMask::new(3, 3, q[9..].to_vec()).unwrap(),
            ],
        }];
        let targets = vec![MaskTarget { class, mask: ProbMask::new(3, 3, y).unwrap() }];
        let g = mask_loss_grad(&preds, &targets).unwrap();
        let h = 1e-7;
        for ch in 0..2 {
            for i in 0..9 {
                let mut plus = preds.clone();
                let mut minus = preds.clone();
                plus[0].channels[ch].values[i] += h;
                minus[0].channels[ch].values[i] -= h;
                let fd = (mask_loss(&plus, &targets).unwrap() - mask_loss(&minus, &targets).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[0][ch][i]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn fused_gradient_matches_differences(
        hv in prop::collection::vec(-1.0..1.0f64, 12),
        vv in prop::collection::vec(-1.0..1.0f64, 12),
        seed in any::<u64>(),
    ) {
        let hor = FeatureBlock::new(2, 2, 3, hv, Orientation::Horizontal).unwrap();
        let ver = FeatureBlock::new(2, 2, 3, vv, Orientation::Vertical).unwrap();
        let w = AttentionWeights::seeded(1, 2, 4, seed).unwrap();
        let (value, gh, gv) = fused_sum_gradient(&hor, &ver, &w).unwrap();
        let sum = |h: &FeatureBlock, v: &FeatureBlock| fuse(h, v, &w).unwrap().block.iter().sum::<f64>();
        prop_assert!((value - sum(&hor, &ver)).abs() < 1e-12);
        let step = 1e-6;
        for (i, g) in gh.iter().enumerate() {
            let (mut p, mut m) = (hor.clone(), hor.clone());
            p.values[i] += step;
            m.values[i] -= step;
            let fd = (sum(&p, &ver) - sum(&m, &ver)) / (2.0 * step);
            prop_assert!((fd - g).abs() < 1e-3 * fd.abs().max(1e-2));
        }
        for (i, g) in gv.iter().enumerate() {
            let (mut p, mut m) = (ver.clone(), ver.clone());
            p.values[i] += step;
            m.values[i] -= step;
            let fd = (sum(&hor, &p) - sum(&hor, &m)) / (2.0 * step);
            prop_assert!((fd - g).abs() < 1e-3 * fd.abs().max(1e-2));
        }
    }
}
