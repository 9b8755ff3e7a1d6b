//! Fixture builders for the kernel benchmarks.

use mmsil_core::geometry::{CameraModel, Keypoint2D};
use mmsil_core::metrics::{FrameEval, ScoredBox};
use mmsil_core::radar::{
    synthesize_frame_cube, ChirpConfig, Orientation, Scene, SceneScatterer, SynthesisOptions, Vec3,
    VirtualArray,
};
use mmsil_core::{AttentionWeights, Box2D, EvalRecord, FeatureBlock, RadarFrameCube};
use nalgebra::{Matrix3, Vector3};

/// A two-frame cube with one moving and one fixed scatterer.
pub fn cube(plane: Orientation, elements: usize, samples: usize) -> RadarFrameCube {
    let chirp = match plane {
        Orientation::Horizontal => ChirpConfig::horizontal(samples),
        Orientation::Vertical => ChirpConfig::vertical(samples),
    };
    let array =
        VirtualArray::mimo_equivalent(elements, &chirp, plane, Vec3::new(0.0, 0.0, 1.0)).unwrap();
    let scene = Scene::new(vec![
        SceneScatterer::moving(
            Vec3::new(0.2, 2.0, 1.0),
            1.0,
            vec![Vec3::zeros(), Vec3::new(0.05, 0.05, 0.0)],
        ),
        SceneScatterer::fixed(Vec3::new(-0.6, 3.0, 0.5), 0.5),
    ]);
    let options = SynthesisOptions {
        frames: 2,
        noise_std: 0.01,
        seed: 1,
    };
    synthesize_frame_cube(&scene, &chirp, &array, options).unwrap()
}

/// Eight cameras on a ring of radius 4 m looking at the origin.
pub fn camera_ring() -> Vec<CameraModel> {
    let k = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
    (0..8)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 8.0;
            let center = Vector3::new(4.0 * a.cos(), 4.0 * a.sin(), 1.0);
            let forward = (-center).normalize();
            let right = forward.cross(&Vector3::z()).normalize();
            let down = forward.cross(&right);
            let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
            CameraModel::from_parts(k, r, -(r * center)).unwrap()
        })
        .collect()
}

/// Noise-free observations of `p` in every camera.
pub fn observations(cams: &[CameraModel], p: &Vec3) -> Vec<(CameraModel, Keypoint2D)> {
    cams.iter()
        .map(|c| {
            let [x, y] = c.project(p).unwrap();
            (
                c.clone(),
                Keypoint2D {
                    x,
                    y,
                    joint: 0,
                    person: None,
                },
            )
        })
        .collect()
}

/// `frames` frames with four ground-truth boxes and eight jittered detections each.
pub fn eval_record(frames: usize) -> EvalRecord {
    let frames = (0..frames)
        .map(|t| {
            let ground_truth: Vec<Box2D> = (0..4)
                .map(|i| Box2D::centered(60.0 + 120.0 * i as f64, 200.0, 50.0, 150.0))
                .collect();
            let detections = (0..8)
                .map(|j| {
                    let g = &ground_truth[j % 4];
                    let jitter = ((t * 8 + j) as f64 * 0.77).sin() * 20.0;
                    let [cx, cy] = g.center();
                    ScoredBox {
                        bbox: Box2D::centered(cx + jitter, cy, g.width(), g.height()),
                        score: 0.5 + 0.49 * ((t * 8 + j) as f64 * 1.3).cos(),
                    }
                })
                .collect();
            FrameEval {
                detections,
                ground_truth,
            }
        })
        .collect();
    EvalRecord { frames }
}

/// A deterministic feature block of shape `c x h x w`.
pub fn feature_block(c: usize, h: usize, w: usize, orientation: Orientation) -> FeatureBlock {
    let values = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
    FeatureBlock::new(c, h, w, values, orientation).unwrap()
}

/// Attention weights sized for blocks with `c * h` features.
pub fn weights(d_model: usize) -> AttentionWeights {
    AttentionWeights::seeded(2, 4, d_model, 7).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmsil_core::geometry::triangulate;

    #[test]
    fn fixtures_are_consistent() {
        let cams = camera_ring();
        let p = Vec3::new(0.3, -0.2, 1.2);
        let est = triangulate(&observations(&cams, &p)).unwrap();
        assert!((est.position - p).norm() < 1e-6);
        assert_eq!(eval_record(3).num_ground_truth(), 12);
        let h = feature_block(4, 4, 16, Orientation::Horizontal);
        let v = feature_block(4, 4, 16, Orientation::Vertical);
        mmsil_core::fuse(&h, &v, &weights(16)).unwrap();
    }
}
