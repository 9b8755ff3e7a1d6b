//! Radar-based human silhouette segmentation: FMCW simulation, plane
//! beamforming, CFAR detection, cross-plane attention fusion, mask pasting
//! and COCO-style evaluation.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamform;
pub mod detect;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod radar;

pub use beamform::{
    background_subtract, beamform_plane, magnitude_normalize, Heatmap, PlaneGrid, RealHeatmap,
};
pub use detect::{cfar_detect, roi_crop, CfarParams, ClassLabel, Detection};
pub use error::{Error, Result};
pub use fusion::{fuse, AttentionWeights, FeatureBlock, FusionOutput};
pub use geometry::{
    cluster_keypoints, paste_mask, project_box3d, project_point, triangulate, Box2D, Box3D,
    CameraModel, Keypoint2D, Keypoint3D, ResultPlane,
};
pub use mask::{BinaryMask, ProbMask};
pub use metrics::{evaluate, EvalRecord, EvalReport};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use radar::{
    synthesize_frame_cube, ChirpConfig, Orientation, RadarFrameCube, Scatterer, Scene,
    SceneScatterer, SynthesisOptions, Vec3, VirtualArray,
};
