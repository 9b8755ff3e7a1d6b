//! File formats and stream alignment.

mod align;
mod binary;
mod files;
mod rle;

pub use align::{align_streams, uniform_timestamps, FrameIndexPair, DEFAULT_MAX_RESIDUAL};
pub use binary::{
    read_cube, read_heatmap, read_weights, write_cube, write_heatmap, write_real_heatmap,
    write_weights, CubeFile, HeatmapFile, CUBE_MAGIC, HEATMAP_MAGIC, WEIGHTS_MAGIC,
};
pub use files::{
    evaluate_files, load_calibration, read_json, to_json_bytes, triangulate_views, AnnotatedFrame,
    AnnotatedObject, AnnotationSet, DetectionFile, DetectionFrame, DetectionRecord, KeypointViews,
};
pub use rle::{rle_decode, rle_encode, Rle};
