use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half a radar frame period at 20 fps.
pub const DEFAULT_MAX_RESIDUAL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameIndexPair {
    pub camera_index: usize,
    pub camera_time: f64,
    pub radar_index: usize,
    pub radar_time: f64,
    pub residual: f64,
}

fn check_sorted(ts: &[f64], what: &'static str) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::Empty(what));
    }
    if ts.iter().any(|t| !t.is_finite()) || ts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig(format!(
            "{what} timestamps must be finite and ascending"
        )));
    }
    Ok(())
}

/// Pairs every camera frame with its nearest radar frame, dropping pairs whose
/// residual exceeds `max_residual`. Ties go to the earlier radar frame.
pub fn align_streams(
    cam_ts: &[f64],
    radar_ts: &[f64],
    max_residual: f64,
) -> Result<Vec<FrameIndexPair>> {
    check_sorted(cam_ts, "camera stream")?;
    check_sorted(radar_ts, "radar stream")?;
    if !(max_residual >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "max_residual must be non-negative, got {max_residual}"
        )));
    }
    let mut pairs = Vec::with_capacity(cam_ts.len());
    for (ci, &tc) in cam_ts.iter().enumerate() {
        let after = radar_ts.partition_point(|&t| t < tc);
        let ri = match (after.checked_sub(1), radar_ts.get(after)) {
            (Some(b), Some(&ta)) if tc - radar_ts[b] <= ta - tc => b,
            (Some(b), None) => b,
            _ => after,
        };
        let residual = (tc - radar_ts[ri]).abs();
        if residual <= max_residual {
            pairs.push(FrameIndexPair {
                camera_index: ci,
                camera_time: tc,
                radar_index: ri,
                radar_time: radar_ts[ri],
                residual,
            });
        }
    }
    Ok(pairs)
}

/// `n / fps` for `n` in `0..frames`.
pub fn uniform_timestamps(frames: usize, fps: f64) -> Vec<f64> {
    (0..frames).map(|n| n as f64 / fps).collect()
}
