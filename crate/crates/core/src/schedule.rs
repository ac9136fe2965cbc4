//! The spatio-temporal scale ladder `x^0 ... x^N`.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Resolution of one pyramid scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub index: usize,
    pub temporal_stride: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
}

impl ScaleSpec {
    pub fn dims(&self) -> [usize; 3] {
        [self.frame_count, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSchedule {
    pub scales: Vec<ScaleSpec>,
    /// `[T, H, W]` of the source slice.
    pub source_dims: [usize; 3],
}

impl PyramidSchedule {
    pub fn scale(&self, n: usize) -> &ScaleSpec {
        &self.scales[n]
    }

    pub fn finest(&self) -> &ScaleSpec {
        self.scales.last().expect("schedule has at least one scale")
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// Number of frames kept when selecting every `stride`-th frame of `length` frames.
pub fn frame_count(length: usize, stride: usize) -> usize {
    (length - 1) / stride + 1
}

/// Stride used at scale `n` of `0..=finest`: the strides sorted descending,
/// indexed linearly from the largest (scale 0) to the smallest (scale `finest`).
pub fn stride_at(strides: &[usize], n: usize, finest: usize) -> usize {
    let mut sorted = strides.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();
    if finest == 0 {
        return sorted[0];
    }
    let idx = (n as f64 * (sorted.len() - 1) as f64 / finest as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Heights `round(base * growth^n)`, capped at `cap`, for `n = 0..=finest`.
pub fn height_ladder(base: usize, growth: f64, cap: usize, finest: usize) -> Vec<usize> {
    (0..=finest)
        .map(|n| {
            let h = (base as f64 * growth.powi(n as i32)).round() as usize;
            h.clamp(1, cap.max(1))
        })
        .collect()
}

/// Width matching `height` at the source aspect ratio, at least 1 px.
pub fn width_for(height: usize, source_height: usize, source_width: usize) -> usize {
    ((height as f64 * source_width as f64 / source_height as f64).round() as usize).max(1)
}

/// Builds the scale ladder for a source slice of `[T, H, W]`.
///
/// Heights are additionally capped at the source height, since downsampling
/// cannot produce a larger frame than it starts from.
pub fn build_schedule(config: &RunConfig, source_dims: [usize; 3]) -> Result<PyramidSchedule> {
    let [length, src_h, src_w] = source_dims;
    if src_h == 0 || src_w == 0 || length == 0 {
        return Err(Error::Schedule(format!("source dims must be positive, got {source_dims:?}")));
    }
    let required = config.slice_frames();
    if config.spatial_only {
        if length != 1 {
            return Err(Error::Schedule(format!("image mode expects a single frame, got {length}")));
        }
    } else if length < required {
        return Err(Error::Schedule(format!(
            "source has {length} frames but the strides {:?} need at least {required} (LCM + 1)",
            config.strides
        )));
    }
    let cap = config.max_height.min(src_h);
    let heights = height_ladder(config.base_height.min(cap), config.scale_growth, cap, config.finest_scale);
    let scales = heights
        .iter()
        .enumerate()
        .map(|(n, &height)| {
            let stride = if config.spatial_only { 1 } else { stride_at(&config.strides, n, config.finest_scale) };
            let frames = if config.spatial_only { 1 } else { frame_count(required, stride) };
            ScaleSpec { index: n, temporal_stride: stride, frame_count: frames, height, width: width_for(height, src_h, src_w).min(src_w) }
        })
        .collect();
    Ok(PyramidSchedule { scales, source_dims: [if config.spatial_only { 1 } else { required }, src_h, src_w] })
}
