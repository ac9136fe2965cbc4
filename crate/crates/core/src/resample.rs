//! Spatio-temporal resampling between pyramid scales.
//!
//! All maps are separable linear operators on `[C, T, H, W]` tensors. Linear
//! interpolation uses an endpoint-aligned grid on every axis: output sample `i`
//! of `n` sits at input coordinate `i * (m - 1) / (n - 1)`, so the first and last
//! samples map exactly onto the first and last input samples. Temporal
//! downsampling never blends: it selects every `stride`-th frame.

use crate::error::{Error, Result};
use crate::schedule::ScaleSpec;
use crate::tensor::Tensor;
use crate::video::VideoTensor;

/// A sparse `rows x cols` matrix acting on one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl LinearMap {
    pub fn identity(n: usize) -> Self {
        Self { cols: n, rows: (0..n).map(|i| vec![(i, 1.0)]).collect() }
    }

    /// Picks input samples `indices`.
    pub fn select(indices: &[usize], cols: usize) -> Self {
        Self { cols, rows: indices.iter().map(|&i| vec![(i, 1.0)]).collect() }
    }

    /// Endpoint-aligned linear interpolation from `cols` to `rows` samples.
    pub fn linear(rows: usize, cols: usize) -> Self {
        if rows == cols {
            return Self::identity(rows);
        }
        let rows_v = (0..rows)
            .map(|i| {
                if rows == 1 || cols == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = (i * (cols - 1)) as f64 / (rows - 1) as f64;
                let lo = (pos.floor() as usize).min(cols - 1);
                let frac = pos - lo as f64;
                if frac == 0.0 || lo + 1 >= cols {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - frac), (lo + 1, frac)]
                }
            })
            .collect();
        Self { cols, rows: rows_v }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn is_identity(&self) -> bool {
        self.rows.len() == self.cols && self.rows.iter().enumerate().all(|(i, r)| r.len() == 1 && r[0] == (i, 1.0))
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.cols];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                rows[j].push((i, w));
            }
        }
        Self { cols: self.rows.len(), rows }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; self.cols];
                for &(j, w) in row {
                    dense[j] += w;
                }
                dense
            })
            .collect()
    }
}

/// One [`LinearMap`] per spatio-temporal axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableMap {
    pub time: LinearMap,
    pub height: LinearMap,
    pub width: LinearMap,
}

impl SeparableMap {
    pub fn transpose(&self) -> Self {
        Self { time: self.time.transpose(), height: self.height.transpose(), width: self.width.transpose() }
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.time.n_rows(), self.height.n_rows(), self.width.n_rows()]
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.time.n_cols(), self.height.n_cols(), self.width.n_cols()]
    }

    /// Applies the map to a `[C, T, H, W]` tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.dims3(), self.input_dims(), "resample input dims mismatch");
        let c = x.shape()[0];
        let mut data = x.data().to_vec();
        let mut dims = x.dims3();
        for (axis, map) in [(2, &self.width), (1, &self.height), (0, &self.time)] {
            if map.is_identity() {
                continue;
            }
            let (next, out_dims) = apply_axis(&data, c, dims, axis, map);
            data = next;
            dims = out_dims;
        }
        Tensor::from_parts(vec![c, dims[0], dims[1], dims[2]], data)
    }
}

fn apply_axis(data: &[f64], c: usize, dims: [usize; 3], axis: usize, map: &LinearMap) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = map.n_rows();
    // outer: everything before the axis; inner: contiguous stride after it
    let outer = c * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let (n_in, n_out) = (dims[axis], out_dims[axis]);
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (i, row) in map.rows.iter().enumerate() {
            let d = &mut dst[i * inner..(i + 1) * inner];
            for &(j, w) in row {
                let s = &src[j * inner..(j + 1) * inner];
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += w * sv;
                }
            }
        }
    }
    (out, out_dims)
}

/// Map taking a `[T, H, W]` volume to `spec`: frame selection with the spec's
/// stride plus linear spatial interpolation.
pub fn downsample_map(source: [usize; 3], spec: &ScaleSpec) -> Result<SeparableMap> {
    let [t, h, w] = source;
    let last = (spec.frame_count - 1) * spec.temporal_stride;
    if spec.frame_count == 0 || last >= t {
        return Err(Error::Resample(format!(
            "cannot select {} frames at stride {} from {t}",
            spec.frame_count, spec.temporal_stride
        )));
    }
    if spec.height > h || spec.width > w {
        return Err(Error::Resample(format!("target {}x{} is larger than source {h}x{w}", spec.height, spec.width)));
    }
    let indices: Vec<usize> = (0..spec.frame_count).map(|i| i * spec.temporal_stride).collect();
    Ok(SeparableMap {
        time: LinearMap::select(&indices, t),
        height: LinearMap::linear(spec.height, h),
        width: LinearMap::linear(spec.width, w),
    })
}

/// Endpoint-aligned trilinear map from `source` up to `target`.
pub fn upsample_map(source: [usize; 3], target: [usize; 3]) -> Result<SeparableMap> {
    if source.iter().zip(&target).any(|(s, t)| t < s) {
        return Err(Error::Resample(format!("upsample target {target:?} is smaller than source {source:?}")));
    }
    Ok(resize_map(source, target))
}

/// Endpoint-aligned trilinear map between arbitrary sizes.
pub fn resize_map(source: [usize; 3], target: [usize; 3]) -> SeparableMap {
    SeparableMap {
        time: LinearMap::linear(target[0], source[0]),
        height: LinearMap::linear(target[1], source[1]),
        width: LinearMap::linear(target[2], source[2]),
    }
}

pub fn downsample(v: &VideoTensor, spec: &ScaleSpec) -> Result<VideoTensor> {
    let x = v.to_cthw();
    let map = downsample_map(x.dims3(), spec)?;
    VideoTensor::from_cthw(&map.apply(&x), v.fps)
}

pub fn upsample(v: &VideoTensor, spec: &ScaleSpec) -> Result<VideoTensor> {
    let x = v.to_cthw();
    let map = upsample_map(x.dims3(), spec.dims())?;
    VideoTensor::from_cthw(&map.apply(&x), v.fps)
}

/// Trilinear resize to `[T, H, W]` without direction constraints.
pub fn resize(v: &VideoTensor, target: [usize; 3]) -> Result<VideoTensor> {
    if target.contains(&0) {
        return Err(Error::Resample(format!("resize target {target:?} has a zero axis")));
    }
    let x = v.to_cthw();
    VideoTensor::from_cthw(&resize_map(x.dims3(), target).apply(&x), v.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(stride: usize, frames: usize, h: usize, w: usize) -> ScaleSpec {
        ScaleSpec { index: 0, temporal_stride: stride, frame_count: frames, height: h, width: w }
    }

    fn ramp_video(t: usize, h: usize, w: usize) -> VideoTensor {
        VideoTensor::from_fn([t, h, w, 3], 24.0, |ti, y, x, c| {
            ((ti * 31 + y * 7 + x * 3 + c * 11) % 17) as f64 / 8.5 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn stride_four_selects_expected_frames() {
        let v = ramp_video(13, 6, 8);
        let d = downsample(&v, &spec(4, 4, 6, 8)).unwrap();
        assert_eq!(d.frames(), 4);
        for (k, src) in [0, 4, 8, 12].into_iter().enumerate() {
            assert_eq!(d.slice_frames(k, 1).unwrap(), v.slice_frames(src, 1).unwrap());
        }
    }

    #[test]
    fn identity_specs() {
        let v = ramp_video(5, 6, 7);
        assert_eq!(downsample(&v, &spec(1, 5, 6, 7)).unwrap(), v);
        assert_eq!(upsample(&v, &spec(1, 5, 6, 7)).unwrap(), v);
    }

    #[test]
    fn constants_stay_constant() {
        let v = VideoTensor::from_fn([13, 9, 12, 3], 24.0, |_, _, _, _| 0.37).unwrap();
        let d = downsample(&v, &spec(3, 5, 4, 5)).unwrap();
        assert!(d.data().iter().all(|x| (x - 0.37).abs() < 1e-12));
        let u = upsample(&d, &spec(1, 13, 9, 12)).unwrap();
        assert!(u.data().iter().all(|x| (x - 0.37).abs() < 1e-6));
    }

    #[test]
    fn temporal_endpoints_survive_upsampling() {
        let v = ramp_video(4, 5, 6);
        let u = upsample(&v, &spec(1, 13, 8, 9)).unwrap();
        let spatial_only = |frame: usize| resize(&v.slice_frames(frame, 1).unwrap(), [1, 8, 9]).unwrap();
        assert!(u.slice_frames(0, 1).unwrap().to_cthw().max_abs_diff(&spatial_only(0).to_cthw()) < 1e-6);
        assert!(u.slice_frames(12, 1).unwrap().to_cthw().max_abs_diff(&spatial_only(3).to_cthw()) < 1e-6);
    }

    #[test]
    fn linear_in_time_stays_linear() {
        let v = VideoTensor::from_fn([4, 2, 2, 1], 24.0, |t, y, x, _| -0.9 + 0.5 * t as f64 + 0.01 * (y + x) as f64).unwrap();
        let u = upsample(&v, &spec(1, 13, 2, 2)).unwrap();
        for t in 0..13 {
            // input frame k sits at output time 4k, so the slope per output frame is 0.5 / 4
            let expected = -0.9 + 0.5 * t as f64 / 4.0;
            assert!((u.get(t, 0, 0, 0) - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_directions_are_errors() {
        let v = ramp_video(13, 6, 8);
        assert!(downsample(&v, &spec(4, 4, 7, 8)).is_err());
        assert!(downsample(&v, &spec(5, 4, 6, 8)).is_err());
        let small = ramp_video(4, 6, 8);
        assert!(upsample(&small, &spec(1, 3, 6, 8)).is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        let map = resize_map([3, 4, 5], [7, 6, 9]);
        let x = ramp_video(3, 4, 5).to_cthw();
        let y = ramp_video(7, 6, 9).to_cthw();
        let lhs: f64 = map.apply(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = map.transpose().apply(&y).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn maps_are_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, t in 2usize..6, h in 2usize..6) {
            let x = ramp_video(t, h, 5).to_cthw();
            let y = ramp_video(t, h, 5).to_cthw().map(|v| v * v - 0.3);
            let map = resize_map([t, h, 5], [t + 3, h + 2, 7]);
            let lhs = map.apply(&x.zip_map(&y, |p, q| a * p + b * q));
            let rhs = map.apply(&x).zip_map(&map.apply(&y), |p, q| a * p + b * q);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }

        #[test]
        fn down_then_up_preserves_constants(c in -1.0f64..1.0, stride in 1usize..=4) {
            let v = VideoTensor::from_fn([13, 10, 14, 1], 24.0, |_, _, _, _| c).unwrap();
            let frames = 12 / stride + 1;
            let s = spec(if 12 % stride == 0 { stride } else { 1 }, if 12 % stride == 0 { frames } else { 13 }, 5, 6);
            let d = downsample(&v, &s).unwrap();
            let u = upsample(&d, &spec(1, 13, 10, 14)).unwrap();
            prop_assert!(u.data().iter().all(|x| (x - c).abs() < 1e-6));
        }
    }
}
