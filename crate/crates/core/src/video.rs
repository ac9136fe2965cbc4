//! The `[T, H, W, C]` video sample type.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FPS: f64 = 24.0;

/// A video (or, with `T = 1`, an image) stored frame-major as `[T, H, W, C]`.
///
/// Loaded samples live in `[-1, 1]`; generated samples are sums of residuals and
/// may leave that range slightly until they are clamped for export.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    pub fps: f64,
}

impl VideoTensor {
    pub fn new(dims: [usize; 4], data: Vec<f64>, fps: f64) -> Result<Self> {
        let [t, h, w, c] = dims;
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("video dims must be positive, got {dims:?}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("video must have 1 or 3 channels, got {c}")));
        }
        if data.len() != t * h * w * c {
            return Err(Error::Shape(format!("video {dims:?} needs {} values, got {}", t * h * w * c, data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite video value {bad}")));
        }
        Ok(Self { frames: t, height: h, width: w, channels: c, data, fps })
    }

    /// Builds a video from a per-element function `f(t, y, x, c)`.
    pub fn from_fn(dims: [usize; 4], fps: f64, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let [t, h, w, c] = dims;
        let mut data = Vec::with_capacity(t * h * w * c);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        data.push(f(ti, y, x, ci));
                    }
                }
            }
        }
        Self::new(dims, data, fps)
    }

    /// Rejects values outside `[-1, 1]`.
    pub fn check_normalized(&self) -> Result<()> {
        match self.data.iter().find(|v| v.abs() > 1.0 + 1e-12) {
            Some(v) => Err(Error::Data(format!("video value {v} outside [-1, 1]"))),
            None => Ok(()),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Copies frames `start..start + len` into a new video.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Shape(format!("frame slice {start}..{} out of 0..{}", start + len, self.frames)));
        }
        let per = self.height * self.width * self.channels;
        let data = self.data[start * per..(start + len) * per].to_vec();
        Self::new([len, self.height, self.width, self.channels], data, self.fps)
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        out
    }

    /// Channel-first `[C, T, H, W]` layout used by the networks.
    pub fn to_cthw(&self) -> Tensor {
        let [t, h, w, c] = self.dims();
        let plane = t * h * w;
        let mut data = vec![0.0; c * plane];
        for p in 0..plane {
            for ci in 0..c {
                data[ci * plane + p] = self.data[p * c + ci];
            }
        }
        Tensor::from_parts(vec![c, t, h, w], data)
    }

    pub fn from_cthw(tensor: &Tensor, fps: f64) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected [C, T, H, W], got {shape:?}")));
        }
        let (c, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = t * h * w;
        let mut data = vec![0.0; c * plane];
        for p in 0..plane {
            for ci in 0..c {
                data[p * c + ci] = tensor.data()[ci * plane + p];
            }
        }
        Self::new([t, h, w, c], data, fps)
    }
}
