//! Sample-set diversity and single-video Fréchet distances over pluggable
//! feature extractors.

mod frechet;
mod lab;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use frechet::{frechet_distance, frechet_from_moments, subsampled_fid, FeatureMap};
pub use lab::{srgb_to_lab, video_to_lab};

use crate::error::{Error, Result};
use crate::nn::{ConvStack, Role};
use crate::resample::resize_map;
use crate::tensor::Tensor;
use crate::video::VideoTensor;

/// Clip size every video is resized to before feature extraction.
pub const SVFID_DIMS: [usize; 3] = [16, 112, 112];

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    // shifted by the first value, so identical inputs give exactly zero
    let first = values.clone().next().unwrap_or(0.0);
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + (v - first)));
    let mean = sum / n as f64;
    (values.map(|v| (v - first - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// Diversity on precomputed L*a*b* values: mean over elements of the
/// across-sample standard deviation, divided by the std of `real`.
pub fn diversity_lab(real: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metric(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| s.len() != real.len()) {
        return Err(Error::Metric("samples and real video differ in size".into()));
    }
    let scale = population_std(real.iter().copied());
    if !(scale > 0.0) {
        return Err(Error::Metric("real video has zero intensity spread".into()));
    }
    let spread: f64 = (0..real.len()).map(|i| population_std(samples.iter().map(|s| s[i]))).sum();
    Ok(spread / real.len() as f64 / scale)
}

pub fn diversity(real: &VideoTensor, samples: &[VideoTensor]) -> Result<f64> {
    if let Some(bad) = samples.iter().find(|s| s.dims() != real.dims()) {
        return Err(Error::Metric(format!("sample {:?} does not match real {:?}", bad.dims(), real.dims())));
    }
    let labs: Vec<_> = samples.iter().map(video_to_lab).collect();
    diversity_lab(&video_to_lab(real), &labs)
}

/// Maps a `[C, T, H, W]` clip to one feature vector per position.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn extract(&self, clip: &Tensor) -> Result<FeatureMap>;
}

/// Feature maps laid out `[D, T, H, W]` to position-major rows.
fn to_rows(map: &Tensor) -> Result<FeatureMap> {
    let d = map.shape()[0];
    let positions = map.len() / d;
    let mut values = vec![0.0; map.len()];
    for (c, plane) in map.data().chunks_exact(positions).enumerate() {
        for (p, &v) in plane.iter().enumerate() {
            values[p * d + c] = v;
        }
    }
    FeatureMap::new(positions, d, values)
}

/// Raw pixel values as features.
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn name(&self) -> &str {
        "pixels"
    }

    fn extract(&self, clip: &Tensor) -> Result<FeatureMap> {
        to_rows(clip)
    }
}

/// A fixed, randomly initialized spectral-normalized 3D conv stack.
pub struct RandomConvFeatures {
    stack: ConvStack,
}

impl RandomConvFeatures {
    pub fn new(channels: usize, dims: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = ConvStack::new(Role::Encoder, channels, dims, dims, 2, [3, 3, 3], &mut rng);
        for _ in 0..30 {
            stack.power_iteration();
        }
        Self { stack }
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn extract(&self, clip: &Tensor) -> Result<FeatureMap> {
        if clip.shape()[0] != self.stack.in_channels() {
            return Err(Error::Metric(format!("extractor expects {} channels, got {}", self.stack.in_channels(), clip.shape()[0])));
        }
        to_rows(&self.stack.eval(clip))
    }
}

/// Fréchet distance between per-position features of `real` and `fake`, both
/// resized to `dims` (`[T, H, W]`) first.
pub fn svfid(real: &VideoTensor, fake: &VideoTensor, extractor: &dyn FeatureExtractor, dims: [usize; 3]) -> Result<f64> {
    if real.channels() != fake.channels() {
        return Err(Error::Metric("real and fake differ in channel count".into()));
    }
    let features = |v: &VideoTensor| {
        let x = v.to_cthw();
        let resized = resize_map(x.dims3(), dims).apply(&x);
        extractor.extract(&resized)
    };
    let (a, b) = (features(real)?, features(fake)?);
    if a.positions() < 2 {
        return Err(Error::Metric(format!("extractor produced {} positions; need at least 2", a.positions())));
    }
    frechet_distance(&a, &b)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "metric={} value={:.6e} seed={} config={}", self.name, self.value, self.seed, self.config_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn video(seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::from_fn([3, 6, 7, 3], 24.0, |t, y, x, _| ((t + y * x) as f64 * 0.3).sin() * 0.6 + rng.random_range(-0.2..0.2)).unwrap()
    }

    #[test]
    fn identical_samples_have_no_diversity() {
        let v = video(0);
        assert_eq!(diversity(&v, &[v.clone(), v.clone(), v.clone()]).unwrap(), 0.0);
        assert!(diversity(&v, std::slice::from_ref(&v)).is_err());
    }

    #[test]
    fn mirrored_pair_is_diverse() {
        let v = video(1);
        let neg = VideoTensor::new(v.dims(), v.data().iter().map(|x| -x).collect(), 24.0).unwrap();
        assert!(diversity(&v, &[v.clone(), neg]).unwrap() > 0.0);
    }

    #[test]
    fn known_spread_ratio() {
        let (sigma, s) = (0.7, 2.5);
        // real: alternating +-s has population std exactly s
        let real: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 10.0 + s } else { 10.0 - s }).collect();
        let base: Vec<f64> = (0..40).map(|i| (i as f64).sin() * 30.0).collect();
        let samples = vec![base.iter().map(|b| b + sigma).collect(), base.iter().map(|b| b - sigma).collect()];
        assert!((diversity_lab(&real, &samples).unwrap() - sigma / s).abs() < 1e-6);
    }

    #[test]
    fn diversity_ignores_sample_order() {
        let (a, b, c) = (video(2), video(3), video(4));
        let one = diversity(&a, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let two = diversity(&a, &[c, a.clone(), b]).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn svfid_self_and_noise_sweep() {
        let real = video(5);
        let extractors: [&dyn FeatureExtractor; 2] = [&PixelFeatures, &RandomConvFeatures::new(3, 8, 0)];
        for ex in extractors {
            assert!(svfid(&real, &real, ex, [3, 6, 7]).unwrap() < 1e-5);
            let mut prev = 0.0;
            for amp in [0.05, 0.1, 0.2] {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let noisy = VideoTensor::new(real.dims(), real.data().iter().map(|x| x + amp * rng.random_range(-1.0..1.0)).collect(), 24.0).unwrap();
                let d = svfid(&real, &noisy, ex, [3, 6, 7]).unwrap();
                assert!(d > prev, "{} amp {amp}: {d} <= {prev}", ex.name());
                prev = d;
            }
        }
    }

    #[test]
    fn image_mode_self_distance() {
        let img = VideoTensor::from_fn([1, 9, 9, 3], 24.0, |_, y, x, c| ((y * 9 + x + c) as f64 * 0.1).cos() * 0.5).unwrap();
        assert!(svfid(&img, &img, &PixelFeatures, [1, 9, 9]).unwrap() < 1e-5);
    }

    #[test]
    fn report_line() {
        let r = MetricRecord { name: "svfid".into(), value: 0.5, seed: 3, config_hash: "abc".into() };
        assert_eq!(r.to_string(), "metric=svfid value=5.000000e-1 seed=3 config=abc");
    }
}
