//! sRGB to CIE L*a*b* under the D65 white point.

use crate::video::VideoTensor;

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn linearize(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// L*a*b* of an sRGB triple with components in `[0, 1]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|v| linearize(v.clamp(0.0, 1.0)));
    let xyz: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| RGB_TO_XYZ[i][j] * lin[j]).sum());
    let [fx, fy, fz] = std::array::from_fn(|i| f(xyz[i] / WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// L*a*b* values of a `[-1, 1]` video in `[T, H, W, 3]` order; grayscale input
/// is treated as equal RGB components.
pub fn video_to_lab(v: &VideoTensor) -> Vec<f64> {
    let c = v.channels();
    let mut out = Vec::with_capacity(v.data().len() / c * 3);
    for px in v.data().chunks_exact(c) {
        let rgb = if c == 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
        out.extend(srgb_to_lab(rgb.map(|x| (x + 1.0) / 2.0)));
    }
    out
}
