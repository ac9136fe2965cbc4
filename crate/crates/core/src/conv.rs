//! Stride-1, "same"-padded 3D convolution kernels on `[C, T, H, W]` tensors.
//!
//! The three functions form a closed family under differentiation:
//! `conv` is bilinear in (input, weight), `input_grad` and `weight_grad` are its
//! two adjoints, and each of them is again expressible by the other two. The
//! autograd engine relies on this to support gradients of gradients.

use crate::tensor::Tensor;

/// Kernel extent per axis `[kt, kh, kw]`; all extents odd, zero padding `k / 2`.
pub type Kernel = [usize; 3];

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: every stride pair describes a buffer that the callers size to exactly
    // m*k, k*n and m*n elements respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` into a `[Cin * kt * kh * kw, T * H * W]` patch matrix.
fn im2col(x: &[f64], cin: usize, dims: [usize; 3], kernel: Kernel) -> Vec<f64> {
    let [t, h, w] = dims;
    let [kt, kh, kw] = kernel;
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let positions = t * h * w;
    let mut cols = vec![0.0; cin * kt * kh * kw * positions];
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * positions..(ci + 1) * positions];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for ot in 0..t {
                        let st = ot as isize + a as isize - pt as isize;
                        if st < 0 || st >= t as isize {
                            continue;
                        }
                        for oh in 0..h {
                            let sh = oh as isize + b as isize - ph as isize;
                            if sh < 0 || sh >= h as isize {
                                continue;
                            }
                            let (lo, hi) = valid_range(w, c, pw);
                            let d0 = (ot * h + oh) * w;
                            let s0 = (st as usize * h + sh as usize) * w;
                            for ow in lo..hi {
                                dst[d0 + ow] = plane[s0 + ow + c - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Output positions `ow` for which `ow + c - pad` lies inside `[0, w)`.
fn valid_range(w: usize, c: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(c);
    let hi = (w + pad).saturating_sub(c).min(w);
    (lo, hi.max(lo))
}

/// Scatter-adds a patch matrix back into a `[Cin, T, H, W]` buffer.
fn col2im(cols: &[f64], cin: usize, dims: [usize; 3], kernel: Kernel) -> Vec<f64> {
    let [t, h, w] = dims;
    let [kt, kh, kw] = kernel;
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let positions = t * h * w;
    let mut x = vec![0.0; cin * positions];
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut x[ci * positions..(ci + 1) * positions];
        for a in 0..kt {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * positions..(row + 1) * positions];
                    for ot in 0..t {
                        let st = ot as isize + a as isize - pt as isize;
                        if st < 0 || st >= t as isize {
                            continue;
                        }
                        for oh in 0..h {
                            let sh = oh as isize + b as isize - ph as isize;
                            if sh < 0 || sh >= h as isize {
                                continue;
                            }
                            let (lo, hi) = valid_range(w, c, pw);
                            let d0 = (ot * h + oh) * w;
                            let s0 = (st as usize * h + sh as usize) * w;
                            for ow in lo..hi {
                                plane[s0 + ow + c - pw] += src[d0 + ow];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

fn is_pointwise(kernel: Kernel) -> bool {
    kernel == [1, 1, 1]
}

/// `y[co] = sum_ci w[co, ci] * x[ci]` (cross-correlation, zero padded).
pub fn conv(x: &Tensor, weight: &Tensor) -> Tensor {
    let (cin, dims) = (x.shape()[0], x.dims3());
    let ws = weight.shape();
    assert_eq!(ws.len(), 5, "conv weight must be [Cout, Cin, kt, kh, kw]");
    assert_eq!(ws[1], cin, "conv input channel mismatch");
    let cout = ws[0];
    let kernel = [ws[2], ws[3], ws[4]];
    let positions: usize = dims.iter().product();
    let rows = cin * kernel.iter().product::<usize>();
    let mut out = vec![0.0; cout * positions];
    if is_pointwise(kernel) {
        gemm(cout, rows, positions, (weight.data(), rows as isize, 1), (x.data(), positions as isize, 1), &mut out, false);
    } else {
        let cols = im2col(x.data(), cin, dims, kernel);
        gemm(cout, rows, positions, (weight.data(), rows as isize, 1), (&cols, positions as isize, 1), &mut out, false);
    }
    Tensor::from_parts(vec![cout, dims[0], dims[1], dims[2]], out)
}

/// Adjoint of [`conv`] with respect to its input.
pub fn input_grad(grad_out: &Tensor, weight: &Tensor) -> Tensor {
    let ws = weight.shape();
    let (cout, cin) = (ws[0], ws[1]);
    assert_eq!(grad_out.shape()[0], cout, "input_grad channel mismatch");
    let kernel = [ws[2], ws[3], ws[4]];
    let dims = grad_out.dims3();
    let positions: usize = dims.iter().product();
    let rows = cin * kernel.iter().product::<usize>();
    let mut cols = vec![0.0; rows * positions];
    // weight^T: element (r, co) lives at co * rows + r
    gemm(rows, cout, positions, (weight.data(), 1, rows as isize), (grad_out.data(), positions as isize, 1), &mut cols, false);
    let data = if is_pointwise(kernel) { cols } else { col2im(&cols, cin, dims, kernel) };
    Tensor::from_parts(vec![cin, dims[0], dims[1], dims[2]], data)
}

/// Adjoint of [`conv`] with respect to its weight.
pub fn weight_grad(x: &Tensor, grad_out: &Tensor, kernel: Kernel) -> Tensor {
    let cin = x.shape()[0];
    let cout = grad_out.shape()[0];
    let dims = x.dims3();
    assert_eq!(dims, grad_out.dims3(), "weight_grad spatial mismatch");
    let positions: usize = dims.iter().product();
    let rows = cin * kernel.iter().product::<usize>();
    let mut out = vec![0.0; cout * rows];
    if is_pointwise(kernel) {
        gemm(cout, positions, rows, (grad_out.data(), positions as isize, 1), (x.data(), 1, positions as isize), &mut out, false);
    } else {
        let cols = im2col(x.data(), cin, dims, kernel);
        gemm(cout, positions, rows, (grad_out.data(), positions as isize, 1), (&cols, 1, positions as isize), &mut out, false);
    }
    Tensor::from_parts(vec![cout, cin, kernel[0], kernel[1], kernel[2]], out)
}
