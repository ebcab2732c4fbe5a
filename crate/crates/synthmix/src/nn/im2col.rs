//! Patch-matrix lowering shared by [`Conv2d`](super::Conv2d) and
//! [`TConv2d`](super::TConv2d). Convolutions become one GEMM against the
//! lowered matrix, which is where essentially all training time goes.

use ndarray::{Array2, Array4, ArrayView4};

use super::Float;

/// Output spatial size of a convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Lower `(N, C, H, W)` into `(N*OH*OW, C*K*K)` patches.
///
/// Row `(n*OH + oy)*OW + ox`, column `(c*K + ky)*K + kx` holds
/// `x[n, c, oy*stride - pad + ky, ox*stride - pad + kx]`, zero outside.
pub fn im2col<F: Float>(
    x: &ArrayView4<'_, F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out(h, kernel, stride, pad);
    let ow = conv_out(w, kernel, stride, pad);
    let cols_w = c * kernel * kernel;
    let mut cols = Array2::<F>::zeros((n * oh * ow, cols_w));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let out = cols.as_slice_mut().unwrap();

    for ni in 0..n {
        let x_n = ni * c * h * w;
        let row_n = ni * oh * ow;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = (row_n + oy * ow + ox) * cols_w;
                for ci in 0..c {
                    let x_c = x_n + ci * h * w;
                    let col_c = ci * kernel * kernel;
                    for ky in 0..kernel {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_c + iy as usize * w;
                        let col_k = row + col_c + ky * kernel;
                        for kx in 0..kernel {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[col_k + kx] = xs[x_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`]: fold `(N*OH*OW, C*K*K)` patches
/// back into `(N, C, H, W)`.
pub fn col2im<F: Float>(
    cols: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out(h, kernel, stride, pad);
    let ow = conv_out(w, kernel, stride, pad);
    let cols_w = c * kernel * kernel;
    debug_assert_eq!(cols.dim(), (n * oh * ow, cols_w));
    let mut x = Array4::<F>::zeros((n, c, h, w));
    let cs = cols.as_slice().expect("cols is standard layout");
    let out = x.as_slice_mut().unwrap();

    for ni in 0..n {
        let x_n = ni * c * h * w;
        let row_n = ni * oh * ow;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = (row_n + oy * ow + ox) * cols_w;
                for ci in 0..c {
                    let x_c = x_n + ci * h * w;
                    let col_c = ci * kernel * kernel;
                    for ky in 0..kernel {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_c + iy as usize * w;
                        let col_k = row + col_c + ky * kernel;
                        for kx in 0..kernel {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[x_row + ix as usize] = out[x_row + ix as usize] + cs[col_k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn im2col_matches_direct_indexing() {
        let (n, c, h, w) = (2, 3, 5, 4);
        let x = Array4::from_shape_fn((n, c, h, w), |(a, b, y, z)| {
            (a * 1000 + b * 100 + y * 10 + z) as f64
        });
        for (k, s, p) in [(3, 1, 0), (3, 1, 1), (4, 2, 1), (2, 2, 0)] {
            if h + 2 * p < k || w + 2 * p < k {
                continue;
            }
            let oh = conv_out(h, k, s, p);
            let ow = conv_out(w, k, s, p);
            let cols = im2col(&x.view(), k, s, p);
            assert_eq!(cols.dim(), (n * oh * ow, c * k * k));
            for ni in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    let want = if iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < w as isize
                                    {
                                        x[[ni, ci, iy as usize, ix as usize]]
                                    } else {
                                        0.0
                                    };
                                    let got = cols[[
                                        (ni * oh + oy) * ow + ox,
                                        (ci * k + ky) * k + kx,
                                    ]];
                                    assert_eq!(got, want, "k{k} s{s} p{p}");
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), cols> == <x, col2im(cols)> for random x, cols: the
        // two lowerings must be exact transposes of each other.
        let (n, c, h, w) = (2, 2, 6, 5);
        let mut rng = crate::rng::stream_rng(5, "adjoint", 0);
        use rand::Rng as _;
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (2, 2, 0)] {
            let x = Array4::from_shape_fn((n, c, h, w), |_| rng.gen_range(-1.0..1.0f64));
            let lowered = im2col(&x.view(), k, s, p);
            let cols = lowered.map(|_| rng.gen_range(-1.0..1.0f64));
            let lhs = (&lowered * &cols).sum();
            let folded = col2im(&cols, n, c, h, w, k, s, p);
            let rhs = (&x * &folded).sum();
            assert!((lhs - rhs).abs() < 1e-10, "k{k} s{s} p{p}: {lhs} vs {rhs}");
        }
    }
}
