//! Inner loops for matmul and convolution.
//!
//! All loops accumulate in a fixed order so results are identical from run
//! to run regardless of thread count elsewhere in the crate.

use crate::scalar::Scalar;

/// c[m,n] += a[m,k] * b[k,n], row-major. Broadcast-axpy loop order: the
/// inner loop is contiguous over both `b` and `c`, which vectorizes well.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub fn transpose<S: Scalar>(src: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one [C,H,W] sample into a [C*kh*kw, oh*ow] matrix (zero padding).
pub fn im2col<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut cols = vec![S::zero(); c * kh * kw * oh * ow];
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-add the column matrix back onto an input-shaped gradient buffer.
pub fn col2im_acc<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [S],
) {
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0f32, 0.0, 0.0, 1.0];
        let b = vec![3.0f32, 4.0, 5.0, 6.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), b);
    }

    #[test]
    fn matmul_dot() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let c = matmul(&[1.0f32, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = transpose(&a, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(a, back);
    }

    #[test]
    fn im2col_col2im_adjoint_shapes() {
        let (c, h, w, k, s, p) = (2, 5, 5, 3, 2, 1);
        let oh = conv_out_dim(h, k, s, p).unwrap();
        let ow = conv_out_dim(w, k, s, p).unwrap();
        let input: Vec<f64> = (0..c * h * w).map(|v| v as f64 * 0.1).collect();
        let cols = im2col(&input, c, h, w, k, k, s, p, oh, ow);
        assert_eq!(cols.len(), c * k * k * oh * ow);
        let mut back = vec![0.0f64; c * h * w];
        col2im_acc(&cols, c, h, w, k, k, s, p, oh, ow, &mut back);
        // col2im(im2col(x)) multiplies each input cell by its patch count;
        // every cell must be a nonnegative integer multiple of the original.
        for (orig, b) in input.iter().zip(&back) {
            if *orig != 0.0 {
                let ratio = b / orig;
                assert!((ratio - ratio.round()).abs() < 1e-9, "ratio {ratio}");
            }
        }
    }
}
