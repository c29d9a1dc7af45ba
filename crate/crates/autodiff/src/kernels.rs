//! Raw numeric kernels shared by the differentiable ops.

use crate::error::{Error, Result};

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically
/// `[m, k]` and `b` logically `[k, n]`. A transposed flag means the operand
/// is stored as its transpose in row-major order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("need rank-4 input and weight, got {input:?} and {weight:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} input with padding {padding}"),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, padding, ho, wo })
    }

    /// Rows of the unfolded input: one per (input channel, kernel tap).
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the unfolded input: one per (batch item, output pixel).
    pub fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Unfold `input` into a `[patch_len, n·ho·wo]` matrix.
    pub fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let (l, hw_out) = (self.cols(), self.ho * self.wo);
        let mut cols = vec![0.0f32; self.patch_len() * l];
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst_row = &mut cols[row * l..(row + 1) * l];
                    for n in 0..self.n {
                        let src = &input[(n * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        let dst = &mut dst_row[n * hw_out..(n + 1) * hw_out];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * self.w..][..self.w];
                            let dst_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Fold a `[patch_len, n·ho·wo]` matrix back onto the input, summing overlaps.
    pub fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let (l, hw_out) = (self.cols(), self.ho * self.wo);
        let mut out = vec![0.0f32; self.n * self.cin * self.h * self.w];
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src_row = &cols[row * l..(row + 1) * l];
                    for n in 0..self.n {
                        let dst = &mut out[(n * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        let src = &src_row[n * hw_out..(n + 1) * hw_out];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * self.w..][..self.w];
                            for (ox, s) in src[oy * self.wo..(oy + 1) * self.wo].iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index it reads in a tensor of
/// `in_shape` broadcast up to `out_shape`.
pub(crate) fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; numel];
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for slot in idx.iter_mut() {
        *slot = cur;
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += in_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a·bᵀ, accumulated on top of the previous result
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 1], &[4, 3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
        assert_eq!(broadcast_index(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_index(&[2, 2], &[2, 2]), vec![0, 1, 2, 3]);
    }
}
