//! Dense kernels behind the convolution and linear nodes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `c = alpha * a·b + beta * c` over strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} does not fit input {h}x{w}"),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    #[inline]
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    #[inline]
    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    /// A 1×1 stride-1 unpadded convolution reads its input directly as the column matrix.
    #[inline]
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kj − pad` is inside the image.
#[inline]
fn valid_columns(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.w_out);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one `[c_in, h, w]` image into `[c_in·k·k, h_out·w_out]` columns
/// whose rows start `ld` apart, so several images can share one matrix.
/// Destination rows must start zeroed.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize) {
    let l = g.out_plane();
    for c in 0..g.c_in {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ld..row * ld + l];
                let (lo, hi) = valid_columns(g, kj);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.w_out + lo..oy * g.w_out + hi];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (v, s) in out.iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize) {
    let l = g.out_plane();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ld..row * ld + l];
                let (lo, hi) = valid_columns(g, kj);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let inp = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    let start = lo * g.stride + kj - g.pad;
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(inp) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `[n, c, l]` to `[c, n·l]`.
pub(crate) fn batch_to_channel_major(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * l + i * l..ch * n * l + (i + 1) * l].copy_from_slice(&x[(i * c + ch) * l..(i * c + ch + 1) * l]);
        }
    }
    out
}

/// `[c, n·l]` to `[n, c, l]`.
pub(crate) fn channel_major_to_batch(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * l..(i * c + ch + 1) * l].copy_from_slice(&x[ch * n * l + i * l..ch * n * l + (i + 1) * l]);
        }
    }
    out
}

/// Columns of a whole `[n, c_in, h, w]` batch as one `[patch, n·l]` matrix.
pub(crate) fn im2col_batch(x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let l = g.out_plane();
    if g.is_pointwise() {
        return batch_to_channel_major(x, n, g.c_in, l);
    }
    let in_len = g.c_in * g.in_plane();
    let mut cols = vec![0.0; g.patch() * n * l];
    for i in 0..n {
        im2col(&x[i * in_len..(i + 1) * in_len], g, &mut cols[i * l..], n * l);
    }
    cols
}

/// Adjoint of [`im2col_batch`].
pub(crate) fn col2im_batch(cols: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let l = g.out_plane();
    if g.is_pointwise() {
        return channel_major_to_batch(cols, n, g.c_in, l);
    }
    let in_len = g.c_in * g.in_plane();
    let mut dx = vec![0.0; n * in_len];
    for i in 0..n {
        col2im(&cols[i * l..], g, &mut dx[i * in_len..(i + 1) * in_len], n * l);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    /// Direct seven-loop convolution.
    fn conv_direct(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.out_plane()];
        for o in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((o * g.c_in + c) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    out[(o * g.h_out + oy) * g.w_out + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (1, 2, 0)] {
            let g = ConvGeom::new((3, 7, 6), 4, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * g.patch()).map(|i| ((i * 13 % 7) as f64) * 0.1).collect();
            let mut cols = vec![0.0; g.patch() * g.out_plane()];
            im2col(&x, &g, &mut cols, g.out_plane());
            let mut out = vec![0.0; g.c_out * g.out_plane()];
            gemm(
                g.c_out,
                g.patch(),
                g.out_plane(),
                &w,
                (g.patch(), 1),
                &cols,
                (g.out_plane(), 1),
                0.0,
                &mut out,
                (g.out_plane(), 1),
            );
            let reference = conv_direct(&x, &w, &g);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>, per image and batched
        for &(k, stride, pad) in &[(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            let g = ConvGeom::new((2, 5, 4), 1, k, stride, pad).unwrap();
            let n = 3;
            let x: Vec<f64> = (0..n * 2 * 5 * 4).map(|i| (i as f64).sin()).collect();
            let y: Vec<f64> = (0..g.patch() * n * g.out_plane())
                .map(|i| (i as f64 * 0.7).cos())
                .collect();
            let cols = im2col_batch(&x, n, &g);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let back = col2im_batch(&y, n, &g);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn batched_columns_stack_per_image_columns() {
        let g = ConvGeom::new((2, 5, 4), 1, 3, 2, 1).unwrap();
        let (n, l) = (2, g.out_plane());
        let x: Vec<f64> = (0..n * 40).map(|i| i as f64).collect();
        let all = im2col_batch(&x, n, &g);
        for i in 0..n {
            let mut one = vec![0.0; g.patch() * l];
            im2col(&x[i * 40..(i + 1) * 40], &g, &mut one, l);
            for r in 0..g.patch() {
                assert_eq!(&all[r * n * l + i * l..r * n * l + (i + 1) * l], &one[r * l..(r + 1) * l]);
            }
        }
        let t = batch_to_channel_major(&x, n, 4, 10);
        assert_eq!(channel_major_to_batch(&t, n, 4, 10), x);
    }
}
