//! Raw loops behind the tape ops: im2col/col2im and pooling windows.

use crate::error::{Error, Result};

use super::Real;

/// Geometry of a square-kernel convolution over an `N, C, H, W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(shape: &[usize], k: usize, stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = *shape else {
            return Err(Error::shape("im2col", format!("expected N,C,H,W input, got {shape:?}")));
        };
        if k == 0 || stride == 0 {
            return Err(Error::shape(
                "im2col",
                format!("kernel {k} / stride {stride} must be >= 1"),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "im2col",
                format!("kernel {k} does not fit {h}x{w} input with padding {pad}"),
            ));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_h * self.out_w
    }
}

impl ConvGeometry {
    /// Output positions `lo..hi` along an axis whose input coordinate for
    /// kernel offset `kk` lies inside `0..extent`.
    #[inline]
    fn valid_range(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        // pos = o·stride + kk − pad must satisfy 0 ≤ pos < extent
        let lo = self.pad.saturating_sub(kk).div_ceil(self.stride).min(out);
        let hi = if extent + self.pad > kk {
            ((extent + self.pad - kk - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Row `c·k·k + ki·k + kj`, column `n·H_out·W_out + oh·W_out + ow`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            let (oh_lo, oh_hi) = g.valid_range(ki, g.h, g.out_h);
            for kj in 0..g.k {
                let (ow_lo, ow_hi) = g.valid_range(kj, g.w, g.out_w);
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let base = n * plane + oh * g.out_w;
                        let dst = &mut dst_row[base + ow_lo..base + ow_hi];
                        let iw0 = ow_lo * g.stride + kj - g.pad;
                        let src_row = &src[ih * g.w..(ih + 1) * g.w];
                        if g.stride == 1 {
                            dst.copy_from_slice(&src_row[iw0..iw0 + dst.len()]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src_row[iw0 + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Real>(cols_data: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            let (oh_lo, oh_hi) = g.valid_range(ki, g.h, g.out_h);
            for kj in 0..g.k {
                let (ow_lo, ow_hi) = g.valid_range(kj, g.w, g.out_w);
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let base = n * plane + oh * g.out_w;
                        let src = &src_row[base + ow_lo..base + ow_hi];
                        let iw0 = ow_lo * g.stride + kj - g.pad;
                        let dst_row = &mut dst[ih * g.w..(ih + 1) * g.w];
                        for (i, &v) in src.iter().enumerate() {
                            let d = &mut dst_row[iw0 + i * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of an unpadded pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(shape: &[usize], k: usize, stride: usize) -> Result<Self> {
        let [n, c, h, w] = *shape else {
            return Err(Error::shape("pool", format!("expected N,C,H,W input, got {shape:?}")));
        };
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::shape(
                "pool",
                format!("window {k} / stride {stride} invalid for {h}x{w} input"),
            ));
        }
        Ok(PoolGeometry {
            n,
            c,
            h,
            w,
            k,
            stride,
            out_h: (h - k) / stride + 1,
            out_w: (w - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.out_h, self.out_w]
    }
}

/// Window maxima plus the flat input index each came from. Ties resolve to
/// the first index in row-major window order. With `track`, the third value
/// is the smallest gap between a window maximum and the next distinct value
/// below it (inputs sitting on a selection boundary); otherwise infinity.
pub fn maxpool<T: Real>(x: &[T], g: &PoolGeometry, track: bool) -> (Vec<T>, Vec<usize>, T) {
    let total = g.n * g.c * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    let mut margin = T::infinity();
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let corner = base + oh * g.stride * g.w + ow * g.stride;
                let mut best_idx = corner;
                let mut best = x[best_idx];
                for ki in 0..g.k {
                    let row = corner + ki * g.w;
                    for (kj, &v) in x[row..row + g.k].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + kj;
                        }
                    }
                }
                if track {
                    let mut runner_up = T::neg_infinity();
                    for ki in 0..g.k {
                        let row = corner + ki * g.w;
                        for &v in &x[row..row + g.k] {
                            if v < best && v > runner_up {
                                runner_up = v;
                            }
                        }
                    }
                    margin = margin.min(best - runner_up);
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, margin)
}

pub fn avgpool<T: Real>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::one() / T::c((g.k * g.k) as f64);
    let mut out = Vec::with_capacity(g.n * g.c * g.out_h * g.out_w);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut acc = T::zero();
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        acc = acc + x[base + (oh * g.stride + ki) * g.w + ow * g.stride + kj];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Real>(grad: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::one() / T::c((g.k * g.k) as f64);
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    let mut gi = 0;
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let share = grad[gi] * scale;
                gi += 1;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let idx = base + (oh * g.stride + ki) * g.w + ow * g.stride + kj;
                        out[idx] = out[idx] + share;
                    }
                }
            }
        }
    }
    out
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`. Trailing axes
/// left in place are copied as contiguous blocks.
pub fn permute<T: Copy>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut rank = out_shape.len();
    while rank > 0 && axes[rank - 1] == rank - 1 {
        rank -= 1;
    }
    let block: usize = shape[rank..].iter().product();
    let src_strides: Vec<usize> = axes[..rank].iter().map(|&a| in_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    if block == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total / block {
        out.extend_from_slice(&x[offset..offset + block]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_enumerates_patches() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let g = ConvGeometry::new(&[1, 1, 3, 3], 2, 1, 0).unwrap();
        let cols = im2col(&x, &g);
        // rows are kernel offsets, columns output positions; read column-wise
        let col = |j: usize| (0..4).map(|r| cols[r * 4 + j]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(col(1), vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(col(2), vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(col(3), vec![5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new(&[2, 3, 5, 4], 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    fn naive_im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * g.cols()];
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    for n in 0..g.n {
                        for oh in 0..g.out_h {
                            for ow in 0..g.out_w {
                                let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                                    let col = (n * g.out_h + oh) * g.out_w + ow;
                                    out[row * g.cols() + col] =
                                        x[((n * g.c + c) * g.h + ih as usize) * g.w + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for &(h, w, k, stride, pad) in &[
            (5, 4, 3, 2, 1),
            (7, 7, 3, 1, 1),
            (6, 5, 2, 2, 0),
            (4, 4, 4, 4, 0),
            (3, 3, 3, 3, 2),
        ] {
            let g = ConvGeometry::new(&[2, 3, h, w], k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| i as f64).collect();
            assert_eq!(im2col(&x, &g), naive_im2col(&x, &g), "{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<i32> = (0..24).collect();
        let (p, s) = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(p[1], 4); // out[0,0,1] = in[0,1,0]
        let (back, s2) = permute(&p, &s, &inverse_axes(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, x);
        let (p, s) = permute(&x, &[2, 3, 4], &[1, 0, 2]);
        assert_eq!(s, vec![3, 2, 4]);
        assert_eq!(&p[..8], &[0, 1, 2, 3, 12, 13, 14, 15]);
    }

    #[test]
    fn geometry_rejects_oversized_kernel() {
        assert!(ConvGeometry::new(&[1, 1, 2, 2], 3, 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], 3, 1, 1).is_ok());
        assert!(PoolGeometry::new(&[1, 1, 1, 1], 2, 2).is_err());
    }
}
