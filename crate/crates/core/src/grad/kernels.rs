//! Plain loop kernels shared by the forward and backward passes.

use super::tensor::Real;

/// Geometry of a 2-D sliding window over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Padding that yields `ceil(in / stride)` outputs per axis, split with the
    /// extra row/column on the bottom/right.
    pub fn ceil_halving(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h,
            out_w,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfolds one `[C, H, W]` image into `[C*k*k, out_h*out_w]` columns.
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let plane = self.out_h * self.out_w;
        for c in 0..self.channels {
            let img = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source(oy, ky, self.pad_top, self.in_h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kx, self.pad_left, self.in_w) {
                                        Some(ix) => img[iy * self.in_w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters columns back onto the image, accumulating.
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let k = self.kernel;
        let plane = self.out_h * self.out_w;
        for c in 0..self.channels {
            let img = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.pad_top, self.in_h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.pad_left, self.in_w) {
                                img[iy * self.in_w + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (+)= a[m,k] * b[k,n]` with `b` optionally transposed (`b` given as `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, transpose_b: bool, accumulate: bool) {
    let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, rsb, csb, beta, c, n as isize, 1);
}

/// `c (+)= a^T * b` where `a` is `[k,m]` and `b` is `[k,n]`.
pub(crate) fn matmul_tn_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (+)= a * b^T` where `a` is `[m,k]` and `b` is `[n,k]`.
pub(crate) fn matmul_nt_into<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    matmul_into(a, b, c, m, k, n, true, accumulate);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_halving_extents() {
        for n in 1..=64 {
            let w = Window::ceil_halving(1, n, n, 3, 2);
            assert_eq!(w.out_h, n.div_ceil(2), "in {n}");
            assert!(w.pad_top <= 1);
        }
        let same = Window::ceil_halving(1, 8, 8, 3, 1);
        assert_eq!((same.out_h, same.pad_top, same.pad_left), (8, 1, 1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let w = Window::ceil_halving(2, 5, 6, 3, 2);
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..w.col_rows() * w.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        w.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        w.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
