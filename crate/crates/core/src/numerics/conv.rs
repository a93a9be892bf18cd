//! im2col / col2im kernels shared by `conv1d` and `conv1d_transpose`.
//!
//! Both operate on a "long" signal of length `l_long` and a "short" grid of
//! `l_short` window positions: position `i` on the short grid reads the long
//! signal at `i * stride - pad + j` for `j < kernel`. A strided convolution
//! maps long to short; its transpose maps short to long.

use super::Scalar;

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    if stride == 0 || len == 0 {
        return None;
    }
    ((len - 1) * stride + kernel + out_pad).checked_sub(2 * pad)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub batch: usize,
    pub channels: usize,
    pub l_long: usize,
    pub l_short: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// Range of short-grid positions whose tap `j` lands inside the long signal, and the
    /// long index of the first of them.
    #[inline]
    fn valid(&self, j: usize) -> (usize, usize, usize) {
        let s = self.stride;
        let lo = if self.pad > j {
            (self.pad - j).div_ceil(s)
        } else {
            0
        };
        let reach = self.l_long + self.pad;
        let hi = if reach > j {
            ((reach - j - 1) / s + 1).min(self.l_short)
        } else {
            0
        };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + j - self.pad)
    }

    pub fn cols_len(&self) -> usize {
        self.channels * self.kernel * self.batch * self.l_short
    }
}

/// Gathers `x: (batch, channels, l_long)` into `(channels*kernel, batch*l_short)`.
pub(crate) fn im2col<T: Scalar>(x: &[T], w: &Window) -> Vec<T> {
    let ncols = w.batch * w.l_short;
    let mut cols = vec![T::zero(); w.cols_len()];
    for c in 0..w.channels {
        for j in 0..w.kernel {
            let (lo, hi, p0) = w.valid(j);
            let row = &mut cols[(c * w.kernel + j) * ncols..(c * w.kernel + j + 1) * ncols];
            for b in 0..w.batch {
                let src = &x[(b * w.channels + c) * w.l_long..(b * w.channels + c + 1) * w.l_long];
                let dst = &mut row[b * w.l_short + lo..b * w.l_short + hi];
                if w.stride == 1 {
                    dst.copy_from_slice(&src[p0..p0 + (hi - lo)]);
                } else {
                    for (d, &v) in dst.iter_mut().zip(src[p0..].iter().step_by(w.stride)) {
                        *d = v;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto `(batch, channels, l_long)`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], w: &Window, out: &mut [T]) {
    let ncols = w.batch * w.l_short;
    for c in 0..w.channels {
        for j in 0..w.kernel {
            let (lo, hi, p0) = w.valid(j);
            let row = &cols[(c * w.kernel + j) * ncols..(c * w.kernel + j + 1) * ncols];
            for b in 0..w.batch {
                let dst =
                    &mut out[(b * w.channels + c) * w.l_long..(b * w.channels + c + 1) * w.l_long];
                let src = &row[b * w.l_short + lo..b * w.l_short + hi];
                for (d, &v) in dst[p0..].iter_mut().step_by(w.stride).zip(src) {
                    *d += v;
                }
            }
        }
    }
}

/// `(batch, ch, len)` → `(ch, batch*len)`.
pub(crate) fn to_channel_major<T: Scalar>(x: &[T], batch: usize, ch: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[c * batch * len + b * len..c * batch * len + (b + 1) * len]
                .copy_from_slice(&x[(b * ch + c) * len..(b * ch + c + 1) * len]);
        }
    }
    out
}

/// `(ch, batch*len)` → `(batch, ch, len)`.
pub(crate) fn from_channel_major<T: Scalar>(
    x: &[T],
    batch: usize,
    ch: usize,
    len: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[(b * ch + c) * len..(b * ch + c + 1) * len]
                .copy_from_slice(&x[c * batch * len + b * len..c * batch * len + (b + 1) * len]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(9, 9, 1, 4), Some(9));
        assert_eq!(conv_out_len(16, 9, 2, 4), Some(8));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_out_len(8, 9, 2, 4, 1), Some(16));
        assert_eq!(conv_transpose_out_len(32, 3, 2, 1, 1), Some(64));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let w = Window {
            batch: 2,
            channels: 3,
            l_long: 7,
            l_short: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 7).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..w.cols_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let cx = im2col(&x, &w);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xy = vec![0.0; x.len()];
        col2im(&y, &w, &mut xy);
        let rhs: f64 = x.iter().zip(&xy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
