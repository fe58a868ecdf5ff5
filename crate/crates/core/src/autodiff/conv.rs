//! Spatial kernels: im2col/col2im geometry, average pooling and bilinear resizing.
//!
//! All images are `[channels, height, width]` row-major slices.

use crate::error::{GmnError, Result};
use crate::real::Real;

/// Sliding-window geometry over an input image.
///
/// `out_h × out_w` window positions, each covering `kernel_h × kernel_w` pixels
/// of every channel. Padding is implicit zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output side of a strided window: `floor((side + pads - kernel) / stride) + 1`.
pub fn conv_out_side(side: usize, kernel: usize, stride: usize, pad_total: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || side + pad_total < kernel {
        return None;
    }
    Some((side + pad_total - kernel) / stride + 1)
}

/// Output side of a transposed convolution without padding: `(side - 1) * stride + kernel`.
pub fn conv_transpose_out_side(side: usize, kernel: usize, stride: usize) -> usize {
    (side - 1) * stride + kernel
}

/// Split `kernel - 1` padding so the size is preserved at stride 1; the extra
/// pixel of an even kernel goes after the image.
pub fn same_padding(kernel: usize) -> (usize, usize) {
    let total = kernel - 1;
    (total / 2, total - total / 2)
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: (usize, usize, usize, usize),
    ) -> Result<Self> {
        let (pad_top, pad_left, pad_bottom, pad_right) = pad;
        let out_h = conv_out_side(height, kernel_h, stride, pad_top + pad_bottom);
        let out_w = conv_out_side(width, kernel_w, stride, pad_left + pad_right);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if channels > 0 => Ok(ConvGeometry {
                channels,
                height,
                width,
                kernel_h,
                kernel_w,
                stride,
                pad_top,
                pad_left,
                pad_bottom,
                pad_right,
                out_h,
                out_w,
            }),
            _ => Err(GmnError::Shape(format!(
                "invalid window: {channels}×{height}×{width} input, kernel {kernel_h}×{kernel_w}, stride {stride}"
            ))),
        }
    }

    pub fn unpadded(channels: usize, height: usize, width: usize, kernel_h: usize, kernel_w: usize, stride: usize) -> Result<Self> {
        Self::new(channels, height, width, kernel_h, kernel_w, stride, (0, 0, 0, 0))
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, out_y: usize, out_x: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (out_y * self.stride + ky) as isize - self.pad_top as isize;
        let x = (out_x * self.stride + kx) as isize - self.pad_left as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Gather windows into `[channels * kh * kw, out_h * out_w]` columns.
pub fn im2col<F: Real>(g: &ConvGeometry, image: &[F], cols: &mut [F]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => F::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image (accumulates).
pub fn col2im<F: Real>(g: &ConvGeometry, cols: &[F], image: &mut [F]) {
    debug_assert_eq!(image.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel mean over unpadded windows.
pub fn avg_pool<F: Real>(g: &ConvGeometry, image: &[F], out: &mut [F]) {
    let scale = F::one() / F::from_f64((g.kernel_h * g.kernel_w) as f64);
    let (h, w) = (g.height, g.width);
    for c in 0..g.channels {
        let plane = &image[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * g.out_h * g.out_w..(c + 1) * g.out_h * g.out_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = F::zero();
                for ky in 0..g.kernel_h {
                    let row = &plane[(oy * g.stride + ky) * w + ox * g.stride..];
                    for v in &row[..g.kernel_w] {
                        acc += *v;
                    }
                }
                dst[oy * g.out_w + ox] = acc * scale;
            }
        }
    }
}

/// Adjoint of [`avg_pool`] (accumulates into `grad_in`).
pub fn avg_pool_backward<F: Real>(g: &ConvGeometry, grad_out: &[F], grad_in: &mut [F]) {
    let scale = F::one() / F::from_f64((g.kernel_h * g.kernel_w) as f64);
    let (h, w) = (g.height, g.width);
    for c in 0..g.channels {
        let plane = &mut grad_in[c * h * w..(c + 1) * h * w];
        let src = &grad_out[c * g.out_h * g.out_w..(c + 1) * g.out_h * g.out_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let v = src[oy * g.out_w + ox] * scale;
                for ky in 0..g.kernel_h {
                    let row = &mut plane[(oy * g.stride + ky) * w + ox * g.stride..];
                    for r in &mut row[..g.kernel_w] {
                        *r += v;
                    }
                }
            }
        }
    }
}

/// Linear interpolation taps for one axis: output index → (low, high, weight of high).
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    /// Half-pixel-centre sampling with edge clamping.
    pub fn new(in_size: usize, out_size: usize) -> Self {
        let ratio = in_size as f64 / out_size as f64;
        let taps = (0..out_size)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_size - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_size - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        AxisTaps { taps }
    }
}

/// Bilinear resize plan for `[channels, in_h, in_w] -> [channels, out_h, out_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearPlan {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl BilinearPlan {
    pub fn new(channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        BilinearPlan {
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_h * self.out_w
    }

    pub fn forward<F: Real>(&self, input: &[F], out: &mut [F]) {
        for c in 0..self.channels {
            let src = &input[c * self.in_h * self.in_w..];
            let dst = &mut out[c * self.out_h * self.out_w..];
            for (oy, &(y0, y1, wy)) in self.rows.taps.iter().enumerate() {
                let wy = F::from_f64(wy);
                for (ox, &(x0, x1, wx)) in self.cols.taps.iter().enumerate() {
                    let wx = F::from_f64(wx);
                    let top = src[y0 * self.in_w + x0] * (F::one() - wx) + src[y0 * self.in_w + x1] * wx;
                    let bottom = src[y1 * self.in_w + x0] * (F::one() - wx) + src[y1 * self.in_w + x1] * wx;
                    dst[oy * self.out_w + ox] = top * (F::one() - wy) + bottom * wy;
                }
            }
        }
    }

    /// Adjoint of [`BilinearPlan::forward`] (accumulates).
    pub fn backward<F: Real>(&self, grad_out: &[F], grad_in: &mut [F]) {
        for c in 0..self.channels {
            let src = &grad_out[c * self.out_h * self.out_w..];
            let dst = &mut grad_in[c * self.in_h * self.in_w..];
            for (oy, &(y0, y1, wy)) in self.rows.taps.iter().enumerate() {
                let wy = F::from_f64(wy);
                for (ox, &(x0, x1, wx)) in self.cols.taps.iter().enumerate() {
                    let wx = F::from_f64(wx);
                    let g = src[oy * self.out_w + ox];
                    let gt = g * (F::one() - wy);
                    let gb = g * wy;
                    dst[y0 * self.in_w + x0] += gt * (F::one() - wx);
                    dst[y0 * self.in_w + x1] += gt * wx;
                    dst[y1 * self.in_w + x0] += gb * (F::one() - wx);
                    dst[y1 * self.in_w + x1] += gb * wx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_side_arithmetic() {
        assert_eq!(conv_out_side(28, 4, 2, 0), Some(13));
        assert_eq!(conv_out_side(13, 3, 2, 0), Some(6));
        assert_eq!(conv_out_side(6, 2, 2, 0), Some(3));
        assert_eq!(conv_out_side(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_side(3, 2, 2), 6);
        assert_eq!(conv_transpose_out_side(6, 3, 2), 13);
        assert_eq!(conv_transpose_out_side(13, 4, 2), 28);
        assert_eq!(same_padding(3), (1, 1));
        assert_eq!(same_padding(2), (0, 1));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 5, 6, 3, 2, 2, (1, 0, 1, 1)).unwrap();
        let x: Vec<f64> = (0..g.image_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let plan = BilinearPlan::new(2, 3, 3, 6, 7);
        let x: Vec<f64> = (0..plan.in_len()).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..plan.out_len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut fx = vec![0.0; plan.out_len()];
        plan.forward(&x, &mut fx);
        let mut by = vec![0.0; plan.in_len()];
        plan.backward(&y, &mut by);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&by).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let plan = BilinearPlan::new(1, 6, 6, 13, 13);
        let x = vec![2.5f64; plan.in_len()];
        let mut y = vec![0.0; plan.out_len()];
        plan.forward(&x, &mut y);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn avg_pool_means_windows() {
        let g = ConvGeometry::unpadded(1, 4, 4, 2, 2, 2).unwrap();
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut y = vec![0.0; 4];
        avg_pool(&g, &x, &mut y);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
