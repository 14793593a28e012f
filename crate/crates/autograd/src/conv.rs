//! Column-matrix lowering for 2-D convolutions over NCHW buffers.

use crate::Real;

/// Geometry of a 2-D convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Lower `batch` images into a `[patch_len, batch * positions]` matrix.
pub fn im2col<T: Real>(x: &[T], batch: usize, geom: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let positions = oh * ow;
    let ld = batch * positions;
    let mut cols = vec![T::zero(); geom.patch_len() * ld];
    let image_len = geom.channels * geom.height * geom.width;
    for b in 0..batch {
        let img = &x[b * image_len..(b + 1) * image_len];
        for c in 0..geom.channels {
            let plane = &img[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
            for ki in 0..geom.kernel_h {
                for kj in 0..geom.kernel_w {
                    let row = (c * geom.kernel_h + ki) * geom.kernel_w + kj;
                    let dst = &mut cols[row * ld + b * positions..row * ld + (b + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let src_row =
                            &plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                            if ix >= 0 && (ix as usize) < geom.width {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into images.
pub fn col2im<T: Real>(cols: &[T], batch: usize, geom: &ConvGeom, out: &mut [T]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let positions = oh * ow;
    let ld = batch * positions;
    let image_len = geom.channels * geom.height * geom.width;
    for b in 0..batch {
        let img = &mut out[b * image_len..(b + 1) * image_len];
        for c in 0..geom.channels {
            let plane = &mut img[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
            for ki in 0..geom.kernel_h {
                for kj in 0..geom.kernel_w {
                    let row = (c * geom.kernel_h + ki) * geom.kernel_w + kj;
                    let src = &cols[row * ld + b * positions..row * ld + (b + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        let dst_row =
                            &mut plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                            if ix >= 0 && (ix as usize) < geom.width {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, channels, positions]` -> `[channels, batch * positions]`.
pub fn to_channel_major<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    positions: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * positions..(b * channels + c + 1) * positions];
            out[c * batch * positions + b * positions..c * batch * positions + (b + 1) * positions]
                .copy_from_slice(src);
        }
    }
    out
}

/// `[channels, batch * positions]` -> `[batch, channels, positions]`.
pub fn from_channel_major<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    positions: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * positions..(b * channels + c + 1) * positions]
                .copy_from_slice(
                    &x[c * batch * positions + b * positions
                        ..c * batch * positions + (b + 1) * positions],
                );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let geom = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad: 1,
        };
        let batch = 2;
        let x: Vec<f64> = (0..batch * 2 * 5 * 4)
            .map(|i| ((i * 7 % 11) as f64) - 5.0)
            .collect();
        let cols = im2col(&x, batch, &geom);
        let y: Vec<f64> = (0..cols.len())
            .map(|i| ((i * 5 % 13) as f64) * 0.5 - 3.0)
            .collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, batch, &geom, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn channel_major_roundtrip() {
        let x: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        let cm = to_channel_major(&x, 2, 3, 4);
        assert_eq!(cm[4], 12.0); // channel 0, batch 1, position 0
        assert_eq!(from_channel_major(&cm, 2, 3, 4), x);
    }
}
