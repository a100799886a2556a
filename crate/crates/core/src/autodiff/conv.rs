//! im2col kernels for NHWC convolution.

use super::Scalar;

/// Padding mode for [`Tape::conv2d`](super::Tape::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the input.
    pub fn new(
        batch: usize,
        (in_h, in_w, in_c): (usize, usize, usize),
        kernel: usize,
        stride: usize,
        out_c: usize,
        padding: Padding,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if in_h < kernel || in_w < kernel {
                    return None;
                }
                ((in_h - kernel) / stride + 1, (in_w - kernel) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = in_h.div_ceil(stride);
                let ow = in_w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kernel).saturating_sub(in_h);
                let pw = ((ow - 1) * stride + kernel).saturating_sub(in_w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Some(Self { batch, in_h, in_w, in_c, kernel, stride, out_c, out_h, out_w, pad_top, pad_left })
    }

    /// Rows of the im2col matrix (one per output pixel).
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the im2col matrix (one per kernel tap and channel).
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let c = g.in_c;
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        let img = &x[b * g.in_h * g.in_w * c..(b + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let o = (ky * g.kernel + kx) * c;
                        match g.source(oy, ox, ky, kx) {
                            Some((y, xx)) => {
                                let s = (y * g.in_w + xx) * c;
                                dst[o..o + c].copy_from_slice(&img[s..s + c]);
                            }
                            None => dst[o..o + c].fill(T::zero()),
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let c = g.in_c;
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        let img = &mut dx[b * g.in_h * g.in_w * c..(b + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let o = (ky * g.kernel + kx) * c;
                            let d = (y * g.in_w + xx) * c;
                            for (t, &s) in img[d..d + c].iter_mut().zip(&src[o..o + c]) {
                                *t = *t + s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
