use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Sliding-window geometry between a "large" plane stack and the patch grid
/// a kernel produces over it. For an ordinary convolution the large side is
/// the input; for a transposed convolution it is the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over a `channels × height × width` input.
    pub fn forward(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::shape("conv2d", "stride must be positive"));
        }
        let span_h = height + 2 * pad;
        let span_w = width + 2 * pad;
        if span_h < kernel_h {
            return Err(TensorError::shape(
                "conv2d",
                format!("axis 2 (height) padded to {span_h} is smaller than kernel {kernel_h}"),
            ));
        }
        if span_w < kernel_w {
            return Err(TensorError::shape(
                "conv2d",
                format!("axis 3 (width) padded to {span_w} is smaller than kernel {kernel_w}"),
            ));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (span_h - kernel_h) / stride + 1,
            out_w: (span_w - kernel_w) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution whose *input* grid is `in_h × in_w`;
    /// the large side becomes the output.
    pub fn transposed(
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Self> {
        if stride == 0 || output_pad >= stride {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("output padding {output_pad} must be below stride {stride}"),
            ));
        }
        let full_h = (in_h.max(1) - 1) * stride + kernel + output_pad;
        let full_w = (in_w.max(1) - 1) * stride + kernel + output_pad;
        if full_h < 2 * pad + 1 || full_w < 2 * pad + 1 || in_h == 0 || in_w == 0 {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("padding {pad} consumes the whole {in_h}×{in_w} output"),
            ));
        }
        let geom = ConvGeom {
            channels: out_channels,
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
            out_h: in_h,
            out_w: in_w,
        };
        debug_assert_eq!((geom.height + 2 * pad - kernel) / stride + 1, in_h);
        Ok(geom)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn grid_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn plane_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Unfolds `img` (channels × height × width) into `cols`
/// (patch_len × grid_len). Out-of-range taps read as zero.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let grid = g.grid_len();
    debug_assert!(img.len() >= g.plane_len() && cols.len() >= g.patch_len() * grid);
    if g.is_pointwise() {
        cols[..g.plane_len()].copy_from_slice(&img[..g.plane_len()]);
        return;
    }
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * grid..(row + 1) * grid];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ky, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kx, g.width) {
                                    Some(ix) => src[ix],
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

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `img`.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let grid = g.grid_len();
    if g.is_pointwise() {
        for (d, &s) in img[..g.plane_len()].iter_mut().zip(cols) {
            *d += s;
        }
        return;
    }
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * grid..(row + 1) * grid];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            dst[ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel convolution of one batch item: `out[c] = w[c] ⋆ img[c]`.
pub(crate) fn depthwise_forward<T: Scalar>(g: &ConvGeom, img: &[T], w: &[T], out: &mut [T]) {
    let taps = g.kernel_h * g.kernel_w;
    let grid = g.grid_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        let kern = &w[c * taps..(c + 1) * taps];
        let dst = &mut out[c * grid..(c + 1) * grid];
        dst.fill(T::zero());
        for ky in 0..g.kernel_h {
            for oy in 0..g.out_h {
                let Some(iy) = g.source(oy, ky, g.height) else {
                    continue;
                };
                let row = &plane[iy * g.width..(iy + 1) * g.width];
                for kx in 0..g.kernel_w {
                    let wt = kern[ky * g.kernel_w + kx];
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            dst[oy * g.out_w + ox] += wt * row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`] for one batch item; either output
/// buffer may be skipped.
pub(crate) fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    img: &[T],
    w: &[T],
    grad_out: &[T],
    mut grad_img: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
) {
    let taps = g.kernel_h * g.kernel_w;
    let grid = g.grid_len();
    let hw = g.height * g.width;
    for c in 0..g.channels {
        let plane = &img[c * hw..(c + 1) * hw];
        let kern = &w[c * taps..(c + 1) * taps];
        let gy = &grad_out[c * grid..(c + 1) * grid];
        for ky in 0..g.kernel_h {
            for oy in 0..g.out_h {
                let Some(iy) = g.source(oy, ky, g.height) else {
                    continue;
                };
                for kx in 0..g.kernel_w {
                    let tap = ky * g.kernel_w + kx;
                    let mut acc = T::zero();
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            let go = gy[oy * g.out_w + ox];
                            acc += go * plane[iy * g.width + ix];
                            if let Some(gi) = grad_img.as_deref_mut() {
                                gi[c * hw + iy * g.width + ix] += go * kern[tap];
                            }
                        }
                    }
                    if let Some(gw) = grad_w.as_deref_mut() {
                        gw[c * taps + tap] += acc;
                    }
                }
            }
        }
    }
}
