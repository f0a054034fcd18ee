//! Spatial convolution kernels: a dense direct path and a perforated
//! gather/compute/scatter path restricted to mask-active pixels.
//!
//! Both paths accumulate products in the same patch order (channel fastest,
//! then kernel row, then kernel column), so a perforated convolution under an
//! all-ones mask is bitwise equal to the dense result.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Static description of a 2-D convolution: kernel extents, dilation, stride.
///
/// Padding is always zero "same" padding, so spatial dims are preserved.
/// Stride must be 1 for every supported use. Dilation 0 is reserved for the
/// copy branch of the multi-pool module and is rejected here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, in_channels: usize, kh: usize, kw: usize, dilation: usize) -> Self {
        ConvSpec {
            out_channels,
            in_channels,
            kh,
            kw,
            dilation,
            stride: 1,
        }
    }

    /// Validate the spec against concrete kernel and input tensors.
    pub fn validate(&self, input: &Tensor, kernel: &Tensor) -> Result<()> {
        if self.stride != 1 {
            return Err(Error::InvalidArg(format!(
                "conv stride must be 1, got {}",
                self.stride
            )));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidArg(
                "conv dilation 0 is only legal as the multi-pool copy branch".into(),
            ));
        }
        if input.rank() != 3 {
            return Err(Error::DimMismatch(format!(
                "conv input must be CxHxW, got {:?}",
                input.dims()
            )));
        }
        let expect_kernel = [self.out_channels, self.in_channels, self.kh, self.kw];
        if kernel.dims() != expect_kernel {
            return Err(Error::DimMismatch(format!(
                "kernel dims {:?} do not match spec {:?}",
                kernel.dims(),
                expect_kernel
            )));
        }
        if input.dims()[0] != self.in_channels {
            return Err(Error::DimMismatch(format!(
                "input has {} channels, spec expects {}",
                input.dims()[0],
                self.in_channels
            )));
        }
        let (h, w) = (input.dims()[1], input.dims()[2]);
        let span_h = self.dilation * (self.kh - 1) + 1;
        let span_w = self.dilation * (self.kw - 1) + 1;
        if span_h > 2 * h || span_w > 2 * w {
            return Err(Error::InvalidArg(format!(
                "dilated receptive field {span_h}x{span_w} exceeds twice the image extent {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Patch length for the im2col layout: channel fastest, then row, then column.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }
}

#[inline]
fn input_at(input: &Tensor, c: usize, y: isize, x: isize) -> f64 {
    let h = input.dims()[1] as isize;
    let w = input.dims()[2] as isize;
    if y < 0 || y >= h || x < 0 || x >= w {
        0.0
    } else {
        input.get3(c, y as usize, x as usize)
    }
}

/// Gather the im2col patch for output position (y, x).
///
/// Index p = c + C*(i + kh*j): channel varies fastest, then kernel row i,
/// then kernel column j, matching the accumulation order of the dense path.
fn gather_patch(input: &Tensor, spec: &ConvSpec, y: usize, x: usize, out: &mut [f64]) {
    let c_in = spec.in_channels;
    let d = spec.dilation as isize;
    let oy = (spec.kh / 2) as isize;
    let ox = (spec.kw / 2) as isize;
    let mut p = 0;
    for j in 0..spec.kw {
        let sx = x as isize + d * (j as isize - ox);
        for i in 0..spec.kh {
            let sy = y as isize + d * (i as isize - oy);
            for c in 0..c_in {
                out[p] = input_at(input, c, sy, sx);
                p += 1;
            }
        }
    }
}

/// Flatten the kernel into rows matching the patch layout.
fn kernel_matrix(kernel: &Tensor, spec: &ConvSpec) -> Vec<f64> {
    let plen = spec.patch_len();
    let mut kmat = vec![0.0; spec.out_channels * plen];
    for co in 0..spec.out_channels {
        let mut p = 0;
        for j in 0..spec.kw {
            for i in 0..spec.kh {
                for c in 0..spec.in_channels {
                    let kidx = ((co * spec.in_channels + c) * spec.kh + i) * spec.kw + j;
                    kmat[co * plen + p] = kernel.data()[kidx];
                    p += 1;
                }
            }
        }
    }
    kmat
}

/// Dense convolution with zero "same" padding.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate(input, kernel)?;
    let (h, w) = (input.dims()[1], input.dims()[2]);
    let kmat = kernel_matrix(kernel, spec);
    let plen = spec.patch_len();
    let mut patch = vec![0.0; plen];
    let mut out = Tensor::zeros(&[spec.out_channels, h, w]);
    for y in 0..h {
        for x in 0..w {
            gather_patch(input, spec, y, x, &mut patch);
            for co in 0..spec.out_channels {
                let row = &kmat[co * plen..(co + 1) * plen];
                let mut acc = 0.0;
                for p in 0..plen {
                    acc += row[p] * patch[p];
                }
                out.set3(co, y, x, acc);
            }
        }
    }
    Ok(out)
}

/// Gradients of a dense convolution w.r.t. input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (h, w) = (input.dims()[1], input.dims()[2]);
    let mut d_input = Tensor::zeros(input.dims());
    let mut d_kernel = Tensor::zeros(kernel.dims());
    let d = spec.dilation as isize;
    let oy = (spec.kh / 2) as isize;
    let ox = (spec.kw / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            for co in 0..spec.out_channels {
                let g = grad_out.get3(co, y, x);
                if g == 0.0 {
                    continue;
                }
                for j in 0..spec.kw {
                    let sx = x as isize + d * (j as isize - ox);
                    for i in 0..spec.kh {
                        let sy = y as isize + d * (i as isize - oy);
                        let in_bounds =
                            sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                        for c in 0..spec.in_channels {
                            let kidx =
                                ((co * spec.in_channels + c) * spec.kh + i) * spec.kw + j;
                            if in_bounds {
                                let (sy, sx) = (sy as usize, sx as usize);
                                d_kernel.data_mut()[kidx] += g * input.get3(c, sy, sx);
                                let ii = d_input.idx3(c, sy, sx);
                                d_input.data_mut()[ii] += g * kernel.data()[kidx];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernel)
}

/// Coordinates of mask-active pixels in row-major scan order.
pub fn active_pixels(mask: &Tensor) -> Result<Vec<(usize, usize)>> {
    if mask.rank() != 2 {
        return Err(Error::DimMismatch(format!(
            "mask must be HxW, got {:?}",
            mask.dims()
        )));
    }
    let mut active = Vec::new();
    for y in 0..mask.dims()[0] {
        for x in 0..mask.dims()[1] {
            let v = mask.get2(y, x);
            if v == 1.0 {
                active.push((y, x));
            } else if v != 0.0 {
                return Err(Error::NonBinaryMask(format!(
                    "mask value {v} at ({y}, {x})"
                )));
            }
        }
    }
    Ok(active)
}

/// Perforated convolution: gather active coordinates, form the patch matrix
/// over active pixels only, multiply with the flattened kernel, and scatter
/// results back. Inactive output positions are exactly zero.
pub fn conv2d_perforated_forward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    mask: &Tensor,
) -> Result<Tensor> {
    spec.validate(input, kernel)?;
    let (h, w) = (input.dims()[1], input.dims()[2]);
    if mask.dims() != [h, w] {
        return Err(Error::DimMismatch(format!(
            "mask dims {:?} do not match input spatial dims {h}x{w}",
            mask.dims()
        )));
    }
    let active = active_pixels(mask)?;
    let plen = spec.patch_len();
    let kmat = kernel_matrix(kernel, spec);

    // Gather: one patch row per active pixel.
    let mut patches = vec![0.0; active.len() * plen];
    for (a, &(y, x)) in active.iter().enumerate() {
        gather_patch(input, spec, y, x, &mut patches[a * plen..(a + 1) * plen]);
    }

    // Compute and scatter.
    let mut out = Tensor::zeros(&[spec.out_channels, h, w]);
    for (a, &(y, x)) in active.iter().enumerate() {
        let patch = &patches[a * plen..(a + 1) * plen];
        for co in 0..spec.out_channels {
            let row = &kmat[co * plen..(co + 1) * plen];
            let mut acc = 0.0;
            for p in 0..plen {
                acc += row[p] * patch[p];
            }
            out.set3(co, y, x, acc);
        }
    }
    Ok(out)
}

/// Gradients of the perforated convolution. Only active pixels contribute;
/// the mask itself receives no gradient through this path.
pub fn conv2d_perforated_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    mask: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let active = active_pixels(mask)?;
    let mut d_input = Tensor::zeros(input.dims());
    let mut d_kernel = Tensor::zeros(kernel.dims());
    let (h, w) = (input.dims()[1], input.dims()[2]);
    let d = spec.dilation as isize;
    let oy = (spec.kh / 2) as isize;
    let ox = (spec.kw / 2) as isize;
    for &(y, x) in &active {
        for co in 0..spec.out_channels {
            let g = grad_out.get3(co, y, x);
            if g == 0.0 {
                continue;
            }
            for j in 0..spec.kw {
                let sx = x as isize + d * (j as isize - ox);
                for i in 0..spec.kh {
                    let sy = y as isize + d * (i as isize - oy);
                    let in_bounds = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    for c in 0..spec.in_channels {
                        let kidx = ((co * spec.in_channels + c) * spec.kh + i) * spec.kw + j;
                        if in_bounds {
                            let (sy, sx) = (sy as usize, sx as usize);
                            d_kernel.data_mut()[kidx] += g * input.get3(c, sy, sx);
                            let ii = d_input.idx3(c, sy, sx);
                            d_input.data_mut()[ii] += g * kernel.data()[kidx];
                        }
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernel))
}
