//! Direct 2-D convolution kernels.
//!
//! `conv2d` is a cross-correlation: `out[o][y][x] = sum_i sum_ky sum_kx
//! w[o][i][ky][kx] * in[i][y + ky - pad][x + kx - pad]`. Out-of-range reads are
//! zero. `conv2d_transposed` is its exact adjoint under the same padding.
//! Sums are accumulated in `f64`.

use serde::{Deserialize, Serialize};

use super::{Shape, Tensor, Wide};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    out_features: usize,
    in_features: usize,
    kernel_h: usize,
    kernel_w: usize,
    weights: Vec<f32>,
}

impl ConvKernel {
    pub fn new(
        out_features: usize,
        in_features: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f32>,
    ) -> Result<Self> {
        if out_features == 0 || in_features == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::dim("kernel dimensions must be >= 1"));
        }
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(Error::dim(format!(
                "kernel size must be odd, got {kernel_h}x{kernel_w}"
            )));
        }
        let n = out_features * in_features * kernel_h * kernel_w;
        if weights.len() != n {
            return Err(Error::dim(format!(
                "kernel {out_features}x{in_features}x{kernel_h}x{kernel_w} needs {n} weights, got {}",
                weights.len()
            )));
        }
        Ok(ConvKernel {
            out_features,
            in_features,
            kernel_h,
            kernel_w,
            weights,
        })
    }

    pub fn zeros(out_features: usize, in_features: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        let n = out_features * in_features * kernel_h * kernel_w;
        Self::new(out_features, in_features, kernel_h, kernel_w, vec![0.0; n])
    }

    /// 1x1 kernel with the given gain on the diagonal.
    pub fn identity(features: usize, gain: f32) -> Self {
        let mut w = vec![0.0; features * features];
        for f in 0..features {
            w[f * features + f] = gain;
        }
        ConvKernel {
            out_features: features,
            in_features: features,
            kernel_h: 1,
            kernel_w: 1,
            weights: w,
        }
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_features + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[self.index(o, i, ky, kx)]
    }

    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f32) {
        let idx = self.index(o, i, ky, kx);
        self.weights[idx] = v;
    }

    fn pads(&self, padding: Padding) -> (usize, usize) {
        match padding {
            Padding::Same => ((self.kernel_h - 1) / 2, (self.kernel_w - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }

    /// Spatial output size for an input of `h x w`.
    pub fn output_hw(&self, h: usize, w: usize, padding: Padding) -> Result<(usize, usize)> {
        match padding {
            Padding::Same => Ok((h, w)),
            Padding::Valid => {
                if h < self.kernel_h || w < self.kernel_w {
                    return Err(Error::dim(format!(
                        "valid convolution of {h}x{w} with {}x{} kernel",
                        self.kernel_h, self.kernel_w
                    )));
                }
                Ok((h - self.kernel_h + 1, w - self.kernel_w + 1))
            }
        }
    }

    /// Spatial input size that maps onto an output of `h x w`.
    pub fn input_hw(&self, h: usize, w: usize, padding: Padding) -> (usize, usize) {
        match padding {
            Padding::Same => (h, w),
            Padding::Valid => (h + self.kernel_h - 1, w + self.kernel_w - 1),
        }
    }
}

/// Range of output indices `o` with `0 <= o + d < in_len`, clipped to `out_len`.
#[inline]
fn valid_range(d: isize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (in_len as isize - d).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d(x: &Tensor, k: &ConvKernel, padding: Padding) -> Result<Tensor> {
    Ok(conv2d_wide(&Wide::from_tensor(x), k, padding)?.to_tensor())
}

/// [`conv2d`] on `f64` data.
pub(crate) fn conv2d_wide(x: &Wide, k: &ConvKernel, padding: Padding) -> Result<Wide> {
    if x.shape.features != k.in_features {
        return Err(Error::dim(format!(
            "conv2d: input has {} features, kernel expects {}",
            x.shape.features, k.in_features
        )));
    }
    let (h, w) = (x.shape.height, x.shape.width);
    let (oh, ow) = k.output_hw(h, w, padding)?;
    let (ph, pw) = k.pads(padding);
    let mut out = Wide::zeros(Shape::new(k.out_features, oh, ow));
    for o in 0..k.out_features {
        let out_plane = out.plane_mut(o);
        for i in 0..k.in_features {
            let in_plane = x.plane(i);
            for ky in 0..k.kernel_h {
                let dy = ky as isize - ph as isize;
                let (y0, y1) = valid_range(dy, h, oh);
                for kx in 0..k.kernel_w {
                    let wv = k.get(o, i, ky, kx) as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw as isize;
                    let (x0, x1) = valid_range(dx, w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        let dst = &mut out_plane[y * ow + x0..y * ow + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]: `<conv2d(a, k), b> == <a, conv2d_transposed(b, k)>`.
pub fn conv2d_transposed(z: &Tensor, k: &ConvKernel, padding: Padding) -> Result<Tensor> {
    Ok(conv2d_transposed_wide(&Wide::from_tensor(z), k, padding)?.to_tensor())
}

/// [`conv2d_transposed`] on `f64` data.
pub(crate) fn conv2d_transposed_wide(z: &Wide, k: &ConvKernel, padding: Padding) -> Result<Wide> {
    if z.shape.features != k.out_features {
        return Err(Error::dim(format!(
            "conv2d_transposed: input has {} features, kernel produces {}",
            z.shape.features, k.out_features
        )));
    }
    let (oh, ow) = (z.shape.height, z.shape.width);
    let (h, w) = k.input_hw(oh, ow, padding);
    let (ph, pw) = k.pads(padding);
    let mut out = Wide::zeros(Shape::new(k.in_features, h, w));
    for i in 0..k.in_features {
        let out_plane = out.plane_mut(i);
        for o in 0..k.out_features {
            let z_plane = z.plane(o);
            for ky in 0..k.kernel_h {
                let dy = ky as isize - ph as isize;
                let (y0, y1) = valid_range(dy, h, oh);
                for kx in 0..k.kernel_w {
                    let wv = k.get(o, i, ky, kx) as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw as isize;
                    let (x0, x1) = valid_range(dx, w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let dst_row = (y as isize + dy) as usize * w;
                        let dst = &mut out_plane[(dst_row as isize + x0 as isize + dx) as usize
                            ..(dst_row as isize + x1 as isize + dx) as usize];
                        let src = &z_plane[y * ow + x0..y * ow + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `<conv2d(x, k), grad_out>` with respect to the kernel weights.
pub fn conv2d_kernel_grad(
    x: &Tensor,
    grad_out: &Tensor,
    kernel_h: usize,
    kernel_w: usize,
    padding: Padding,
) -> Result<ConvKernel> {
    let mut g = ConvKernel::zeros(grad_out.features(), x.features(), kernel_h, kernel_w)?;
    let (oh, ow) = g.output_hw(x.height(), x.width(), padding)?;
    if (oh, ow) != (grad_out.height(), grad_out.width()) {
        return Err(Error::dim(format!(
            "conv2d_kernel_grad: output gradient {} does not match input {}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let (ph, pw) = g.pads(padding);
    for o in 0..g.out_features {
        let go = grad_out.plane(o);
        for i in 0..g.in_features {
            let xi = x.plane(i);
            for ky in 0..kernel_h {
                let dy = ky as isize - ph as isize;
                let (y0, y1) = valid_range(dy, h, oh);
                for kx in 0..kernel_w {
                    let dx = kx as isize - pw as isize;
                    let (x0, x1) = valid_range(dx, w, ow);
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize * w) as isize + dx;
                        let src = &xi[(src_row + x0 as isize) as usize..(src_row + x1 as isize) as usize];
                        let gr = &go[y * ow + x0..y * ow + x1];
                        let mut row = 0.0f32;
                        for (&a, &b) in src.iter().zip(gr) {
                            row += a * b;
                        }
                        acc += row as f64;
                    }
                    let idx = g.index(o, i, ky, kx);
                    g.weights[idx] = acc as f32;
                }
            }
        }
    }
    Ok(g)
}
