//! Classical resamplers used as the downscale operator, baselines and for the
//! chroma path.
//!
//! Bicubic is Keys cubic convolution with `a = -0.5`, half-pixel centre
//! alignment (`src = (dst + 0.5) / m - 0.5`) and edge clamping. Colour
//! conversion is BT.601 full range with chroma offset by 0.5.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Factors;
use crate::tensor::{Shape, Tensor};

pub const BICUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    AreaDown,
    BicubicUp,
    NearestUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub factors: Factors,
    pub method: ResampleMethod,
}

impl ResampleSpec {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.method {
            ResampleMethod::AreaDown => area_downscale(x, self.factors),
            ResampleMethod::BicubicUp => Ok(bicubic_upscale(x, self.factors)),
            ResampleMethod::NearestUp => Ok(nearest_upscale(x, self.factors)),
        }
    }
}

/// Each output pixel is the mean of its `m_y x m_x` block.
pub fn area_downscale(x: &Tensor, f: Factors) -> Result<Tensor> {
    let shape = f.down_shape(x.shape())?;
    let inv = 1.0 / f.count() as f64;
    let w = x.width();
    Ok(Tensor::from_fn(shape, |c, i, j| {
        let plane = x.plane(c);
        let mut acc = 0.0f64;
        for dy in 0..f.m_y {
            let row = (i * f.m_y + dy) * w + j * f.m_x;
            for dx in 0..f.m_x {
                acc += plane[row + dx] as f64;
            }
        }
        (acc * inv) as f32
    }))
}

/// Adjoint of [`area_downscale`]: spreads each value over its block divided by
/// the block size.
pub fn area_downscale_adjoint(g: &Tensor, f: Factors) -> Tensor {
    let inv = 1.0 / f.count() as f32;
    Tensor::from_fn(f.up_shape(g.shape()), |c, p, q| g.get(c, p / f.m_y, q / f.m_x) * inv)
}

pub fn nearest_upscale(x: &Tensor, f: Factors) -> Tensor {
    Tensor::from_fn(f.up_shape(x.shape()), |c, p, q| x.get(c, p / f.m_y, q / f.m_x))
}

/// Cubic convolution kernel with parameter `a`.
pub fn cubic_kernel(t: f64, a: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Taps for output position `p` of an `m`-times upscale: the first source
/// index (may be negative) and four weights.
pub fn bicubic_taps(p: usize, m: usize) -> (isize, [f64; 4]) {
    let src = (p as f64 + 0.5) / m as f64 - 0.5;
    let i0 = src.floor();
    let t = src - i0;
    let w = [
        cubic_kernel(1.0 + t, BICUBIC_A),
        cubic_kernel(t, BICUBIC_A),
        cubic_kernel(1.0 - t, BICUBIC_A),
        cubic_kernel(2.0 - t, BICUBIC_A),
    ];
    (i0 as isize - 1, w)
}

fn resample_axis(src: &[f32], n: usize, stride: usize, m: usize, out: &mut [f32], out_stride: usize) {
    for p in 0..n * m {
        let (start, w) = bicubic_taps(p, m);
        let mut acc = 0.0f64;
        for (k, &wk) in w.iter().enumerate() {
            let idx = (start + k as isize).clamp(0, n as isize - 1) as usize;
            acc += wk * src[idx * stride] as f64;
        }
        out[p * out_stride] = acc as f32;
    }
}

pub fn bicubic_upscale(x: &Tensor, f: Factors) -> Tensor {
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = (h * f.m_y, w * f.m_x);
    let mut out = Tensor::zeros(Shape::new(x.features(), oh, ow));
    let mut tmp = vec![0.0f32; h * ow];
    for c in 0..x.features() {
        let src = x.plane(c);
        for i in 0..h {
            resample_axis(&src[i * w..], w, 1, f.m_x, &mut tmp[i * ow..], 1);
        }
        let dst = out.plane_mut(c);
        for j in 0..ow {
            resample_axis(&tmp[j..], h, ow, f.m_y, &mut dst[j..], ow);
        }
    }
    out
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

fn check_rgb(img: &Tensor) -> Result<()> {
    if img.features() != 3 {
        return Err(Error::dim(format!("expected 3 colour channels, got {}", img.features())));
    }
    Ok(())
}

pub fn rgb_to_ycbcr(img: &Tensor) -> Result<Tensor> {
    check_rgb(img)?;
    let mut out = Tensor::zeros(img.shape());
    let n = img.shape().plane_len();
    for i in 0..n {
        let r = img.data()[i] as f64;
        let g = img.data()[n + i] as f64;
        let b = img.data()[2 * n + i] as f64;
        let y = KR * r + KG * g + KB * b;
        let cb = 0.5 + (b - y) / (2.0 * (1.0 - KB));
        let cr = 0.5 + (r - y) / (2.0 * (1.0 - KR));
        let d = out.data_mut();
        d[i] = y as f32;
        d[n + i] = cb as f32;
        d[2 * n + i] = cr as f32;
    }
    Ok(out)
}

pub fn ycbcr_to_rgb(img: &Tensor) -> Result<Tensor> {
    check_rgb(img)?;
    let mut out = Tensor::zeros(img.shape());
    let n = img.shape().plane_len();
    for i in 0..n {
        let y = img.data()[i] as f64;
        let cb = img.data()[n + i] as f64 - 0.5;
        let cr = img.data()[2 * n + i] as f64 - 0.5;
        let r = y + 2.0 * (1.0 - KR) * cr;
        let b = y + 2.0 * (1.0 - KB) * cb;
        let g = (y - KR * r - KB * b) / KG;
        let d = out.data_mut();
        d[i] = r as f32;
        d[n + i] = g as f32;
        d[2 * n + i] = b as f32;
    }
    Ok(out)
}
