//! SSIM, PSNR and MSE.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`
//! and dynamic range 1. The score is the mean over every fully contained
//! window, then over channels. Computed in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dim(format!("image shapes differ: {} vs {}", x.shape(), y.shape())));
    }
    Ok(())
}

fn check_window(x: &Tensor) -> Result<()> {
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// Valid separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        let row = &src[i * w..(i + 1) * w];
        for j in 0..ow {
            tmp[i * ow + j] = g.iter().zip(&row[j..j + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for (t, &gt) in g.iter().enumerate() {
            let src_row = &tmp[(i + t) * ow..(i + t + 1) * ow];
            for (o, &v) in out[i * ow..(i + 1) * ow].iter_mut().zip(src_row) {
                *o += gt * v;
            }
        }
    }
    out
}

/// Transpose of [`filter_valid`]: spreads an `oh x ow` map back to `h x w`.
fn filter_valid_transposed(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for i in 0..oh {
        for (t, &gt) in g.iter().enumerate() {
            let dst = &mut tmp[(i + t) * ow..(i + t + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                *d += gt * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..ow {
            let v = tmp[i * ow + j];
            for (t, &gt) in g.iter().enumerate() {
                out[i * w + j + t] += gt * v;
            }
        }
    }
    out
}

struct PlaneStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn plane_stats(x: &[f32], y: &[f32], h: usize, w: usize, g: &[f64]) -> PlaneStats {
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    PlaneStats {
        mx: filter_valid(&xs, h, w, g),
        my: filter_valid(&ys, h, w, g),
        exx: filter_valid(&prod(&xs, &xs), h, w, g),
        eyy: filter_valid(&prod(&ys, &ys), h, w, g),
        exy: filter_valid(&prod(&xs, &ys), h, w, g),
    }
}

/// Per-window terms `(A1, A2, B1, B2)` with `SSIM = A1 A2 / (B1 B2)`.
fn terms(s: &PlaneStats, i: usize) -> (f64, f64, f64, f64) {
    let (mx, my) = (s.mx[i], s.my[i]);
    let vx = s.exx[i] - mx * mx;
    let vy = s.eyy[i] - my * my;
    let cxy = s.exy[i] - mx * my;
    (2.0 * mx * my + C1, 2.0 * cxy + C2, mx * mx + my * my + C1, vx + vy + C2)
}

/// Mean SSIM of each channel.
pub fn ssim_per_channel(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    check_window(x)?;
    let g = gaussian_window();
    let (h, w) = (x.height(), x.width());
    Ok((0..x.features())
        .map(|c| {
            let s = plane_stats(x.plane(c), y.plane(c), h, w, &g);
            let n = s.mx.len();
            (0..n)
                .map(|i| {
                    let (a1, a2, b1, b2) = terms(&s, i);
                    a1 * a2 / (b1 * b2)
                })
                .sum::<f64>()
                / n as f64
        })
        .collect())
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let per = ssim_per_channel(x, y)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(x, y)?;
    check_window(x)?;
    let g = gaussian_window();
    let (h, w) = (x.height(), x.width());
    let channels = x.features();
    let mut grad = Tensor::zeros(x.shape());
    let mut total = 0.0;
    for c in 0..channels {
        let s = plane_stats(x.plane(c), y.plane(c), h, w, &g);
        let n = s.mx.len();
        let scale = 1.0 / (n * channels) as f64;
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        let mut sum = 0.0;
        for i in 0..n {
            let (a1, a2, b1, b2) = terms(&s, i);
            let (mx, my) = (s.mx[i], s.my[i]);
            let den = b1 * b2;
            let v = a1 * a2 / den;
            sum += v;
            // sigma_x^2 = E[x^2] - mx^2 and sigma_xy = E[xy] - mx my.
            d_mx[i] = scale * (2.0 * my * a2 / den - 2.0 * my * a1 / den - v * 2.0 * mx / b1 + v * 2.0 * mx / b2);
            d_exx[i] = scale * (-v / b2);
            d_exy[i] = scale * (2.0 * a1 / den);
        }
        total += sum / n as f64;
        let a = filter_valid_transposed(&d_mx, h, w, &g);
        let b = filter_valid_transposed(&d_exx, h, w, &g);
        let gm = filter_valid_transposed(&d_exy, h, w, &g);
        let (xp, yp) = (x.plane(c), y.plane(c));
        for (p, o) in grad.plane_mut(c).iter_mut().enumerate() {
            *o = (a[p] + 2.0 * xp[p] as f64 * b[p] + yp[p] as f64 * gm[p]) as f32;
        }
    }
    Ok((total / channels as f64, grad))
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / x.shape().len() as f64)
}

/// MSE and its gradient with respect to `x`.
pub fn mse_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let m = mse(x, y)?;
    let k = 2.0 / x.shape().len() as f32;
    let g = x.sub(y)?.scale(k);
    Ok((m, g))
}

/// `10 log10(peak^2 / MSE)` dB; `+inf` for identical images.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}
