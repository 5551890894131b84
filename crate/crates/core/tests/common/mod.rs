//! Independent oracles for the acceptance suite: a plain f64 re-implementation
//! of network evaluation and a loop-per-window SSIM.

#![allow(dead_code)]

use muxsr::netgraph::{Layer, NetworkModel};
use muxsr::sampling::MuxOutSpec;
use muxsr::Tensor;

/// Feature-major f64 image.
#[derive(Clone, Debug)]
pub struct Img {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Img {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Img { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Img {
            c: t.features(),
            h: t.height(),
            w: t.width(),
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.v[(c * self.h + y) * self.w + x]
    }
}

/// One layer with f64 parameters.
#[derive(Clone, Debug)]
pub enum RefLayer {
    /// weights[o][i][ky][kx], zero padded so the output keeps its size.
    Conv { out: usize, inp: usize, k: usize, w: Vec<f64> },
    Relu(Vec<f64>),
    Tanh(Vec<f64>),
    Mux(MuxOutSpec),
    TMux(MuxOutSpec),
    Avg,
}

#[derive(Clone, Debug)]
pub struct RefNet {
    pub layers: Vec<RefLayer>,
}

impl RefNet {
    pub fn from_model(model: &NetworkModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { kernel, .. } => {
                    assert_eq!(kernel.kernel_h(), kernel.kernel_w());
                    RefLayer::Conv {
                        out: kernel.out_features(),
                        inp: kernel.in_features(),
                        k: kernel.kernel_h(),
                        w: kernel.weights().iter().map(|&v| v as f64).collect(),
                    }
                }
                Layer::Activ { bias } => RefLayer::Relu(bias.iter().map(|&v| v as f64).collect()),
                Layer::TanhActiv { bias } => RefLayer::Tanh(bias.iter().map(|&v| v as f64).collect()),
                Layer::MuxOut(s) => RefLayer::Mux(s.clone()),
                Layer::TMuxOut(s) => RefLayer::TMux(s.clone()),
                Layer::GlobalAvg => RefLayer::Avg,
            })
            .collect();
        RefNet { layers }
    }

    /// Mutable views of the parameters in the same order as
    /// `NetworkModel::params`.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                RefLayer::Conv { w, .. } => Some(w),
                RefLayer::Relu(b) | RefLayer::Tanh(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    /// Output, plus the sign pattern of every ReLU input (to spot kinks).
    pub fn forward(&self, x: &Img) -> (Img, Vec<bool>) {
        let mut cur = x.clone();
        let mut signs = Vec::new();
        for l in &self.layers {
            cur = match l {
                RefLayer::Conv { out, inp, k, w } => conv_same(&cur, *out, *inp, *k, w),
                RefLayer::Relu(b) => {
                    let mut o = cur.clone();
                    for c in 0..o.c {
                        for y in 0..o.h {
                            for x in 0..o.w {
                                let v = cur.at(c, y, x) + b[c];
                                signs.push(v > 0.0);
                                *o.at_mut(c, y, x) = v.max(0.0);
                            }
                        }
                    }
                    o
                }
                RefLayer::Tanh(b) => {
                    let mut o = cur.clone();
                    for c in 0..o.c {
                        for y in 0..o.h {
                            for x in 0..o.w {
                                *o.at_mut(c, y, x) = (cur.at(c, y, x) + b[c]).tanh();
                            }
                        }
                    }
                    o
                }
                RefLayer::Mux(s) => mux(&cur, s),
                RefLayer::TMux(s) => tmux(&cur, s),
                RefLayer::Avg => {
                    let mut o = Img::zeros(cur.c, 1, 1);
                    let n = (cur.h * cur.w) as f64;
                    for c in 0..cur.c {
                        o.v[c] = cur.v[c * cur.h * cur.w..(c + 1) * cur.h * cur.w].iter().sum::<f64>() / n;
                    }
                    o
                }
            };
        }
        (cur, signs)
    }
}

fn conv_same(x: &Img, out: usize, inp: usize, k: usize, w: &[f64]) -> Img {
    assert_eq!(x.c, inp);
    let r = (k / 2) as isize;
    let mut o = Img::zeros(out, x.h, x.w);
    for oc in 0..out {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = 0.0;
                for ic in 0..inp {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            s += w[((oc * inp + ic) * k + ky) * k + kx] * x.at(ic, sy as usize, sx as usize);
                        }
                    }
                }
                *o.at_mut(oc, y, xx) = s;
            }
        }
    }
    o
}

/// Grid `n` sits at row offset `n mod m_y`, column offset `n / m_y`.
fn offsets(s: &MuxOutSpec, n: usize) -> (usize, usize) {
    (n % s.factors.m_y, n / s.factors.m_y)
}

/// Output group k, feature g at HR pixel (m_y i + a, m_x j + b) takes input
/// group n feature g at (i, j), where grid P_k(n) = (a, b).
fn mux(x: &Img, s: &MuxOutSpec) -> Img {
    let m = s.factors.count();
    assert_eq!(x.c, s.g_in * m);
    let (my, mx) = (s.factors.m_y, s.factors.m_x);
    let mut o = Img::zeros(s.g_in * s.g_out, x.h * my, x.w * mx);
    for (k, p) in s.permutations.iter().enumerate() {
        for n in 0..m {
            let (a, b) = offsets(s, p.apply(n));
            for g in 0..s.g_in {
                for i in 0..x.h {
                    for j in 0..x.w {
                        *o.at_mut(k * s.g_in + g, my * i + a, mx * j + b) = x.at(n * s.g_in + g, i, j);
                    }
                }
            }
        }
    }
    o
}

fn tmux(z: &Img, s: &MuxOutSpec) -> Img {
    let m = s.factors.count();
    assert_eq!(z.c, s.g_in * s.g_out);
    let (my, mx) = (s.factors.m_y, s.factors.m_x);
    let mut o = Img::zeros(s.g_in * m, z.h / my, z.w / mx);
    for (k, p) in s.permutations.iter().enumerate() {
        for n in 0..m {
            let (a, b) = offsets(s, p.apply(n));
            for g in 0..s.g_in {
                for i in 0..o.h {
                    for j in 0..o.w {
                        *o.at_mut(n * s.g_in + g, i, j) += z.at(k * s.g_in + g, my * i + a, mx * j + b);
                    }
                }
            }
        }
    }
    o
}

/// SSIM by direct summation over each 11x11 window: Gaussian weights
/// (sigma 1.5, normalized), weighted means, variances and covariance taken
/// about the means, C1 = (0.01)^2, C2 = (0.03)^2. Mean over valid windows,
/// then over channels.
pub fn ssim_loop(x: &Img, y: &Img) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut g = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (u, row) in g.iter_mut().enumerate() {
        for (v, e) in row.iter_mut().enumerate() {
            let du = u as f64 - 5.0;
            let dv = v as f64 - 5.0;
            *e = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            total += *e;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for c in 0..x.c {
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..=x.h - N {
            for j in 0..=x.w - N {
                let (mut mx, mut my) = (0.0, 0.0);
                for u in 0..N {
                    for v in 0..N {
                        let wgt = g[u][v] / total;
                        mx += wgt * x.at(c, i + u, j + v);
                        my += wgt * y.at(c, i + u, j + v);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for u in 0..N {
                    for v in 0..N {
                        let wgt = g[u][v] / total;
                        let dx = x.at(c, i + u, j + v) - mx;
                        let dy = y.at(c, i + u, j + v) - my;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cxy += wgt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / x.c as f64
}
