//! Multirate operators: polyphase grid up/down-sampling and the MuxOut /
//! T-MuxOut layers built from them.
//!
//! Grids are numbered `n = 0..M` with `M = m_x * m_y`. Grid `n` holds the
//! pixels `(p, q)` with `p = m_y * i + a_n`, `q = m_x * j + b_n`, where
//! `a_n = n mod m_y` and `b_n = n / m_y`. Permutations are stored 0-based, so
//! the 1-based `P_k(n)` of the usual notation is `perm[k-1][n-1] + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use std::ops::AddAssign;

use crate::tensor::{Shape, Tensor, Wide};

/// Integer resampling factors along x (columns) and y (rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct Factors {
    pub m_x: usize,
    pub m_y: usize,
}

impl TryFrom<[usize; 2]> for Factors {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        Factors::new(v[0], v[1])
    }
}

impl From<Factors> for [usize; 2] {
    fn from(f: Factors) -> Self {
        [f.m_x, f.m_y]
    }
}

impl Factors {
    pub fn new(m_x: usize, m_y: usize) -> Result<Self> {
        if m_x == 0 || m_y == 0 {
            return Err(Error::dim(format!("factors must be >= 1, got {m_x}x{m_y}")));
        }
        Ok(Factors { m_x, m_y })
    }

    pub const fn square(m: usize) -> Self {
        Factors { m_x: m, m_y: m }
    }

    pub const fn unit() -> Self {
        Factors { m_x: 1, m_y: 1 }
    }

    /// Number of polyphase grids `M`.
    pub fn count(&self) -> usize {
        self.m_x * self.m_y
    }

    pub fn is_unit(&self) -> bool {
        self.m_x == 1 && self.m_y == 1
    }

    pub fn grid(&self, n: usize) -> SamplingGrid {
        assert!(n < self.count(), "grid {n} out of range for {}x{}", self.m_x, self.m_y);
        SamplingGrid { factors: *self, n }
    }

    pub fn mul(&self, other: Factors) -> Factors {
        Factors {
            m_x: self.m_x * other.m_x,
            m_y: self.m_y * other.m_y,
        }
    }

    /// `self / other`, if both components divide exactly.
    pub fn div(&self, other: Factors) -> Option<Factors> {
        (self.m_x.is_multiple_of(other.m_x) && self.m_y.is_multiple_of(other.m_y)).then(|| Factors {
            m_x: self.m_x / other.m_x,
            m_y: self.m_y / other.m_y,
        })
    }

    pub fn up_shape(&self, s: Shape) -> Shape {
        Shape::new(s.features, s.height * self.m_y, s.width * self.m_x)
    }

    pub fn down_shape(&self, s: Shape) -> Result<Shape> {
        if !s.height.is_multiple_of(self.m_y) || !s.width.is_multiple_of(self.m_x) {
            return Err(Error::dim(format!(
                "{}x{} is not divisible by factors {}x{}",
                s.height, s.width, self.m_y, self.m_x
            )));
        }
        Ok(Shape::new(s.features, s.height / self.m_y, s.width / self.m_x))
    }
}

impl std::fmt::Display for Factors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.m_x, self.m_y)
    }
}

/// One of the `M` interleaved lattices of an upscaled image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingGrid {
    pub factors: Factors,
    pub n: usize,
}

impl SamplingGrid {
    /// Row offset `a_n`.
    pub fn a(&self) -> usize {
        self.n % self.factors.m_y
    }

    /// Column offset `b_n`.
    pub fn b(&self) -> usize {
        self.n / self.factors.m_y
    }
}

/// `U^n`: copies `x` onto grid `n` of a zero image `m_y` x `m_x` times larger.
pub fn upsample(x: &Tensor, grid: SamplingGrid) -> Tensor {
    let f = grid.factors;
    let mut out = Tensor::zeros(f.up_shape(x.shape()));
    let (h, w) = (x.height(), x.width());
    let ow = out.width();
    let (a, b) = (grid.a(), grid.b());
    for c in 0..x.features() {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for i in 0..h {
            let row = (f.m_y * i + a) * ow + b;
            for j in 0..w {
                dst[row + f.m_x * j] = src[i * w + j];
            }
        }
    }
    out
}

/// `D^n`: reads grid `n` back out. Adjoint of [`upsample`].
pub fn downsample(x: &Tensor, grid: SamplingGrid) -> Result<Tensor> {
    let f = grid.factors;
    let shape = f.down_shape(x.shape())?;
    let mut out = Tensor::zeros(shape);
    let (h, w) = (shape.height, shape.width);
    let iw = x.width();
    let (a, b) = (grid.a(), grid.b());
    for c in 0..x.features() {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for i in 0..h {
            let row = (f.m_y * i + a) * iw + b;
            for j in 0..w {
                dst[i * w + j] = src[row + f.m_x * j];
            }
        }
    }
    Ok(out)
}

/// A bijection on `{0, .., M-1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &v in &map {
            if v >= map.len() || seen[v] {
                return Err(Error::dim(format!("{map:?} is not a permutation")));
            }
            seen[v] = true;
        }
        Ok(Permutation(map))
    }

    pub fn identity(m: usize) -> Self {
        Permutation((0..m).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(&self, n: usize) -> usize {
        self.0[n]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Cyclic shifts `P_k(n) = (n + k) mod M`, `k = 0..g_out`. For `g_out > M`
/// the shifts repeat.
pub fn circular_permutations(m: usize, g_out: usize) -> Vec<Permutation> {
    (0..g_out)
        .map(|k| Permutation((0..m).map(|n| (n + k) % m).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MuxOutSpec {
    pub factors: Factors,
    pub g_in: usize,
    pub g_out: usize,
    pub permutations: Vec<Permutation>,
}

impl MuxOutSpec {
    pub fn new(factors: Factors, g_in: usize, permutations: Vec<Permutation>) -> Result<Self> {
        let spec = MuxOutSpec {
            factors,
            g_in,
            g_out: permutations.len(),
            permutations,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn circular(factors: Factors, g_in: usize, g_out: usize) -> Result<Self> {
        Self::new(factors, g_in, circular_permutations(factors.count(), g_out))
    }

    pub fn validate(&self) -> Result<()> {
        if self.g_in == 0 || self.g_out == 0 {
            return Err(Error::dim("MuxOut group sizes must be >= 1"));
        }
        if self.permutations.len() != self.g_out {
            return Err(Error::dim(format!(
                "MuxOut declares g_out={} but has {} permutations",
                self.g_out,
                self.permutations.len()
            )));
        }
        let m = self.factors.count();
        if let Some(p) = self.permutations.iter().find(|p| p.len() != m) {
            return Err(Error::dim(format!(
                "permutation {:?} is not over {m} grids",
                p.as_slice()
            )));
        }
        Ok(())
    }

    pub fn in_features(&self) -> usize {
        self.g_in * self.factors.count()
    }

    pub fn out_features(&self) -> usize {
        self.g_in * self.g_out
    }

    pub fn forward_shape(&self, s: Shape) -> Result<Shape> {
        if s.features != self.in_features() {
            return Err(Error::dim(format!(
                "MuxOut expects {} features (g_in={} x M={}), got {}",
                self.in_features(),
                self.g_in,
                self.factors.count(),
                s.features
            )));
        }
        Ok(self.factors.up_shape(s.with_features(self.out_features())))
    }

    pub fn transpose_shape(&self, s: Shape) -> Result<Shape> {
        if s.features != self.out_features() {
            return Err(Error::dim(format!(
                "T-MuxOut expects {} features (g_out={} x g_in={}), got {}",
                self.out_features(),
                self.g_out,
                self.g_in,
                s.features
            )));
        }
        Ok(self.factors.down_shape(s)?.with_features(self.in_features()))
    }
}

/// Output group `k` is `sum_n U^{P_k(n)} x^n`, applied per feature in a group.
pub fn muxout(x: &Tensor, spec: &MuxOutSpec) -> Result<Tensor> {
    let shape = spec.forward_shape(x.shape())?;
    Tensor::new(shape, mux_planes(x.data(), x.shape(), shape, spec))
}

/// Adjoint of [`muxout`]: group `n` is `sum_k D^{P_k(n)} z^k`.
pub fn t_muxout(z: &Tensor, spec: &MuxOutSpec) -> Result<Tensor> {
    let shape = spec.transpose_shape(z.shape())?;
    Tensor::new(shape, t_mux_planes(z.data(), z.shape(), shape, spec))
}

pub(crate) fn muxout_wide(x: &Wide, spec: &MuxOutSpec) -> Result<Wide> {
    let shape = spec.forward_shape(x.shape)?;
    Ok(Wide {
        shape,
        data: mux_planes(&x.data, x.shape, shape, spec),
    })
}

pub(crate) fn t_muxout_wide(z: &Wide, spec: &MuxOutSpec) -> Result<Wide> {
    let shape = spec.transpose_shape(z.shape)?;
    Ok(Wide {
        shape,
        data: t_mux_planes(&z.data, z.shape, shape, spec),
    })
}

fn mux_planes<T: Copy + Default>(src: &[T], in_shape: Shape, out_shape: Shape, spec: &MuxOutSpec) -> Vec<T> {
    let f = spec.factors;
    let (h, w) = (in_shape.height, in_shape.width);
    let (n_in, n_out) = (in_shape.plane_len(), out_shape.plane_len());
    let ow = out_shape.width;
    let mut out = vec![T::default(); out_shape.len()];
    for (k, perm) in spec.permutations.iter().enumerate() {
        for n in 0..f.count() {
            let grid = f.grid(perm.apply(n));
            let (a, b) = (grid.a(), grid.b());
            for g in 0..spec.g_in {
                let s = &src[(n * spec.g_in + g) * n_in..][..n_in];
                let d = &mut out[(k * spec.g_in + g) * n_out..][..n_out];
                for i in 0..h {
                    let row = (f.m_y * i + a) * ow + b;
                    for j in 0..w {
                        d[row + f.m_x * j] = s[i * w + j];
                    }
                }
            }
        }
    }
    out
}

fn t_mux_planes<T: Copy + Default + AddAssign>(
    src: &[T],
    in_shape: Shape,
    out_shape: Shape,
    spec: &MuxOutSpec,
) -> Vec<T> {
    let f = spec.factors;
    let (h, w) = (out_shape.height, out_shape.width);
    let (n_in, n_out) = (in_shape.plane_len(), out_shape.plane_len());
    let zw = in_shape.width;
    let mut out = vec![T::default(); out_shape.len()];
    for n in 0..f.count() {
        for (k, perm) in spec.permutations.iter().enumerate() {
            let grid = f.grid(perm.apply(n));
            let (a, b) = (grid.a(), grid.b());
            for g in 0..spec.g_in {
                let s = &src[(k * spec.g_in + g) * n_in..][..n_in];
                let d = &mut out[(n * spec.g_in + g) * n_out..][..n_out];
                for i in 0..h {
                    let row = (f.m_y * i + a) * zw + b;
                    for j in 0..w {
                        d[i * w + j] += s[row + f.m_x * j];
                    }
                }
            }
        }
    }
    out
}
