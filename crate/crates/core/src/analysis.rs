//! Fixed-activation analysis.
//!
//! Once the masks `m_n` of a probe are recorded the network is the affine map
//! `x -> W_eff x + b_eff`. `b_eff` is the masked network applied to zero with
//! biases; column `j` of `W_eff` is the bias-free masked network applied to an
//! impulse at input `j`; row `i` is the transposed masked network applied to an
//! impulse at output `i`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::netgraph::NetworkModel;
use crate::pnm::{quantize, GrayImage};
use crate::tensor::{Shape, Tensor};

pub use crate::netgraph::ActivationTrace;

/// A pixel of one feature plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub feature: usize,
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub const fn new(feature: usize, row: usize, col: usize) -> Self {
        Coord { feature, row, col }
    }

    fn in_shape(&self, s: Shape) -> bool {
        s.contains(self.feature, self.row, self.col)
    }
}

impl std::fmt::Display for Coord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.feature, self.row, self.col)
    }
}

/// Every `stride`-th pixel of `feature`, starting at `stride / 2`.
pub fn strided_coords(shape: Shape, feature: usize, stride: usize) -> Vec<Coord> {
    let stride = stride.max(1);
    let start = stride / 2;
    (start..shape.height)
        .step_by(stride)
        .flat_map(|r| (start..shape.width).step_by(stride).map(move |c| Coord::new(feature, r, c)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveModel {
    pub probe_id: String,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub b_eff: Tensor,
    /// Input coordinate -> output-shaped column of `W_eff`.
    pub columns: BTreeMap<Coord, Tensor>,
    /// Output coordinate -> input-shaped row of `W_eff`.
    pub rows: BTreeMap<Coord, Tensor>,
}

impl EffectiveModel {
    /// `W_eff[i, j]` read from a stored column, if `j` was probed.
    pub fn entry_from_column(&self, i: Coord, j: Coord) -> Option<f32> {
        self.columns.get(&j).map(|c| c.get(i.feature, i.row, i.col))
    }

    /// `W_eff[i, j]` read from a stored row, if `i` was probed.
    pub fn entry_from_row(&self, i: Coord, j: Coord) -> Option<f32> {
        self.rows.get(&i).map(|r| r.get(j.feature, j.row, j.col))
    }

    /// `sum_j x[j] * column_j + b_eff` over the probed columns.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape {
            return Err(Error::dim(format!(
                "reconstruct: input {} does not match probed {}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut acc: Vec<f64> = self.b_eff.data().iter().map(|&v| v as f64).collect();
        for (j, col) in &self.columns {
            let s = x.get(j.feature, j.row, j.col) as f64;
            if s == 0.0 {
                continue;
            }
            for (a, &c) in acc.iter_mut().zip(col.data()) {
                *a += s * c as f64;
            }
        }
        Tensor::new(self.output_shape, acc.into_iter().map(|v| v as f32).collect())
    }
}

pub fn record_trace(model: &NetworkModel, probe: &Tensor) -> Result<ActivationTrace> {
    let (_, trace) = model.forward(probe, true)?;
    Ok(trace.expect("trace requested"))
}

pub fn effective_bias(model: &NetworkModel, trace: &ActivationTrace) -> Result<Tensor> {
    model.forward_masked(trace, &Tensor::zeros(trace.input_shape), true)
}

fn check_coords(coords: &[Coord], shape: Shape, side: &str) -> Result<()> {
    let bad: Vec<String> = coords
        .iter()
        .filter(|c| !c.in_shape(shape))
        .map(|c| c.to_string())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Coordinate(format!(
            "{side} coordinates outside {shape}: {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

fn empty_model(model: &NetworkModel, trace: &ActivationTrace) -> Result<EffectiveModel> {
    let output_shape = model.output_shape(trace.input_shape)?;
    Ok(EffectiveModel {
        probe_id: model.name.clone(),
        input_shape: trace.input_shape,
        output_shape,
        b_eff: effective_bias(model, trace)?,
        columns: BTreeMap::new(),
        rows: BTreeMap::new(),
    })
}

/// Columns of `W_eff` for the input coordinates in `columns`, plus `b_eff`.
pub fn forward_analysis(model: &NetworkModel, trace: &ActivationTrace, columns: &[Coord]) -> Result<EffectiveModel> {
    check_coords(columns, trace.input_shape, "input")?;
    let mut eff = empty_model(model, trace)?;
    for &j in columns {
        let delta = Tensor::impulse(trace.input_shape, j.feature, j.row, j.col);
        eff.columns.insert(j, model.forward_masked(trace, &delta, false)?);
    }
    Ok(eff)
}

/// Rows of `W_eff` for the output coordinates in `rows`, plus `b_eff`.
pub fn backward_analysis(model: &NetworkModel, trace: &ActivationTrace, rows: &[Coord]) -> Result<EffectiveModel> {
    let mut eff = empty_model(model, trace)?;
    check_coords(rows, eff.output_shape, "output")?;
    for &i in rows {
        let delta = Tensor::impulse(eff.output_shape, i.feature, i.row, i.col);
        eff.rows.insert(i, model.transpose_masked(trace, &delta)?);
    }
    Ok(eff)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtlasSource {
    Columns,
    Rows,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// One scale for the whole atlas, so tiles compare by magnitude.
    #[default]
    PerAtlas,
    PerTile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AtlasLayout {
    pub tiles_per_row: usize,
    /// Crop a `(2r + 1)` square around the probed location instead of
    /// showing the whole plane.
    pub window: Option<usize>,
    /// Plane of each filter to show.
    pub feature: usize,
}

impl Default for AtlasLayout {
    fn default() -> Self {
        AtlasLayout {
            tiles_per_row: 9,
            window: None,
            feature: 0,
        }
    }
}

const SEPARATOR: u8 = 0;

/// The values of one tile, row-major, with its height and width.
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl Tile {
    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Where coordinate `at` of the `from` lattice lands on the `to` lattice.
fn map_centre(at: Coord, from: Shape, to: Shape) -> (isize, isize) {
    let map = |v: usize, a: usize, b: usize| -> isize {
        if b >= a {
            let r = b / a;
            (v * r + r / 2) as isize
        } else {
            (v / (a / b)) as isize
        }
    };
    (map(at.row, from.height, to.height), map(at.col, from.width, to.width))
}

/// Extracts the displayed tile for one probed coordinate.
pub fn extract_tile(filter: &Tensor, at: Coord, at_shape: Shape, layout: &AtlasLayout) -> Result<Tile> {
    if layout.feature >= filter.features() {
        return Err(Error::dim(format!(
            "atlas feature {} but filters have {} features",
            layout.feature,
            filter.features()
        )));
    }
    let plane = filter.plane(layout.feature);
    let (h, w) = (filter.height(), filter.width());
    match layout.window {
        None => Ok(Tile {
            height: h,
            width: w,
            values: plane.to_vec(),
        }),
        Some(r) => {
            let (cy, cx) = map_centre(at, at_shape, filter.shape());
            let n = 2 * r + 1;
            let mut values = vec![0.0; n * n];
            for dy in 0..n {
                for dx in 0..n {
                    let y = cy + dy as isize - r as isize;
                    let x = cx + dx as isize - r as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        values[dy * n + dx] = plane[y as usize * w + x as usize];
                    }
                }
            }
            Ok(Tile {
                height: n,
                width: n,
                values,
            })
        }
    }
}

/// Tiles in coordinate order for the chosen side of `effective`.
pub fn atlas_tiles(effective: &EffectiveModel, source: AtlasSource, layout: &AtlasLayout) -> Result<Vec<(Coord, Tile)>> {
    let (filters, at_shape) = match source {
        AtlasSource::Columns => (&effective.columns, effective.input_shape),
        AtlasSource::Rows => (&effective.rows, effective.output_shape),
    };
    if filters.is_empty() {
        return Err(Error::Coordinate("no filters to render".into()));
    }
    filters
        .iter()
        .map(|(&c, f)| extract_tile(f, c, at_shape, layout).map(|t| (c, t)))
        .collect()
}

/// Grey-level atlas: 0 maps to mid-grey, `+-max|w|` to white/black, tiles laid
/// out row-major with 1-pixel separators.
pub fn render_filter_atlas(
    effective: &EffectiveModel,
    source: AtlasSource,
    layout: &AtlasLayout,
    normalization: Normalization,
) -> Result<GrayImage> {
    let tiles = atlas_tiles(effective, source, layout)?;
    let (th, tw) = (tiles[0].1.height, tiles[0].1.width);
    let per_row = layout.tiles_per_row.max(1).min(tiles.len());
    let rows = tiles.len().div_ceil(per_row);
    let mut img = GrayImage::new(per_row * (tw + 1) + 1, rows * (th + 1) + 1, SEPARATOR);
    let global = tiles.iter().fold(0.0f32, |m, (_, t)| m.max(t.max_abs()));
    for (k, (_, tile)) in tiles.iter().enumerate() {
        let scale = match normalization {
            Normalization::PerAtlas => global,
            Normalization::PerTile => tile.max_abs(),
        };
        let (ox, oy) = (1 + (k % per_row) * (tw + 1), 1 + (k / per_row) * (th + 1));
        for y in 0..th {
            for x in 0..tw {
                let v = tile.values[y * tw + x];
                let n = if scale > 0.0 { v / scale } else { 0.0 };
                img.put(ox + x, oy + y, quantize(0.5 * (n + 1.0)));
            }
        }
    }
    Ok(img)
}

/// Ratio of the principal second moments of `|w|` over the tile, largest to
/// smallest. 1 for an isotropic footprint; infinite for a degenerate one.
pub fn filter_anisotropy(tile: &Tile) -> f64 {
    let mut mass = 0.0f64;
    let (mut my, mut mx) = (0.0f64, 0.0f64);
    for y in 0..tile.height {
        for x in 0..tile.width {
            let a = tile.values[y * tile.width + x].abs() as f64;
            mass += a;
            my += a * y as f64;
            mx += a * x as f64;
        }
    }
    if mass == 0.0 {
        return 1.0;
    }
    my /= mass;
    mx /= mass;
    let (mut syy, mut sxx, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..tile.height {
        for x in 0..tile.width {
            let a = tile.values[y * tile.width + x].abs() as f64;
            let (dy, dx) = (y as f64 - my, x as f64 - mx);
            syy += a * dy * dy;
            sxx += a * dx * dx;
            sxy += a * dx * dy;
        }
    }
    let (syy, sxx, sxy) = (syy / mass, sxx / mass, sxy / mass);
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (l1, l2) = (0.5 * (tr + disc), 0.5 * (tr - disc));
    if l2 <= 0.0 {
        f64::INFINITY
    } else {
        l1 / l2
    }
}
