//! Sequential networks of conv / activation / MuxOut layers.
//!
//! Convolutions carry no bias; activations carry one bias per feature and
//! compute `sigma(x + b)`. With the activation masks of a probe recorded, every
//! network collapses to a linear map plus an offset, which is what
//! [`NetworkModel::forward_masked`] and [`NetworkModel::transpose_masked`]
//! evaluate.

mod config;
pub mod io;

pub use config::{ArchitectureConfig, InputSpec, LayerConfig, Metadata};
pub use io::{load_model, read_container, save_model, write_container, Container, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::sampling::{muxout, muxout_wide, t_muxout, t_muxout_wide, Factors, MuxOutSpec};
use crate::tensor::conv::{conv2d_transposed_wide, conv2d_wide};
use crate::tensor::{conv2d, conv2d_transposed, seeded_rng, ConvKernel, Padding, Shape, Tensor, Wide};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { kernel: ConvKernel, padding: Padding },
    /// ReLU with bias.
    Activ { bias: Vec<f32> },
    TanhActiv { bias: Vec<f32> },
    MuxOut(MuxOutSpec),
    TMuxOut(MuxOutSpec),
    GlobalAvg,
}

impl Layer {
    pub fn conv(kernel: ConvKernel) -> Self {
        Layer::Conv {
            kernel,
            padding: Padding::Same,
        }
    }

    pub fn relu(features: usize) -> Self {
        Layer::Activ {
            bias: vec![0.0; features],
        }
    }

    pub fn tanh(features: usize) -> Self {
        Layer::TanhActiv {
            bias: vec![0.0; features],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Activ { .. } => "activ",
            Layer::TanhActiv { .. } => "tanh_activ",
            Layer::MuxOut(_) => "muxout",
            Layer::TMuxOut(_) => "t_muxout",
            Layer::GlobalAvg => "global_avg",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, Layer::Activ { .. } | Layer::TanhActiv { .. })
    }

    pub fn params(&self) -> Option<&[f32]> {
        match self {
            Layer::Conv { kernel, .. } => Some(kernel.weights()),
            Layer::Activ { bias } | Layer::TanhActiv { bias } => Some(bias),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut [f32]> {
        match self {
            Layer::Conv { kernel, .. } => Some(kernel.weights_mut()),
            Layer::Activ { bias } | Layer::TanhActiv { bias } => Some(bias),
            _ => None,
        }
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        match self {
            Layer::Conv { kernel, padding } => {
                if s.features != kernel.in_features() {
                    return Err(Error::dim(format!(
                        "conv expects {} features, got {}",
                        kernel.in_features(),
                        s.features
                    )));
                }
                let (h, w) = kernel.output_hw(s.height, s.width, *padding)?;
                Ok(Shape::new(kernel.out_features(), h, w))
            }
            Layer::Activ { bias } | Layer::TanhActiv { bias } => {
                if s.features != bias.len() {
                    return Err(Error::dim(format!(
                        "{} has {} biases but input has {} features",
                        self.kind(),
                        bias.len(),
                        s.features
                    )));
                }
                Ok(s)
            }
            Layer::MuxOut(spec) => spec.forward_shape(s),
            Layer::TMuxOut(spec) => spec.transpose_shape(s),
            Layer::GlobalAvg => Ok(Shape::new(s.features, 1, 1)),
        }
    }

    /// Applies the layer's linear part (conv, mux, average). Activations are
    /// not linear and are rejected.
    pub fn apply_linear(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { kernel, padding } => conv2d(x, kernel, *padding),
            Layer::MuxOut(spec) => muxout(x, spec),
            Layer::TMuxOut(spec) => t_muxout(x, spec),
            Layer::GlobalAvg => {
                let avg = x.global_average();
                Tensor::new(Shape::new(avg.len(), 1, 1), avg)
            }
            _ => Err(Error::UnsupportedLayer(format!("{} is not linear", self.kind()))),
        }
    }

    /// Adjoint of [`Layer::apply_linear`]; `input_shape` is the shape the
    /// forward pass consumed.
    pub fn apply_linear_transposed(&self, z: &Tensor, input_shape: Shape) -> Result<Tensor> {
        let out = match self {
            Layer::Conv { kernel, padding } => conv2d_transposed(z, kernel, *padding)?,
            Layer::MuxOut(spec) => t_muxout(z, spec)?,
            Layer::TMuxOut(spec) => muxout(z, spec)?,
            Layer::GlobalAvg => {
                if z.shape() != Shape::new(input_shape.features, 1, 1) {
                    return Err(Error::dim(format!(
                        "global_avg transpose got {}, expected {}x1x1",
                        z.shape(),
                        input_shape.features
                    )));
                }
                let inv = 1.0 / input_shape.plane_len() as f32;
                Tensor::from_fn(input_shape, |f, _, _| z.data()[f] * inv)
            }
            _ => {
                return Err(Error::UnsupportedLayer(format!(
                    "{} has no linear transpose",
                    self.kind()
                )))
            }
        };
        if out.shape() != input_shape {
            return Err(Error::dim(format!(
                "{} transpose produced {}, expected {}",
                self.kind(),
                out.shape(),
                input_shape
            )));
        }
        Ok(out)
    }

    pub(crate) fn apply_linear_wide(&self, x: &Wide) -> Result<Wide> {
        match self {
            Layer::Conv { kernel, padding } => conv2d_wide(x, kernel, *padding),
            Layer::MuxOut(spec) => muxout_wide(x, spec),
            Layer::TMuxOut(spec) => t_muxout_wide(x, spec),
            Layer::GlobalAvg => {
                let n = x.shape.plane_len() as f64;
                let data = (0..x.shape.features).map(|f| x.plane(f).iter().sum::<f64>() / n).collect();
                Ok(Wide {
                    shape: Shape::new(x.shape.features, 1, 1),
                    data,
                })
            }
            _ => Err(Error::UnsupportedLayer(format!("{} is not linear", self.kind()))),
        }
    }

    pub(crate) fn apply_linear_transposed_wide(&self, z: &Wide, input_shape: Shape) -> Result<Wide> {
        let out = match self {
            Layer::Conv { kernel, padding } => conv2d_transposed_wide(z, kernel, *padding)?,
            Layer::MuxOut(spec) => t_muxout_wide(z, spec)?,
            Layer::TMuxOut(spec) => muxout_wide(z, spec)?,
            Layer::GlobalAvg => {
                if z.shape != Shape::new(input_shape.features, 1, 1) {
                    return Err(Error::dim(format!(
                        "global_avg transpose got {}, expected {}x1x1",
                        z.shape, input_shape.features
                    )));
                }
                let inv = 1.0 / input_shape.plane_len() as f64;
                let mut out = Wide::zeros(input_shape);
                for f in 0..input_shape.features {
                    out.plane_mut(f).fill(z.data[f] * inv);
                }
                out
            }
            _ => {
                return Err(Error::UnsupportedLayer(format!(
                    "{} has no linear transpose",
                    self.kind()
                )))
            }
        };
        if out.shape != input_shape {
            return Err(Error::dim(format!(
                "{} transpose produced {}, expected {}",
                self.kind(),
                out.shape,
                input_shape
            )));
        }
        Ok(out)
    }
}

/// `sigma(y)` and its mask `Sigma(y) = sigma(y) / y` (1 at `y == 0`).
fn activate(layer: &Layer, x: Wide, record: bool) -> (Wide, Option<Tensor>) {
    let (bias, tanh) = match layer {
        Layer::Activ { bias } => (bias, false),
        Layer::TanhActiv { bias } => (bias, true),
        _ => unreachable!("activate called on a linear layer"),
    };
    let n = x.shape.plane_len();
    let mut mask = record.then(|| Tensor::zeros(x.shape));
    let mut out = x;
    for (f, &b) in bias.iter().enumerate() {
        for (i, v) in out.plane_mut(f).iter_mut().enumerate() {
            let y = *v + b as f64;
            let s = if tanh {
                y.tanh()
            } else if y > 0.0 {
                y
            } else {
                0.0
            };
            *v = s;
            if let Some(m) = mask.as_mut() {
                m.data_mut()[f * n + i] = if y == 0.0 {
                    1.0
                } else if tanh {
                    (s / y) as f32
                } else if y > 0.0 {
                    1.0
                } else {
                    0.0
                };
            }
        }
    }
    (out, mask)
}

/// Masks `m_n = Sigma(y_n)` recorded at every activation layer for one probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub input_shape: Shape,
    /// One entry per layer; `Some` exactly at activation layers.
    pub masks: Vec<Option<Tensor>>,
}

impl ActivationTrace {
    pub fn layer_count(&self) -> usize {
        self.masks.len()
    }

    pub fn recorded(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.masks.iter().enumerate().filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<Layer>,
    pub metadata: Metadata,
}

impl NetworkModel {
    pub fn new(name: impl Into<String>, input: InputSpec, layers: Vec<Layer>) -> Result<Self> {
        let model = NetworkModel {
            name: name.into(),
            input,
            layers,
            metadata: Metadata::default(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Shape inference on a representative input size.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::dim("network has no layers"));
        }
        for l in &self.layers {
            if let Layer::MuxOut(s) | Layer::TMuxOut(s) = l {
                s.validate()?;
            }
        }
        let d = self.input.divisor;
        self.infer_shapes(Shape::new(self.input.features(), 16 * d.m_y, 16 * d.m_x))
            .map(|_| ())
    }

    pub fn input_features(&self) -> usize {
        self.input.features()
    }

    /// Input shape of every layer followed by the final output shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(input);
        let mut s = input;
        for (i, l) in self.layers.iter().enumerate() {
            s = l
                .output_shape(s)
                .map_err(|e| Error::dim(format!("layer {i} ({}): {e}", l.kind())))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(*self.infer_shapes(input)?.last().unwrap())
    }

    /// Overall spatial factor from input to output, when it is an integer
    /// upscale.
    pub fn upscale_factors(&self) -> Result<Factors> {
        let d = self.input.divisor;
        let inp = Shape::new(self.input_features(), 16 * d.m_y, 16 * d.m_x);
        let out = self.output_shape(inp)?;
        if out.height % inp.height != 0 || out.width % inp.width != 0 {
            return Err(Error::dim(format!(
                "network maps {inp} to {out}, not an integer upscale"
            )));
        }
        Factors::new(out.width / inp.width, out.height / inp.height)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.features() != self.input_features() {
            return Err(Error::dim(format!(
                "network {} expects {} input features, got {}",
                self.name,
                self.input_features(),
                x.features()
            )));
        }
        let d = self.input.divisor;
        if !x.height().is_multiple_of(d.m_y) || !x.width().is_multiple_of(d.m_x) {
            return Err(Error::dim(format!(
                "input {}x{} not divisible by {}",
                x.height(),
                x.width(),
                d
            )));
        }
        Ok(())
    }

    fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if trace.layer_count() != self.layers.len() {
            return Err(Error::Trace(format!(
                "trace has {} layers, model has {}",
                trace.layer_count(),
                self.layers.len()
            )));
        }
        let shapes = self
            .infer_shapes(trace.input_shape)
            .map_err(|e| Error::Trace(e.to_string()))?;
        for (i, (l, m)) in self.layers.iter().zip(&trace.masks).enumerate() {
            match (l.is_activation(), m) {
                (true, Some(m)) if m.shape() == shapes[i + 1] => {}
                (false, None) => {}
                _ => {
                    return Err(Error::Trace(format!(
                        "mask for layer {i} ({}) does not match the model",
                        l.kind()
                    )))
                }
            }
        }
        Ok(())
    }

    /// Runs the network; with `record_trace` also returns the activation
    /// masks.
    pub fn forward(&self, x: &Tensor, record_trace: bool) -> Result<(Tensor, Option<ActivationTrace>)> {
        let mut masks = Vec::with_capacity(self.layers.len());
        let y = self.run_wide(x, |_, mask| masks.push(mask), record_trace)?;
        let trace = record_trace.then(|| ActivationTrace {
            input_shape: x.shape(),
            masks,
        });
        Ok((y.to_tensor(), trace))
    }

    /// Every intermediate value: `values[0] = x`, `values[k + 1]` is the output
    /// of layer `k`. The chain runs in `f64`; each stored value is rounded.
    pub fn forward_values(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        self.run_wide(x, |v, _| values.push(v.to_tensor()), false)?;
        Ok(values)
    }

    /// Layers in order on `f64` data, handing each output and mask to `visit`.
    fn run_wide(&self, x: &Tensor, mut visit: impl FnMut(&Wide, Option<Tensor>), record: bool) -> Result<Wide> {
        self.check_input(x)?;
        let mut v = Wide::from_tensor(x);
        for l in &self.layers {
            let mask;
            if l.is_activation() {
                l.output_shape(v.shape)?;
                (v, mask) = activate(l, v, record);
            } else {
                v = l.apply_linear_wide(&v)?;
                mask = None;
            }
            visit(&v, mask);
        }
        Ok(v)
    }

    /// The network with every activation replaced by multiplication with its
    /// recorded mask. Biases are added before masking when `include_bias` is
    /// set; without them the map is linear in `x`. Evaluated in `f64` and
    /// rounded once at the end.
    pub fn forward_masked(&self, trace: &ActivationTrace, x: &Tensor, include_bias: bool) -> Result<Tensor> {
        self.check_trace(trace)?;
        if x.shape() != trace.input_shape {
            return Err(Error::Trace(format!(
                "input {} does not match traced input {}",
                x.shape(),
                trace.input_shape
            )));
        }
        let mut v = Wide::from_tensor(x);
        for (l, m) in self.layers.iter().zip(&trace.masks) {
            v = match (l, m) {
                (Layer::Activ { bias } | Layer::TanhActiv { bias }, Some(m)) => {
                    let n = v.shape.plane_len();
                    let mut out = v;
                    for (f, &b) in bias.iter().enumerate() {
                        let b = if include_bias { b as f64 } else { 0.0 };
                        let mp = &m.data()[f * n..(f + 1) * n];
                        for (o, &g) in out.plane_mut(f).iter_mut().zip(mp) {
                            *o = g as f64 * (*o + b);
                        }
                    }
                    out
                }
                _ => l.apply_linear_wide(&v)?,
            };
        }
        Ok(v.to_tensor())
    }

    /// Exact adjoint of the bias-free masked network: layers in reverse, each
    /// linear layer transposed, each mask applied where its activation sat.
    pub fn transpose_masked(&self, trace: &ActivationTrace, z: &Tensor) -> Result<Tensor> {
        self.check_trace(trace)?;
        let shapes = self.infer_shapes(trace.input_shape)?;
        if z.shape() != *shapes.last().unwrap() {
            return Err(Error::dim(format!(
                "transpose input {} does not match network output {}",
                z.shape(),
                shapes.last().unwrap()
            )));
        }
        let mut v = Wide::from_tensor(z);
        for (i, (l, m)) in self.layers.iter().zip(&trace.masks).enumerate().rev() {
            v = match m {
                Some(m) => {
                    v.data.iter_mut().zip(m.data()).for_each(|(a, &g)| *a *= g as f64);
                    v
                }
                None => l.apply_linear_transposed_wide(&v, shapes[i])?,
            };
        }
        Ok(v.to_tensor())
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers.iter().filter_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers.iter_mut().filter_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Fan-in scaled Gaussian conv weights, `std = sqrt(2 / (in * kh * kw))`,
    /// zero biases. Deterministic per seed.
    pub fn init_params(&mut self, seed: u64) {
        let base = seeded_rng(seed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv { kernel, .. } => {
                    let fan_in = kernel.in_features() * kernel.kernel_h() * kernel.kernel_w();
                    let std = (2.0 / fan_in as f32).sqrt();
                    let mut rng = base.fork(i as u64);
                    for w in kernel.weights_mut() {
                        *w = std * rng.gaussian();
                    }
                }
                Layer::Activ { bias } | Layer::TanhActiv { bias } => bias.fill(0.0),
                _ => {}
            }
        }
        self.metadata.seed = Some(seed);
    }

    pub fn config(&self) -> ArchitectureConfig {
        ArchitectureConfig::from_model(self)
    }
}

pub fn init_params(mut model: NetworkModel, seed: u64) -> NetworkModel {
    model.init_params(seed);
    model
}
