//! Reverse-mode gradients for the layer set.

use crate::error::{Error, Result};
use crate::netgraph::{Layer, NetworkModel};
use crate::tensor::conv::conv2d_transposed_wide;
use crate::tensor::{conv2d_kernel_grad, Tensor, Wide};

/// Forward values kept for one backward pass: `values[0]` is the input,
/// `values[k + 1]` the output of layer `k`.
#[derive(Clone, Debug)]
pub struct GradientTape {
    values: Vec<Tensor>,
}

impl GradientTape {
    pub fn record(model: &NetworkModel, x: &Tensor) -> Result<Self> {
        Ok(GradientTape {
            values: model.forward_values(x)?,
        })
    }

    pub fn input(&self) -> &Tensor {
        &self.values[0]
    }

    pub fn output(&self) -> &Tensor {
        self.values.last().unwrap()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

/// Gradients of a scalar loss. `params` is aligned with
/// [`NetworkModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f32>>,
    pub input: Tensor,
}

pub fn backward(model: &NetworkModel, tape: &GradientTape, output_grad: &Tensor) -> Result<Gradients> {
    let values = &tape.values;
    if values.len() != model.layers.len() + 1 {
        return Err(Error::Trace(format!(
            "tape has {} values, model has {} layers",
            values.len(),
            model.layers.len()
        )));
    }
    for (k, l) in model.layers.iter().enumerate() {
        if l.output_shape(values[k].shape()).ok() != Some(values[k + 1].shape()) {
            return Err(Error::Trace(format!("tape value {} does not match layer {k} ({})", k + 1, l.kind())));
        }
    }
    if output_grad.shape() != tape.output().shape() {
        return Err(Error::dim(format!(
            "output gradient {} does not match output {}",
            output_grad.shape(),
            tape.output().shape()
        )));
    }

    // the gradient chain runs in f64 like the forward pass
    let mut params = Vec::new();
    let mut g = Wide::from_tensor(output_grad);
    for (k, l) in model.layers.iter().enumerate().rev() {
        let x = &values[k];
        g = match l {
            Layer::Conv { kernel, padding } => {
                let kg = conv2d_kernel_grad(x, &g.to_tensor(), kernel.kernel_h(), kernel.kernel_w(), *padding)?;
                params.push(kg.weights().to_vec());
                conv2d_transposed_wide(&g, kernel, *padding)?
            }
            Layer::Activ { .. } | Layer::TanhActiv { .. } => {
                let tanh = matches!(l, Layer::TanhActiv { .. });
                let y = &values[k + 1];
                let mut bias_grad = vec![0.0f32; y.features()];
                let mut gy = g;
                for (f, bg) in bias_grad.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for (v, &s) in gy.plane_mut(f).iter_mut().zip(y.plane(f)) {
                        // ReLU output is positive exactly where the unit is on.
                        let s = s as f64;
                        let d = if tanh { 1.0 - s * s } else if s > 0.0 { 1.0 } else { 0.0 };
                        *v *= d;
                        acc += *v;
                    }
                    *bg = acc as f32;
                }
                params.push(bias_grad);
                gy
            }
            Layer::MuxOut(_) | Layer::TMuxOut(_) | Layer::GlobalAvg => l.apply_linear_transposed_wide(&g, x.shape())?,
        };
    }
    params.reverse();
    Ok(Gradients {
        params,
        input: g.to_tensor(),
    })
}

/// Sums per-sample parameter gradients in `f64`, in call order.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn for_model(model: &NetworkModel) -> Self {
        GradAccumulator {
            sums: model.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add(&mut self, grads: &[Vec<f32>], weight: f64) -> Result<()> {
        if grads.len() != self.sums.len() || grads.iter().zip(&self.sums).any(|(g, s)| g.len() != s.len()) {
            return Err(Error::dim("gradient layout does not match accumulator"));
        }
        for (s, g) in self.sums.iter_mut().zip(grads) {
            for (a, &v) in s.iter_mut().zip(g) {
                *a += weight * v as f64;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<Vec<f32>> {
        self.sums
            .into_iter()
            .map(|s| s.into_iter().map(|v| v as f32).collect())
            .collect()
    }
}

pub fn grads_finite(grads: &[Vec<f32>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}
