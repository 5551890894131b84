//! SRes and WGAN losses with their gradients.

use serde::{Deserialize, Serialize};

use super::backprop::{backward, GradAccumulator, GradientTape};
use super::metrics::{mse_grad, ssim_grad};
use crate::error::{Error, Result};
use crate::netgraph::NetworkModel;
use crate::resample::{area_downscale, area_downscale_adjoint};
use crate::sampling::Factors;
use crate::tensor::{SeededRng, Tensor};

/// One network input with the image it should produce.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
}

/// `-mean SSIM(G(input), target)` over the batch.
pub fn sres_loss(model: &NetworkModel, batch: &[Sample]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut acc = GradAccumulator::for_model(model);
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f64;
    for s in batch {
        let tape = GradientTape::record(model, &s.input)?;
        let (v, g) = ssim_grad(tape.output(), &s.target)?;
        total += v;
        let grads = backward(model, &tape, &g.scale(-1.0))?;
        acc.add(&grads.params, w)?;
    }
    Ok(LossOutput {
        loss: -total * w,
        grads: acc.finish(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMetric {
    #[default]
    Mse,
    OneMinusSsim,
}

impl DeltaMetric {
    /// `Delta(x, y)` and its gradient with respect to `y`.
    pub fn eval_grad(&self, x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            DeltaMetric::Mse => mse_grad(y, x),
            DeltaMetric::OneMinusSsim => {
                let (s, g) = ssim_grad(y, x)?;
                Ok((1.0 - s, g.scale(-1.0)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossConfig {
    pub lambda_gp: f64,
    pub lambda_down: f64,
    pub delta: DeltaMetric,
    pub clip_bound: f32,
}

impl Default for GanLossConfig {
    fn default() -> Self {
        GanLossConfig {
            lambda_gp: 10.0,
            lambda_down: 100.0,
            delta: DeltaMetric::Mse,
            clip_bound: 0.01,
        }
    }
}

impl GanLossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Error::Config {
            path: path.into(),
            message: message.into(),
        };
        if !(self.lambda_down >= 0.0) {
            return Err(bad("lambda_down", "must be >= 0"));
        }
        if !(self.lambda_gp >= 0.0) {
            return Err(bad("lambda_gp", "must be >= 0"));
        }
        if !(self.clip_bound > 0.0) {
            return Err(bad("clip_bound", "must be > 0"));
        }
        Ok(())
    }
}

/// One training image for the adversarial path. The generators' outputs are
/// concatenated along features to form the critic input.
#[derive(Clone, Debug, PartialEq)]
pub struct GanSample {
    /// Input of each generator, noise included.
    pub inputs: Vec<Tensor>,
    /// The low-resolution image each generator should reproduce after
    /// downscaling, `x̆`.
    pub lr: Vec<Tensor>,
    /// Real high-resolution image.
    pub real: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanOutput {
    pub l_d: f64,
    pub l_g: f64,
    /// `E[(|grad D(x_hat)| - 1)^2]`, without `lambda_gp`.
    pub gp: f64,
    pub d_real: f64,
    pub d_fake: f64,
    /// `E[Delta(x̆, s_down(G(x̆)))]` summed over generators.
    pub consistency: f64,
    /// Gradient of `E[D(fake)] - E[D(real)]`.
    pub disc_grads: Vec<Vec<f32>>,
    /// Gradient of `L_G`, per generator.
    pub gen_grads: Vec<Vec<Vec<f32>>>,
}

fn critic(disc: &NetworkModel, x: &Tensor) -> Result<(f64, GradientTape)> {
    let tape = GradientTape::record(disc, x)?;
    if tape.output().shape().len() != 1 {
        return Err(Error::dim(format!("critic output {} is not a scalar", tape.output().shape())));
    }
    Ok((tape.output().data()[0] as f64, tape))
}

fn scalar_grad(tape: &GradientTape, v: f32) -> Tensor {
    Tensor::full(tape.output().shape(), v)
}

/// `dD/dx` at `x`.
pub fn critic_input_grad(disc: &NetworkModel, x: &Tensor) -> Result<Tensor> {
    let (_, tape) = critic(disc, x)?;
    Ok(backward(disc, &tape, &scalar_grad(&tape, 1.0))?.input)
}

/// Loss values `L_D`, `L_G` with gradient-penalty value, critic gradients of
/// the weight-clipped objective and generator gradients of `L_G`.
/// `x_hat = eps x + (1 - eps) x_fake` with `eps ~ U[0, 1]` per sample.
pub fn wgan_losses(
    gens: &[&NetworkModel],
    disc: &NetworkModel,
    batch: &[GanSample],
    cfg: &GanLossConfig,
    rng: &mut SeededRng,
) -> Result<GanOutput> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let b = batch.len() as f64;
    let w = 1.0 / b;
    let mut disc_acc = GradAccumulator::for_model(disc);
    let mut gen_acc: Vec<GradAccumulator> = gens.iter().map(|g| GradAccumulator::for_model(g)).collect();
    let (mut d_real, mut d_fake, mut gp, mut consistency) = (0.0, 0.0, 0.0, 0.0);

    for s in batch {
        if s.inputs.len() != gens.len() || s.lr.len() != gens.len() {
            return Err(Error::dim("sample does not match the generator count"));
        }
        let tapes = gens
            .iter()
            .zip(&s.inputs)
            .map(|(g, x)| GradientTape::record(g, x))
            .collect::<Result<Vec<_>>>()?;
        let outs: Vec<&Tensor> = tapes.iter().map(GradientTape::output).collect();
        let fake = Tensor::concat(&outs)?;
        if fake.shape() != s.real.shape() {
            return Err(Error::dim(format!("generated {} but real is {}", fake.shape(), s.real.shape())));
        }

        let (dr, tape_r) = critic(disc, &s.real)?;
        let (df, tape_f) = critic(disc, &fake)?;
        d_real += dr;
        d_fake += df;
        disc_acc.add(&backward(disc, &tape_r, &scalar_grad(&tape_r, -1.0))?.params, w)?;
        let through_fake = backward(disc, &tape_f, &scalar_grad(&tape_f, 1.0))?;
        disc_acc.add(&through_fake.params, w)?;

        let eps = rng.uniform(0.0, 1.0);
        let x_hat = s.real.scale(eps).add(&fake.scale(1.0 - eps))?;
        let gx = critic_input_grad(disc, &x_hat)?;
        let norm = gx.dot(&gx)?.sqrt();
        gp += (norm - 1.0).powi(2);

        // -D(fake) flows back through the critic into each generator output.
        let adv = through_fake.input.scale(-1.0);
        let mut start = 0;
        for (k, (g, tape)) in gens.iter().zip(&tapes).enumerate() {
            let out = tape.output();
            let end = start + out.features();
            let mut grad = adv.select_features(start, end)?;
            start = end;
            let f = down_factors(out, &s.lr[k])?;
            let down = area_downscale(out, f)?;
            let (delta, d_down) = cfg.delta.eval_grad(&s.lr[k], &down)?;
            consistency += delta;
            grad.add_assign(&area_downscale_adjoint(&d_down, f).scale(cfg.lambda_down as f32))?;
            gen_acc[k].add(&backward(g, tape, &grad)?.params, w)?;
        }
    }
    let (d_real, d_fake, gp, consistency) = (d_real * w, d_fake * w, gp * w, consistency * w);
    Ok(GanOutput {
        l_d: d_fake - d_real + cfg.lambda_gp * gp,
        l_g: -d_fake + cfg.lambda_down * consistency,
        gp,
        d_real,
        d_fake,
        consistency,
        disc_grads: disc_acc.finish(),
        gen_grads: gen_acc.into_iter().map(GradAccumulator::finish).collect(),
    })
}

fn down_factors(hr: &Tensor, lr: &Tensor) -> Result<Factors> {
    if hr.features() != lr.features() || !hr.height().is_multiple_of(lr.height()) || !hr.width().is_multiple_of(lr.width()) {
        return Err(Error::dim(format!("{} is not an integer upscale of {}", hr.shape(), lr.shape())));
    }
    Factors::new(hr.width() / lr.width(), hr.height() / lr.height())
}

/// Clamps every critic parameter to `[-bound, bound]`.
pub fn clip_weights(model: &mut NetworkModel, bound: f32) {
    for p in model.params_mut() {
        p.iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
    }
}
