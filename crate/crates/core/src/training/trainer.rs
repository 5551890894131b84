//! Training loop, logging records and checkpoints.
//!
//! Step `t` draws everything it needs from `seeded_rng(seed).split(t)`, so a
//! run resumed from a checkpoint repeats the uninterrupted run bit for bit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::backprop::grads_finite;
use super::data::{Patch, PatchDataset};
use super::loss::{clip_weights, sres_loss, wgan_losses, GanLossConfig, GanOutput, GanSample, Sample};
use super::metrics::SSIM_WINDOW;
use crate::error::{Error, Result};
use crate::netgraph::io::{decode_container, encode_container, HEADER_LEN};
use crate::netgraph::NetworkModel;
use crate::systems::{build_discriminator, System, SystemConfig};
use crate::tensor::{seeded_rng, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Maximize SSIM against the ground truth.
    Sres,
    /// WGAN critic plus downscale consistency.
    Hres,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    /// HR patch side.
    pub patch_size: usize,
    /// Defaults to 1e-3 for sres and 1e-4 for hres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Critic learning rate; defaults to the generator's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_lr: Option<f64>,
    /// Draw batches from a fixed pool of this many patches instead of fresh
    /// crops.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    #[serde(default)]
    pub gan: GanLossConfig,
}

impl TrainConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        TrainConfig {
            mode,
            seed,
            batch_size: 20,
            patch_size: 32,
            lr: None,
            disc_lr: None,
            pool_size: None,
            gan: GanLossConfig::default(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.mode {
            Mode::Sres => 1e-3,
            Mode::Hres => 1e-4,
        })
    }

    pub fn disc_lr(&self) -> f64 {
        self.disc_lr.unwrap_or_else(|| self.lr())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean over branches of the per-branch loss.
    pub loss: f64,
    pub branch_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gan: Option<GanRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanRecord {
    pub l_d: f64,
    pub l_g: f64,
    pub gp: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub consistency: f64,
}

impl From<&GanOutput> for GanRecord {
    fn from(o: &GanOutput) -> Self {
        GanRecord {
            l_d: o.l_d,
            l_g: o.l_g,
            gp: o.gp,
            d_real: o.d_real,
            d_fake: o.d_fake,
            consistency: o.consistency,
        }
    }
}

pub struct Critic {
    pub model: NetworkModel,
    pub adam: AdamState,
}

pub struct Trainer {
    pub system: System,
    pub config: TrainConfig,
    pub critic: Option<Critic>,
    adam: Vec<AdamState>,
    dataset: PatchDataset,
    pool: Option<Vec<Patch>>,
    step: u64,
}

const POOL_STREAM: u64 = u64::MAX;
const CRITIC_INIT_STREAM: u64 = u64::MAX - 1;

impl Trainer {
    /// Starts training `system` from its current parameters. In hres mode the
    /// critic is initialized from the seed and clipped.
    pub fn new(system: System, config: TrainConfig, dataset: PatchDataset) -> Result<Self> {
        let critic = match config.mode {
            Mode::Sres => None,
            Mode::Hres => {
                let mut model = build_discriminator(&system.config)?;
                model.init_params(rand::RngCore::next_u64(&mut seeded_rng(config.seed).fork(CRITIC_INIT_STREAM)));
                clip_weights(&mut model, config.gan.clip_bound);
                let adam = AdamState::for_model(&model, AdamConfig::with_lr(config.disc_lr()));
                Some(Critic { model, adam })
            }
        };
        let adam = system
            .branches
            .iter()
            .map(|b| AdamState::for_model(&b.model, AdamConfig::with_lr(config.lr())))
            .collect();
        Self::assemble(system, config, dataset, critic, adam, 0)
    }

    fn assemble(
        system: System,
        config: TrainConfig,
        dataset: PatchDataset,
        critic: Option<Critic>,
        adam: Vec<AdamState>,
        step: u64,
    ) -> Result<Self> {
        validate(&system, &config, &dataset)?;
        let pool = config
            .pool_size
            .map(|n| dataset.sample(n, &mut seeded_rng(config.seed).fork(POOL_STREAM)));
        Ok(Trainer {
            system,
            config,
            critic,
            adam,
            dataset,
            pool,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn dataset(&self) -> &PatchDataset {
        &self.dataset
    }

    pub fn adam_states(&self) -> &[AdamState] {
        &self.adam
    }

    fn batch(&self, rng: &mut SeededRng) -> Vec<Patch> {
        match &self.pool {
            Some(pool) => (0..self.config.batch_size)
                .map(|_| pool[rng.below(pool.len())].clone())
                .collect(),
            None => self.dataset.sample(self.config.batch_size, rng),
        }
    }

    /// Runs one optimization step and returns its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.step;
        let step_rng = seeded_rng(self.config.seed).split(t);
        let patches = self.batch(&mut step_rng.fork(0));
        let sys = &self.system;
        let mut noise = step_rng.fork(1);
        let mut inputs: Vec<Vec<Tensor>> = vec![Vec::new(); sys.branches.len()];
        let mut targets: Vec<Vec<Tensor>> = vec![Vec::new(); sys.branches.len()];
        let mut lrs: Vec<Vec<Tensor>> = vec![Vec::new(); sys.branches.len()];
        let mut reals = Vec::new();
        let adv_channels = sys.adversarial_channels();
        for p in &patches {
            let hr = sys.to_work(&p.hr)?;
            let lr = sys.to_work(&p.lr)?;
            for k in 0..sys.branches.len() {
                inputs[k].push(sys.branch_input(k, &lr, Some(&mut noise))?);
                targets[k].push(sys.branch_target(k, &hr)?);
                lrs[k].push(sys.select(&lr, &sys.branches[k].outputs)?);
            }
            if !adv_channels.is_empty() {
                reals.push(sys.select(&hr, &adv_channels)?);
            }
        }

        let mut branch_losses = vec![0.0; sys.branches.len()];
        let mut gan_record = None;
        let adversarial: Vec<usize> = match self.config.mode {
            Mode::Sres => vec![],
            Mode::Hres => (0..sys.branches.len()).filter(|&k| sys.branches[k].adversarial).collect(),
        };

        if let Some(critic) = self.critic.as_mut() {
            let gan_batch: Vec<GanSample> = (0..patches.len())
                .map(|i| GanSample {
                    inputs: adversarial.iter().map(|&k| inputs[k][i].clone()).collect(),
                    lr: adversarial.iter().map(|&k| lrs[k][i].clone()).collect(),
                    real: reals[i].clone(),
                })
                .collect();
            let gens: Vec<&NetworkModel> = adversarial.iter().map(|&k| &self.system.branches[k].model).collect();
            let cfg = self.config.gan;

            let before = wgan_losses(&gens, &critic.model, &gan_batch, &cfg, &mut step_rng.fork(2))?;
            check_finite(t, "critic", &[before.l_d, before.l_g, before.gp], &before.disc_grads)?;
            adam_step(critic.model.params_mut(), &before.disc_grads, &mut critic.adam)?;
            clip_weights(&mut critic.model, cfg.clip_bound);

            let after = wgan_losses(&gens, &critic.model, &gan_batch, &cfg, &mut step_rng.fork(3))?;
            for (j, &k) in adversarial.iter().enumerate() {
                check_finite(t, &self.system.branches[k].model.name, &[after.l_g], &after.gen_grads[j])?;
                branch_losses[k] = after.l_g;
            }
            for (j, &k) in adversarial.iter().enumerate() {
                let model = &mut self.system.branches[k].model;
                adam_step(model.params_mut(), &after.gen_grads[j], &mut self.adam[k])?;
            }
            gan_record = Some(GanRecord::from(&before));
        }

        for k in 0..self.system.branches.len() {
            if adversarial.contains(&k) {
                continue;
            }
            let batch: Vec<Sample> = inputs[k]
                .iter()
                .zip(&targets[k])
                .map(|(x, y)| Sample {
                    input: x.clone(),
                    target: y.clone(),
                })
                .collect();
            let model = &mut self.system.branches[k].model;
            let out = sres_loss(model, &batch)?;
            check_finite(t, &model.name, &[out.loss], &out.grads)?;
            adam_step(model.params_mut(), &out.grads, &mut self.adam[k])?;
            branch_losses[k] = out.loss;
        }

        self.step += 1;
        Ok(StepRecord {
            step: t,
            loss: branch_losses.iter().sum::<f64>() / branch_losses.len() as f64,
            branch_losses,
            gan: gan_record,
        })
    }

    /// Runs `steps` steps, handing each record to `on_record`.
    pub fn run(&mut self, steps: u64, mut on_record: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        for _ in 0..steps {
            let r = self.step()?;
            on_record(&r)?;
        }
        Ok(())
    }

    fn manifest(&self, role: Role, adam: &[&AdamState]) -> String {
        serde_json::to_string(&CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            role,
            system: self.system.config.clone(),
            training: self.config.clone(),
            step: self.step,
            adam: adam
                .iter()
                .map(|a| AdamMeta {
                    config: a.config,
                    step: a.step,
                })
                .collect(),
        })
        .expect("manifest serializes")
    }

    /// Generator checkpoint bytes: system parameters, then each branch's Adam
    /// moments.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut blob = self.system.flat_params();
        for a in &self.adam {
            blob.extend(a.moments_flat());
        }
        encode_container(&self.manifest(Role::Generator, &self.adam.iter().collect::<Vec<_>>()), &blob)
    }

    pub fn critic_checkpoint_bytes(&self) -> Option<Vec<u8>> {
        self.critic.as_ref().map(|c| {
            let mut blob = c.model.flat_params();
            blob.extend(c.adam.moments_flat());
            encode_container(&self.manifest(Role::Discriminator, &[&c.adam]), &blob)
        })
    }

    /// Writes `path` and, in hres mode, the critic to [`critic_path`].
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.checkpoint_bytes())?;
        if let Some(bytes) = self.critic_checkpoint_bytes() {
            std::fs::write(critic_path(path.as_ref()), bytes)?;
        }
        Ok(())
    }

    pub fn from_checkpoint_bytes(gen: &[u8], critic: Option<&[u8]>, dataset: PatchDataset) -> Result<Self> {
        let (m, blob, offset) = parse_checkpoint(gen, Role::Generator)?;
        let mut system = crate::systems::build_system(&m.system).map_err(|e| Error::format(HEADER_LEN, e.to_string()))?;
        let mut at = system.load_flat_params(&blob).map_err(|e| Error::format(offset, e.to_string()))?;
        if m.adam.len() != system.branches.len() {
            return Err(Error::format(HEADER_LEN, "Adam state count does not match the branches"));
        }
        let mut adam = Vec::new();
        for (b, meta) in system.branches.iter().zip(&m.adam) {
            let mut a = AdamState::for_model(&b.model, meta.config);
            a.step = meta.step;
            at += a
                .load_moments(&blob[at..])
                .map_err(|e| Error::format(offset + 4 * at as u64, e.to_string()))?;
            adam.push(a);
        }
        if at != blob.len() {
            return Err(Error::format(offset + 4 * at as u64, "trailing data after checkpoint blob"));
        }
        let critic = match (m.training.mode, critic) {
            (Mode::Sres, _) => None,
            (Mode::Hres, None) => return Err(Error::Data("hres checkpoint needs its critic file".into())),
            (Mode::Hres, Some(bytes)) => {
                let (cm, cblob, coffset) = parse_checkpoint(bytes, Role::Discriminator)?;
                if cm.step != m.step || cm.system != m.system {
                    return Err(Error::Data("critic checkpoint does not belong to this generator".into()));
                }
                let mut model = build_discriminator(&cm.system)?;
                let n = model.load_flat_params(&cblob).map_err(|e| Error::format(coffset, e.to_string()))?;
                let meta = cm.adam.first().ok_or_else(|| Error::format(HEADER_LEN, "missing critic Adam state"))?;
                let mut a = AdamState::for_model(&model, meta.config);
                a.step = meta.step;
                a.load_moments(&cblob[n..])
                    .map_err(|e| Error::format(coffset + 4 * n as u64, e.to_string()))?;
                Some(Critic { model, adam: a })
            }
        };
        Self::assemble(system, m.training, dataset, critic, adam, m.step)
    }

    pub fn resume(path: impl AsRef<Path>, dataset: PatchDataset) -> Result<Self> {
        let gen = std::fs::read(path.as_ref())?;
        let cpath = critic_path(path.as_ref());
        let critic = if cpath.exists() { Some(std::fs::read(cpath)?) } else { None };
        Self::from_checkpoint_bytes(&gen, critic.as_deref(), dataset)
    }
}

fn validate(system: &System, config: &TrainConfig, dataset: &PatchDataset) -> Result<()> {
    let bad = |path: &str, message: String| Error::Config {
        path: path.into(),
        message,
    };
    config.gan.validate()?;
    if config.batch_size == 0 {
        return Err(bad("batch_size", "must be >= 1".into()));
    }
    if dataset.factors() != system.factor() {
        return Err(bad(
            "factor",
            format!("dataset factor {} differs from system factor {}", dataset.factors(), system.factor()),
        ));
    }
    let p = config.patch_size;
    if dataset.patch_size() != p {
        return Err(bad("patch_size", format!("dataset patches are {}, config says {p}", dataset.patch_size())));
    }
    for b in &system.branches {
        let adversarial = config.mode == Mode::Hres && b.adversarial;
        if adversarial {
            let lr = p / system.factor().m_x.max(system.factor().m_y);
            if config.gan.delta == super::loss::DeltaMetric::OneMinusSsim && lr < SSIM_WINDOW {
                return Err(bad(
                    "patch_size",
                    format!("LR patch {lr} is smaller than the SSIM window"),
                ));
            }
        } else {
            let side = p / b.post.m_x.max(b.post.m_y);
            if side < SSIM_WINDOW {
                return Err(bad(
                    "patch_size",
                    format!("branch {} trains on {side}px targets, below the SSIM window", b.model.name),
                ));
            }
        }
    }
    Ok(())
}

fn check_finite(step: u64, what: &str, values: &[f64], grads: &[Vec<f32>]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) && grads_finite(grads) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss or gradient for {what} at step {step}")))
    }
}

/// Where the critic of checkpoint `path` lives.
pub fn critic_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".disc");
    PathBuf::from(s)
}

const CHECKPOINT_FORMAT: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Generator,
    Discriminator,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    role: Role,
    system: SystemConfig,
    training: TrainConfig,
    step: u64,
    adam: Vec<AdamMeta>,
}

fn parse_checkpoint(bytes: &[u8], role: Role) -> Result<(CheckpointManifest, Vec<f32>, u64)> {
    let c = decode_container(bytes)?;
    let m: CheckpointManifest = serde_json::from_str(&c.manifest)
        .map_err(|e| Error::format(HEADER_LEN, format!("bad checkpoint manifest: {e}")))?;
    if m.format != CHECKPOINT_FORMAT || m.role != role {
        return Err(Error::format(
            HEADER_LEN,
            format!("expected a {role:?} checkpoint, found {} / {:?}", m.format, m.role),
        ));
    }
    Ok((m, c.blob, c.blob_offset))
}

/// Reads a system from a system file or a generator checkpoint.
pub fn read_system(path: impl AsRef<Path>) -> Result<System> {
    let bytes = std::fs::read(path)?;
    let c = decode_container(&bytes)?;
    let kind: serde_json::Value = serde_json::from_str(&c.manifest)
        .map_err(|e| Error::format(HEADER_LEN, format!("bad manifest: {e}")))?;
    match kind.get("format").and_then(|f| f.as_str()) {
        Some(CHECKPOINT_FORMAT) => {
            let (m, blob, offset) = parse_checkpoint(&bytes, Role::Generator)?;
            let mut system =
                crate::systems::build_system(&m.system).map_err(|e| Error::format(HEADER_LEN, e.to_string()))?;
            system
                .load_flat_params(&blob)
                .map_err(|e| Error::format(offset, e.to_string()))?;
            Ok(system)
        }
        _ => System::from_bytes(&bytes),
    }
}
