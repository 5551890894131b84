//! The three colour architectures and the critic, assembled from a JSON
//! configuration.
//!
//! Generator layout for stages `s_1..s_K` with `F` features and depth `d`:
//! `conv(in -> F), relu`, then per stage `conv(F -> F), MuxOut(g_in = F / M,
//! g_out = M), relu` followed by `d - 1` blocks of `conv(F -> F), relu`, and a
//! final `conv(F -> out)`. A generator without stages has one stage body with
//! no MuxOut.
//!
//! The critic mirrors it with T-MuxOut in place of MuxOut, stages in reverse,
//! then `conv(F -> 1)`, global average and tanh.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::io::{decode_container, encode_container};
use crate::netgraph::{InputSpec, Layer, NetworkModel};
use crate::resample::{area_downscale, bicubic_upscale, rgb_to_ycbcr, ycbcr_to_rgb};
use crate::sampling::{Factors, MuxOutSpec};
use crate::tensor::{gaussian_fill, seeded_rng, ConvKernel, Padding, SeededRng, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// YCbCr plus noise in, luminance out; chroma by bicubic.
    LowColor,
    /// One network per RGB channel.
    HighColor,
    /// Luminance network at the full factor, chroma network one stage short
    /// followed by bicubic.
    ChromaSub,
}

/// Overrides for one path; unset fields fall back to the system values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_depth: Option<usize>,
}

fn default_features() -> usize {
    64
}

fn default_depth() -> usize {
    3
}

fn default_noise() -> usize {
    1
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub variant: Variant,
    /// Total factor `[m_x, m_y]`.
    pub factor: Factors,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_depth")]
    pub stage_depth: usize,
    #[serde(default = "default_noise")]
    pub noise_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Per-stage MuxOut factors; derived from `factor` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Factors>>,
    #[serde(default)]
    pub luminance: PathSpec,
    #[serde(default)]
    pub chroma: PathSpec,
    #[serde(default)]
    pub discriminator: PathSpec,
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

/// Splits a factor into stages, smallest primes first, pairing the axes.
pub fn default_stages(f: Factors) -> Vec<Factors> {
    let xs = prime_factors(f.m_x);
    let ys = prime_factors(f.m_y);
    (0..xs.len().max(ys.len()))
        .map(|i| Factors {
            m_x: xs.get(i).copied().unwrap_or(1),
            m_y: ys.get(i).copied().unwrap_or(1),
        })
        .collect()
}

impl SystemConfig {
    pub fn new(variant: Variant, factor: Factors) -> Self {
        SystemConfig {
            variant,
            factor,
            features: default_features(),
            stage_depth: default_depth(),
            noise_channels: default_noise(),
            kernel_size: default_kernel(),
            stages: None,
            luminance: PathSpec::default(),
            chroma: PathSpec::default(),
            discriminator: PathSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: SystemConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage_list(&self) -> Vec<Factors> {
        self.stages.clone().unwrap_or_else(|| default_stages(self.factor))
    }

    fn bad(path: &str, message: impl Into<String>) -> Error {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stage_list();
        let product = stages.iter().fold(Factors::unit(), |a, &s| a.mul(s));
        if product != self.factor {
            return Err(Self::bad(
                "stages",
                format!("stage product {product} does not equal factor {}", self.factor),
            ));
        }
        if stages.iter().any(|s| s.is_unit()) {
            return Err(Self::bad("stages", "a stage has factor 1x1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Self::bad("kernel_size", "must be odd"));
        }
        if self.variant == Variant::ChromaSub && stages.is_empty() {
            return Err(Self::bad("factor", "chroma_sub needs a factor with at least one stage"));
        }
        for (path, spec) in [
            ("luminance", &self.luminance),
            ("chroma", &self.chroma),
            ("discriminator", &self.discriminator),
        ] {
            let f = spec.features.unwrap_or(self.features);
            let d = spec.stage_depth.unwrap_or(self.stage_depth);
            if f == 0 || d == 0 {
                return Err(Self::bad(path, "features and stage_depth must be >= 1"));
            }
            if let Some(s) = stages.iter().find(|s| f % s.count() != 0) {
                return Err(Self::bad(
                    path,
                    format!("{f} features not divisible by stage {s} ({} grids)", s.count()),
                ));
            }
        }
        Ok(())
    }

    fn path(&self, spec: &PathSpec) -> (usize, usize) {
        (
            spec.features.unwrap_or(self.features),
            spec.stage_depth.unwrap_or(self.stage_depth),
        )
    }
}

fn conv(out: usize, inp: usize, k: usize) -> Result<Layer> {
    Ok(Layer::Conv {
        kernel: ConvKernel::zeros(out, inp, k, k)?,
        padding: Padding::Same,
    })
}

/// Generator as described in the module docs; parameters are zero.
pub fn build_generator(
    name: &str,
    input: InputSpec,
    out_features: usize,
    stages: &[Factors],
    features: usize,
    depth: usize,
    kernel: usize,
) -> Result<NetworkModel> {
    let f = features;
    let mut layers = vec![conv(f, input.features(), kernel)?, Layer::relu(f)];
    let bodies: Vec<Option<Factors>> = if stages.is_empty() {
        vec![None]
    } else {
        stages.iter().copied().map(Some).collect()
    };
    for stage in bodies {
        layers.push(conv(f, f, kernel)?);
        if let Some(s) = stage {
            layers.push(Layer::MuxOut(MuxOutSpec::circular(s, f / s.count(), s.count())?));
        }
        layers.push(Layer::relu(f));
        for _ in 1..depth {
            layers.push(conv(f, f, kernel)?);
            layers.push(Layer::relu(f));
        }
    }
    layers.push(conv(out_features, f, kernel)?);
    NetworkModel::new(name, input, layers)
}

/// Critic mirroring a generator with `stages`; parameters are zero.
pub fn build_critic(in_features: usize, stages: &[Factors], features: usize, depth: usize, kernel: usize) -> Result<NetworkModel> {
    let f = features;
    let divisor = stages.iter().fold(Factors::unit(), |a, &s| a.mul(s));
    let mut layers = vec![conv(f, in_features, kernel)?, Layer::relu(f)];
    for &s in stages.iter().rev() {
        layers.push(conv(f, f, kernel)?);
        layers.push(Layer::TMuxOut(MuxOutSpec::circular(s, f / s.count(), s.count())?));
        layers.push(Layer::relu(f));
        for _ in 1..depth {
            layers.push(conv(f, f, kernel)?);
            layers.push(Layer::relu(f));
        }
    }
    layers.push(conv(1, f, kernel)?);
    layers.push(Layer::GlobalAvg);
    layers.push(Layer::tanh(1));
    let mut input = InputSpec::new(in_features, 0);
    input.divisor = divisor;
    NetworkModel::new("discriminator", input, layers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// A network of the system with the working-space channels it reads and
/// writes. Its output is bicubic-upscaled by `post` before use.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub model: NetworkModel,
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    pub post: Factors,
    /// Trained against the critic in hres mode.
    pub adversarial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct System {
    pub config: SystemConfig,
    pub space: ColorSpace,
    pub branches: Vec<Branch>,
    /// Working-space channels produced by plain bicubic.
    pub bicubic_channels: Vec<usize>,
}

/// Zero-parameter system for `cfg`.
pub fn build_system(cfg: &SystemConfig) -> Result<System> {
    cfg.validate()?;
    let stages = cfg.stage_list();
    let k = cfg.kernel_size;
    let noise = cfg.noise_channels;
    let (lf, ld) = cfg.path(&cfg.luminance);
    let (cf, cd) = cfg.path(&cfg.chroma);
    let full = |name: &str, inputs: Vec<usize>, outputs: Vec<usize>| -> Result<Branch> {
        let model = build_generator(name, InputSpec::new(inputs.len(), noise), outputs.len(), &stages, lf, ld, k)?;
        Ok(Branch {
            model,
            inputs,
            outputs,
            post: Factors::unit(),
            adversarial: true,
        })
    };
    let (space, branches, bicubic_channels) = match cfg.variant {
        Variant::LowColor => (ColorSpace::YCbCr, vec![full("luminance", vec![0, 1, 2], vec![0])?], vec![1, 2]),
        Variant::HighColor => (
            ColorSpace::Rgb,
            vec![
                full("red", vec![0], vec![0])?,
                full("green", vec![1], vec![1])?,
                full("blue", vec![2], vec![2])?,
            ],
            vec![],
        ),
        Variant::ChromaSub => {
            let (last, rest) = stages.split_last().expect("validated non-empty");
            let chroma = build_generator("chroma", InputSpec::new(2, noise), 2, rest, cf, cd, k)?;
            (
                ColorSpace::YCbCr,
                vec![
                    full("luminance", vec![0], vec![0])?,
                    Branch {
                        model: chroma,
                        inputs: vec![1, 2],
                        outputs: vec![1, 2],
                        post: *last,
                        adversarial: false,
                    },
                ],
                vec![],
            )
        }
    };
    Ok(System {
        config: cfg.clone(),
        space,
        branches,
        bicubic_channels,
    })
}

/// Critic for the adversarial branches of `cfg`, with clipped initial
/// weights.
pub fn build_discriminator(cfg: &SystemConfig) -> Result<NetworkModel> {
    let system = build_system(cfg)?;
    let (f, d) = cfg.path(&cfg.discriminator);
    build_critic(system.adversarial_channels().len(), &cfg.stage_list(), f, d, cfg.kernel_size)
}

fn select_channels(x: &Tensor, channels: &[usize]) -> Result<Tensor> {
    let parts = channels
        .iter()
        .map(|&c| x.select_features(c, c + 1))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

impl System {
    pub fn factor(&self) -> Factors {
        self.config.factor
    }

    /// Seeds every branch from its own stream of `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let base = seeded_rng(seed);
        for (k, b) in self.branches.iter_mut().enumerate() {
            let mut s = base.fork(k as u64);
            b.model.init_params(rand::RngCore::next_u64(&mut s));
        }
    }

    pub fn to_work(&self, rgb: &Tensor) -> Result<Tensor> {
        match self.space {
            ColorSpace::Rgb => Ok(rgb.clone()),
            ColorSpace::YCbCr => rgb_to_ycbcr(rgb),
        }
    }

    pub fn from_work(&self, work: &Tensor) -> Result<Tensor> {
        match self.space {
            ColorSpace::Rgb => Ok(work.clone()),
            ColorSpace::YCbCr => ycbcr_to_rgb(work),
        }
    }

    /// Working-space channels seen by the critic, in branch order.
    pub fn adversarial_channels(&self) -> Vec<usize> {
        self.branches
            .iter()
            .filter(|b| b.adversarial)
            .flat_map(|b| b.outputs.iter().copied())
            .collect()
    }

    /// Network input of branch `k`: its channels of the LR working image plus
    /// N(0, 1) noise planes, or zero planes without a generator.
    pub fn branch_input(&self, k: usize, lr_work: &Tensor, noise: Option<&mut SeededRng>) -> Result<Tensor> {
        let b = &self.branches[k];
        let colors = select_channels(lr_work, &b.inputs)?;
        let n = b.model.input.noise_channels;
        if n == 0 {
            return Ok(colors);
        }
        let mut planes = Tensor::zeros(Shape::new(n, lr_work.height(), lr_work.width()));
        if let Some(rng) = noise {
            gaussian_fill(&mut planes, 0.0, 1.0, rng);
        }
        Tensor::concat(&[&colors, &planes])
    }

    /// What branch `k` should output for a HR working image.
    pub fn branch_target(&self, k: usize, hr_work: &Tensor) -> Result<Tensor> {
        let b = &self.branches[k];
        area_downscale(&select_channels(hr_work, &b.outputs)?, b.post)
    }

    pub fn select(&self, x: &Tensor, channels: &[usize]) -> Result<Tensor> {
        select_channels(x, channels)
    }

    /// Upscales an RGB image. Branch `k` draws its noise from stream `k` of
    /// `noise`; `None` feeds zero noise.
    pub fn upscale(&self, rgb: &Tensor, noise: Option<&SeededRng>) -> Result<Tensor> {
        if rgb.features() != 3 {
            return Err(Error::dim(format!("expected an RGB image, got {} channels", rgb.features())));
        }
        let work = self.to_work(rgb)?;
        let f = self.factor();
        let mut out = Tensor::zeros(f.up_shape(work.shape()));
        let n = out.shape().plane_len();
        for (k, b) in self.branches.iter().enumerate() {
            let mut rng = noise.map(|r| r.fork(k as u64));
            let x = self.branch_input(k, &work, rng.as_mut())?;
            let (mut y, _) = b.model.forward(&x, false)?;
            if !b.post.is_unit() {
                y = bicubic_upscale(&y, b.post);
            }
            if y.shape() != out.shape().with_features(b.outputs.len()) {
                return Err(Error::dim(format!("branch {} produced {}", b.model.name, y.shape())));
            }
            for (i, &c) in b.outputs.iter().enumerate() {
                out.data_mut()[c * n..(c + 1) * n].copy_from_slice(y.plane(i));
            }
        }
        for &c in &self.bicubic_channels {
            let up = bicubic_upscale(&work.select_features(c, c + 1)?, f);
            out.data_mut()[c * n..(c + 1) * n].copy_from_slice(up.plane(0));
        }
        self.from_work(&out)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(|b| b.model.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.branches.iter().flat_map(|b| b.model.flat_params()).collect()
    }

    pub fn load_flat_params(&mut self, blob: &[f32]) -> Result<usize> {
        let mut at = 0;
        for b in &mut self.branches {
            at += b.model.load_flat_params(&blob[at..])?;
        }
        Ok(at)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_string(&SystemManifest {
            format: SYSTEM_FORMAT.into(),
            system: self.config.clone(),
        })
        .expect("manifest serializes");
        encode_container(&manifest, &self.flat_params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = decode_container(bytes)?;
        let m: SystemManifest =
            serde_json::from_str(&c.manifest).map_err(|e| Error::format(16, format!("bad manifest: {e}")))?;
        if m.format != SYSTEM_FORMAT {
            return Err(Error::format(16, format!("expected a system file, found {:?}", m.format)));
        }
        let mut system = build_system(&m.system).map_err(|e| Error::format(16, e.to_string()))?;
        if c.blob.len() != system.param_count() {
            return Err(Error::format(
                c.blob_offset,
                format!("expected {} parameters, found {}", system.param_count(), c.blob.len()),
            ));
        }
        system.load_flat_params(&c.blob)?;
        Ok(system)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

const SYSTEM_FORMAT: &str = "system";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemManifest {
    format: String,
    system: SystemConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform_fill;

    fn small(variant: Variant, f: usize) -> SystemConfig {
        SystemConfig {
            features: 8,
            stage_depth: 2,
            ..SystemConfig::new(variant, Factors::square(f))
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(3, h, w));
        uniform_fill(&mut t, 0.0, 1.0, &mut seeded_rng(seed));
        t
    }

    #[test]
    fn stage_decomposition() {
        assert_eq!(default_stages(Factors::square(4)), vec![Factors::square(2); 2]);
        assert_eq!(
            default_stages(Factors::new(4, 3).unwrap()),
            vec![Factors::new(2, 3).unwrap(), Factors::new(2, 1).unwrap()]
        );
        assert!(default_stages(Factors::unit()).is_empty());
    }

    #[test]
    fn chroma_sub_four_has_two_by_two_chroma_and_bicubic() {
        let s = build_system(&small(Variant::ChromaSub, 4)).unwrap();
        assert_eq!(s.branches.len(), 2);
        let chroma = &s.branches[1];
        assert_eq!(chroma.model.upscale_factors().unwrap(), Factors::square(2));
        assert_eq!(chroma.post, Factors::square(2));
        assert_eq!(s.branches[0].model.upscale_factors().unwrap(), Factors::square(4));
        assert!(!chroma.adversarial);
    }

    #[test]
    fn low_color_has_one_network() {
        let s = build_system(&small(Variant::LowColor, 2)).unwrap();
        assert_eq!(s.branches.len(), 1);
        assert_eq!(s.branches[0].model.input_features(), 4);
        assert_eq!(s.bicubic_channels, vec![1, 2]);
        assert_eq!(build_system(&small(Variant::HighColor, 2)).unwrap().branches.len(), 3);
    }

    #[test]
    fn output_sizes_agree_across_variants() {
        let img = image(6, 5, 1);
        for v in [Variant::LowColor, Variant::HighColor, Variant::ChromaSub] {
            let mut s = build_system(&small(v, 2)).unwrap();
            s.init_params(3);
            let out = s.upscale(&img, Some(&seeded_rng(1))).unwrap();
            assert_eq!(out.shape(), Shape::new(3, 12, 10), "{v:?}");
            assert_eq!(out, s.upscale(&img, Some(&seeded_rng(1))).unwrap());
            assert_eq!(s.upscale(&img, None).unwrap(), s.upscale(&img, None).unwrap());
        }
    }

    #[test]
    fn chroma_sub_needs_a_stage() {
        let cfg = SystemConfig::new(Variant::ChromaSub, Factors::unit());
        assert!(matches!(build_system(&cfg), Err(Error::Config { .. })));
        let mut bad = small(Variant::LowColor, 2);
        bad.stages = Some(vec![Factors::square(4)]);
        assert!(build_system(&bad).is_err());
        let mut odd = small(Variant::LowColor, 2);
        odd.features = 6;
        assert!(build_system(&odd).is_err());
    }

    #[test]
    fn config_json() {
        let cfg = SystemConfig::from_json(r#"{"variant":"chroma_sub","factor":[2,2]}"#).unwrap();
        assert_eq!(cfg.features, 64);
        assert_eq!(cfg.noise_channels, 1);
        assert_eq!(SystemConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        match SystemConfig::from_json(r#"{"variant":"chroma_sub","factor":[2,2],"features":"many"}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "features"),
            other => panic!("{other:?}"),
        }
        match SystemConfig::from_json(r#"{"variant":"rgb","factor":[2,2]}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "variant"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn critic_mirrors_generator() {
        let cfg = small(Variant::ChromaSub, 4);
        let d = build_discriminator(&cfg).unwrap();
        let t = d.layers.iter().filter(|l| matches!(l, Layer::TMuxOut(_))).count();
        let g = build_system(&cfg).unwrap();
        let m = g.branches[0].model.layers.iter().filter(|l| matches!(l, Layer::MuxOut(_))).count();
        assert_eq!(t, m);
        assert_eq!(d.input_features(), 1);
        assert_eq!(build_discriminator(&small(Variant::HighColor, 2)).unwrap().input_features(), 3);
    }

    #[test]
    fn critic_is_a_bounded_scalar() {
        let mut d = build_discriminator(&small(Variant::LowColor, 2)).unwrap();
        d.init_params(1);
        for seed in 0..20 {
            let mut x = Tensor::zeros(Shape::new(1, 8, 6));
            uniform_fill(&mut x, -1.0, 1.0, &mut seeded_rng(seed));
            let (y, _) = d.forward(&x, false).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 1, 1));
            assert!(y.data()[0].abs() < 1.0);
        }
        let odd = Tensor::zeros(Shape::new(1, 7, 6));
        assert!(d.forward(&odd, false).is_err());
    }

    #[test]
    fn system_file_round_trip() {
        let mut s = build_system(&small(Variant::ChromaSub, 2)).unwrap();
        s.init_params(5);
        let back = System::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.config, s.config);
        assert_eq!(back.flat_params(), s.flat_params());
        assert_eq!(back.to_bytes(), s.to_bytes());
    }
}
