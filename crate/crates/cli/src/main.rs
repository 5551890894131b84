use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use muxsr::analysis::{
    backward_analysis, forward_analysis, record_trace, render_filter_atlas, strided_coords, AtlasLayout, AtlasSource,
    Coord, EffectiveModel, Normalization,
};
use muxsr::netgraph::{load_model, NetworkModel};
use muxsr::pnm::{read_image, write_image};
use muxsr::resample::{bicubic_upscale, rgb_to_ycbcr};
use muxsr::sampling::Factors;
use muxsr::systems::{build_system, System, SystemConfig};
use muxsr::tensor::{gaussian_fill, seeded_rng, Shape, Tensor};
use muxsr::training::data::to_rgb;
use muxsr::training::{psnr, read_system, ssim, Mode, PatchDataset, TrainConfig, Trainer};
use muxsr::Error;

#[derive(Parser)]
#[command(name = "muxsr", version, about = "MuxOut image upscaling and network analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Sres,
    Hres,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Network,
    Bicubic,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisMode {
    Forward,
    Backward,
}

#[derive(Subcommand)]
enum Command {
    /// Train a system on a folder of PPM/PGM images.
    Train {
        /// System configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "sres")]
        mode: TrainMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint to write; hres also writes `<out>.disc`.
        #[arg(long)]
        out: PathBuf,
        /// Total number of steps.
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 20)]
        batch: usize,
        /// HR patch side.
        #[arg(long, default_value_t = 32)]
        patch: usize,
        /// Learning rate [default: 1e-3 sres, 1e-4 hres].
        #[arg(long)]
        lr: Option<f64>,
        /// Critic learning rate [default: the generator's].
        #[arg(long)]
        disc_lr: Option<f64>,
        /// Sample a fixed pool of this many patches up front.
        #[arg(long)]
        pool: Option<usize>,
        /// Training log, one JSON record per line [default: <out>.log].
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the checkpoint at --out.
        #[arg(long)]
        resume: bool,
        /// Also write the checkpoint every N steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Upscale an image.
    Upscale {
        /// System file or generator checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, value_enum, default_value = "network")]
        method: Method,
        /// Factor for --method bicubic without a model, e.g. 2 or 3x2.
        #[arg(long)]
        factor: Option<String>,
    },
    /// Extract effective filters of a network at a probe image.
    Analyze {
        /// Model file, system file or generator checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalysisMode,
        /// Pixel list `r,c;r,c;...` (input pixels for forward, output pixels
        /// for backward).
        #[arg(long, conflicts_with = "stride")]
        coords: Option<String>,
        /// Every N-th pixel instead of a list.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        atlas: PathBuf,
        /// Branch of a system to analyze.
        #[arg(long, default_value_t = 0)]
        network: usize,
        /// Feature the coordinates refer to.
        #[arg(long, default_value_t = 0)]
        feature: usize,
        /// Filter plane shown in the atlas.
        #[arg(long, default_value_t = 0)]
        plane: usize,
        /// Crop tiles to a (2R+1)-pixel window around each location.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 9)]
        tiles_per_row: usize,
        /// Scale each tile on its own.
        #[arg(long)]
        per_tile: bool,
        /// Write filters and b_eff as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Feed Gaussian noise from this seed instead of zeros.
        #[arg(long)]
        noise_seed: Option<u64>,
    },
    /// PSNR and SSIM of a test image against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

/// Exit status: 1 usage, 2 data or format, 3 numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> muxsr::Result<()> {
    match command {
        Command::Train {
            config,
            data,
            mode,
            seed,
            out,
            steps,
            batch,
            patch,
            lr,
            disc_lr,
            pool,
            log,
            resume,
            checkpoint_every,
        } => {
            let sys_cfg = SystemConfig::from_json(&std::fs::read_to_string(&config)?)?;
            let dataset = PatchDataset::from_dir(&data, patch, sys_cfg.factor)?;
            let mut trainer = if resume && out.exists() {
                let t = Trainer::resume(&out, dataset)?;
                if t.system.config != sys_cfg {
                    return Err(Error::Data(format!("{} was trained with a different config", out.display())));
                }
                t
            } else {
                let mut system = build_system(&sys_cfg)?;
                system.init_params(seed);
                let mut tc = TrainConfig::new(
                    match mode {
                        TrainMode::Sres => Mode::Sres,
                        TrainMode::Hres => Mode::Hres,
                    },
                    seed,
                );
                tc.batch_size = batch;
                tc.patch_size = patch;
                tc.lr = lr;
                tc.disc_lr = disc_lr;
                tc.pool_size = pool;
                Trainer::new(system, tc, dataset)?
            };
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".log"));
            let mut log_file = OpenOptions::new()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(&log_path)?;
            info!("training from step {} to {steps}", trainer.step_count());
            while trainer.step_count() < steps {
                let r = trainer.step()?;
                writeln!(log_file, "{}", serde_json::to_string(&r).expect("record serializes"))?;
                if checkpoint_every.is_some_and(|n| n > 0 && trainer.step_count() % n == 0) {
                    trainer.save_checkpoint(&out)?;
                }
            }
            trainer.save_checkpoint(&out)?;
            println!("trained {} steps; checkpoint {}", trainer.step_count(), out.display());
            Ok(())
        }
        Command::Upscale {
            model,
            input,
            out,
            noise_seed,
            method,
            factor,
        } => {
            let img = read_image(&input)?;
            let grey = img.features() == 1;
            let rgb = to_rgb(img)?;
            let system = model.as_ref().map(read_system).transpose()?;
            let result = match method {
                Method::Network => {
                    let system = system.ok_or_else(|| Error::Data("--method network needs --model".into()))?;
                    system.upscale(&rgb, Some(&seeded_rng(noise_seed)))?
                }
                Method::Bicubic => {
                    let f = match (&factor, &system) {
                        (Some(s), _) => parse_factor(s)?,
                        (None, Some(sys)) => sys.factor(),
                        (None, None) => return Err(Error::Data("--method bicubic needs --factor or --model".into())),
                    };
                    bicubic_upscale(&rgb, f)
                }
            };
            check_finite(&result)?;
            let result = if grey {
                rgb_to_ycbcr(&result)?.select_features(0, 1)?
            } else {
                result
            };
            write_image(&result, &out)?;
            println!("{}x{} -> {}x{}", rgb.width(), rgb.height(), result.width(), result.height());
            Ok(())
        }
        Command::Analyze {
            model,
            input,
            mode,
            coords,
            stride,
            atlas,
            network,
            feature,
            plane,
            window,
            tiles_per_row,
            per_tile,
            dump,
            noise_seed,
        } => {
            let img = read_image(&input)?;
            let (net, probe) = analysis_probe(&model, network, img, noise_seed)?;
            let trace = record_trace(&net, &probe)?;
            let shape = match mode {
                AnalysisMode::Forward => probe.shape(),
                AnalysisMode::Backward => net.output_shape(probe.shape())?,
            };
            let list = match (coords, stride) {
                (Some(c), _) => parse_coords(&c, feature)?,
                (None, Some(s)) => strided_coords(shape, feature, s),
                (None, None) => return Err(Error::Data("give --coords or --stride".into())),
            };
            let eff = match mode {
                AnalysisMode::Forward => forward_analysis(&net, &trace, &list)?,
                AnalysisMode::Backward => backward_analysis(&net, &trace, &list)?,
            };
            let source = match mode {
                AnalysisMode::Forward => AtlasSource::Columns,
                AnalysisMode::Backward => AtlasSource::Rows,
            };
            let layout = AtlasLayout {
                tiles_per_row,
                window,
                feature: plane,
            };
            let norm = if per_tile {
                Normalization::PerTile
            } else {
                Normalization::PerAtlas
            };
            render_filter_atlas(&eff, source, &layout, norm)?.save(&atlas)?;
            let b = eff.b_eff.data();
            let mean = eff.b_eff.reduce_sum() / b.len() as f64;
            let min = b.iter().copied().fold(f32::INFINITY, f32::min);
            let max = b.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            println!("filters: {}", list.len());
            println!("b_eff: min {min:.6} max {max:.6} mean {mean:.6} max_abs {:.6}", eff.b_eff.max_abs());
            if let Some(path) = dump {
                std::fs::write(path, dump_json(&eff, source).to_string())?;
            }
            Ok(())
        }
        Command::Metrics { reference, test } => {
            let r = read_image(&reference)?;
            let t = read_image(&test)?;
            if r.shape() != t.shape() {
                return Err(Error::Data(format!("size mismatch: {} vs {}", r.shape(), t.shape())));
            }
            let p = psnr(&t, &r, 1.0)?;
            let s = ssim(&t, &r)?;
            if p.is_infinite() {
                println!("PSNR: inf dB");
            } else {
                println!("PSNR: {p:.4} dB");
            }
            println!("SSIM: {s:.4}");
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check_finite(t: &Tensor) -> muxsr::Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("network produced non-finite values".into()))
    }
}

/// `2` or `3x2` (m_x by m_y).
fn parse_factor(s: &str) -> muxsr::Result<Factors> {
    let bad = || Error::Data(format!("bad factor {s:?}; expected N or MxN"));
    let parts: Vec<&str> = s.split('x').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<muxsr::Result<Vec<_>>>()?;
    match nums[..] {
        [m] => Factors::new(m, m),
        [mx, my] => Factors::new(mx, my),
        _ => Err(bad()),
    }
}

/// `r,c;r,c;...` on `feature`.
fn parse_coords(s: &str, feature: usize) -> muxsr::Result<Vec<Coord>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<&str> = p.split(',').map(str::trim).collect();
            match v[..] {
                [r, c] => match (r.parse(), c.parse()) {
                    (Ok(r), Ok(c)) => Ok(Coord::new(feature, r, c)),
                    _ => Err(Error::Coordinate(format!("bad coordinate {p:?}"))),
                },
                _ => Err(Error::Coordinate(format!("bad coordinate {p:?}; expected r,c"))),
            }
        })
        .collect()
}

fn noise_planes(n: usize, h: usize, w: usize, seed: Option<u64>) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(n, h, w));
    if let Some(s) = seed {
        gaussian_fill(&mut t, 0.0, 1.0, &mut seeded_rng(s));
    }
    t
}

/// The network to analyze and its input for `img`. Noise planes are zero
/// unless a seed is given.
fn analysis_probe(
    path: &Path,
    network: usize,
    img: Tensor,
    noise_seed: Option<u64>,
) -> muxsr::Result<(NetworkModel, Tensor)> {
    match load_model(path) {
        Ok(net) => {
            let colors = match (net.input.color_channels, img.features()) {
                (c, f) if c == f => img,
                (3, 1) => to_rgb(img)?,
                (1, 3) => rgb_to_ycbcr(&img)?.select_features(0, 1)?,
                (c, f) => return Err(Error::Data(format!("model reads {c} channels, image has {f}"))),
            };
            let n = net.input.noise_channels;
            let probe = if n == 0 {
                colors
            } else {
                let noise = noise_planes(n, colors.height(), colors.width(), noise_seed);
                Tensor::concat(&[&colors, &noise])?
            };
            Ok((net, probe))
        }
        Err(Error::Format { .. }) => {
            let system: System = read_system(path)?;
            if network >= system.branches.len() {
                return Err(Error::Data(format!(
                    "system has {} networks, asked for {network}",
                    system.branches.len()
                )));
            }
            let work = system.to_work(&to_rgb(img)?)?;
            let mut rng = noise_seed.map(seeded_rng);
            let probe = system.branch_input(network, &work, rng.as_mut())?;
            Ok((system.branches[network].model.clone(), probe))
        }
        Err(e) => Err(e),
    }
}

fn dump_json(eff: &EffectiveModel, source: AtlasSource) -> serde_json::Value {
    let filters = match source {
        AtlasSource::Columns => &eff.columns,
        AtlasSource::Rows => &eff.rows,
    };
    let shape = |s: Shape| serde_json::json!([s.features, s.height, s.width]);
    serde_json::json!({
        "input_shape": shape(eff.input_shape),
        "output_shape": shape(eff.output_shape),
        "kind": match source { AtlasSource::Columns => "columns", AtlasSource::Rows => "rows" },
        "b_eff": eff.b_eff.data(),
        "filters": filters.iter().map(|(c, t)| serde_json::json!({
            "coord": [c.feature, c.row, c.col],
            "shape": shape(t.shape()),
            "values": t.data(),
        })).collect::<Vec<_>>(),
    })
}
