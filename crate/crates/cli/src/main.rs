//! `rawdeblur`: dataset synthesis, training, inference, ISP rendering,
//! evaluation and attention-map export.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error.

mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rawdeblur::autodiff::Tensor;
use rawdeblur::blur::{build_dataset, synth_sequence, DatasetConfig, MPolicy, Manifest, MotionKind, MotionSpec, RasterScene, Rect, SensorModel, Split};
use rawdeblur::isp::{render_normalized, write_pgm, write_ppm, DemosaicMethod, IspConfig};
use rawdeblur::metrics::EvalReport;
use rawdeblur::model::{Checkpoint, Mode, Variant};
use rawdeblur::raw::{read_rawb_file, write_rawb_file, CfaPattern, Levels};
use rawdeblur::trainer::{self, evaluate, load_pairs, restore, score, TrainConfig};

#[derive(Parser)]
#[command(name = "rawdeblur", version, about = "Deblurring of RAW Bayer images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize blurred/sharp RAW pairs by averaging rendered frames.
    Synth(SynthArgs),
    /// Train a network on a manifest's train split.
    Train(TrainArgs),
    /// Deblur one RAWB file with a checkpoint.
    Deblur(DeblurArgs),
    /// Score a checkpoint (or the ground truth itself) on a manifest split.
    Eval(EvalArgs),
    /// Render a RAWB file to an 8-bit PPM through the default ISP.
    Render(RenderArgs),
    /// Export the attention gates of a two_branch_bca network as PGM images.
    DumpAttention(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Motion {
    Global,
    Object,
}

#[derive(Clone, Copy, ValueEnum)]
enum Demosaic {
    Bilinear,
    Ahd,
}

impl From<Demosaic> for DemosaicMethod {
    fn from(d: Demosaic) -> Self {
        match d {
            Demosaic::Bilinear => DemosaicMethod::Bilinear,
            Demosaic::Ahd => DemosaicMethod::Ahd,
        }
    }
}

fn parse_m(s: &str) -> Result<MPolicy, String> {
    match s {
        "cycle" => Ok(MPolicy::Cycle),
        _ => match s.parse::<usize>() {
            Ok(m) if m >= 2 => Ok(MPolicy::Fixed(m)),
            _ => Err(format!("expected `cycle` or a frame count of at least 2, got {s:?}")),
        },
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of procedural scenes, one frame sequence each.
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Frames rendered per sequence.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(3..))]
    frames: u32,
    #[arg(long, value_enum, default_value_t = Motion::Global)]
    motion: Motion,
    /// Largest per-frame displacement in pixels.
    #[arg(long, default_value_t = 2.0)]
    max_speed: f64,
    /// Frames averaged per pair: `cycle` (3, 4, 5, ...) or a fixed count.
    #[arg(long, default_value = "cycle", value_parser = parse_m)]
    m: MPolicy,
    /// Start offset between consecutive windows of a sequence.
    #[arg(long, default_value_t = 1)]
    window_stride: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value = "RGGB")]
    cfa: CfaPattern,
    #[arg(long, default_value_t = 12)]
    bit_depth: u8,
    #[arg(long, default_value_t = 64)]
    black: u16,
    /// Read noise standard deviation in counts.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Sequences held out for validation (taken before the test ones).
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Sequences held out for testing (the last ones).
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `key = value` file applied over the preset; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and the loss trace.
    #[arg(long)]
    out: PathBuf,
    /// `desk` (64x64 crops, 2000 iterations) or `paper` (256x256, full
    /// 1000-epoch schedule).
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    n_resblocks: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    epochs_flat: Option<usize>,
    #[arg(long)]
    epochs_decay: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Print every this many iterations.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct DeblurArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write an sRGB preview.
    #[arg(long)]
    srgb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Demosaic::Bilinear)]
    demosaic: Demosaic,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "ground_truth", conflicts_with = "ground_truth")]
    checkpoint: Option<PathBuf>,
    /// Score the sharp frames against themselves.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value_t = Demosaic::Bilinear)]
    demosaic: Demosaic,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Demosaic::Bilinear)]
    demosaic: Demosaic,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// One image per channel instead of the channel mean.
    #[arg(long)]
    per_channel: bool,
}

/// A problem with how the command was invoked rather than with its data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Deblur(a) => deblur(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::DumpAttention(a) => dump_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() || e.is::<config::ConfigError>() => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let existed = a.out.exists();
    if existed && fs::read_dir(&a.out)?.next().is_some() {
        return Err(usage(format!("{} is not empty", a.out.display())));
    }
    let result = write_synth(&a);
    if result.is_err() {
        if existed {
            for entry in fs::read_dir(&a.out)?.flatten() {
                let _ = fs::remove_dir_all(entry.path()).or_else(|_| fs::remove_file(entry.path()));
            }
        } else {
            let _ = fs::remove_dir_all(&a.out);
        }
    }
    result
}

fn write_synth(a: &SynthArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    let white = u16::try_from((1u32 << a.bit_depth.min(16)) - 1).unwrap_or(u16::MAX);
    let levels = Levels::new(a.bit_depth, a.black, white).context("sensor levels")?;
    let mut sensor = SensorModel::new(a.width, a.height, a.cfa, levels);
    sensor.noise_counts = a.noise;
    let travel = (a.max_speed * f64::from(a.frames - 1)).ceil() as usize + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut sequences = Vec::with_capacity(a.scenes);
    for k in 0..a.scenes {
        let scene = RasterScene::procedural(a.width + travel, a.height + travel, rng.random());
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.5..=1.0) * a.max_speed;
        let velocity = (speed * angle.cos(), speed * angle.sin());
        let motion = match a.motion {
            Motion::Global => MotionSpec::global(velocity, rng.random()),
            Motion::Object => MotionSpec {
                kind: MotionKind::ObjectTranslate,
                velocity,
                object_region: Some(Rect {
                    x: a.width as f64 / 4.0,
                    y: a.height as f64 / 4.0,
                    w: a.width as f64 / 2.0,
                    h: a.height as f64 / 2.0,
                }),
                seed: rng.random(),
            },
        };
        let seq = synth_sequence(&scene, &motion, &sensor, a.frames as usize).with_context(|| format!("scene {k}"))?;
        sequences.push((format!("scene{k:03}"), seq));
    }
    let cfg = DatasetConfig { m: a.m, window_stride: a.window_stride, val_sequences: a.val, test_sequences: a.test };
    let manifest = build_dataset(&sequences, &cfg, &a.out)?;
    println!("wrote {} pairs to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = config::preset(&a.preset).map_err(usage)?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = config::load(&text, cfg)?;
    }
    let m = &mut cfg.model;
    m.variant = a.variant.unwrap_or(m.variant);
    m.base_channels = a.base_channels.unwrap_or(m.base_channels);
    m.n_resblocks = a.n_resblocks.unwrap_or(m.n_resblocks);
    cfg.lr0 = a.lr0.unwrap_or(cfg.lr0);
    cfg.epochs_flat = a.epochs_flat.unwrap_or(cfg.epochs_flat);
    cfg.epochs_decay = a.epochs_decay.unwrap_or(cfg.epochs_decay);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.crop_size = a.crop_size.unwrap_or(cfg.crop_size);
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    if a.max_iterations.is_some() {
        cfg.max_iterations = a.max_iterations;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let manifest = Manifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let every = a.log_every.max(1);
    let out = trainer::train(&manifest, &cfg, &a.out, |row| {
        if row.iteration % every == 0 || row.val_psnr.is_some() {
            println!("{row}");
        }
    })?;
    if let Some(last) = out.trace.last() {
        println!("finished at epoch {} iteration {} loss {:.6}", last.epoch, last.iteration, last.loss);
    }
    println!("checkpoint {}", out.final_checkpoint.display());
    println!("trace {}", out.trace_file.display());
    Ok(())
}

fn isp(demosaic: Demosaic) -> IspConfig {
    IspConfig { demosaic: demosaic.into(), ..IspConfig::default() }
}

fn deblur(a: DeblurArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let net = ck.to_net()?;
    let frame = read_rawb_file(&a.input)?;
    let restored = restore(&net, &frame.normalize())?;
    write_rawb_file(&restored.denormalize(frame.levels()), &a.output)?;
    if let Some(path) = &a.srgb {
        write_ppm(&render_normalized(&restored, &isp(a.demosaic))?, path)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let isp = isp(a.demosaic);
    let report = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            evaluate(&ck, &manifest, a.split, &isp)?
        }
        None => {
            let pairs = load_pairs(&manifest, a.split)?;
            if pairs.is_empty() {
                bail!("the {} split is empty", a.split);
            }
            let rows = pairs.iter().map(|p| score(&p.id, &p.sharp, &p.sharp, &isp)).collect::<Result<_, _>>()?;
            EvalReport { rows }
        }
    };
    let text = report.to_text();
    print!("{text}");
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let frame = read_rawb_file(&a.input)?;
    write_ppm(&render_normalized(&frame.normalize(), &isp(a.demosaic))?, &a.out)?;
    Ok(())
}

/// Min-max scales to the full 8-bit range; a constant map becomes 0.
fn to_gray(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

fn attention_file(name: &str) -> String {
    let (stage, target) = name.split_once('.').unwrap_or((name, ""));
    let source = if target == "spatial" { "color" } else { "spatial" };
    format!("{stage}_{source}_to_{target}")
}

fn dump_attention(a: DumpArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if ck.config.variant != Variant::TwoBranchBca {
        return Err(usage(format!("checkpoint variant is {}, attention maps need two_branch_bca", ck.config.variant)));
    }
    let net = ck.to_net()?;
    let frame = read_rawb_file(&a.input)?.normalize();
    let x = Tensor::new(frame.values().to_vec(), &[1, 1, frame.height(), frame.width()])?;
    let inspection = net.forward_inspect(&x, frame.cfa(), Mode::Eval)?;
    fs::create_dir_all(&a.out_dir)?;
    for (name, gate) in &inspection.attention {
        let &[_, c, h, w] = gate.shape() else { bail!("attention {name} has shape {:?}", gate.shape()) };
        let data = gate.to_vec();
        let stem = attention_file(name);
        if a.per_channel {
            for k in 0..c {
                let path = a.out_dir.join(format!("{stem}_c{k:03}.pgm"));
                write_pgm(w, h, &to_gray(&data[k * h * w..(k + 1) * h * w]), path)?;
            }
        } else {
            let mean: Vec<f32> = (0..h * w).map(|i| (0..c).map(|k| data[k * h * w + i]).sum::<f32>() / c as f32).collect();
            write_pgm(w, h, &to_gray(&mean), a.out_dir.join(format!("{stem}.pgm")))?;
        }
    }
    println!("wrote {} attention maps to {}", inspection.attention.len(), a.out_dir.display());
    Ok(())
}
