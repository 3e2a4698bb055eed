//! Deterministic training: Adam, the flat-then-linear-decay learning-rate
//! schedule, CFA-aligned random crops, checkpoint/resume and evaluation.
//!
//! Every epoch draws its shuffling and crop offsets from its own ChaCha
//! stream keyed by (seed, epoch), so a run resumed from an epoch-boundary
//! checkpoint replays exactly the batches the uninterrupted run would have
//! seen.

mod adam;
mod eval;

pub use adam::{Adam, AdamConfig};
pub use eval::{evaluate, evaluate_pairs, raw_psnr, restore, score};

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{set_checked_mode, Tensor, TensorError, BN_EPSILON, BN_MOMENTUM};
use crate::blur::{BlurError, Manifest, Split};
use crate::isp::IspError;
use crate::metrics::{total_loss, MetricsError, SsimParams};
use crate::model::{Checkpoint, CheckpointError, DeblurNet, Mode, ModelConfig, ModelError};
use crate::raw::{CfaPattern, NormalizedFrame, RawError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("epoch {epoch} is outside the {total}-epoch schedule")]
    ScheduleRange { epoch: usize, total: usize },
    #[error("image {width}x{height} is smaller than the {crop}x{crop} crop")]
    CropTooLarge { width: usize, height: usize, crop: usize },
    #[error("all training pairs must share one CFA pattern, found {0} and {1}")]
    MixedCfa(CfaPattern, CfaPattern),
    #[error("checkpoint does not match this run: {0}")]
    Resume(String),
    #[error(transparent)]
    Data(#[from] BlurError),
    #[error(transparent)]
    Raw(#[from] RawError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Isp(#[from] IspError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr0: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Weight of the SSIM term in the loss.
    pub lambda: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Validate and write a checkpoint every this many epochs; 0 disables
    /// both.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps even if the schedule has epochs
    /// left.
    pub max_iterations: Option<usize>,
    /// Fail on the first NaN or infinity in any forward value, gradient or
    /// parameter.
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr0: 1e-4,
            epochs_flat: 500,
            epochs_decay: 500,
            batch_size: 2,
            crop_size: 256,
            lambda: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_every: 100,
            max_iterations: None,
            checked: true,
        }
    }
}

impl TrainConfig {
    /// 64x64 crops, batches of two, at most 2000 iterations.
    pub fn desk() -> Self {
        TrainConfig { crop_size: 64, batch_size: 2, max_iterations: Some(2000), ..Self::default() }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.crop_size < 16 || !self.crop_size.is_multiple_of(4) {
            return fail(format!("crop size must be a multiple of 4 and at least 16, got {}", self.crop_size));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.total_epochs() == 0 {
            return fail("the schedule needs at least one epoch".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Learning rate for `epoch`: `lr0` for the flat epochs, then a linear ramp
/// reaching zero at `total_epochs()`. The last scheduled epoch keeps a
/// positive rate; `epoch == total_epochs()` is the post-schedule value 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch > total {
        return Err(TrainError::ScheduleRange { epoch, total });
    }
    if epoch < cfg.epochs_flat {
        return Ok(cfg.lr0);
    }
    let done = (epoch - cfg.epochs_flat) as f64 / cfg.epochs_decay as f64;
    Ok(cfg.lr0 * (1.0 - done))
}

/// A normalized blurred/sharp pair.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub blurred: NormalizedFrame,
    pub sharp: NormalizedFrame,
}

fn pair_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_blur").map(str::to_string).unwrap_or(stem)
}

/// Reads and normalizes every pair of one split.
pub fn load_pairs(manifest: &Manifest, split: Split) -> Result<Vec<TrainPair>> {
    manifest
        .split(split)
        .map(|e| {
            let (blurred, sharp) = manifest.load_pair(e)?;
            Ok(TrainPair { id: pair_id(&e.blur), blurred: blurred.normalize(), sharp: sharp.normalize() })
        })
        .collect()
}

/// Cropped inputs and targets stacked as N x 1 x crop x crop tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub blurred: Tensor<f32>,
    pub sharp: Tensor<f32>,
    pub offsets: Vec<(usize, usize)>,
    pub cfa: CfaPattern,
}

/// Crops `crop x crop` windows at uniformly drawn even offsets, the same
/// window from each blurred frame and its sharp target.
pub fn sample_batch(pairs: &[TrainPair], indices: &[usize], crop: usize, rng: &mut impl Rng) -> Result<Batch> {
    let cfa = pairs[indices[0]].blurred.cfa();
    let mut blurred = Vec::with_capacity(indices.len() * crop * crop);
    let mut sharp = Vec::with_capacity(indices.len() * crop * crop);
    let mut offsets = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &pairs[i];
        let (w, h) = (p.blurred.width(), p.blurred.height());
        if w < crop || h < crop {
            return Err(TrainError::CropTooLarge { width: w, height: h, crop });
        }
        if p.blurred.cfa() != cfa {
            return Err(TrainError::MixedCfa(cfa, p.blurred.cfa()));
        }
        let x = 2 * rng.random_range(0..=(w - crop) / 2);
        let y = 2 * rng.random_range(0..=(h - crop) / 2);
        blurred.extend_from_slice(p.blurred.crop_aligned(x, y, crop, crop)?.values());
        sharp.extend_from_slice(p.sharp.crop_aligned(x, y, crop, crop)?.values());
        offsets.push((x, y));
    }
    let shape = [indices.len(), 1, crop, crop];
    Ok(Batch { blurred: Tensor::new(blurred, &shape)?, sharp: Tensor::new(sharp, &shape)?, offsets, cfa })
}

/// One optimizer step of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// 1-based count of optimizer steps so far.
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean RAW PSNR over the validation split, on validation steps.
    pub val_psnr: Option<f64>,
}

impl fmt::Display for TraceRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:e}\t{:.8}\t", self.epoch, self.iteration, self.lr, self.loss)?;
        match self.val_psnr {
            Some(v) if v.is_infinite() => f.write_str("inf"),
            Some(v) => write!(f, "{v:.4}"),
            None => f.write_str("-"),
        }
    }
}

impl TraceRow {
    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [epoch, iteration, lr, loss, val] = f.as_slice() else { return None };
        Some(TraceRow {
            epoch: epoch.parse().ok()?,
            iteration: iteration.parse().ok()?,
            lr: lr.parse().ok()?,
            loss: loss.parse().ok()?,
            val_psnr: match *val {
                "-" => None,
                v => Some(v.parse().ok()?),
            },
        })
    }
}

/// Training state: network, optimizer and position in the schedule.
pub struct Trainer {
    cfg: TrainConfig,
    net: DeblurNet<f32>,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    adam: Adam<f32>,
    /// Next epoch to run.
    epoch: usize,
    iteration: usize,
    train: Vec<TrainPair>,
    val: Vec<TrainPair>,
    ssim: SsimParams,
    trace: Vec<TraceRow>,
}

impl Trainer {
    /// Fresh weights drawn from `cfg.seed`.
    pub fn new(cfg: TrainConfig, train: Vec<TrainPair>, val: Vec<TrainPair>) -> Result<Self> {
        let net = DeblurNet::new(cfg.model, cfg.seed)?;
        Self::assemble(cfg, net, train, val)
    }

    fn assemble(cfg: TrainConfig, net: DeblurNet<f32>, train: Vec<TrainPair>, val: Vec<TrainPair>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptySplit(Split::Train));
        }
        let cfa = train[0].blurred.cfa();
        for p in train.iter().chain(&val) {
            if p.blurred.cfa() != cfa {
                return Err(TrainError::MixedCfa(cfa, p.blurred.cfa()));
            }
            let (w, h) = (p.blurred.width(), p.blurred.height());
            if w < cfg.crop_size || h < cfg.crop_size {
                return Err(TrainError::CropTooLarge { width: w, height: h, crop: cfg.crop_size });
            }
        }
        let (names, params): (Vec<_>, Vec<_>) = net.parameters().into_iter().unzip();
        let adam = Adam::new(cfg.adam, &params);
        Ok(Trainer { cfg, net, names, params, adam, epoch: 0, iteration: 0, train, val, ssim: SsimParams::raw(), trace: Vec::new() })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint, train: Vec<TrainPair>, val: Vec<TrainPair>) -> Result<Self> {
        if ck.config != cfg.model {
            return Err(TrainError::Resume(format!("model {:?} vs {:?}", ck.config, cfg.model)));
        }
        if ck.get_u64("train.seed") != Some(cfg.seed) {
            return Err(TrainError::Resume(format!("seed {:?} vs {}", ck.get_u64("train.seed"), cfg.seed)));
        }
        let net = ck.to_net()?;
        let mut t = Self::assemble(cfg, net, train, val)?;
        let missing = |n: &str| TrainError::Resume(format!("missing {n}"));
        t.epoch = ck.get_u64("train.epoch").ok_or_else(|| missing("train.epoch"))? as usize;
        t.iteration = ck.get_u64("train.iteration").ok_or_else(|| missing("train.iteration"))? as usize;
        t.adam.step = ck.get_u64("optim.step").ok_or_else(|| missing("optim.step"))?;
        for (i, name) in t.names.iter().enumerate() {
            for (slot, key) in [(&mut t.adam.m[i], format!("optim.m.{name}")), (&mut t.adam.v[i], format!("optim.v.{name}"))] {
                let e = ck.get(&key).ok_or_else(|| missing(&key))?;
                if e.values.len() != slot.len() {
                    return Err(TrainError::Resume(format!("{key} has {} values, expected {}", e.values.len(), slot.len())));
                }
                slot.copy_from_slice(&e.values);
            }
        }
        Ok(t)
    }

    /// Network tensors plus optimizer moments, schedule position and the
    /// hyperparameters of the run.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::capture(&self.net);
        for (i, name) in self.names.iter().enumerate() {
            let shape = self.params[i].shape().to_vec();
            ck.insert(format!("optim.m.{name}"), shape.clone(), self.adam.m[i].clone());
            ck.insert(format!("optim.v.{name}"), shape, self.adam.v[i].clone());
        }
        ck.insert_u64("optim.step", self.adam.step);
        let AdamConfig { beta1, beta2, eps } = self.cfg.adam;
        for (name, v) in [("optim.beta1", beta1), ("optim.beta2", beta2), ("optim.eps", eps), ("optim.lr0", self.cfg.lr0)] {
            ck.insert(name, vec![], vec![v as f32]);
        }
        ck.insert("train.lambda", vec![], vec![self.cfg.lambda as f32]);
        ck.insert("train.bn_momentum", vec![], vec![BN_MOMENTUM as f32]);
        ck.insert("train.bn_eps", vec![], vec![BN_EPSILON as f32]);
        ck.insert_u64("train.seed", self.cfg.seed);
        ck.insert_u64("train.epoch", self.epoch as u64);
        ck.insert_u64("train.iteration", self.iteration as u64);
        ck
    }

    pub fn net(&self) -> &DeblurNet<f32> {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_iterations.is_none_or(|m| self.iteration < m)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.total_epochs() || !self.budget_left()
    }

    /// Runs one epoch (or what is left of the iteration budget) and returns
    /// its trace rows.
    pub fn run_epoch(&mut self) -> Result<Vec<TraceRow>> {
        let lr = lr_schedule(self.epoch, &self.cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let previous = set_checked(self.cfg.checked);
        let result = self.epoch_steps(&order, lr, &mut rng);
        set_checked_mode(previous);
        let mut rows = result?;
        self.epoch += 1;
        if self.cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(self.cfg.checkpoint_every) && !self.val.is_empty() {
            let v = self.validate()?;
            if let Some(last) = rows.last_mut() {
                last.val_psnr = Some(v);
                self.trace.last_mut().expect("row recorded").val_psnr = Some(v);
            }
        }
        Ok(rows)
    }

    fn epoch_steps(&mut self, order: &[usize], lr: f64, rng: &mut ChaCha8Rng) -> Result<Vec<TraceRow>> {
        let mut rows = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch = sample_batch(&self.train, chunk, self.cfg.crop_size, rng)?;
            self.net.zero_grad();
            let pred = self.net.forward(&batch.blurred, batch.cfa, Mode::Train)?;
            let loss = total_loss(&pred, &batch.sharp, self.cfg.lambda, &self.ssim)?;
            loss.backward()?;
            self.adam.step(&self.params, lr)?;
            self.iteration += 1;
            let row = TraceRow { epoch: self.epoch, iteration: self.iteration, lr, loss: f64::from(loss.item()), val_psnr: None };
            self.trace.push(row.clone());
            rows.push(row);
        }
        Ok(rows)
    }

    /// Mean RAW PSNR of the network over the validation split.
    pub fn validate(&self) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.val {
            total += raw_psnr(&self.net, &p.blurred, &p.sharp)?;
        }
        Ok(total / self.val.len() as f64)
    }

    /// Runs epochs until the schedule or budget ends, or `until_epoch` is
    /// reached. Every `checkpoint_every` epochs a checkpoint is written to
    /// `out_dir` when given. `on_row` sees each trace row as it is produced.
    pub fn run(&mut self, until_epoch: Option<usize>, out_dir: Option<&Path>, mut on_row: impl FnMut(&TraceRow)) -> Result<()> {
        while !self.is_finished() && until_epoch.is_none_or(|u| self.epoch < u) {
            for row in self.run_epoch()? {
                on_row(&row);
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(self.cfg.checkpoint_every) {
                    self.checkpoint().save(dir.join(format!("epoch_{:05}.dbrw", self.epoch)))?;
                }
            }
        }
        Ok(())
    }
}

fn set_checked(on: bool) -> bool {
    let previous = crate::autodiff::checked_mode();
    set_checked_mode(on);
    previous
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub trace_file: PathBuf,
    pub trace: Vec<TraceRow>,
}

pub const FINAL_CHECKPOINT: &str = "final.dbrw";
pub const TRACE_FILE: &str = "trace.tsv";

/// Trains on the manifest's train split, validating on its val split, and
/// writes periodic checkpoints, `final.dbrw` and `trace.tsv` into
/// `out_dir`.
pub fn train(manifest: &Manifest, cfg: &TrainConfig, out_dir: &Path, on_row: impl FnMut(&TraceRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_pairs(manifest, Split::Train)?;
    let val = load_pairs(manifest, Split::Val)?;
    let mut trainer = Trainer::new(cfg.clone(), train, val)?;
    std::fs::create_dir_all(out_dir)?;
    trainer.run(None, Some(out_dir), on_row)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    let trace_file = out_dir.join(TRACE_FILE);
    let text: String = trainer.trace().iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(&trace_file, text)?;
    Ok(TrainOutcome { final_checkpoint, trace_file, trace: trainer.trace().to_vec() })
}
