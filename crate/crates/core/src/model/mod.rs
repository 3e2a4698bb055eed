//! The two-branch deblurring network.
//!
//! A spatial encoder reads the mosaic at full resolution; a color encoder
//! reads the packed (R, G0, B, G1) planes at half resolution. After each
//! downsampling stage the two branches gate each other through
//! bidirectional cross-modal attention (BCA). The concatenated features pass
//! a 3x3 fusion conv, a trunk of residual blocks and a two-stage transposed
//! conv decoder; a tanh head predicts a residual that is added to the input
//! mosaic and clamped to [0, 1].

mod checkpoint;
mod pack;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use pack::pack_mosaic;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{
    add, batch_norm2d, clamp, concat_channels, conv2d, conv_transpose2d, mul, relu, sigmoid, tanh, BatchNormState,
    ConvSpec, Element, Tensor, TensorError,
};
use crate::raw::CfaPattern;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input must be N x 1 x H x W with H and W multiples of 4 and at least 16, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("unknown model variant {0:?}")]
    UnknownVariant(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which encoders and attention blocks the network contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    SpatialOnly,
    ColorOnly,
    TwoBranch,
    #[default]
    TwoBranchBca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SpatialOnly, Variant::ColorOnly, Variant::TwoBranch, Variant::TwoBranchBca];

    pub fn code(self) -> u8 {
        match self {
            Variant::SpatialOnly => 0,
            Variant::ColorOnly => 1,
            Variant::TwoBranch => 2,
            Variant::TwoBranchBca => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SpatialOnly => "spatial_only",
            Variant::ColorOnly => "color_only",
            Variant::TwoBranch => "two_branch",
            Variant::TwoBranchBca => "two_branch_bca",
        }
    }

    pub fn has_spatial(self) -> bool {
        self != Variant::ColorOnly
    }

    pub fn has_color(self) -> bool {
        self != Variant::SpatialOnly
    }

    pub fn has_bca(self) -> bool {
        self == Variant::TwoBranchBca
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub n_resblocks: usize,
    /// 1, or 2 for the doubled-width ablation.
    pub channel_multiplier: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { variant: Variant::TwoBranchBca, base_channels: 64, n_resblocks: 9, channel_multiplier: 1 }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        ModelConfig { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_resblocks == 0 || self.n_resblocks > u8::MAX as usize {
            return Err(ModelError::Config(format!("n_resblocks must be in 1..=255, got {}", self.n_resblocks)));
        }
        if self.base_channels == 0 || self.base_channels > u16::MAX as usize {
            return Err(ModelError::Config(format!("base_channels must be in 1..=65535, got {}", self.base_channels)));
        }
        if !matches!(self.channel_multiplier, 1 | 2) {
            return Err(ModelError::Config(format!("channel_multiplier must be 1 or 2, got {}", self.channel_multiplier)));
        }
        Ok(())
    }

    /// Feature widths after the input conv and the two downsampling stages.
    pub fn widths(&self) -> [usize; 3] {
        let c = self.base_channels * self.channel_multiplier;
        [c, 2 * c, 4 * c]
    }
}

/// Whether batch norm uses batch statistics and updates its running
/// estimates, or uses the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Source of initial weights, seeded for reproducibility.
struct Init(ChaCha8Rng);

impl Init {
    /// Zero-mean normal weights with standard deviation `sqrt(2 / fan_in)`.
    fn kaiming<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(std * self.0.sample::<f64, _>(StandardNormal))).collect();
        Tensor::param(data, shape).expect("length matches")
    }
}

fn zeros_param<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(vec![T::zero(); shape.iter().product()], shape).expect("length matches")
}

/// A convolution or transposed convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl<T: Element> Conv<T> {
    fn new(init: &mut Init, cin: usize, cout: usize, k: usize, spec: ConvSpec, bias: bool) -> Self {
        Conv {
            weight: init.kaiming(&[cout, cin, k, k], cin * k * k),
            bias: bias.then(|| zeros_param(&[cout])),
            spec,
            transposed: false,
        }
    }

    fn transposed(init: &mut Init, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Self {
        Conv { weight: init.kaiming(&[cin, cout, k, k], cin * k * k), bias: None, spec, transposed: true }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = if self.transposed { conv_transpose2d } else { conv2d };
        Ok(f(x, &self.weight, self.bias.as_ref(), self.spec)?)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T: Element> {
    pub conv: Conv<T>,
    pub bn: BatchNormState<T>,
    pub relu: bool,
}

impl<T: Element> ConvBn<T> {
    fn new(conv: Conv<T>, channels: usize, relu: bool) -> Self {
        ConvBn { conv, bn: BatchNormState::new(channels), relu }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = batch_norm2d(&self.conv.forward(x)?, &self.bn, mode == Mode::Train)?;
        Ok(if self.relu { relu(&y)? } else { y })
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        f(format!("{prefix}.bn.gamma"), &self.bn.gamma);
        f(format!("{prefix}.bn.beta"), &self.bn.beta);
        f(format!("{prefix}.bn.running_mean"), &self.bn.running_mean);
        f(format!("{prefix}.bn.running_var"), &self.bn.running_var);
    }
}

/// Input conv and two downsampling stages of one branch.
#[derive(Debug, Clone)]
pub struct Encoder<T: Element> {
    pub input: ConvBn<T>,
    pub down1: ConvBn<T>,
    pub down2: ConvBn<T>,
}

impl<T: Element> Encoder<T> {
    fn down(&self, stage: usize) -> &ConvBn<T> {
        if stage == 0 {
            &self.down1
        } else {
            &self.down2
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.input.visit(&format!("{prefix}.input"), f);
        self.down1.visit(&format!("{prefix}.down1"), f);
        self.down2.visit(&format!("{prefix}.down2"), f);
    }
}

/// The two 1x1 convolutions of one attention stage.
#[derive(Debug, Clone)]
pub struct Bca<T: Element> {
    /// Maps color features to the gate applied to spatial features.
    pub to_spatial: Conv<T>,
    /// Maps spatial features to the gate applied to color features.
    pub to_color: Conv<T>,
}

impl<T: Element> Bca<T> {
    fn new(init: &mut Init, channels: usize) -> Self {
        let spec = ConvSpec::new(1, 0);
        Bca {
            to_spatial: Conv::new(init, channels, channels, 1, spec, true),
            to_color: Conv::new(init, channels, channels, 1, spec, true),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.to_spatial.visit(&format!("{prefix}.to_spatial"), f);
        self.to_color.visit(&format!("{prefix}.to_color"), f);
    }
}

/// Gated features of both branches and the gates that produced them.
#[derive(Debug, Clone)]
pub struct BcaOutput<T: Element> {
    pub spatial: Tensor<T>,
    pub color: Tensor<T>,
    pub spatial_attention: Tensor<T>,
    pub color_attention: Tensor<T>,
}

/// Bidirectional cross-modal attention: each branch is multiplied by a
/// sigmoid gate computed from the other branch.
pub fn bca<T: Element>(m_space: &Tensor<T>, m_color: &Tensor<T>, params: &Bca<T>) -> Result<BcaOutput<T>> {
    if m_space.shape() != m_color.shape() {
        return Err(TensorError::ShapeMismatch { op: "bca", lhs: m_space.shape().to_vec(), rhs: m_color.shape().to_vec() }
            .into());
    }
    let spatial_attention = sigmoid(&params.to_spatial.forward(m_color)?)?;
    let color_attention = sigmoid(&params.to_color.forward(m_space)?)?;
    Ok(BcaOutput {
        spatial: mul(m_space, &spatial_attention)?,
        color: mul(m_color, &color_attention)?,
        spatial_attention,
        color_attention,
    })
}

/// `x + bn(conv(relu(bn(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResBlock<T: Element> {
    pub first: ConvBn<T>,
    pub second: ConvBn<T>,
}

impl<T: Element> ResBlock<T> {
    fn new(init: &mut Init, channels: usize) -> Self {
        let spec = ConvSpec::new(1, 1);
        ResBlock {
            first: ConvBn::new(Conv::new(init, channels, channels, 3, spec, false), channels, true),
            second: ConvBn::new(Conv::new(init, channels, channels, 3, spec, false), channels, false),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let r = self.second.forward(&self.first.forward(x, mode)?, mode)?;
        Ok(add(x, &r)?)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.first.visit(&format!("{prefix}.first"), f);
        self.second.visit(&format!("{prefix}.second"), f);
    }
}

/// Everything a forward pass produced besides its output: the shape after
/// each stage and, for the attention variant, the BCA gates.
#[derive(Debug, Clone)]
pub struct Inspection<T: Element> {
    pub output: Tensor<T>,
    /// Stage name and NCHW shape, in execution order.
    pub trace: Vec<(&'static str, Vec<usize>)>,
    /// `bca{1,2}.{spatial,color}` gates, in execution order.
    pub attention: Vec<(&'static str, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct DeblurNet<T: Element> {
    config: ModelConfig,
    pub spatial: Option<Encoder<T>>,
    pub color: Option<Encoder<T>>,
    pub bca: Vec<Bca<T>>,
    pub fuse: ConvBn<T>,
    pub resblocks: Vec<ResBlock<T>>,
    pub up2: ConvBn<T>,
    pub up1: ConvBn<T>,
    pub head: Conv<T>,
}

impl<T: Element> DeblurNet<T> {
    /// Builds a network with Kaiming fan-in weights drawn from `seed`, unit
    /// batch-norm scales and a zero output head, so the untrained network is
    /// the identity on valid inputs.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init(ChaCha8Rng::seed_from_u64(seed));
        let [c1, c2, c3] = config.widths();
        let s1 = ConvSpec::new(1, 1);
        let s2 = ConvSpec::new(2, 1);
        let spatial = config.variant.has_spatial().then(|| Encoder {
            input: ConvBn::new(Conv::new(&mut init, 1, c1, 7, ConvSpec::new(1, 3), false), c1, true),
            down1: ConvBn::new(Conv::new(&mut init, c1, c2, 3, s2, false), c2, true),
            down2: ConvBn::new(Conv::new(&mut init, c2, c3, 3, s2, false), c3, true),
        });
        let color = config.variant.has_color().then(|| Encoder {
            input: ConvBn::new(Conv::new(&mut init, 4, c1, 3, s1, false), c1, true),
            down1: ConvBn::new(Conv::new(&mut init, c1, c2, 3, s1, false), c2, true),
            down2: ConvBn::new(Conv::new(&mut init, c2, c3, 3, s2, false), c3, true),
        });
        let bca = if config.variant.has_bca() { vec![Bca::new(&mut init, c2), Bca::new(&mut init, c3)] } else { Vec::new() };
        let branches = usize::from(spatial.is_some()) + usize::from(color.is_some());
        let fuse = ConvBn::new(Conv::new(&mut init, branches * c3, c3, 3, s1, false), c3, true);
        let resblocks = (0..config.n_resblocks).map(|_| ResBlock::new(&mut init, c3)).collect();
        let up = ConvSpec::new(2, 1).with_output_padding(1);
        let up2 = ConvBn::new(Conv::transposed(&mut init, c3, c2, 3, up), c2, true);
        let up1 = ConvBn::new(Conv::transposed(&mut init, c2, c1, 3, up), c1, true);
        let head = Conv {
            weight: zeros_param(&[1, c1, 7, 7]),
            bias: Some(zeros_param(&[1])),
            spec: ConvSpec::new(1, 3),
            transposed: false,
        };
        Ok(DeblurNet { config, spatial, color, bca, fuse, resblocks, up2, up1, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every tensor of the network, trainable parameters and batch-norm
    /// running statistics alike, under its canonical name, in a fixed
    /// order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor<T>| out.push((name, t.clone()));
        if let Some(e) = &self.spatial {
            e.visit("spatial", &mut push);
        }
        if let Some(e) = &self.color {
            e.visit("color", &mut push);
        }
        for (i, b) in self.bca.iter().enumerate() {
            b.visit(&format!("bca{}", i + 1), &mut push);
        }
        self.fuse.visit("fuse", &mut push);
        for (i, r) in self.resblocks.iter().enumerate() {
            r.visit(&format!("res{i}"), &mut push);
        }
        self.up2.visit("up2", &mut push);
        self.up1.visit("up1", &mut push);
        self.head.visit("head", &mut push);
        out
    }

    /// The trainable subset of [`named_tensors`](Self::named_tensors).
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }

    /// Zeroes the output head, making the network the identity.
    pub fn zero_output_head(&self) {
        self.head.weight.data_mut().fill(T::zero());
        if let Some(b) = &self.head.bias {
            b.data_mut().fill(T::zero());
        }
    }

    pub fn check_input(shape: &[usize]) -> Result<()> {
        match *shape {
            [n, 1, h, w] if n > 0 && h >= 16 && w >= 16 && h % 4 == 0 && w % 4 == 0 => Ok(()),
            _ => Err(ModelError::InputShape(shape.to_vec())),
        }
    }

    /// Restores a batch of normalized mosaics (N x 1 x H x W, values in
    /// [0, 1]) laid out in the CFA `cfa`.
    pub fn forward(&self, mosaic: &Tensor<T>, cfa: CfaPattern, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_inspect(mosaic, cfa, mode)?.output)
    }

    pub fn forward_inspect(&self, mosaic: &Tensor<T>, cfa: CfaPattern, mode: Mode) -> Result<Inspection<T>> {
        Self::check_input(mosaic.shape())?;
        let mut trace: Vec<(&'static str, Vec<usize>)> = vec![("input", mosaic.shape().to_vec())];
        let mut attention = Vec::new();
        let mut log = |name: &'static str, t: &Tensor<T>| trace.push((name, t.shape().to_vec()));

        let mut sp = match &self.spatial {
            Some(e) => {
                let t = e.input.forward(mosaic, mode)?;
                log("spatial.input", &t);
                Some(t)
            }
            None => None,
        };
        let mut co = match &self.color {
            Some(e) => {
                let packed = pack_mosaic(mosaic, cfa)?;
                log("color.stack", &packed);
                let t = e.input.forward(&packed, mode)?;
                log("color.input", &t);
                Some(t)
            }
            None => None,
        };

        const STAGES: [[&str; 4]; 2] = [
            ["spatial.down1", "color.down1", "bca1.spatial", "bca1.color"],
            ["spatial.down2", "color.down2", "bca2.spatial", "bca2.color"],
        ];
        for (stage, names) in STAGES.iter().enumerate() {
            if let (Some(e), Some(t)) = (&self.spatial, &sp) {
                let d = e.down(stage).forward(t, mode)?;
                log(names[0], &d);
                sp = Some(d);
            }
            if let (Some(e), Some(t)) = (&self.color, &co) {
                let d = e.down(stage).forward(t, mode)?;
                log(names[1], &d);
                co = Some(d);
            }
            if let (Some(params), Some(s), Some(c)) = (self.bca.get(stage), &sp, &co) {
                let out = bca(s, c, params)?;
                log(names[2], &out.spatial_attention);
                log(names[3], &out.color_attention);
                attention.push((names[2], out.spatial_attention));
                attention.push((names[3], out.color_attention));
                sp = Some(out.spatial);
                co = Some(out.color);
            }
        }

        let merged = match (&sp, &co) {
            (Some(s), Some(c)) => concat_channels(&[s, c])?,
            (Some(t), None) | (None, Some(t)) => t.clone(),
            (None, None) => unreachable!("every variant has an encoder"),
        };
        let mut x = self.fuse.forward(&merged, mode)?;
        log("concat", &x);
        for r in &self.resblocks {
            x = r.forward(&x, mode)?;
        }
        log("resblocks", &x);
        let x = self.up2.forward(&x, mode)?;
        log("up2", &x);
        let x = self.up1.forward(&x, mode)?;
        log("up1", &x);
        let residual = tanh(&self.head.forward(&x)?)?;
        log("head", &residual);
        let output = clamp(&add(mosaic, &residual)?, T::zero(), T::one())?;
        log("output", &output);
        Ok(Inspection { output, trace, attention })
    }
}
