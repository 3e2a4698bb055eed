//! Blur/sharp pair synthesis by temporal averaging of successive RAW frames.

mod dataset;
mod scene;

pub use dataset::{build_dataset, plan_pairs, DatasetConfig, MPolicy, Manifest, ManifestEntry, Split, MANIFEST_NAME};
pub use scene::{RasterScene, Scene};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::raw::{BayerFrame, CfaColor, CfaPattern, Levels, RawError};

#[derive(Debug, Error)]
pub enum BlurError {
    #[error("sequence needs at least 3 frames, got {0}")]
    TooShort(usize),
    #[error("frame {index} does not share the layout of frame 0")]
    LayoutMismatch { index: usize },
    #[error("window of {m} frames must have 3 <= M <= 5")]
    WindowSize { m: usize },
    #[error("window start {start} + {m} exceeds sequence length {len}")]
    WindowOverflow { start: usize, m: usize, len: usize },
    #[error("window stride must be positive")]
    ZeroStride,
    #[error("velocity ({0}, {1}) exceeds 4 px/frame")]
    TooFast(f64, f64),
    #[error("object motion requires an object region")]
    MissingRegion,
    #[error("scene {scene_w}x{scene_h} cannot cover {frame_w}x{frame_h} frames over a travel of ({travel_x}, {travel_y}) px")]
    Coverage { scene_w: usize, scene_h: usize, frame_w: usize, frame_h: usize, travel_x: f64, travel_y: f64 },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
    #[error(transparent)]
    Raw(#[from] RawError),
}

pub type Result<T> = std::result::Result<T, BlurError>;

/// Successive frames from one capture. All frames share a layout.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<BayerFrame>,
    frame_rate: f32,
}

impl FrameSequence {
    pub fn new(frames: Vec<BayerFrame>, frame_rate: f32) -> Result<Self> {
        if frames.len() < 3 {
            return Err(BlurError::TooShort(frames.len()));
        }
        if let Some(index) = frames.iter().position(|f| !f.same_layout(&frames[0])) {
            return Err(BlurError::LayoutMismatch { index });
        }
        Ok(FrameSequence { frames, frame_rate })
    }

    pub fn frames(&self) -> &[BayerFrame] {
        &self.frames
    }
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    pub fn frame_rate(&self) -> f32 {
        self.frame_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlurPair {
    pub blurred: BayerFrame,
    pub sharp: BayerFrame,
    pub source_id: String,
    /// Absolute index of the sharp frame in its sequence.
    pub center_index: usize,
    pub num_averaged: usize,
}

/// Averages `m` frames starting at `start`. The blurred frame is the
/// per-site mean rounded half up in sensor counts; the sharp frame is the one
/// at `start + m / 2`.
pub fn average_frames(seq: &FrameSequence, start: usize, m: usize) -> Result<BlurPair> {
    if !(3..=5).contains(&m) {
        return Err(BlurError::WindowSize { m });
    }
    if start + m > seq.len() {
        return Err(BlurError::WindowOverflow { start, m, len: seq.len() });
    }
    let window = &seq.frames[start..start + m];
    let center_index = start + m / 2;
    let sharp = seq.frames[center_index].clone();
    let n = sharp.samples().len();
    let m64 = m as u64;
    let blurred_samples: Vec<u16> = (0..n)
        .map(|i| {
            let sum: u64 = window.iter().map(|f| u64::from(f.samples()[i])).sum();
            // floor(sum / m + 1/2)
            ((2 * sum + m64) / (2 * m64)) as u16
        })
        .collect();
    let blurred = BayerFrame::new(sharp.width(), sharp.height(), sharp.cfa(), sharp.levels(), blurred_samples)?;
    Ok(BlurPair { blurred, sharp, source_id: String::new(), center_index, num_averaged: m })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionKind {
    /// The whole field of view pans.
    GlobalTranslate,
    /// A rectangle of the scene moves over a static background.
    ObjectTranslate,
}

/// Axis-aligned rectangle in scene pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpec {
    pub kind: MotionKind,
    /// Pixels per frame, (x, y).
    pub velocity: (f64, f64),
    pub object_region: Option<Rect>,
    /// Seeds the per-frame sensor noise.
    pub seed: u64,
}

impl MotionSpec {
    pub const MAX_SPEED: f64 = 4.0;

    pub fn global(velocity: (f64, f64), seed: u64) -> Self {
        MotionSpec { kind: MotionKind::GlobalTranslate, velocity, object_region: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let (vx, vy) = self.velocity;
        if !vx.is_finite() || !vy.is_finite() || vx.hypot(vy) > Self::MAX_SPEED {
            return Err(BlurError::TooFast(vx, vy));
        }
        if self.kind == MotionKind::ObjectTranslate && self.object_region.is_none() {
            return Err(BlurError::MissingRegion);
        }
        Ok(())
    }
}

/// Sensor model used when mosaicking a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub width: usize,
    pub height: usize,
    pub cfa: CfaPattern,
    pub levels: Levels,
    /// Per-channel (R, G, B) sensitivity. The default makes a neutral scene
    /// read as neutral after the default daylight white balance.
    pub response: [f64; 3],
    /// Standard deviation of additive Gaussian read noise, in counts.
    pub noise_counts: f64,
    pub frame_rate: f32,
}

impl SensorModel {
    pub fn new(width: usize, height: usize, cfa: CfaPattern, levels: Levels) -> Self {
        SensorModel {
            width,
            height,
            cfa,
            levels,
            response: [1.0 / 2.0, 1.0, 1.0 / 1.5],
            noise_counts: 0.0,
            frame_rate: 30.0,
        }
    }
}

/// Renders `n_frames` of `scene` seen through `sensor` under `motion`.
///
/// Frame `i` samples the scene at origin `start + i * velocity`; a pixel's
/// color channel is the CFA color of its position in the output frame, so a
/// shift by an even number of whole pixels is an exact crop of frame 0.
pub fn synth_sequence(
    scene: &dyn Scene,
    motion: &MotionSpec,
    sensor: &SensorModel,
    n_frames: usize,
) -> Result<FrameSequence> {
    if n_frames < 3 {
        return Err(BlurError::TooShort(n_frames));
    }
    motion.validate()?;
    let (vx, vy) = motion.velocity;
    let steps = (n_frames - 1) as f64;
    let (travel_x, travel_y) = (vx * steps, vy * steps);
    let (w, h) = (sensor.width, sensor.height);
    let coverage_err = || BlurError::Coverage {
        scene_w: scene.width(),
        scene_h: scene.height(),
        frame_w: w,
        frame_h: h,
        travel_x,
        travel_y,
    };

    // origin of frame 0 in scene coordinates, and whether the frame window moves
    let (ox, oy, window_moves) = match motion.kind {
        MotionKind::GlobalTranslate => {
            let need_w = w as f64 + travel_x.abs();
            let need_h = h as f64 + travel_y.abs();
            if need_w > scene.width() as f64 || need_h > scene.height() as f64 {
                return Err(coverage_err());
            }
            // start on an even pixel so that even velocities keep CFA phase
            let start = |travel: f64| {
                let s = (-travel).max(0.0).ceil() as usize;
                (s + (s & 1)) as f64
            };
            let (sx, sy) = (start(travel_x), start(travel_y));
            if sx + w as f64 + travel_x.max(0.0) > scene.width() as f64
                || sy + h as f64 + travel_y.max(0.0) > scene.height() as f64
            {
                return Err(coverage_err());
            }
            (sx, sy, true)
        }
        MotionKind::ObjectTranslate => {
            if w > scene.width() || h > scene.height() {
                return Err(coverage_err());
            }
            (0.0, 0.0, false)
        }
    };

    let region = motion.object_region;
    let levels = sensor.levels;
    let black = f64::from(levels.black);
    let range = f64::from(levels.white) - black;
    let max = f64::from(levels.max_sample());
    let channel = |c: CfaColor| match c {
        CfaColor::Red => 0,
        CfaColor::Green => 1,
        CfaColor::Blue => 2,
    };

    let frames = crate::parallel::map_indexed(n_frames, |i| {
        let t = i as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(motion.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut samples = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let (sx, sy) = if window_moves {
                    (ox + px + vx * t, oy + py + vy * t)
                } else {
                    let moved = region.map(|r| Rect { x: r.x + vx * t, y: r.y + vy * t, ..r });
                    match moved {
                        Some(r) if r.contains(px, py) => (px - vx * t, py - vy * t),
                        _ => (px, py),
                    }
                };
                let c = channel(sensor.cfa.color_at(x, y));
                let v = scene.sample(sx, sy)[c] * sensor.response[c];
                let mut counts = black + v.clamp(0.0, 1.0) * range;
                if sensor.noise_counts > 0.0 {
                    counts += sensor.noise_counts * rng.sample::<f64, _>(StandardNormal);
                }
                samples.push((counts + 0.5).floor().clamp(0.0, max) as u16);
            }
        }
        BayerFrame::new(w, h, sensor.cfa, levels, samples)
    });
    let frames = frames.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    FrameSequence::new(frames, sensor.frame_rate)
}
