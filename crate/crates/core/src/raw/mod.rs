//! Bayer mosaic data model: CFA layouts, sensor frames, normalization,
//! CFA-aligned cropping and the packed four-plane representation.

mod rawb;

pub use rawb::{read_rawb, read_rawb_file, write_rawb, write_rawb_file};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RawError {
    #[error("frame dimensions {width}x{height} must be even and non-zero")]
    OddDimensions { width: usize, height: usize },
    #[error("sample buffer has {got} values, expected {expected}")]
    SampleCount { expected: usize, got: usize },
    #[error("invalid levels: black {black}, white {white}, bit depth {bit_depth}")]
    Levels { black: u16, white: u16, bit_depth: u8 },
    #[error("bit depth {0} outside 10..=16")]
    BitDepth(u8),
    #[error("sample {value} at index {index} exceeds {max}")]
    SampleRange { index: usize, value: u16, max: u32 },
    #[error("unknown CFA pattern {0:?}")]
    UnknownCfa(String),
    #[error("crop ({x},{y}) {w}x{h} is not CFA-aligned (all components must be even and extents non-zero)")]
    Misaligned { x: usize, y: usize, w: usize, h: usize },
    #[error("crop ({x},{y}) {w}x{h} exceeds frame {width}x{height}")]
    CropBounds { x: usize, y: usize, w: usize, h: usize, width: usize, height: usize },
    #[error("normalized value {value} at index {index} is outside [0, 1]")]
    ValueRange { index: usize, value: f32 },
    #[error("RAWB format: {0}")]
    Format(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, RawError>;

/// A sensor color filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfaColor {
    Red,
    Green,
    Blue,
}

/// Position of a cell within the canonical packed layout.
///
/// `G0` is the green that shares a row with red, `G1` the one that shares a
/// row with blue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneRole {
    R = 0,
    G0 = 1,
    B = 2,
    G1 = 3,
}

impl PlaneRole {
    pub const ALL: [PlaneRole; 4] = [PlaneRole::R, PlaneRole::G0, PlaneRole::B, PlaneRole::G1];

    pub fn color(self) -> CfaColor {
        match self {
            PlaneRole::R => CfaColor::Red,
            PlaneRole::B => CfaColor::Blue,
            PlaneRole::G0 | PlaneRole::G1 => CfaColor::Green,
        }
    }
}

/// The four Bayer layouts. Each variant names its 2x2 tile in reading order,
/// so every layout has one red, one blue and two diagonal greens by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [CfaPattern::Rggb, CfaPattern::Bggr, CfaPattern::Grbg, CfaPattern::Gbrg];

    /// Tile cells in reading order: (0,0), (1,0), (0,1), (1,1).
    pub fn tile(self) -> [CfaColor; 4] {
        use CfaColor::*;
        match self {
            CfaPattern::Rggb => [Red, Green, Green, Blue],
            CfaPattern::Bggr => [Blue, Green, Green, Red],
            CfaPattern::Grbg => [Green, Red, Blue, Green],
            CfaPattern::Gbrg => [Green, Blue, Red, Green],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }

    /// Color of the mosaic cell at column `x`, row `y`.
    #[inline]
    pub fn color_at(self, x: usize, y: usize) -> CfaColor {
        self.tile()[(y & 1) * 2 + (x & 1)]
    }

    /// Offsets `(dx, dy)` inside the 2x2 tile for each role, in plane order
    /// (R, G0, B, G1).
    pub fn role_offsets(self) -> [(usize, usize); 4] {
        let tile = self.tile();
        let pos = |i: usize| (i & 1, i >> 1);
        let r = pos(tile.iter().position(|&c| c == CfaColor::Red).unwrap());
        let b = pos(tile.iter().position(|&c| c == CfaColor::Blue).unwrap());
        // the green on R's row sits at R's column flipped
        let g0 = (r.0 ^ 1, r.1);
        let g1 = (b.0 ^ 1, b.1);
        [r, g0, b, g1]
    }

    /// Role of the mosaic cell at column `x`, row `y`.
    #[inline]
    pub fn role_at(self, x: usize, y: usize) -> PlaneRole {
        let cell = (x & 1, y & 1);
        let offs = self.role_offsets();
        PlaneRole::ALL[offs.iter().position(|&o| o == cell).unwrap()]
    }
}

impl fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfaPattern {
    type Err = RawError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            _ => Err(RawError::UnknownCfa(s.to_string())),
        }
    }
}

/// Sensor level metadata shared by every frame of a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Levels {
    pub bit_depth: u8,
    pub black: u16,
    pub white: u16,
}

impl Levels {
    pub fn new(bit_depth: u8, black: u16, white: u16) -> Result<Self> {
        if !(10..=16).contains(&bit_depth) {
            return Err(RawError::BitDepth(bit_depth));
        }
        let max = (1u32 << bit_depth) - 1;
        if black >= white || u32::from(white) > max {
            return Err(RawError::Levels { black, white, bit_depth });
        }
        Ok(Levels { bit_depth, black, white })
    }

    pub fn max_sample(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }
}

/// A single-channel integer sensor readout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BayerFrame {
    width: usize,
    height: usize,
    cfa: CfaPattern,
    levels: Levels,
    samples: Vec<u16>,
}

impl BayerFrame {
    pub fn new(width: usize, height: usize, cfa: CfaPattern, levels: Levels, samples: Vec<u16>) -> Result<Self> {
        check_even(width, height)?;
        if samples.len() != width * height {
            return Err(RawError::SampleCount { expected: width * height, got: samples.len() });
        }
        let max = levels.max_sample();
        if let Some((index, &value)) = samples.iter().enumerate().find(|(_, &v)| u32::from(v) > max) {
            return Err(RawError::SampleRange { index, value, max });
        }
        Ok(BayerFrame { width, height, cfa, levels, samples })
    }

    /// A frame with every sample set to `value`.
    pub fn filled(width: usize, height: usize, cfa: CfaPattern, levels: Levels, value: u16) -> Result<Self> {
        Self::new(width, height, cfa, levels, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn cfa(&self) -> CfaPattern {
        self.cfa
    }
    pub fn levels(&self) -> Levels {
        self.levels
    }
    pub fn samples(&self) -> &[u16] {
        &self.samples
    }
    pub fn into_samples(self) -> Vec<u16> {
        self.samples
    }

    /// True when both frames share dimensions, CFA and levels.
    pub fn same_layout(&self, other: &BayerFrame) -> bool {
        self.width == other.width && self.height == other.height && self.cfa == other.cfa && self.levels == other.levels
    }

    /// Maps samples to `[0, 1]` as `(s - black) / (white - black)`, clamped.
    pub fn normalize(&self) -> NormalizedFrame {
        let black = f64::from(self.levels.black);
        let range = f64::from(self.levels.white) - black;
        let values = self
            .samples
            .iter()
            .map(|&s| ((f64::from(s) - black) / range).clamp(0.0, 1.0) as f32)
            .collect();
        NormalizedFrame { width: self.width, height: self.height, cfa: self.cfa, values }
    }
}

/// A Bayer mosaic with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFrame {
    width: usize,
    height: usize,
    cfa: CfaPattern,
    values: Vec<f32>,
}

impl NormalizedFrame {
    pub fn new(width: usize, height: usize, cfa: CfaPattern, values: Vec<f32>) -> Result<Self> {
        check_even(width, height)?;
        if values.len() != width * height {
            return Err(RawError::SampleCount { expected: width * height, got: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(RawError::ValueRange { index, value });
        }
        Ok(NormalizedFrame { width, height, cfa, values })
    }

    /// Builds a frame, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(width: usize, height: usize, cfa: CfaPattern, values: Vec<f32>) -> Result<Self> {
        let values = values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(width, height, cfa, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn cfa(&self) -> CfaPattern {
        self.cfa
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Inverse of [`BayerFrame::normalize`], rounding half up to integer counts.
    pub fn denormalize(&self, levels: Levels) -> BayerFrame {
        let black = f64::from(levels.black);
        let range = f64::from(levels.white) - black;
        let samples = self
            .values
            .iter()
            .map(|&v| (f64::from(v) * range + black + 0.5).floor() as u16)
            .collect();
        BayerFrame { width: self.width, height: self.height, cfa: self.cfa, levels, samples }
    }

    /// Splits the mosaic into four half-resolution planes ordered (R, G0, B, G1).
    pub fn pack(&self) -> PackedPlanes {
        let (pw, ph) = (self.width / 2, self.height / 2);
        let mut planes = vec![0.0f32; 4 * pw * ph];
        for (p, &(dx, dy)) in self.cfa.role_offsets().iter().enumerate() {
            let plane = &mut planes[p * pw * ph..(p + 1) * pw * ph];
            for i in 0..ph {
                let row = &self.values[(2 * i + dy) * self.width..];
                for j in 0..pw {
                    plane[i * pw + j] = row[2 * j + dx];
                }
            }
        }
        PackedPlanes { width: pw, height: ph, values: planes }
    }

    /// Copies the sub-rectangle at (`x`, `y`) of size `w` x `h`. All four
    /// must be even so the CFA phase is preserved.
    pub fn crop_aligned(&self, x: usize, y: usize, w: usize, h: usize) -> Result<NormalizedFrame> {
        check_crop(self.width, self.height, x, y, w, h)?;
        let mut values = Vec::with_capacity(w * h);
        for row in y..y + h {
            values.extend_from_slice(&self.values[row * self.width + x..row * self.width + x + w]);
        }
        Ok(NormalizedFrame { width: w, height: h, cfa: self.cfa, values })
    }
}

/// Four half-resolution planes in canonical (R, G0, B, G1) order, stored
/// plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedPlanes {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl PackedPlanes {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RawError::OddDimensions { width: 2 * width, height: 2 * height });
        }
        if values.len() != 4 * width * height {
            return Err(RawError::SampleCount { expected: 4 * width * height, got: values.len() });
        }
        Ok(PackedPlanes { width, height, values })
    }

    /// Plane extent (half the mosaic extent).
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn plane(&self, role: PlaneRole) -> &[f32] {
        let n = self.width * self.height;
        &self.values[role as usize * n..(role as usize + 1) * n]
    }

    /// Reassembles the mosaic for layout `cfa`.
    pub fn unpack(&self, cfa: CfaPattern) -> NormalizedFrame {
        let (w, h) = (2 * self.width, 2 * self.height);
        let mut values = vec![0.0f32; w * h];
        let n = self.width * self.height;
        for (p, &(dx, dy)) in cfa.role_offsets().iter().enumerate() {
            let plane = &self.values[p * n..(p + 1) * n];
            for i in 0..self.height {
                for j in 0..self.width {
                    values[(2 * i + dy) * w + 2 * j + dx] = plane[i * self.width + j];
                }
            }
        }
        NormalizedFrame { width: w, height: h, cfa, values }
    }
}

fn check_even(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
        return Err(RawError::OddDimensions { width, height });
    }
    Ok(())
}

pub(crate) fn check_crop(width: usize, height: usize, x: usize, y: usize, w: usize, h: usize) -> Result<()> {
    if !x.is_multiple_of(2) || !y.is_multiple_of(2) || !w.is_multiple_of(2) || !h.is_multiple_of(2) || w == 0 || h == 0 {
        return Err(RawError::Misaligned { x, y, w, h });
    }
    if x + w > width || y + h > height {
        return Err(RawError::CropBounds { x, y, w, h, width, height });
    }
    Ok(())
}
