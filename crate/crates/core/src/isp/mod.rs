//! A small deterministic camera pipeline: white balance, demosaic, color
//! conversion and gamma, ending in 8-bit sRGB.

mod demosaic;
mod pnm;

pub use demosaic::{demosaic_ahd, demosaic_bilinear};
pub use pnm::{read_pnm, write_pgm, write_ppm};

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use thiserror::Error;

use crate::raw::{BayerFrame, CfaColor, NormalizedFrame};

#[derive(Debug, Error)]
pub enum IspError {
    #[error("frame {width}x{height} is smaller than the {min}x{min} minimum for this demosaic")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("white balance gains must be positive and finite, got {0:?}")]
    Gains([f64; 3]),
    #[error("color matrix row {row} sums to {sum}, expected 1")]
    Matrix { row: usize, sum: f64 },
    #[error("unknown demosaic method {0:?} (expected bilinear or ahd)")]
    UnknownDemosaic(String),
    #[error("PNM: {0}")]
    Pnm(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, IspError>;

/// Per-channel white balance multipliers, normalized so green is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WbGains {
    r: f64,
    g: f64,
    b: f64,
}

impl WbGains {
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        if ![r, g, b].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(IspError::Gains([r, g, b]));
        }
        Ok(WbGains { r: r / g, g: 1.0, b: b / g })
    }

    pub fn unit() -> Self {
        WbGains { r: 1.0, g: 1.0, b: 1.0 }
    }

    pub fn gain(&self, c: CfaColor) -> f64 {
        match c {
            CfaColor::Red => self.r,
            CfaColor::Green => self.g,
            CfaColor::Blue => self.b,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }
}

impl Default for WbGains {
    /// Daylight-like gains for the synthetic sensor.
    fn default() -> Self {
        WbGains { r: 2.0, g: 1.0, b: 1.5 }
    }
}

/// Camera RGB to linear sRGB. Rows sum to one so neutral stays neutral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorMatrix([[f64; 3]; 3]);

impl ColorMatrix {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        for (row, r) in m.iter().enumerate() {
            let sum: f64 = r.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
                return Err(IspError::Matrix { row, sum });
            }
        }
        Ok(ColorMatrix(m))
    }

    pub fn identity() -> Self {
        ColorMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.0
    }
}

impl Default for ColorMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

/// Interleaved linear RGB, one `[r, g, b]` triple per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl LinearRgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        LinearRgbImage { width, height, data: vec![0.0; 3 * width * height] }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values of channel `c` (0 = R) in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

/// Interleaved 8-bit sRGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl SrgbImage {
    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DemosaicMethod {
    #[default]
    Bilinear,
    Ahd,
}

impl FromStr for DemosaicMethod {
    type Err = IspError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bilinear" => Ok(DemosaicMethod::Bilinear),
            "ahd" => Ok(DemosaicMethod::Ahd),
            _ => Err(IspError::UnknownDemosaic(s.to_string())),
        }
    }
}

impl fmt::Display for DemosaicMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DemosaicMethod::Bilinear => "bilinear",
            DemosaicMethod::Ahd => "ahd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IspConfig {
    pub gains: WbGains,
    pub matrix: ColorMatrix,
    pub demosaic: DemosaicMethod,
}

/// Multiplies every sample by its CFA color's gain, clamping to `[0, 1]`.
pub fn white_balance(nf: &NormalizedFrame, gains: &WbGains) -> NormalizedFrame {
    let (w, cfa) = (nf.width(), nf.cfa());
    let row_gains: [[f32; 2]; 2] = [0, 1].map(|y| [0, 1].map(|x| gains.gain(cfa.color_at(x, y)) as f32));
    let values = nf
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * row_gains[(i / w) & 1][(i % w) & 1]).clamp(0.0, 1.0))
        .collect();
    NormalizedFrame::new(nf.width(), nf.height(), cfa, values).expect("dimensions unchanged")
}

/// Applies `m` per pixel; negative results clamp to zero.
pub fn color_convert(img: &LinearRgbImage, m: &ColorMatrix) -> LinearRgbImage {
    let rows = m.rows();
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|px| {
            let p = [f64::from(px[0]), f64::from(px[1]), f64::from(px[2])];
            rows.map(|r| (r[0] * p[0] + r[1] * p[1] + r[2] * p[2]).max(0.0) as f32)
        })
        .collect();
    LinearRgbImage { width: img.width, height: img.height, data }
}

pub const GAMMA_POWER: f64 = 2.222;
pub const GAMMA_SLOPE: f64 = 4.5;

/// Breakpoint `b` and offset `c` of the piecewise gamma curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCurve {
    pub power: f64,
    pub slope: f64,
    pub breakpoint: f64,
    pub offset: f64,
}

impl GammaCurve {
    /// Solves for the breakpoint where the linear toe `slope * x` meets
    /// `(1 + c) x^(1/power) - c` with matching value and derivative.
    ///
    /// Tangency gives `c = slope * b * (power - 1)`; substituting into the
    /// derivative condition leaves `1 + slope b (power - 1) = slope power
    /// b^(1 - 1/power)`, which has one root in `(0, 1/slope)`. Bisection
    /// over that bracket converges to machine precision.
    pub fn solve(power: f64, slope: f64) -> Self {
        let f = |b: f64| slope * power * b.powf(1.0 - 1.0 / power) - 1.0 - slope * b * (power - 1.0);
        // f(0) = -1 < 0 and f is positive at the maximum of the concave term
        let peak = 1.0 / slope;
        let (mut lo, mut hi) = (0.0f64, peak);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let breakpoint = 0.5 * (lo + hi);
        let offset = slope * breakpoint * (power - 1.0);
        GammaCurve { power, slope, breakpoint, offset }
    }

    pub fn standard() -> &'static GammaCurve {
        static CURVE: OnceLock<GammaCurve> = OnceLock::new();
        CURVE.get_or_init(|| GammaCurve::solve(GAMMA_POWER, GAMMA_SLOPE))
    }

    pub fn encode(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        if x < self.breakpoint {
            self.slope * x
        } else {
            (1.0 + self.offset) * x.powf(1.0 / self.power) - self.offset
        }
    }

    /// |linear(b) - power(b)| at the breakpoint.
    pub fn continuity_residual(&self) -> f64 {
        let b = self.breakpoint;
        (self.slope * b - ((1.0 + self.offset) * b.powf(1.0 / self.power) - self.offset)).abs()
    }
}

/// Clamps to `[0, 1]` and applies the standard gamma curve.
pub fn gamma_encode(img: &LinearRgbImage) -> LinearRgbImage {
    let curve = GammaCurve::standard();
    let data = img.data.iter().map(|&v| curve.encode(f64::from(v)) as f32).collect();
    LinearRgbImage { width: img.width, height: img.height, data }
}

/// Round-half-up to 8 bits.
pub fn quantize(img: &LinearRgbImage) -> SrgbImage {
    let data = img
        .data
        .iter()
        .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    SrgbImage { width: img.width, height: img.height, data }
}

pub fn demosaic(nf: &NormalizedFrame, method: DemosaicMethod) -> Result<LinearRgbImage> {
    match method {
        DemosaicMethod::Bilinear => demosaic_bilinear(nf),
        DemosaicMethod::Ahd => demosaic_ahd(nf),
    }
}

/// Runs the pipeline on an already normalized mosaic.
pub fn render_normalized(nf: &NormalizedFrame, cfg: &IspConfig) -> Result<SrgbImage> {
    let balanced = white_balance(nf, &cfg.gains);
    let rgb = demosaic(&balanced, cfg.demosaic)?;
    let converted = color_convert(&rgb, &cfg.matrix);
    Ok(quantize(&gamma_encode(&converted)))
}

/// normalize, white balance, demosaic, color convert, gamma, quantize.
pub fn render(frame: &BayerFrame, cfg: &IspConfig) -> Result<SrgbImage> {
    render_normalized(&frame.normalize(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::{CfaPattern, Levels};

    fn frame(value: u16) -> BayerFrame {
        BayerFrame::filled(16, 12, CfaPattern::Rggb, Levels::new(14, 512, 15871).unwrap(), value).unwrap()
    }

    #[test]
    fn gamma_curve_constants() {
        let g = GammaCurve::standard();
        assert!(g.continuity_residual() <= 1e-9, "{}", g.continuity_residual());
        // derivative continuity
        let b = g.breakpoint;
        let d_pow = (1.0 + g.offset) / g.power * b.powf(1.0 / g.power - 1.0);
        assert!((d_pow - GAMMA_SLOPE).abs() < 1e-9);
        assert!((0.017..0.0185).contains(&b), "breakpoint {b}");
        assert!((0.098..0.1).contains(&g.offset), "offset {}", g.offset);
        assert_eq!(g.encode(0.0), 0.0);
        assert!((g.encode(1.0) - 1.0).abs() < 1e-15);
        assert!((g.encode(0.001) - 0.0045).abs() < 1e-15);
    }

    #[test]
    fn gamma_is_strictly_increasing() {
        let g = GammaCurve::standard();
        let mut prev = -1.0;
        for i in 0..=100_000 {
            let y = g.encode(i as f64 / 100_000.0);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn white_balance_selectivity() {
        let nf = NormalizedFrame::new(4, 4, CfaPattern::Rggb, vec![0.25; 16]).unwrap();
        assert_eq!(white_balance(&nf, &WbGains::unit()), nf);
        let out = white_balance(&nf, &WbGains::new(2.0, 1.0, 1.0).unwrap());
        for y in 0..4 {
            for x in 0..4 {
                let expected = if x % 2 == 0 && y % 2 == 0 { 0.5 } else { 0.25 };
                assert_eq!(out.get(x, y), expected);
            }
        }
    }

    #[test]
    fn white_balance_scales_channel_means() {
        // per-channel means of a textured mosaic scale by exactly the gains
        let vals: Vec<f32> = (0..64).map(|i| 0.05 + 0.3 * ((i * 37 % 17) as f32 / 17.0)).collect();
        let nf = NormalizedFrame::new(8, 8, CfaPattern::Gbrg, vals).unwrap();
        let gains = WbGains::new(2.0, 1.0, 1.5).unwrap();
        let out = white_balance(&nf, &gains);
        for color in [CfaColor::Red, CfaColor::Green, CfaColor::Blue] {
            let mean = |f: &NormalizedFrame| {
                let v: Vec<f64> = (0..64)
                    .filter(|i| f.cfa().color_at(i % 8, i / 8) == color)
                    .map(|i| f64::from(f.values()[i]))
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!((mean(&out) - gains.gain(color) * mean(&nf)).abs() < 1e-6);
        }
    }

    #[test]
    fn matrix_validation_and_conversion() {
        assert!(matches!(
            ColorMatrix::new([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            Err(IspError::Matrix { row: 0, .. })
        ));
        assert!(WbGains::new(0.0, 1.0, 1.0).is_err());
        let m = ColorMatrix::new([[0.5, 0.5, 0.0], [-0.2, 1.4, -0.2], [0.0, -0.5, 1.5]]).unwrap();
        let img = LinearRgbImage { width: 2, height: 1, data: vec![0.2, 0.4, 0.9, 0.3, 0.3, 0.3] };
        let out = color_convert(&img, &m);
        assert!((out.data[0] - 0.3).abs() < 1e-7);
        // gray stays gray
        for c in 0..3 {
            assert!((out.data[3 + c] - 0.3).abs() < 1e-6);
        }
        assert_eq!(color_convert(&img, &ColorMatrix::identity()), img);
        // negative outputs clamp
        let neg = color_convert(&LinearRgbImage { width: 1, height: 1, data: vec![1.0, 0.0, 0.0] }, &m);
        assert_eq!(neg.data[1], 0.0);
    }

    #[test]
    fn render_black_and_white() {
        for method in [DemosaicMethod::Bilinear, DemosaicMethod::Ahd] {
            let cfg = IspConfig { demosaic: method, ..Default::default() };
            assert!(render(&frame(512), &cfg).unwrap().data.iter().all(|&v| v == 0));
            assert!(render(&frame(100), &cfg).unwrap().data.iter().all(|&v| v == 0));
            let unit = IspConfig { gains: WbGains::unit(), matrix: ColorMatrix::identity(), demosaic: method };
            assert!(render(&frame(15871), &unit).unwrap().data.iter().all(|&v| v == 255));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let samples: Vec<u16> = (0..16 * 12).map(|i| 512 + (i * 7919 % 15000) as u16).collect();
        let f = BayerFrame::new(16, 12, CfaPattern::Bggr, Levels::new(14, 512, 15871).unwrap(), samples).unwrap();
        for method in [DemosaicMethod::Bilinear, DemosaicMethod::Ahd] {
            let cfg = IspConfig { demosaic: method, ..Default::default() };
            assert_eq!(render(&f, &cfg).unwrap(), render(&f.clone(), &cfg).unwrap());
        }
    }

    #[test]
    fn demosaic_names() {
        assert_eq!("AHD".parse::<DemosaicMethod>().unwrap(), DemosaicMethod::Ahd);
        assert_eq!("bilinear".parse::<DemosaicMethod>().unwrap(), DemosaicMethod::Bilinear);
        assert!("vng".parse::<DemosaicMethod>().is_err());
    }
}
