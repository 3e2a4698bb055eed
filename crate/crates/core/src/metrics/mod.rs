//! Training losses (L2, SSIM and their weighted sum) and the PSNR / SSIM
//! quality metrics in the RAW and sRGB domains.

mod ssim;

pub use ssim::{mean_ssim, ssim_map, ssim_plane, SsimParams, SSIM_RADIUS, SSIM_SIGMA, SSIM_WINDOW};

use std::fmt;

use thiserror::Error;

use crate::autodiff::{add, mean, mul, scale, Element, Tensor, TensorError};
use crate::isp::SrgbImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("expected {expected} values, got {lhs} and {rhs}")]
    Length { expected: usize, lhs: usize, rhs: usize },
    #[error("loss weight must be finite and nonnegative, got {0}")]
    NegativeWeight(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean squared difference over all elements.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    let diff = add(pred, &scale(gt, -T::one())?)?;
    Ok(mean(&mul(&diff, &diff)?))
}

/// Mean over pixels of `1 - SSIM`.
pub fn ssim_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, params: &SsimParams) -> Result<Tensor<T>> {
    let s = mean(&ssim_map(pred, gt, params)?);
    Ok(add(&Tensor::scalar(T::one()), &scale(&s, -T::one())?)?)
}

/// `mse_loss + lambda * ssim_loss`.
pub fn total_loss<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, lambda: f64, params: &SsimParams) -> Result<Tensor<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(MetricsError::NegativeWeight(lambda));
    }
    let l2 = mse_loss(pred, gt)?;
    if lambda == 0.0 {
        return Ok(l2);
    }
    Ok(add(&l2, &scale(&ssim_loss(pred, gt, params)?, T::of(lambda))?)?)
}

/// `10 log10(L^2 / MSE)` in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<A: Copy + Into<f64>>(pred: &[A], gt: &[A], dynamic_range: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::Length { expected: gt.len(), lhs: pred.len(), rhs: gt.len() });
    }
    let sse: f64 = pred.iter().zip(gt).map(|(&a, &b)| (a.into() - b.into()).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / (sse / pred.len() as f64)).log10())
}

fn same_size(a: &SrgbImage, b: &SrgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::Length { expected: a.data.len(), lhs: a.data.len(), rhs: b.data.len() });
    }
    Ok(())
}

/// PSNR of two 8-bit sRGB images over all channels, L = 255.
pub fn psnr_srgb(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    same_size(a, b)?;
    psnr(&a.data, &b.data, 255.0)
}

/// Mean SSIM of two 8-bit sRGB images, computed per channel with L = 255
/// and averaged over the three channels.
pub fn ssim_srgb(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    same_size(a, b)?;
    let params = SsimParams::srgb();
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.channel(c).into_iter().map(f64::from).collect();
        let y: Vec<f64> = b.channel(c).into_iter().map(f64::from).collect();
        total += mean_ssim(&x, &y, a.width, a.height, &params)?;
    }
    Ok(total / 3.0)
}

/// Quality of one restored image against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub raw_psnr: f64,
    pub raw_ssim: f64,
    pub srgb_psnr: f64,
    pub srgb_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: &str = "id\traw_psnr\traw_ssim\tsrgb_psnr\tsrgb_ssim";

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Arithmetic means of every column; an infinite PSNR makes its mean
    /// infinite. `None` for an empty report.
    pub fn aggregate(&self) -> Option<EvalRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(EvalRow {
            id: format!("mean(n={})", self.rows.len()),
            raw_psnr: avg(|r| r.raw_psnr),
            raw_ssim: avg(|r| r.raw_ssim),
            srgb_psnr: avg(|r| r.srgb_psnr),
            srgb_ssim: avg(|r| r.srgb_ssim),
        })
    }

    fn line(r: &EvalRow) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            r.id,
            fmt_metric(r.raw_psnr),
            fmt_metric(r.raw_ssim),
            fmt_metric(r.srgb_psnr),
            fmt_metric(r.srgb_ssim)
        )
    }

    /// Header line, one tab-separated line per image, then the aggregate.
    pub fn to_text(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(self.aggregate().as_ref()) {
            out.push_str(&Self::line(r));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
