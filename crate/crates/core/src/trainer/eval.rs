use crate::autodiff::Tensor;
use crate::blur::{Manifest, Split};
use crate::isp::{render_normalized, IspConfig};
use crate::metrics::{mean_ssim, psnr, psnr_srgb, ssim_srgb, EvalReport, EvalRow, SsimParams};
use crate::model::{Checkpoint, DeblurNet, Mode};
use crate::parallel;
use crate::raw::NormalizedFrame;

use super::{load_pairs, Result, TrainError, TrainPair};

/// Runs the network over a whole frame with running batch statistics.
pub fn restore(net: &DeblurNet<f32>, blurred: &NormalizedFrame) -> Result<NormalizedFrame> {
    let (w, h) = (blurred.width(), blurred.height());
    let x = Tensor::new(blurred.values().to_vec(), &[1, 1, h, w])?;
    let y = net.forward(&x, blurred.cfa(), Mode::Eval)?;
    Ok(NormalizedFrame::from_clamped(w, h, blurred.cfa(), y.to_vec())?)
}

/// RAW-domain PSNR (peak 1) of the restored `blurred` against `sharp`.
pub fn raw_psnr(net: &DeblurNet<f32>, blurred: &NormalizedFrame, sharp: &NormalizedFrame) -> Result<f64> {
    Ok(psnr(restore(net, blurred)?.values(), sharp.values(), 1.0)?)
}

/// Scores a restored mosaic against its ground truth in both domains.
pub fn score(id: &str, pred: &NormalizedFrame, gt: &NormalizedFrame, isp: &IspConfig) -> Result<EvalRow> {
    let widen = |f: &NormalizedFrame| f.values().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let (w, h) = (gt.width(), gt.height());
    let raw_ssim = mean_ssim(&widen(pred), &widen(gt), w, h, &SsimParams::raw())?;
    let (rp, rg) = (render_normalized(pred, isp)?, render_normalized(gt, isp)?);
    Ok(EvalRow {
        id: id.to_string(),
        raw_psnr: psnr(pred.values(), gt.values(), 1.0)?,
        raw_ssim,
        srgb_psnr: psnr_srgb(&rp, &rg)?,
        srgb_ssim: ssim_srgb(&rp, &rg)?,
    })
}

/// Restores every pair and scores it; scoring runs across images in
/// parallel.
pub fn evaluate_pairs(net: &DeblurNet<f32>, pairs: &[TrainPair], isp: &IspConfig) -> Result<EvalReport> {
    let restored = pairs.iter().map(|p| restore(net, &p.blurred)).collect::<Result<Vec<_>>>()?;
    let rows = parallel::map_indexed(pairs.len(), |i| score(&pairs[i].id, &restored[i], &pairs[i].sharp, isp));
    Ok(EvalReport { rows: rows.into_iter().collect::<Result<_>>()? })
}

/// Evaluates a checkpoint on one split of a manifest.
pub fn evaluate(ck: &Checkpoint, manifest: &Manifest, split: Split, isp: &IspConfig) -> Result<EvalReport> {
    let pairs = load_pairs(manifest, split)?;
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    evaluate_pairs(&ck.to_net()?, &pairs, isp)
}
