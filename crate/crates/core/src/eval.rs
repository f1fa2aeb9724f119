//! Depth metrics over jointly valid pixels, least-squares affine alignment and total variation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::DepthMap;

/// Aligned values below this are clamped so the aligned map stays a valid depth map.
pub const MIN_ALIGNED_DEPTH: f64 = 1e-6;

fn joint(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<(f64, f64)>> {
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let pairs: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&k| pred.valid()[k] && gt.valid()[k])
        .map(|k| (pred.data()[k], gt.data()[k]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoValidPixels("no pixel is valid in both maps".into()));
    }
    Ok(pairs)
}

/// Mean of `|pred − gt| / gt`.
pub fn abs_rel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let p = joint(pred, gt)?;
    Ok(p.iter().map(|(a, g)| (a - g).abs() / g).sum::<f64>() / p.len() as f64)
}

/// Fraction of pixels with `max(pred/gt, gt/pred) < 1.25`.
pub fn delta1(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let p = joint(pred, gt)?;
    let hit = p.iter().filter(|(a, g)| (a / g).max(g / a) < 1.25).count();
    Ok(hit as f64 / p.len() as f64)
}

/// Root of the mean squared error, in meters.
pub fn rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let p = joint(pred, gt)?;
    Ok((p.iter().map(|(a, g)| (a - g) * (a - g)).sum::<f64>() / p.len() as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
    pub aligned: DepthMap,
}

/// Closed-form `(a, b) = argmin Σ(a·pred + b − gt)²` over jointly valid pixels.
pub fn affine_align(pred: &DepthMap, gt: &DepthMap) -> Result<Alignment> {
    let p = joint(pred, gt)?;
    if p.len() < 2 {
        return Err(Error::DegenerateFit("alignment needs at least two pixels".into()));
    }
    let n = p.len() as f64;
    let mx = p.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = p.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = p.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let sxy: f64 = p.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-12 * n * mx.abs().max(1.0).powi(2) {
        return Err(Error::DegenerateFit("prediction is constant".into()));
    }
    let scale = sxy / sxx;
    let shift = my - scale * mx;
    let aligned = DepthMap::with_mask(
        pred.width(),
        pred.height(),
        pred.data()
            .iter()
            .zip(pred.valid())
            .map(|(&x, &v)| if v { (scale * x + shift).max(MIN_ALIGNED_DEPTH) } else { 0.0 })
            .collect(),
        pred.valid().to_vec(),
    )?;
    Ok(Alignment {
        scale,
        shift,
        aligned,
    })
}

/// Mean absolute forward difference along x plus the same along y, over pairs of valid
/// neighbours.
pub fn total_variation(depth: &DepthMap) -> f64 {
    let (w, h) = (depth.width(), depth.height());
    let (mut sx, mut nx, mut sy, mut ny) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            if !depth.is_valid(i, j) {
                continue;
            }
            if j + 1 < w && depth.is_valid(i, j + 1) {
                sx += (depth.get(i, j + 1) - depth.get(i, j)).abs();
                nx += 1;
            }
            if i + 1 < h && depth.is_valid(i + 1, j) {
                sy += (depth.get(i + 1, j) - depth.get(i, j)).abs();
                ny += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(sx, nx) + mean(sy, ny)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub n_pixels: usize,
    pub aligned: bool,
}

impl MetricReport {
    pub fn compute(pred: &DepthMap, gt: &DepthMap, aligned: bool) -> Result<Self> {
        Ok(Self {
            abs_rel: abs_rel(pred, gt)?,
            delta1: delta1(pred, gt)?,
            rmse: rmse(pred, gt)?,
            n_pixels: joint(pred, gt)?.len(),
            aligned,
        })
    }

    /// `key=value` lines; keys are prefixed with `raw.` or `aligned.`.
    pub fn to_key_values(&self) -> String {
        let p = if self.aligned { "aligned" } else { "raw" };
        format!(
            "{p}.abs_rel={}\n{p}.delta1={}\n{p}.rmse={}\n{p}.n_pixels={}\n",
            self.abs_rel, self.delta1, self.rmse, self.n_pixels
        )
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Raw and least-squares-aligned reports for one prediction.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub raw: MetricReport,
    pub aligned: MetricReport,
    pub alignment: Alignment,
}

pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<Evaluation> {
    let raw = MetricReport::compute(pred, gt, false)?;
    let alignment = affine_align(pred, gt)?;
    let aligned = MetricReport::compute(&alignment.aligned, gt, true)?;
    Ok(Evaluation {
        raw,
        aligned,
        alignment,
    })
}
