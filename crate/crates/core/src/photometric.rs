//! Reprojection objective: a blend of structural dissimilarity and mean absolute error
//! between the reference view and its re-rendering, plus an L2 penalty on the raw
//! scale/shift parameters.
//!
//! SSIM uses uniform (box) windows. A window contributes only when every pixel inside it is
//! valid, and the L1 term averages over valid pixels and channels. Invalid pixels therefore
//! never influence the value or its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_param::ScaleShiftParams;
use crate::scene::Image;
use crate::warp::WarpResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoLossConfig {
    /// Weight of the SSIM term; `1 - eta` weights the L1 term.
    pub eta: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Weight of `ŝ² + t̂²`.
    pub gamma: f64,
}

impl Default for GeoLossConfig {
    fn default() -> Self {
        Self {
            eta: 0.85,
            ssim_window: 7,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            gamma: 1e-2,
        }
    }
}

impl GeoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta {} not in [0,1]", self.eta)));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ssim window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::InvalidConfig("ssim constants must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma {} < 0", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SsimValue {
    /// Mean local SSIM over contributing windows and channels.
    pub value: f64,
    /// `∂value/∂b`, laid out like the image data.
    pub grad_b: Vec<f64>,
    /// Number of windows (per channel) that contributed.
    pub windows: usize,
}

/// Mean SSIM of `a` and `b` over all windows that fit inside the image.
pub fn ssim(a: &Image, b: &Image, window: usize, c1: f64, c2: f64) -> Result<SsimValue> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("ssim inputs differ in shape".into()));
    }
    if window > a.width() || window > a.height() {
        return Err(Error::DimensionMismatch(format!(
            "ssim window {window} larger than {}x{} image",
            a.width(),
            a.height()
        )));
    }
    let mask = vec![true; a.width() * a.height()];
    Ok(ssim_masked(a, b, &mask, window, c1, c2))
}

/// SSIM restricted to windows whose pixels are all valid. With no such window the value is
/// `1.0` (no structural evidence) and the gradient is zero.
pub fn ssim_masked(
    a: &Image,
    b: &Image,
    valid: &[bool],
    window: usize,
    c1: f64,
    c2: f64,
) -> SsimValue {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut grad = vec![0.0; w * h * ch];
    if window > w || window > h {
        return SsimValue {
            value: 1.0,
            grad_b: grad,
            windows: 0,
        };
    }
    let half = window / 2;
    let n = (window * window) as f64;

    // Integral image of invalid pixels, (w+1)x(h+1).
    let mut bad = vec![0u32; (w + 1) * (h + 1)];
    for i in 0..h {
        for j in 0..w {
            let v = u32::from(!valid[i * w + j]);
            bad[(i + 1) * (w + 1) + j + 1] =
                v + bad[i * (w + 1) + j + 1] + bad[(i + 1) * (w + 1) + j] - bad[i * (w + 1) + j];
        }
    }
    let window_ok = |i0: usize, j0: usize| {
        let (i1, j1) = (i0 + window, j0 + window);
        bad[i1 * (w + 1) + j1] + bad[i0 * (w + 1) + j0]
            == bad[i0 * (w + 1) + j1] + bad[i1 * (w + 1) + j0]
    };

    let ad = a.data();
    let bd = b.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for ci in half..h - half {
        for cj in half..w - half {
            let (i0, j0) = (ci - half, cj - half);
            if !window_ok(i0, j0) {
                continue;
            }
            count += 1;
            for c in 0..ch {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + window {
                    let row = i * w;
                    for j in j0..j0 + window {
                        let x = ad[(row + j) * ch + c];
                        let y = bd[(row + j) * ch + c];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let mu_a = sa / n;
                let mu_b = sb / n;
                let var_a = saa / n - mu_a * mu_a;
                let var_b = sbb / n - mu_b * mu_b;
                let cov = sab / n - mu_a * mu_b;
                let n1 = 2.0 * mu_a * mu_b + c1;
                let n2 = 2.0 * cov + c2;
                let d1 = mu_a * mu_a + mu_b * mu_b + c1;
                let d2 = var_a + var_b + c2;
                let s = (n1 * n2) / (d1 * d2);
                total += s;

                let ds_dmu_b = s * (2.0 * mu_a / n1 - 2.0 * mu_b / d1);
                let ds_dcov = s * 2.0 / n2;
                let ds_dvar_b = -s / d2;
                for i in i0..i0 + window {
                    let row = i * w;
                    for j in j0..j0 + window {
                        let idx = (row + j) * ch + c;
                        let x = ad[idx];
                        let y = bd[idx];
                        grad[idx] += (ds_dmu_b
                            + ds_dvar_b * 2.0 * (y - mu_b)
                            + ds_dcov * (x - mu_a))
                            / n;
                    }
                }
            }
        }
    }
    if count == 0 {
        return SsimValue {
            value: 1.0,
            grad_b: grad,
            windows: 0,
        };
    }
    let denom = (count * ch) as f64;
    for g in &mut grad {
        *g /= denom;
    }
    SsimValue {
        value: total / denom,
        grad_b: grad,
        windows: count,
    }
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    /// `(1 - SSIM) / 2`.
    pub ssim_term: f64,
    /// Mean absolute difference over valid pixels and channels.
    pub l1_term: f64,
    pub reg_term: f64,
    /// `∂total/∂rendered`, zero at invalid pixels.
    pub grad_wrt_rendered: Vec<f64>,
    pub valid_pixels: usize,
    pub ssim_windows: usize,
}

/// Image terms only (no regularizer).
pub fn photometric_loss(
    reference: &Image,
    rendered: &WarpResult,
    cfg: &GeoLossConfig,
) -> Result<LossValue> {
    if !reference.same_shape(&rendered.image) || rendered.valid.len() != reference.width() * reference.height() {
        return Err(Error::DimensionMismatch(format!(
            "reference {}x{}x{} vs rendered {}x{}x{}",
            reference.width(),
            reference.height(),
            reference.channels(),
            rendered.image.width(),
            rendered.image.height(),
            rendered.image.channels()
        )));
    }
    let valid_pixels = rendered.valid_count();
    if valid_pixels == 0 {
        return Err(Error::NoValidPixels(
            "re-rendered view has an empty validity mask".into(),
        ));
    }
    let ch = reference.channels();
    let eta = cfg.eta;

    let s = ssim_masked(
        reference,
        &rendered.image,
        &rendered.valid,
        cfg.ssim_window,
        cfg.ssim_c1,
        cfg.ssim_c2,
    );
    let ssim_term = (1.0 - s.value) / 2.0;

    let denom = (valid_pixels * ch) as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = s.grad_b.iter().map(|g| -0.5 * eta * g).collect();
    let rd = reference.data();
    let od = rendered.image.data();
    for (k, ok) in rendered.valid.iter().enumerate() {
        if !ok {
            continue;
        }
        for c in 0..ch {
            let idx = k * ch + c;
            let diff = od[idx] - rd[idx];
            l1 += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[idx] += (1.0 - eta) * sign / denom;
        }
    }
    let l1_term = l1 / denom;
    Ok(LossValue {
        total: eta * ssim_term + (1.0 - eta) * l1_term,
        ssim_term,
        l1_term,
        reg_term: 0.0,
        grad_wrt_rendered: grad,
        valid_pixels,
        ssim_windows: s.windows,
    })
}

/// Full objective: image terms plus `γ(ŝ² + t̂²)`.
pub fn geo_loss(
    reference: &Image,
    rendered: &WarpResult,
    cfg: &GeoLossConfig,
    params: &ScaleShiftParams,
) -> Result<LossValue> {
    let mut loss = photometric_loss(reference, rendered, cfg)?;
    loss.reg_term = cfg.gamma * (params.s_raw * params.s_raw + params.t_raw * params.t_raw);
    loss.total += loss.reg_term;
    Ok(loss)
}
