//! Learnable mapping from relative depth in `[0, 1]` to metric depth:
//! `depth = g_s · (softplus(ŝ) · x + softplus(t̂))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photometric::{photometric_loss, GeoLossConfig};
use crate::scene::{DepthMap, ViewPair};
use crate::warp::backward_warp;

/// `ln(e - 1)`: the raw value whose softplus is exactly one.
pub const SOFTPLUS_ONE: f64 = 0.541_324_854_612_918_1;

/// Default raw shift: softplus(-5) ≈ 6.7e-3, i.e. a near-zero shift.
pub const DEFAULT_T_RAW: f64 = -5.0;

/// Overflow-safe `ln(1 + eᶻ)`.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Raw scale/shift, fixed global scale and the learning rate of their updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleShiftParams {
    pub s_raw: f64,
    pub t_raw: f64,
    pub g_s: f64,
    pub lr: f64,
}

impl ScaleShiftParams {
    pub fn with_raw(s_raw: f64, t_raw: f64, g_s: f64, lr: f64) -> Result<Self> {
        if !(s_raw.is_finite() && t_raw.is_finite()) {
            return Err(Error::InvalidValue("raw scale/shift must be finite".into()));
        }
        if !(g_s > 0.0 && g_s.is_finite()) {
            return Err(Error::InvalidValue(format!("global scale {g_s} must be positive")));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidValue(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            s_raw,
            t_raw,
            g_s,
            lr,
        })
    }

    /// Unit scale and near-zero shift, so the metric map starts at `g_s · x`.
    pub fn initial(g_s: f64, lr: f64) -> Result<Self> {
        Self::with_raw(SOFTPLUS_ONE, DEFAULT_T_RAW, g_s, lr)
    }

    pub fn scale(&self) -> f64 {
        softplus(self.s_raw)
    }

    pub fn shift(&self) -> f64 {
        softplus(self.t_raw)
    }

    pub fn with_global_scale(self, g_s: f64) -> Result<Self> {
        Self::with_raw(self.s_raw, self.t_raw, g_s, self.lr)
    }

    #[inline]
    pub fn depth_of(&self, x: f64) -> f64 {
        self.g_s * (self.scale() * x + self.shift())
    }
}

/// Affine-invariant depth normalized to `[0, 1]` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepth {
    width: usize,
    height: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl RelativeDepth {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let valid = vec![true; data.len()];
        Self::with_mask(width, height, data, valid)
    }

    pub fn with_mask(width: usize, height: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "relative depth {}x{} given {} values",
                width,
                height,
                data.len()
            )));
        }
        if let Some((k, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidValue(format!(
                "relative depth {v} at index {k} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

pub fn to_metric(relative: &RelativeDepth, params: &ScaleShiftParams) -> Result<DepthMap> {
    let (a, b) = (params.g_s * params.scale(), params.g_s * params.shift());
    let data = relative.data.iter().map(|&x| a * x + b).collect();
    DepthMap::with_mask(relative.width, relative.height, data, relative.valid.clone())
}

/// Gradients of a loss through [`to_metric`], given `∂L/∂depth` per pixel.
#[derive(Debug, Clone)]
pub struct MetricGradients {
    pub d_relative: Vec<f64>,
    pub d_s_raw: f64,
    pub d_t_raw: f64,
}

pub fn metric_gradients(
    relative: &RelativeDepth,
    params: &ScaleShiftParams,
    d_depth: &[f64],
) -> MetricGradients {
    let a = params.g_s * params.scale();
    let ds = params.g_s * sigmoid(params.s_raw);
    let dt = params.g_s * sigmoid(params.t_raw);
    let mut d_relative = vec![0.0; d_depth.len()];
    let (mut gs, mut gt) = (0.0, 0.0);
    for (k, &g) in d_depth.iter().enumerate() {
        if !relative.valid[k] {
            continue;
        }
        d_relative[k] = a * g;
        gs += ds * relative.data[k] * g;
        gt += dt * g;
    }
    MetricGradients {
        d_relative,
        d_s_raw: gs,
        d_t_raw: gt,
    }
}

/// One plain gradient-descent step on the raw parameters.
pub fn update_params(params: &ScaleShiftParams, grad_s: f64, grad_t: f64) -> Result<ScaleShiftParams> {
    if !(grad_s.is_finite() && grad_t.is_finite()) {
        return Err(Error::NonFiniteGradient(format!(
            "scale/shift gradient ({grad_s}, {grad_t})"
        )));
    }
    Ok(ScaleShiftParams {
        s_raw: params.s_raw - params.lr * grad_s,
        t_raw: params.t_raw - params.lr * grad_t,
        ..*params
    })
}

/// `n` log-spaced values from `min` to `max` inclusive.
pub fn log_spaced(min: f64, max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![min],
        _ => {
            let (a, b) = (min.ln(), max.ln());
            (0..n)
                .map(|k| {
                    if k == n - 1 {
                        max
                    } else {
                        (a + (b - a) * k as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaleSearch {
    pub best: f64,
    /// `(candidate, image loss)` in ascending candidate order; `None` where the candidate was
    /// skipped.
    pub losses: Vec<(f64, Option<f64>)>,
}

/// Default share of pixels a candidate's re-rendering must cover to be scored.
pub const MIN_VALID_FRACTION: f64 = 0.5;

/// Global-scale sweep with unit scale and near-zero shift.
pub fn global_scale_search(
    pair: &ViewPair,
    relative: &RelativeDepth,
    candidates: &[f64],
    cfg: &GeoLossConfig,
) -> Result<ScaleSearch> {
    let base = ScaleShiftParams::initial(1.0, 1.0)?;
    global_scale_search_with(pair, relative, candidates, cfg, &base, MIN_VALID_FRACTION)
}

/// Global-scale sweep around the raw scale/shift of `base`.
///
/// Each candidate `g` is scored by the image terms of the reprojection loss of
/// `to_metric(relative, base with g_s = g)`. The loss averages over valid pixels only, so a
/// scale that warps most of the view out of frame can look deceptively good; candidates
/// covering less than `min_valid_fraction` of the pixels are skipped. Ties go to the smaller
/// candidate.
pub fn global_scale_search_with(
    pair: &ViewPair,
    relative: &RelativeDepth,
    candidates: &[f64],
    cfg: &GeoLossConfig,
    base: &ScaleShiftParams,
    min_valid_fraction: f64,
) -> Result<ScaleSearch> {
    if !(0.0..=1.0).contains(&min_valid_fraction) {
        return Err(Error::InvalidValue(format!(
            "min_valid_fraction {min_valid_fraction} not in [0, 1]"
        )));
    }
    let needed = (min_valid_fraction * (relative.width() * relative.height()) as f64).ceil() as usize;
    if candidates.is_empty() {
        return Err(Error::InvalidValue("no global-scale candidates".into()));
    }
    if let Some(bad) = candidates.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidValue(format!("global-scale candidate {bad} must be positive")));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let mut losses = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &g in &sorted {
        let params = base.with_global_scale(g)?;
        let depth = to_metric(relative, &params)?;
        let rendered = backward_warp(pair, &depth)?;
        let loss = match photometric_loss(&pair.left_image, &rendered, cfg) {
            Ok(l) if l.total.is_finite() && l.valid_pixels >= needed.max(1) => Some(l.total),
            Ok(_) | Err(Error::NoValidPixels(_)) => None,
            Err(e) => return Err(e),
        };
        if let Some(l) = loss {
            if best.is_none_or(|(_, b)| l < b) {
                best = Some((g, l));
            }
        }
        losses.push((g, loss));
    }
    let (best, _) = best.ok_or_else(|| {
        Error::NoValidPixels("no global-scale candidate covered enough of the view".into())
    })?;
    Ok(ScaleSearch { best, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softplus_values() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(SOFTPLUS_ONE), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus((std::f64::consts::E - 1.0).ln()), 1.0, epsilon = 1e-15);
        let tiny = softplus(-40.0);
        assert!(tiny > 0.0);
        assert_abs_diff_eq!(tiny / (-40.0f64).exp(), 1.0, epsilon = 1e-12);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        for &z in &[-20.0, -3.0, -0.5, 0.0, 0.7, 4.0, 35.0] {
            let h = 1e-6;
            let fd = (softplus(z + h) - softplus(z - h)) / (2.0 * h);
            assert_abs_diff_eq!(sigmoid(z), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn to_metric_examples() {
        let rel = RelativeDepth::new(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let p = ScaleShiftParams::with_raw(SOFTPLUS_ONE, -40.0, 1.0, 1e-2).unwrap();
        let d = to_metric(&rel, &p).unwrap();
        assert!(d.data()[0] > 0.0 && d.data()[0] < 1e-17);
        assert_abs_diff_eq!(d.data()[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.data()[2], 1.0, epsilon = 1e-15);

        let rel = RelativeDepth::new(1, 1, vec![0.5]).unwrap();
        let p = ScaleShiftParams::with_raw(0.0, 0.0, 10.0, 1e-2).unwrap();
        let d = to_metric(&rel, &p).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(d.data()[0], 10.0 * (ln2 * 0.5 + ln2), epsilon = 1e-12);
        assert_abs_diff_eq!(d.data()[0], 10.397, epsilon = 1e-3);
    }

    #[test]
    fn relative_depth_rejects_out_of_range() {
        assert!(RelativeDepth::new(2, 1, vec![0.0, 1.2]).is_err());
        assert!(RelativeDepth::new(2, 1, vec![f64::NAN, 0.2]).is_err());
    }

    #[test]
    fn update_examples() {
        let p = ScaleShiftParams::with_raw(0.0, 0.3, 5.0, 1e-2).unwrap();
        assert_eq!(update_params(&p, 0.0, 0.0).unwrap(), p);
        let q = update_params(&p, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(q.s_raw, -0.01, epsilon = 1e-18);
        assert_eq!(q.t_raw, 0.3);
        assert!(matches!(
            update_params(&p, f64::NAN, 0.0),
            Err(Error::NonFiniteGradient(_))
        ));
        let mut r = p;
        for _ in 0..1000 {
            r = update_params(&r, 0.0, 0.0).unwrap();
        }
        assert_eq!(r, p);
    }

    #[test]
    fn gradient_descent_converges_on_quadratic() {
        // f(s, t) = 2(s - 1.5)² + (s - 1.5)(t + 0.5) + 0.75(t + 0.5)², minimizer (1.5, -0.5).
        let mut p = ScaleShiftParams::with_raw(-3.0, 4.0, 1.0, 1e-2).unwrap();
        let mut steps = 0;
        while steps < 10_000 {
            let (ds, dt) = (p.s_raw - 1.5, p.t_raw + 0.5);
            if ds.hypot(dt) < 1e-4 {
                break;
            }
            p = update_params(&p, 4.0 * ds + dt, ds + 1.5 * dt).unwrap();
            steps += 1;
        }
        assert!(steps < 10_000);
        assert!((p.s_raw - 1.5).abs() < 1e-4 && (p.t_raw + 0.5).abs() < 1e-4);
    }

    #[test]
    fn log_spacing() {
        let g = log_spaced(1.0, 100.0, 3);
        assert_abs_diff_eq!(g[1], 10.0, epsilon = 1e-12);
        assert_eq!(g[2], 100.0);
        assert_eq!(log_spaced(0.5, 100.0, 24).len(), 24);
    }

    #[test]
    fn metric_gradients_match_finite_differences() {
        let rel = RelativeDepth::new(3, 1, vec![0.1, 0.6, 0.9]).unwrap();
        let p = ScaleShiftParams::with_raw(0.3, -0.7, 4.0, 1e-2).unwrap();
        let w = [0.3, -1.2, 0.8];
        let loss = |p: &ScaleShiftParams| -> f64 {
            to_metric(&rel, p)
                .unwrap()
                .data()
                .iter()
                .zip(w)
                .map(|(d, w)| d * w)
                .sum()
        };
        let g = metric_gradients(&rel, &p, &w);
        let h = 1e-6;
        let fd_s = (loss(&ScaleShiftParams { s_raw: p.s_raw + h, ..p })
            - loss(&ScaleShiftParams { s_raw: p.s_raw - h, ..p }))
            / (2.0 * h);
        let fd_t = (loss(&ScaleShiftParams { t_raw: p.t_raw + h, ..p })
            - loss(&ScaleShiftParams { t_raw: p.t_raw - h, ..p }))
            / (2.0 * h);
        assert_abs_diff_eq!(g.d_s_raw, fd_s, epsilon = 1e-7);
        assert_abs_diff_eq!(g.d_t_raw, fd_t, epsilon = 1e-7);
        assert_abs_diff_eq!(g.d_relative[1], 4.0 * softplus(0.3) * -1.2, epsilon = 1e-12);
    }
}
