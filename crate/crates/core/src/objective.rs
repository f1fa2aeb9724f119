//! The geometric objective evaluated on a relative-depth estimate, with gradients for
//! the relative depth and the raw scale/shift.

use crate::error::Result;
use crate::metric_param::{metric_gradients, to_metric, RelativeDepth, ScaleShiftParams};
use crate::photometric::{geo_loss, GeoLossConfig, LossValue};
use crate::scene::{DepthMap, ViewPair};
use crate::warp::backward_warp;

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: LossValue,
    pub metric: DepthMap,
    /// `∂L/∂x` per pixel of the relative depth.
    pub d_relative: Vec<f64>,
    /// `∂L/∂ŝ` including the regularizer.
    pub d_s_raw: f64,
    /// `∂L/∂t̂` including the regularizer.
    pub d_t_raw: f64,
}

impl Objective {
    pub fn is_finite(&self) -> bool {
        self.loss.total.is_finite()
            && self.d_s_raw.is_finite()
            && self.d_t_raw.is_finite()
            && self.d_relative.iter().all(|g| g.is_finite())
    }
}

/// `∂L/∂depth` per pixel from the image-space gradient and the warp's depth Jacobian.
pub fn depth_gradient(grad_rendered: &[f64], depth_jacobian: &[f64], channels: usize) -> Vec<f64> {
    grad_rendered
        .chunks_exact(channels)
        .zip(depth_jacobian.chunks_exact(channels))
        .map(|(g, j)| g.iter().zip(j).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn evaluate_objective(
    pair: &ViewPair,
    relative: &RelativeDepth,
    params: &ScaleShiftParams,
    cfg: &GeoLossConfig,
) -> Result<Objective> {
    let metric = to_metric(relative, params)?;
    let rendered = backward_warp(pair, &metric)?;
    let loss = geo_loss(&pair.left_image, &rendered, cfg, params)?;
    let d_depth = depth_gradient(
        &loss.grad_wrt_rendered,
        &rendered.depth_jacobian,
        pair.right_image.channels(),
    );
    let g = metric_gradients(relative, params, &d_depth);
    Ok(Objective {
        loss,
        metric,
        d_relative: g.d_relative,
        d_s_raw: g.d_s_raw + 2.0 * cfg.gamma * params.s_raw,
        d_t_raw: g.d_t_raw + 2.0 * cfg.gamma * params.t_raw,
    })
}
