//! Per-scene estimation: global-scale selection followed by the configured mode.

use crate::diffusion::{
    ddim_unguided, median_depth, ClampDecoder, Decoder, Denoiser, LatentState, NoiseSchedule,
    Sampler, StepRecord,
};
use crate::error::{Error, Result};
use crate::io::{Mode, RunConfig};
use crate::metric_param::{
    global_scale_search_with, log_spaced, to_metric, update_params, RelativeDepth, ScaleSearch,
    ScaleShiftParams,
};
use crate::objective::evaluate_objective;
use crate::photometric::GeoLossConfig;
use crate::scene::{DepthMap, ViewPair};

/// One ensemble member's output.
#[derive(Debug, Clone)]
pub struct Member {
    pub seed: u64,
    pub depth: DepthMap,
    pub params: ScaleShiftParams,
    pub trajectory: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    /// Per-pixel median over `members`.
    pub depth: DepthMap,
    pub global_scale: f64,
    /// `None` when the global scale was supplied.
    pub scale_search: Option<ScaleSearch>,
    pub members: Vec<Member>,
}

/// Relative depth of the unguided prior sample drawn from `seed`.
pub fn prior_relative(
    pair: &ViewPair,
    model: &dyn Denoiser,
    decoder: &dyn Decoder,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<RelativeDepth> {
    let init = LatentState::initial(pair.width(), pair.height(), schedule.len(), seed);
    let z0 = ddim_unguided(model, schedule, steps, init.z, Some(&pair.left_image))?;
    decoder.decode(&z0)
}

/// Sweeps `cfg.scale_search` over the unguided prior sample of the first seed.
pub fn select_global_scale(
    pair: &ViewPair,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
) -> Result<ScaleSearch> {
    let relative = prior_relative(pair, model, &ClampDecoder, schedule, cfg.guidance.steps, cfg.seed)?;
    let s = &cfg.scale_search;
    let candidates = log_spaced(s.g_min, s.g_max, s.grid_size);
    let base = cfg.params.with_global_scale(1.0)?;
    global_scale_search_with(pair, &relative, &candidates, &cfg.loss, &base, s.min_valid_fraction)
}

/// Joint gradient descent on the relative-depth pixels and the raw scale/shift, starting from
/// `initial`. Pixel steps use the sum-reduced loss gradient, i.e. `depth_lr · N · ∂L/∂x`.
pub fn reprojection_refine(
    pair: &ViewPair,
    initial: &RelativeDepth,
    params: &ScaleShiftParams,
    loss: &GeoLossConfig,
    iterations: usize,
    depth_lr: f64,
) -> Result<(RelativeDepth, ScaleShiftParams, Vec<StepRecord>)> {
    let mut relative = initial.clone();
    let mut params = *params;
    let mut trajectory = Vec::with_capacity(iterations);
    let n = relative.data().len() as f64;
    for step in 1..=iterations {
        let obj = evaluate_objective(pair, &relative, &params, loss)?;
        if !obj.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                timestep: 0,
                detail: format!("reprojection loss {}", obj.loss.total),
            });
        }
        params = update_params(&params, obj.d_s_raw, obj.d_t_raw)?;
        let data = relative
            .data()
            .iter()
            .zip(&obj.d_relative)
            .map(|(x, g)| (x - depth_lr * n * g).clamp(0.0, 1.0))
            .collect();
        relative = RelativeDepth::with_mask(
            relative.width(),
            relative.height(),
            data,
            relative.valid().to_vec(),
        )?;
        trajectory.push(StepRecord {
            step,
            timestep: 0,
            loss: obj.loss.total,
            ssim_term: obj.loss.ssim_term,
            l1_term: obj.loss.l1_term,
            reg_term: obj.loss.reg_term,
            s_raw: params.s_raw,
            t_raw: params.t_raw,
            valid_pixels: obj.loss.valid_pixels,
        });
    }
    Ok((relative, params, trajectory))
}

/// Runs the configured mode for every seed of `cfg` and takes the per-pixel median.
pub fn estimate(
    pair: &ViewPair,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
) -> Result<Estimate> {
    cfg.validate()?;
    if schedule.len() != cfg.schedule.train_steps {
        return Err(Error::InvalidConfig(format!(
            "schedule has {} steps, config says {}",
            schedule.len(),
            cfg.schedule.train_steps
        )));
    }
    let (global_scale, scale_search) = match cfg.scale_search.global_scale {
        Some(g) => (g, None),
        None => {
            let search = select_global_scale(pair, model, schedule, cfg)?;
            log::info!("global scale {:.4}", search.best);
            (search.best, Some(search))
        }
    };
    let params = cfg.params.with_global_scale(global_scale)?;
    let decoder = ClampDecoder;
    let seeds = cfg.seeds();

    let members = match cfg.mode {
        Mode::Full | Mode::ScaleShiftOnly => {
            let mut guidance = cfg.guidance;
            if cfg.mode == Mode::ScaleShiftOnly {
                guidance.lambda = 0.0;
            }
            let sampler = Sampler::new(model, &decoder, schedule, guidance, cfg.loss)?;
            seeds
                .iter()
                .map(|&seed| {
                    let s = sampler.sample(pair, &params, seed)?;
                    Ok(Member {
                        seed,
                        depth: s.depth,
                        params: s.params,
                        trajectory: s.trajectory,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Mode::ReprojectionOnly => seeds
            .iter()
            .map(|&seed| {
                let init = prior_relative(pair, model, &decoder, schedule, cfg.guidance.steps, seed)?;
                let (relative, p, trajectory) = reprojection_refine(
                    pair,
                    &init,
                    &params,
                    &cfg.loss,
                    cfg.reprojection.iterations,
                    cfg.reprojection.depth_lr,
                )?;
                Ok(Member {
                    seed,
                    depth: to_metric(&relative, &p)?,
                    params: p,
                    trajectory,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let maps: Vec<&DepthMap> = members.iter().map(|m| &m.depth).collect();
    let depth = median_depth(&maps)?;
    Ok(Estimate {
        depth,
        global_scale,
        scale_search,
        members,
    })
}
