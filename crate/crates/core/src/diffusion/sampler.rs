use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ddim_update, tweedie, Decoder, Denoiser, Field, GuidanceConfig, JacobianMode, NoiseSchedule,
    Timestep,
};
use crate::error::{Error, Result};
use crate::metric_param::{to_metric, update_params, RelativeDepth, ScaleShiftParams};
use crate::objective::evaluate_objective;
use crate::photometric::GeoLossConfig;
use crate::scene::{DepthMap, Image, ViewPair};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Field,
    pub t: usize,
    pub rng_seed: u64,
}

impl LatentState {
    /// `z_T` drawn from the seeded standard normal source.
    pub fn initial(width: usize, height: usize, t: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            z: Field::standard_normal(width, height, &mut rng),
            t,
            rng_seed: seed,
        }
    }
}

/// One line of the trajectory log. `s_raw`/`t_raw` are the values after this step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub loss: f64,
    pub ssim_term: f64,
    pub l1_term: f64,
    pub reg_term: f64,
    pub s_raw: f64,
    pub t_raw: f64,
    pub valid_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct GuidedStep {
    pub state: LatentState,
    pub params: ScaleShiftParams,
    pub record: StepRecord,
    /// Metric depth `x̃₀` evaluated during the step, before the parameter update.
    pub metric: DepthMap,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub depth: DepthMap,
    pub relative: RelativeDepth,
    pub latent: Field,
    pub params: ScaleShiftParams,
    pub trajectory: Vec<StepRecord>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub depth: DepthMap,
    pub members: Vec<Sample>,
}

/// Everything a trajectory needs besides the scene and the seed.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub model: &'a dyn Denoiser,
    pub decoder: &'a dyn Decoder,
    pub schedule: &'a NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub loss: GeoLossConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        model: &'a dyn Denoiser,
        decoder: &'a dyn Decoder,
        schedule: &'a NoiseSchedule,
        guidance: GuidanceConfig,
        loss: GeoLossConfig,
    ) -> Result<Self> {
        guidance.validate()?;
        loss.validate()?;
        Ok(Self {
            model,
            decoder,
            schedule,
            guidance,
            loss,
        })
    }

    /// One DDIM step from `state.t` to `t_prev` with geometric guidance and one
    /// scale/shift update. `step` is only used for the log and diagnostics.
    pub fn guided_step(
        &self,
        pair: &ViewPair,
        state: &LatentState,
        params: &ScaleShiftParams,
        t_prev: usize,
        step: usize,
    ) -> Result<GuidedStep> {
        let t = state.t;
        if t == 0 || t_prev >= t || t > self.schedule.len() {
            return Err(Error::InvalidValue(format!(
                "guided step from {t} to {t_prev} is not a forward-in-sampling step"
            )));
        }
        let non_finite = |detail: String| Error::NonFiniteLoss {
            step,
            timestep: t,
            detail,
        };
        let ab = self.schedule.alpha_bar(t);
        let ab_prev = self.schedule.alpha_bar(t_prev);
        let ts = Timestep {
            index: t,
            alpha_bar: ab,
        };
        let cond = Some(&pair.left_image);
        let guided = self.guidance.lambda > 0.0;

        let (eps, pullback) = if guided && self.guidance.jacobian_mode == JacobianMode::Full {
            let lin = self.model.linearize(&state.z, ts, cond)?.ok_or_else(|| {
                Error::InvalidConfig(
                    "denoiser has no input Jacobian; use jacobian_mode = \"first-order\"".into(),
                )
            })?;
            (lin.eps, Some(lin.pullback))
        } else {
            (self.model.predict(&state.z, ts, cond)?, None)
        };
        if !eps.same_shape(&state.z) {
            return Err(Error::DimensionMismatch("denoiser output shape".into()));
        }
        let z0 = tweedie(&state.z, &eps, ab)?;
        if !z0.is_finite() {
            return Err(non_finite("clean-latent estimate is not finite".into()));
        }
        let relative = self.decoder.decode(&z0)?;
        let obj = evaluate_objective(pair, &relative, params, &self.loss)?;
        if !obj.is_finite() {
            return Err(non_finite(format!(
                "L_geo = {} with s_raw = {}, t_raw = {}",
                obj.loss.total, params.s_raw, params.t_raw
            )));
        }
        let next_params = update_params(params, obj.d_s_raw, obj.d_t_raw)
            .map_err(|e| non_finite(e.to_string()))?;

        let mut z_next = ddim_update(&z0, &eps, ab_prev)?;
        if guided {
            let g0 = self.decoder.pullback(&z0, &obj.d_relative)?;
            let inv = 1.0 / ab.sqrt();
            let grad: Vec<f64> = match pullback {
                Some(pb) => {
                    let jt = pb(&g0)?;
                    let b = (1.0 - ab).sqrt();
                    g0.data()
                        .iter()
                        .zip(jt.data())
                        .map(|(g, j)| (g - b * j) * inv)
                        .collect()
                }
                None => g0.data().iter().map(|g| g * inv).collect(),
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(non_finite("latent gradient is not finite".into()));
            }
            let lambda = self.guidance.lambda;
            for (z, g) in z_next.data_mut().iter_mut().zip(&grad) {
                *z -= lambda * g;
            }
        }
        if !z_next.is_finite() {
            return Err(non_finite("next latent is not finite".into()));
        }

        let record = StepRecord {
            step,
            timestep: t,
            loss: obj.loss.total,
            ssim_term: obj.loss.ssim_term,
            l1_term: obj.loss.l1_term,
            reg_term: obj.loss.reg_term,
            s_raw: next_params.s_raw,
            t_raw: next_params.t_raw,
            valid_pixels: obj.loss.valid_pixels,
        };
        Ok(GuidedStep {
            state: LatentState {
                z: z_next,
                t: t_prev,
                rng_seed: state.rng_seed,
            },
            params: next_params,
            record,
            metric: obj.metric,
        })
    }

    /// Full guided trajectory from seeded noise; the output is decoded from `z_0` with the
    /// final scale/shift.
    pub fn sample(&self, pair: &ViewPair, params: &ScaleShiftParams, seed: u64) -> Result<Sample> {
        let timesteps = self.schedule.ddim_timesteps(self.guidance.steps)?;
        let mut state = LatentState::initial(pair.width(), pair.height(), timesteps[0], seed);
        let mut params = *params;
        let mut trajectory = Vec::with_capacity(self.guidance.steps);
        for (k, w) in timesteps.windows(2).enumerate() {
            debug_assert_eq!(state.t, w[0]);
            let out = self.guided_step(pair, &state, &params, w[1], k + 1)?;
            log::trace!(
                "seed {seed} step {} t={} loss={:.6} s_raw={:.5} t_raw={:.5}",
                k + 1,
                w[0],
                out.record.loss,
                out.params.s_raw,
                out.params.t_raw
            );
            trajectory.push(out.record);
            state = out.state;
            params = out.params;
        }
        let relative = self.decoder.decode(&state.z)?;
        let depth = to_metric(&relative, &params)?;
        Ok(Sample {
            depth,
            relative,
            latent: state.z,
            params,
            trajectory,
            seed,
        })
    }

    /// One trajectory per seed, combined by the per-pixel median.
    pub fn ensemble(&self, pair: &ViewPair, params: &ScaleShiftParams, seeds: &[u64]) -> Result<Ensemble> {
        if seeds.is_empty() {
            return Err(Error::InvalidValue("ensemble needs at least one seed".into()));
        }
        let members = seeds
            .iter()
            .map(|&s| self.sample(pair, params, s))
            .collect::<Result<Vec<_>>>()?;
        let maps: Vec<&DepthMap> = members.iter().map(|m| &m.depth).collect();
        let depth = median_depth(&maps)?;
        Ok(Ensemble { depth, members })
    }
}

pub fn sample_metric_depth(
    sampler: &Sampler<'_>,
    pair: &ViewPair,
    params: &ScaleShiftParams,
    seed: u64,
) -> Result<Sample> {
    sampler.sample(pair, params, seed)
}

pub fn ensemble_estimate(
    sampler: &Sampler<'_>,
    pair: &ViewPair,
    params: &ScaleShiftParams,
    seeds: &[u64],
) -> Result<Ensemble> {
    sampler.ensemble(pair, params, seeds)
}

/// Per-pixel median over the maps valid at that pixel; even counts average the middle pair.
pub fn median_depth(maps: &[&DepthMap]) -> Result<DepthMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidValue("median of no depth maps".into()))?;
    if maps.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::DimensionMismatch("ensemble members differ in shape".into()));
    }
    let n = first.len();
    let mut data = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut buf = Vec::with_capacity(maps.len());
    for k in 0..n {
        buf.clear();
        buf.extend(maps.iter().filter(|m| m.valid()[k]).map(|m| m.data()[k]));
        if buf.is_empty() {
            continue;
        }
        buf.sort_by(f64::total_cmp);
        let m = buf.len();
        data[k] = if m % 2 == 1 {
            buf[m / 2]
        } else {
            0.5 * (buf[m / 2 - 1] + buf[m / 2])
        };
        valid[k] = true;
    }
    DepthMap::with_mask(first.width(), first.height(), data, valid)
}

/// Plain deterministic DDIM from `z_T` down to `z_0`.
pub fn ddim_unguided(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    z_t: Field,
    cond: Option<&Image>,
) -> Result<Field> {
    let timesteps = schedule.ddim_timesteps(steps)?;
    let mut z = z_t;
    for w in timesteps.windows(2) {
        let ab = schedule.alpha_bar(w[0]);
        let eps = model.predict(
            &z,
            Timestep {
                index: w[0],
                alpha_bar: ab,
            },
            cond,
        )?;
        let z0 = tweedie(&z, &eps, ab)?;
        z = ddim_update(&z0, &eps, schedule.alpha_bar(w[1]))?;
    }
    Ok(z)
}
