//! Noise schedule, denoiser contract, Tweedie estimate and the guided DDIM sampler.

mod sampler;
mod schedule;

pub use sampler::{
    ddim_unguided, ensemble_estimate, median_depth, sample_metric_depth, Ensemble, GuidedStep,
    LatentState, Sample, Sampler, StepRecord,
};
pub use schedule::{NoiseSchedule, ScheduleConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric_param::RelativeDepth;
use crate::scene::Image;

/// A dense single-channel grid of latent values.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "field {}x{} given {} values",
                width,
                height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Self {
        let data = (0..width * height)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_shape(&self, other: &Field, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

/// A diffusion timestep together with its cumulative signal level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub alpha_bar: f64,
}

/// Noise prediction together with its input-Jacobian transpose product.
pub struct Linearized<'a> {
    pub eps: Field,
    pub pullback: Box<dyn Fn(&Field) -> Result<Field> + 'a>,
}

/// A noise-prediction model `ε̂(z_t, t, y)`.
pub trait Denoiser: Sync {
    fn predict(&self, z: &Field, t: Timestep, cond: Option<&Image>) -> Result<Field>;

    /// `ε̂` and `v ↦ (∂ε̂/∂z)ᵀ v`, if the model can provide it.
    fn linearize(&self, _z: &Field, _t: Timestep, _cond: Option<&Image>) -> Result<Option<Linearized<'_>>> {
        Ok(None)
    }
}

/// Maps a clean latent to relative depth, with its vector-Jacobian product.
pub trait Decoder: Sync {
    fn decode(&self, z: &Field) -> Result<RelativeDepth>;
    fn pullback(&self, z: &Field, d_relative: &[f64]) -> Result<Field>;
}

/// Identity decoder: latent range `[-1, 1]` mapped affinely onto `[0, 1]`, then clamped.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClampDecoder;

impl Decoder for ClampDecoder {
    fn decode(&self, z: &Field) -> Result<RelativeDepth> {
        let data = z
            .data
            .iter()
            .map(|&v| {
                if v.is_nan() {
                    v
                } else {
                    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
                }
            })
            .collect();
        RelativeDepth::new(z.width, z.height, data)
    }

    fn pullback(&self, z: &Field, d_relative: &[f64]) -> Result<Field> {
        if d_relative.len() != z.len() {
            return Err(Error::DimensionMismatch("decoder pullback".into()));
        }
        let data = z
            .data
            .iter()
            .zip(d_relative)
            .map(|(&v, &g)| if v > -1.0 && v < 1.0 { 0.5 * g } else { 0.0 })
            .collect();
        Field::new(z.width, z.height, data)
    }
}

/// Maps relative depth in `[0, 1]` to the latent range `[-1, 1]`.
pub fn encode_relative(relative: &RelativeDepth) -> Field {
    Field {
        width: relative.width(),
        height: relative.height(),
        data: relative.data().iter().map(|x| 2.0 * x - 1.0).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Backpropagate through the denoiser.
    #[default]
    Full,
    /// Treat `∂ẑ₀/∂z_t` as `1/√ᾱ`.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub steps: usize,
    pub jacobian_mode: JacobianMode,
    pub ensemble_size: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            steps: 50,
            jacobian_mode: JacobianMode::Full,
            ensemble_size: 10,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One-step clean estimate `ẑ₀ = (z_t − √(1−ᾱ)·ε̂)/√ᾱ`.
pub fn tweedie(z: &Field, eps: &Field, alpha_bar: f64) -> Result<Field> {
    z.check_shape(eps, "tweedie")?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z
        .data
        .iter()
        .zip(&eps.data)
        .map(|(z, e)| (z - b * e) / a)
        .collect();
    Ok(Field {
        width: z.width,
        height: z.height,
        data,
    })
}

/// Deterministic DDIM update `√ᾱ_prev·ẑ₀ + √(1−ᾱ_prev)·ε̂`.
pub fn ddim_update(z0: &Field, eps: &Field, alpha_bar_prev: f64) -> Result<Field> {
    z0.check_shape(eps, "ddim update")?;
    let (a, b) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let data = z0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(z, e)| a * z + b * e)
        .collect();
    Ok(Field {
        width: z0.width,
        height: z0.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tweedie_noiseless_is_identity() {
        let z = Field::new(2, 1, vec![0.3, -0.8]).unwrap();
        let e = Field::new(2, 1, vec![5.0, -7.0]).unwrap();
        assert_eq!(tweedie(&z, &e, 1.0).unwrap(), z);
    }

    #[test]
    fn tweedie_inverts_forward_corruption() {
        let z0 = [0.25, -0.6, 0.9];
        let eps = [1.3, -0.2, 0.4];
        let ab: f64 = 0.37;
        let zt: Vec<f64> = z0
            .iter()
            .zip(eps)
            .map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e)
            .collect();
        let est = tweedie(
            &Field::new(3, 1, zt).unwrap(),
            &Field::new(3, 1, eps.to_vec()).unwrap(),
            ab,
        )
        .unwrap();
        for (a, b) in est.data().iter().zip(z0) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn decoder_clamps_and_masks_gradient() {
        let z = Field::new(4, 1, vec![-2.0, -1.0, 0.0, 0.5]).unwrap();
        let r = ClampDecoder.decode(&z).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 0.5, 0.75]);
        let g = ClampDecoder.pullback(&z, &[1.0; 4]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch() {
        let z = Field::zeros(2, 2);
        let e = Field::zeros(4, 1);
        assert!(matches!(tweedie(&z, &e, 0.5), Err(Error::DimensionMismatch(_))));
    }
}
