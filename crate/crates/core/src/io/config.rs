//! TOML run configuration. Every section is optional; missing keys take their defaults.
//!
//! ```toml
//! mode = "full"            # full | scale-shift-only | reprojection-only
//! seed = 0                 # ensemble member k uses seed + k
//!
//! [guidance]               # lambda, steps, jacobian_mode, ensemble_size
//! [loss]                   # eta, ssim_window, ssim_c1, ssim_c2, gamma
//! [params]                 # s_raw, t_raw, lr
//! [schedule]               # train_steps, beta_start, beta_end
//! [scale_search]           # g_min, g_max, grid_size, global_scale (skips the search)
//! [reprojection]           # iterations, depth_lr
//! [prior]                  # kind = "analytic" | "toy", sigma0, mean_depth, checkpoint
//! [synth]                  # scene written by `synth`: layout, texture, d_min, d_max, ...
//! [train]                  # corpus_size, corpus (scene template), architecture, optimizer
//! [paths]                  # scene, out
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::diffusion::{GuidanceConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::metric_param::{ScaleShiftParams, DEFAULT_T_RAW, MIN_VALID_FRACTION, SOFTPLUS_ONE};
use crate::photometric::GeoLossConfig;
use crate::prior::{ToyArchitecture, TrainConfig};
use crate::synth::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Guided diffusion with scale/shift learning.
    #[default]
    Full,
    /// Unguided diffusion; only scale and shift are learned.
    ScaleShiftOnly,
    /// No diffusion: optimize depth pixels and scale/shift from the unguided prior sample.
    ReprojectionOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "scale-shift-only" => Ok(Mode::ScaleShiftOnly),
            "reprojection-only" => Ok(Mode::ReprojectionOnly),
            _ => Err(Error::InvalidConfig(format!("unknown mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::ScaleShiftOnly => "scale-shift-only",
            Mode::ReprojectionOnly => "reprojection-only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamInit {
    pub s_raw: f64,
    pub t_raw: f64,
    pub lr: f64,
}

impl Default for ParamInit {
    fn default() -> Self {
        Self {
            s_raw: SOFTPLUS_ONE,
            t_raw: DEFAULT_T_RAW,
            lr: 1e-2,
        }
    }
}

impl ParamInit {
    pub fn with_global_scale(&self, g_s: f64) -> Result<ScaleShiftParams> {
        ScaleShiftParams::with_raw(self.s_raw, self.t_raw, g_s, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSearchConfig {
    pub g_min: f64,
    pub g_max: f64,
    pub grid_size: usize,
    /// Candidates whose re-rendering covers less than this share of pixels are skipped.
    pub min_valid_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_scale: Option<f64>,
}

impl Default for ScaleSearchConfig {
    fn default() -> Self {
        Self {
            g_min: 0.5,
            g_max: 100.0,
            grid_size: 24,
            min_valid_fraction: MIN_VALID_FRACTION,
            global_scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReprojectionConfig {
    pub iterations: usize,
    /// Step size of the per-pixel relative-depth updates.
    pub depth_lr: f64,
}

impl Default for ReprojectionConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            depth_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// Gaussian prior centred on the normalized `mean_depth` map.
    Analytic,
    /// Trained convolutional denoiser loaded from `checkpoint`.
    #[default]
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub sigma0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_depth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Toy,
            sigma0: 0.05,
            mean_depth: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub corpus_size: usize,
    pub corpus: SceneSpec,
    pub architecture: ToyArchitecture,
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            corpus_size: 1000,
            corpus: SceneSpec::default(),
            architecture: ToyArchitecture::default(),
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `left.png`, `right.png` and `rig.txt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            scene: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub loss: GeoLossConfig,
    pub params: ParamInit,
    pub schedule: ScheduleConfig,
    pub scale_search: ScaleSearchConfig,
    pub reprojection: ReprojectionConfig,
    pub prior: PriorConfig,
    pub synth: SceneSpec,
    pub train: TrainSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    /// Ensemble seeds `seed, seed + 1, …`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.guidance.ensemble_size as u64)
            .map(|k| self.seed.wrapping_add(k))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.loss.validate()?;
        ScaleShiftParams::with_raw(self.params.s_raw, self.params.t_raw, 1.0, self.params.lr)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let s = &self.scale_search;
        if !(s.g_min > 0.0 && s.g_min <= s.g_max && s.g_max.is_finite()) || s.grid_size == 0
            || !(0.0..=1.0).contains(&s.min_valid_fraction)
        {
            return Err(Error::InvalidConfig(
                "scale_search needs 0 < g_min <= g_max, grid_size >= 1, min_valid_fraction in [0, 1]".into(),
            ));
        }
        if let Some(g) = s.global_scale {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidConfig("global_scale must be positive".into()));
            }
        }
        if self.reprojection.iterations == 0 || !(self.reprojection.depth_lr > 0.0) {
            return Err(Error::InvalidConfig(
                "reprojection needs iterations >= 1 and depth_lr > 0".into(),
            ));
        }
        if !(self.prior.sigma0 > 0.0 && self.prior.sigma0.is_finite()) {
            return Err(Error::InvalidConfig("prior.sigma0 must be positive".into()));
        }
        self.synth.validate()?;
        self.train.corpus.validate()?;
        self.train.architecture.validate()?;
        self.train.optimizer.validate()?;
        if self.guidance.steps > self.schedule.train_steps {
            return Err(Error::InvalidConfig(
                "guidance.steps cannot exceed schedule.train_steps".into(),
            ));
        }
        Ok(())
    }

    /// Checks the fields `estimate` needs for the configured prior.
    pub fn validate_for_estimate(&self) -> Result<()> {
        self.validate()?;
        if self.paths.scene.is_none() {
            return Err(Error::MissingField("paths.scene".into()));
        }
        match self.prior.kind {
            PriorKind::Analytic if self.prior.mean_depth.is_none() => {
                Err(Error::MissingField("prior.mean_depth".into()))
            }
            PriorKind::Toy if self.prior.checkpoint.is_none() => {
                Err(Error::MissingField("prior.checkpoint".into()))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.mode = Mode::ReprojectionOnly;
        cfg.guidance.lambda = 250.0;
        cfg.scale_search.global_scale = Some(12.5);
        cfg.prior.kind = PriorKind::Analytic;
        cfg.prior.mean_depth = Some("scene/gt_depth.pfm".into());
        cfg.paths.scene = Some("scene".into());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        back.validate_for_estimate().unwrap();
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let cfg = RunConfig::from_toml("mode = \"scale-shift-only\"\n[guidance]\nlambda = 3.0\n").unwrap();
        assert_eq!(cfg.mode, Mode::ScaleShiftOnly);
        assert_eq!(cfg.guidance.lambda, 3.0);
        assert_eq!(cfg.guidance.steps, 50);
        assert_eq!(cfg.loss.gamma, 1e-2);
        assert!(RunConfig::from_toml("[guidance]\nlamda = 3.0\n").is_err());
        assert!(matches!(
            RunConfig::default().validate_for_estimate(),
            Err(Error::MissingField(_))
        ));
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.loss.gamma, 1e-2);
        assert_eq!(c.params.lr, 1e-2);
        assert_eq!(c.guidance.ensemble_size, 10);
        assert_eq!(c.guidance.steps, 50);
        assert_eq!(c.reprojection.iterations, 50);
    }
}
