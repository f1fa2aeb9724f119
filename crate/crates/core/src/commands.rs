//! The four CLI commands. Each reads a [`RunConfig`] (plus command-line overrides) and
//! writes its artifacts under `paths.out`.

use std::path::{Path, PathBuf};

use crate::diffusion::{encode_relative, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::io::{
    read_calibration, read_image, read_pfm, write_atomic, write_pfm, write_trajectory, Mode,
    PriorKind, RunConfig,
};
use crate::metric_param::RelativeDepth;
use crate::pipeline::{estimate, Estimate};
use crate::prior::{load_checkpoint, save_checkpoint, train_toy_denoiser, AnalyticGaussianDenoiser, TrainReport};
use crate::scene::{DepthMap, ViewPair};
use crate::synth::{generate_corpus, generate_scene, standard_suite, write_scene, SyntheticScene};

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub ensemble: Option<usize>,
    pub lambda: Option<f64>,
    pub global_scale: Option<f64>,
    pub steps: Option<usize>,
    pub scene: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        if let Some(n) = self.ensemble {
            cfg.guidance.ensemble_size = n;
        }
        if let Some(l) = self.lambda {
            cfg.guidance.lambda = l;
        }
        if let Some(g) = self.global_scale {
            cfg.scale_search.global_scale = Some(g);
        }
        if let Some(s) = self.steps {
            cfg.guidance.steps = s;
        }
        if let Some(s) = &self.scene {
            cfg.paths.scene = Some(s.clone());
        }
        cfg.validate()
    }
}

/// Loads `path` (or the defaults) and applies the overrides.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the `[synth]` scene into `paths.out`, or `suite` standard-suite scenes into
/// `paths.out/scene_NN` when `suite > 0`. The config seed is the scene seed.
pub fn cmd_synth(cfg: &RunConfig, suite: usize) -> Result<Vec<SyntheticScene>> {
    let out = &cfg.paths.out;
    if suite == 0 {
        let spec = crate::synth::SceneSpec {
            seed: cfg.seed,
            ..cfg.synth.clone()
        };
        let scene = generate_scene(&spec)?;
        write_scene(out, &scene)?;
        return Ok(vec![scene]);
    }
    let specs = standard_suite(suite, cfg.synth.width, cfg.synth.max_disparity(), cfg.seed);
    let mut scenes = Vec::with_capacity(suite);
    for (k, spec) in specs.iter().enumerate() {
        let scene = generate_scene(spec)?;
        write_scene(&out.join(format!("scene_{k:02}")), &scene)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Trains the toy prior on a corpus drawn from `[train]` and writes `prior.ckpt` and
/// `train_log.txt` into `paths.out`.
pub fn cmd_train_prior(cfg: &RunConfig) -> Result<TrainReport> {
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let corpus = generate_corpus(cfg.train.corpus_size, &cfg.train.corpus, cfg.seed)?;
    let (model, report) = train_toy_denoiser(
        &corpus,
        &schedule,
        cfg.train.architecture.clone(),
        &cfg.train.optimizer,
        cfg.seed,
    )?;
    let out = &cfg.paths.out;
    create_dir(out)?;
    save_checkpoint(&model, &out.join("prior.ckpt"))?;
    let mut log = format!(
        "# initial_validation {:e}\n# final_validation {:e}\n# step loss\n",
        report.initial_validation, report.final_validation
    );
    for (k, l) in report.losses.iter().enumerate() {
        log.push_str(&format!("{} {:e}\n", k + 1, l));
    }
    write_atomic(&out.join("train_log.txt"), log.as_bytes())?;
    Ok(report)
}

/// Reads `left.png`, `right.png` and `rig.txt` from a scene directory.
pub fn load_scene(dir: &Path) -> Result<ViewPair> {
    let (left, right) = read_calibration(&dir.join("rig.txt"))?;
    let left_image = read_image(&dir.join("left.png"))?;
    let right_image = read_image(&dir.join("right.png"))?;
    ViewPair::new(left, left_image, right, right_image)
}

/// Min-max normalizes a depth map into `[0, 1]`; invalid pixels take the mean.
pub fn normalize_depth(depth: &DepthMap) -> Result<RelativeDepth> {
    let valid: Vec<f64> = depth.data().iter().zip(depth.valid()).filter(|(_, v)| **v).map(|(d, _)| *d).collect();
    if valid.is_empty() {
        return Err(Error::NoValidPixels("mean depth map has no valid pixels".into()));
    }
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let norm = |d: f64| if range > 0.0 { (d - lo) / range } else { 0.5 };
    let data = depth
        .data()
        .iter()
        .zip(depth.valid())
        .map(|(&d, &v)| norm(if v { d } else { mean }).clamp(0.0, 1.0))
        .collect();
    RelativeDepth::new(depth.width(), depth.height(), data)
}

/// Builds the configured prior for a `width`×`height` scene.
pub fn load_prior(cfg: &RunConfig, width: usize, height: usize) -> Result<Box<dyn Denoiser>> {
    match cfg.prior.kind {
        PriorKind::Analytic => {
            let path = cfg
                .prior
                .mean_depth
                .as_ref()
                .ok_or_else(|| Error::MissingField("prior.mean_depth".into()))?;
            let depth = read_pfm(path)?;
            if depth.width() != width || depth.height() != height {
                return Err(Error::DimensionMismatch(format!(
                    "mean depth {}x{} vs scene {width}x{height}",
                    depth.width(),
                    depth.height()
                )));
            }
            let mu = encode_relative(&normalize_depth(&depth)?);
            Ok(Box::new(AnalyticGaussianDenoiser::new(mu, cfg.prior.sigma0)?))
        }
        PriorKind::Toy => {
            let path = cfg
                .prior
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::MissingField("prior.checkpoint".into()))?;
            let model = load_checkpoint(path)?;
            if model.architecture().train_steps != cfg.schedule.train_steps {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint was trained for {} steps, schedule has {}",
                    model.architecture().train_steps,
                    cfg.schedule.train_steps
                )));
            }
            Ok(Box::new(model))
        }
    }
}

/// Global-scale search, ensemble sampling and per-pixel median. Writes `depth.pfm`, one
/// `trajectory_NN.txt` per ensemble member, `estimate.txt` and the resolved `run.toml`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<Estimate> {
    cfg.validate_for_estimate()?;
    let scene = cfg.paths.scene.as_ref().expect("validated");
    let pair = load_scene(scene)?;
    let model = load_prior(cfg, pair.width(), pair.height())?;
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let est = estimate(&pair, model.as_ref(), &schedule, cfg)?;

    let out = &cfg.paths.out;
    create_dir(out)?;
    write_pfm(&out.join("depth.pfm"), &est.depth)?;
    for (k, m) in est.members.iter().enumerate() {
        write_trajectory(&out.join(format!("trajectory_{k:02}.txt")), m.seed, &m.trajectory)?;
    }
    let mut summary = format!(
        "mode = {}\nglobal_scale = {:?}\nmembers = {}\n",
        cfg.mode,
        est.global_scale,
        est.members.len()
    );
    for m in &est.members {
        summary.push_str(&format!(
            "seed {} scale {:?} shift {:?}\n",
            m.seed,
            m.params.g_s * m.params.scale(),
            m.params.g_s * m.params.shift()
        ));
    }
    write_atomic(&out.join("estimate.txt"), summary.as_bytes())?;
    cfg.save(&out.join("run.toml"))?;
    Ok(est)
}

/// Compares two PFM depth maps and writes `metrics.txt` and `metrics.jsonl` into `out`.
pub fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> Result<Evaluation> {
    let p = read_pfm(pred)?;
    let g = read_pfm(gt)?;
    if !p.same_shape(&g) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            p.width(),
            p.height(),
            g.width(),
            g.height()
        )));
    }
    let ev = evaluate(&p, &g)?;
    create_dir(out)?;
    let text = format!(
        "{}{}alignment.scale={}\nalignment.shift={}\n",
        ev.raw.to_key_values(),
        ev.aligned.to_key_values(),
        ev.alignment.scale,
        ev.alignment.shift
    );
    write_atomic(&out.join("metrics.txt"), text.as_bytes())?;
    let jsonl = format!("{}\n{}\n", ev.raw.to_json_line(), ev.aligned.to_json_line());
    write_atomic(&out.join("metrics.jsonl"), jsonl.as_bytes())?;
    Ok(ev)
}
