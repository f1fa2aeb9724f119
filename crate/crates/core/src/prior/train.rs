//! Denoising score matching in ε-prediction form: minimize
//! `E‖ε̂(√ᾱ z₀ + √(1−ᾱ) ε, t) − ε‖²` with Adam.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::{ToyArchitecture, ToyDenoiser};
use crate::diffusion::{Field, NoiseSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fields held out from the corpus for validation.
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            grad_clip: 1.0,
            validation_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fixed `(z₀, t, ε)` triples for comparing models.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    fields: Vec<Field>,
    timesteps: Vec<usize>,
    noise: Vec<Field>,
}

impl ValidationSet {
    pub fn new(fields: &[Field], schedule: &NoiseSchedule, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timesteps = fields.iter().map(|_| rng.random_range(1..=schedule.len())).collect();
        let noise = fields
            .iter()
            .map(|f| Field::standard_normal(f.width(), f.height(), &mut rng))
            .collect();
        Self {
            fields: fields.to_vec(),
            timesteps,
            noise,
        }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Mean squared noise-prediction error of `model` on this set.
    pub fn loss(&self, model: &ToyDenoiser, schedule: &NoiseSchedule) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in (0..self.len()).collect::<Vec<_>>().chunks(16) {
            let zs: Vec<&Field> = chunk.iter().map(|&i| &self.fields[i]).collect();
            let ts: Vec<usize> = chunk.iter().map(|&i| self.timesteps[i]).collect();
            let eps: Vec<&Field> = chunk.iter().map(|&i| &self.noise[i]).collect();
            let (pred, target) = predict_batch(model, schedule, &zs, &ts, &eps)?;
            total += pred.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += target.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mini-batch loss per step.
    pub losses: Vec<f64>,
    pub initial_validation: f64,
    pub final_validation: f64,
    pub train_fields: usize,
    pub validation_fields: usize,
}

impl TrainReport {
    /// Moving average of the batch loss with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if window == 0 || self.losses.len() < window {
            return vec![];
        }
        self.losses
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect()
    }
}

/// `√ᾱ_t z₀ + √(1−ᾱ_t) ε` for each batch member.
fn corrupt(schedule: &NoiseSchedule, zs: &[&Field], ts: &[usize], eps: &[&Field]) -> Result<Vec<Field>> {
    zs.iter()
        .zip(ts)
        .zip(eps)
        .map(|((z, &t), e)| {
            let ab = schedule.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let data = z.data().iter().zip(e.data()).map(|(z, e)| a * z + b * e).collect();
            Field::new(z.width(), z.height(), data)
        })
        .collect()
}

/// Returns `(ε̂, ε)` flattened in batch order.
fn predict_batch(
    model: &ToyDenoiser,
    schedule: &NoiseSchedule,
    zs: &[&Field],
    ts: &[usize],
    eps: &[&Field],
) -> Result<(Array2<f64>, Vec<f64>)> {
    let noisy = corrupt(schedule, zs, ts, eps)?;
    let refs: Vec<&Field> = noisy.iter().collect();
    let x = model.stack_inputs(&refs, None)?;
    let (out, _) = model.forward(x, zs[0].width(), zs[0].height(), ts);
    let target = eps.iter().flat_map(|e| e.data().iter().copied()).collect();
    Ok((out, target))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ToyDenoiser) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ToyDenoiser, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, tensor) in model.tensors_mut().iter_mut().enumerate() {
            for (k, w) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][k];
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Random horizontal/vertical flip of a field.
fn flip(f: &Field, horizontal: bool, vertical: bool) -> Field {
    let (w, h) = (f.width(), f.height());
    let mut out = Vec::with_capacity(w * h);
    for i in 0..h {
        let si = if vertical { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if horizontal { w - 1 - j } else { j };
            out.push(f.data()[si * w + sj]);
        }
    }
    Field::new(w, h, out).expect("same shape")
}

/// Splits off a validation set, trains from a seeded initialization and reports
/// validation loss before and after.
pub fn train_toy_denoiser(
    corpus: &[Field],
    schedule: &NoiseSchedule,
    arch: ToyArchitecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ToyDenoiser, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidValue("training corpus is empty".into()));
    }
    if corpus.iter().any(|f| !f.same_shape(&corpus[0])) {
        return Err(Error::DimensionMismatch("corpus fields differ in shape".into()));
    }
    if let Some(v) = corpus
        .iter()
        .flat_map(|f| f.data())
        .find(|v| !(-1.0..=1.0).contains(*v))
    {
        return Err(Error::InvalidValue(format!("corpus value {v} outside [-1, 1]")));
    }
    if arch.train_steps != schedule.len() {
        return Err(Error::InvalidConfig(format!(
            "architecture embeds {} steps but the schedule has {}",
            arch.train_steps,
            schedule.len()
        )));
    }
    let n_val = cfg.validation_size.min(corpus.len() / 5);
    let (train, held_out) = corpus.split_at(corpus.len() - n_val);
    let held_out = if held_out.is_empty() { train } else { held_out };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyDenoiser::new(arch, &mut rng)?;
    let validation = ValidationSet::new(held_out, schedule, seed ^ 0x5eed_0f_7a11);
    let initial_validation = validation.loss(&model, schedule)?;
    log::info!(
        "training toy denoiser: {} parameters, {} training fields, initial validation loss {:.4}",
        model.parameter_count(),
        train.len(),
        initial_validation
    );

    let mut adam = Adam::new(&model);
    let mut losses = Vec::with_capacity(cfg.steps);
    let (w, h) = (corpus[0].width(), corpus[0].height());
    let warmup = (cfg.steps / 20).max(1);
    for step in 0..cfg.steps {
        let batch: Vec<Field> = (0..cfg.batch_size)
            .map(|_| {
                let f = &train[rng.random_range(0..train.len())];
                flip(f, rng.random(), rng.random())
            })
            .collect();
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(1..=schedule.len()))
            .collect();
        let eps: Vec<Field> = (0..cfg.batch_size)
            .map(|_| Field::standard_normal(w, h, &mut rng))
            .collect();
        let zs: Vec<&Field> = batch.iter().collect();
        let es: Vec<&Field> = eps.iter().collect();

        let noisy = corrupt(schedule, &zs, &ts, &es)?;
        let refs: Vec<&Field> = noisy.iter().collect();
        let x = model.stack_inputs(&refs, None)?;
        let (out, tape) = model.forward(x, w, h, &ts);
        let target: Vec<f64> = es.iter().flat_map(|e| e.data().iter().copied()).collect();
        let n = target.len() as f64;
        let mut d_out = out.clone();
        let mut loss = 0.0;
        d_out.iter_mut().zip(&target).for_each(|(o, t)| {
            let r = *o - t;
            loss += r * r;
            *o = 2.0 * r / n;
        });
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::DivergedTraining { step, loss });
        }
        let (grads, _) = model.backward(&tape, &d_out, true, false);
        let mut grads = grads.expect("parameter gradients requested");
        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::DivergedTraining { step, loss: norm });
            }
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let progress = step as f64 / cfg.steps as f64;
        let lr = if step < warmup {
            cfg.learning_rate * (step + 1) as f64 / warmup as f64
        } else {
            cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
        };
        adam.step(&mut model, &grads, lr);
        if !model.weights_finite() {
            return Err(Error::DivergedTraining { step, loss });
        }
        losses.push(loss);
        if (step + 1) % 100 == 0 {
            let tail = &losses[losses.len() - 100..];
            log::info!(
                "step {:>5}: mean batch loss {:.4}",
                step + 1,
                tail.iter().sum::<f64>() / 100.0
            );
        }
    }
    let final_validation = validation.loss(&model, schedule)?;
    log::info!("final validation loss {final_validation:.4}");
    Ok((
        model,
        TrainReport {
            losses,
            initial_validation,
            final_validation,
            train_fields: train.len(),
            validation_fields: validation.len(),
        },
    ))
}
