#![allow(dead_code)]

use std::path::PathBuf;

use guided_depth::io::RunConfig;
use guided_depth::synth::{generate_scene, Layout, SceneSpec, SyntheticScene, Texture};

/// `‖a − b‖ / ‖b‖`, falling back to the absolute norm when `b` is tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn suite_config() -> RunConfig {
    RunConfig::load(&repo_root().join("configs/suite.toml")).expect("configs/suite.toml")
}

pub fn small_scene(seed: u64, size: usize) -> SyntheticScene {
    let layout = Layout::ALL[(seed % 4) as usize];
    let texture = Texture::ALL[(seed % 3) as usize];
    generate_scene(&SceneSpec {
        layout,
        texture,
        d_min: 3.0,
        d_max: 7.0,
        baseline: 0.5,
        focal: size as f64 * 1.25,
        width: size,
        height: size,
        channels: 1,
        rectangles: 2,
        seed,
    })
    .expect("scene")
}

/// Inverse of `softplus`.
pub fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}
