//! Procedural rectified stereo scenes with exact ground-truth depth.
//!
//! Depth and texture are continuous functions of the left image plane. The left image
//! samples the texture at pixel centres; the right image is rendered by pushing a dense
//! sampling of every left row through the disparity law `x_r = x_l − f·b/d` and keeping
//! the nearest surface per right pixel. Right pixels no surface lands on are filled from the
//! nearest rendered pixel in the same row and flagged.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Field;
use crate::error::{Error, Result};
use crate::io::{write_calibration, write_image, write_mask, write_pfm};
use crate::metric_param::RelativeDepth;
use crate::scene::{CameraView, DepthMap, Image, Intrinsics, ViewPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Background plane at `d_max` with rectangles in front; the first one sits at `d_min`.
    FrontoParallel,
    /// A single plane tilted in 3D, spanning `[d_min, d_max]` across the image.
    SlantedPlane,
    /// A sphere whose nearest point is at `d_min` in front of a plane at `d_max`.
    SphereOnPlane,
    /// Smooth random surface from a sum of low-frequency sinusoids.
    Heightfield,
}

impl Layout {
    pub const ALL: [Layout; 4] = [
        Layout::FrontoParallel,
        Layout::SlantedPlane,
        Layout::SphereOnPlane,
        Layout::Heightfield,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Checker,
    SmoothNoise,
    RandomDots,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Checker, Texture::SmoothNoise, Texture::RandomDots];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub layout: Layout,
    pub texture: Texture,
    pub d_min: f64,
    pub d_max: f64,
    /// Right camera sits `baseline` meters along `+x` from the left one.
    pub baseline: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Number of rectangles for [`Layout::FrontoParallel`]; 0 gives a single plane at `d_max`.
    pub rectangles: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Heightfield,
            texture: Texture::SmoothNoise,
            d_min: 4.0,
            d_max: 8.0,
            baseline: 1.0,
            focal: 40.0,
            width: 32,
            height: 32,
            channels: 1,
            rectangles: 2,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(Error::InvalidConfig("baseline must be positive".into()));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidConfig("focal length must be positive".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidConfig("scene must be at least 2x2".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig("channels must be 1 or 3".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Largest disparity in pixels, reached at `d_min`.
    pub fn max_disparity(&self) -> f64 {
        self.focal * self.baseline / self.d_min
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub pair: ViewPair,
    pub gt_depth: DepthMap,
    /// `(d − d_min)/(d_max − d_min)`.
    pub gt_relative: RelativeDepth,
    /// Right pixels filled because no left surface projects there.
    pub right_filled: Vec<bool>,
    /// Left pixels whose surface is hidden in the right view.
    pub left_occluded: Vec<bool>,
}

enum Geometry {
    Planes(Vec<[f64; 5]>),
    Slanted { inv0: f64, gx: f64, gy: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
    Height { terms: Vec<[f64; 4]>, lo: f64, hi: f64 },
}

struct Scene3d {
    geometry: Geometry,
    k: Intrinsics,
    d_min: f64,
    d_max: f64,
}

impl Scene3d {
    fn sample<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Self {
        let k = spec.intrinsics();
        let (w, h) = (spec.width as f64, spec.height as f64);
        let (d_min, d_max) = (spec.d_min, spec.d_max);
        let geometry = match spec.layout {
            Layout::FrontoParallel => {
                let rects = (0..spec.rectangles)
                    .map(|n| {
                        let rw = rng.random_range(0.3..0.55) * w;
                        let rh = rng.random_range(0.3..0.55) * h;
                        let x0 = rng.random_range(0.05 * w..(0.95 * w - rw).max(0.06 * w));
                        let y0 = rng.random_range(0.05 * h..(0.95 * h - rh).max(0.06 * h));
                        let d = if n == 0 {
                            d_min
                        } else {
                            d_min + (d_max - d_min) * rng.random_range(0.25..0.75)
                        };
                        [x0, x0 + rw, y0, y0 + rh, d]
                    })
                    .collect();
                Geometry::Planes(rects)
            }
            Layout::SlantedPlane => {
                let theta = rng.random_range(0.0..2.0 * PI);
                let (c, s) = (theta.cos(), theta.sin());
                let corners = [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)];
                let proj: Vec<f64> = corners.iter().map(|(x, y)| c * x + s * y).collect();
                let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                // 1/d runs affinely from 1/d_max (proj = lo) to 1/d_min (proj = hi).
                let span = (1.0 / d_min - 1.0 / d_max) / (hi - lo);
                Geometry::Slanted {
                    inv0: 1.0 / d_max - span * lo,
                    gx: span * c,
                    gy: span * s,
                }
            }
            Layout::SphereOnPlane => {
                let px = rng.random_range(0.35..0.65) * (w - 1.0);
                let py = rng.random_range(0.35..0.65) * (h - 1.0);
                let radius = (d_max - d_min) * rng.random_range(0.4..0.8);
                let zc = d_min + radius;
                let center = Vector3::new((px - k.cx) / k.fx * zc, (py - k.cy) / k.fy * zc, zc);
                Geometry::Sphere { center, radius }
            }
            Layout::Heightfield => {
                let terms: Vec<[f64; 4]> = (0..6)
                    .map(|_| {
                        let wl = rng.random_range(0.6..2.0) * w.max(h);
                        let th = rng.random_range(0.0..2.0 * PI);
                        let f = 2.0 * PI / wl;
                        [f * th.cos(), f * th.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)]
                    })
                    .collect();
                let raw = |x: f64, y: f64| -> f64 {
                    terms.iter().map(|t| t[3] * (t[0] * x + t[1] * y + t[2]).sin()).sum()
                };
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..spec.height {
                    for j in 0..spec.width {
                        let v = raw(j as f64, i as f64);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                Geometry::Height { terms, lo, hi }
            }
        };
        Self {
            geometry,
            k,
            d_min,
            d_max,
        }
    }

    /// Depth at continuous left-image coordinates `(x, y)`.
    fn depth(&self, x: f64, y: f64) -> f64 {
        match &self.geometry {
            Geometry::Planes(rects) => rects
                .iter()
                .filter(|r| x >= r[0] && x < r[1] && y >= r[2] && y < r[3])
                .map(|r| r[4])
                .fold(self.d_max, f64::min),
            Geometry::Slanted { inv0, gx, gy } => 1.0 / (inv0 + gx * x + gy * y),
            Geometry::Sphere { center, radius } => {
                let r = Vector3::new((x - self.k.cx) / self.k.fx, (y - self.k.cy) / self.k.fy, 1.0);
                let rc = r.dot(center);
                let rr = r.norm_squared();
                let disc = rc * rc - rr * (center.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return self.d_max;
                }
                let t = (rc - disc.sqrt()) / rr;
                t.clamp(self.d_min, self.d_max)
            }
            Geometry::Height { terms, lo, hi } => {
                let v: f64 = terms.iter().map(|t| t[3] * (t[0] * x + t[1] * y + t[2]).sin()).sum();
                let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
                self.d_min + (self.d_max - self.d_min) * u
            }
        }
    }
}

/// A continuous intensity pattern on the left image plane, one per channel.
enum Pattern {
    Checker { period: f64, c: f64, s: f64, ox: f64, oy: f64, contrast: f64 },
    Waves(Vec<[f64; 4]>),
    Dots(Vec<[f64; 4]>),
}

impl Pattern {
    fn sample<R: Rng>(kind: Texture, x_range: (f64, f64), y_range: (f64, f64), rng: &mut R) -> Self {
        match kind {
            Texture::Checker => {
                let th = rng.random_range(0.0..PI);
                Pattern::Checker {
                    period: rng.random_range(4.0..7.0),
                    c: th.cos(),
                    s: th.sin(),
                    ox: rng.random_range(0.0..10.0),
                    oy: rng.random_range(0.0..10.0),
                    contrast: rng.random_range(0.3..0.45),
                }
            }
            Texture::SmoothNoise => Pattern::Waves(
                (0..12)
                    .map(|_| {
                        let wl = rng.random_range(3.0..10.0);
                        let th = rng.random_range(0.0..2.0 * PI);
                        let f = 2.0 * PI / wl;
                        [f * th.cos(), f * th.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)]
                    })
                    .collect(),
            ),
            Texture::RandomDots => {
                let area = (x_range.1 - x_range.0) * (y_range.1 - y_range.0);
                let n = (area / 9.0).ceil() as usize;
                Pattern::Dots(
                    (0..n)
                        .map(|_| {
                            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                            [
                                rng.random_range(x_range.0..x_range.1),
                                rng.random_range(y_range.0..y_range.1),
                                rng.random_range(1.0..2.2),
                                sign * rng.random_range(0.2..0.4),
                            ]
                        })
                        .collect(),
                )
            }
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let v = match self {
            Pattern::Checker { period, c, s, ox, oy, contrast } => {
                let u = c * x + s * y + ox;
                let v = -s * x + c * y + oy;
                let a = (1.5 * (PI * u / period).sin()).tanh();
                let b = (1.5 * (PI * v / period).sin()).tanh();
                0.5 + contrast * a * b
            }
            Pattern::Waves(terms) => {
                let sum: f64 = terms.iter().map(|t| t[3] * (t[0] * x + t[1] * y + t[2]).sin()).sum();
                0.5 + 0.15 * sum / (terms.len() as f64 / 2.0).sqrt()
            }
            Pattern::Dots(dots) => {
                let mut v = 0.5;
                for d in dots {
                    let (dx, dy) = (x - d[0], y - d[1]);
                    let r2 = dx * dx + dy * dy;
                    if r2 < 16.0 * d[2] * d[2] {
                        v += d[3] * (-r2 / (2.0 * d[2] * d[2])).exp();
                    }
                }
                v
            }
        };
        v.clamp(0.0, 1.0)
    }
}

/// Fraction of non-overlapping 7×7 windows whose variance exceeds the floor.
pub fn texture_richness(img: &Image, window: usize, floor: f64) -> f64 {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut good = 0;
    let mut total = 0;
    for i0 in (0..h.saturating_sub(window - 1)).step_by(window) {
        for j0 in (0..w.saturating_sub(window - 1)).step_by(window) {
            total += 1;
            let n = (window * window) as f64;
            let mut rich = false;
            for c in 0..ch {
                let (mut s, mut sq) = (0.0, 0.0);
                for i in i0..i0 + window {
                    for j in j0..j0 + window {
                        let v = img.get(i, j, c);
                        s += v;
                        sq += v * v;
                    }
                }
                let var = sq / n - (s / n) * (s / n);
                rich |= var > floor;
            }
            if rich {
                good += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}

pub const RICHNESS_WINDOW: usize = 7;
pub const RICHNESS_FLOOR: f64 = 1e-3;
pub const RICHNESS_FRACTION: f64 = 0.9;

/// Samples relative depth of the layout only, without rendering images.
pub fn relative_depth(spec: &SceneSpec) -> Result<RelativeDepth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene3d::sample(spec, &mut rng);
    relative_of(spec, &scene)
}

fn relative_of(spec: &SceneSpec, scene: &Scene3d) -> Result<RelativeDepth> {
    let range = spec.d_max - spec.d_min;
    let mut data = Vec::with_capacity(spec.width * spec.height);
    for i in 0..spec.height {
        for j in 0..spec.width {
            let d = scene.depth(j as f64, i as f64);
            data.push(((d - spec.d_min) / range).clamp(0.0, 1.0));
        }
    }
    RelativeDepth::new(spec.width, spec.height, data)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene3d::sample(spec, &mut rng);
    let (w, h, ch) = (spec.width, spec.height, spec.channels);
    let k = spec.intrinsics();
    let fb = k.fx * spec.baseline;

    let mut gt = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            gt.push(scene.depth(j as f64, i as f64));
        }
    }
    let gt_depth = DepthMap::new(w, h, gt)?;
    let gt_relative = relative_of(spec, &scene)?;

    let x_range = (-4.0, w as f64 + spec.max_disparity() + 4.0);
    let y_range = (-4.0, h as f64 + 4.0);
    let mut patterns: Vec<Pattern> = Vec::new();
    let mut left = Image::constant(w, h, ch, 0.0)?;
    for attempt in 0..16 {
        patterns = (0..ch)
            .map(|_| Pattern::sample(spec.texture, x_range, y_range, &mut rng))
            .collect();
        left = Image::from_fn(w, h, ch, |i, j, c| patterns[c].eval(j as f64, i as f64))?;
        if texture_richness(&left, RICHNESS_WINDOW, RICHNESS_FLOOR) >= RICHNESS_FRACTION {
            break;
        }
        log::debug!("scene seed {}: texture attempt {attempt} too flat, resampling", spec.seed);
    }

    // Dense forward rendering of each row with a z-buffer.
    const SUB: f64 = 16.0;
    let mut right = vec![0.0; w * h * ch];
    let mut zbuf = vec![f64::INFINITY; w * h];
    let n_samples = ((x_range.1 - x_range.0) * SUB).ceil() as usize + 1;
    for i in 0..h {
        let y = i as f64;
        let xs: Vec<f64> = (0..n_samples).map(|n| x_range.0 + n as f64 / SUB).collect();
        let ds: Vec<f64> = xs.iter().map(|&x| scene.depth(x, y)).collect();
        let xr: Vec<f64> = xs.iter().zip(&ds).map(|(x, d)| x - fb / d).collect();
        for n in 0..n_samples - 1 {
            let (a, b) = (xr[n], xr[n + 1]);
            if (b - a).abs() > 0.5 || b <= a {
                continue;
            }
            let j0 = a.ceil().max(0.0) as usize;
            let j1 = b.floor().min(w as f64 - 1.0);
            if j1 < 0.0 {
                continue;
            }
            for j in j0..=(j1 as usize) {
                let t = (j as f64 - a) / (b - a);
                if !(0.0..=1.0).contains(&t) {
                    continue;
                }
                let d = ds[n] + t * (ds[n + 1] - ds[n]);
                let k = i * w + j;
                if d < zbuf[k] {
                    zbuf[k] = d;
                    let x_l = xs[n] + t * (xs[n + 1] - xs[n]);
                    for c in 0..ch {
                        right[k * ch + c] = patterns[c].eval(x_l, y);
                    }
                }
            }
        }
    }
    let right_filled: Vec<bool> = zbuf.iter().map(|z| !z.is_finite()).collect();
    for i in 0..h {
        for j in 0..w {
            if !right_filled[i * w + j] {
                continue;
            }
            let src = (1..w)
                .flat_map(|o| [j.checked_sub(o), (j + o < w).then_some(j + o)])
                .flatten()
                .find(|&s| !right_filled[i * w + s]);
            if let Some(s) = src {
                for c in 0..ch {
                    right[(i * w + j) * ch + c] = right[(i * w + s) * ch + c];
                }
            }
        }
    }

    let mut left_occluded = vec![false; w * h];
    for i in 0..h {
        for j in 0..w {
            let d = gt_depth.get(i, j);
            let x = j as f64 - fb / d;
            if x < 0.0 || x > w as f64 - 1.0 {
                continue;
            }
            let nodes = [x.floor() as usize, (x.ceil() as usize).min(w - 1)];
            left_occluded[i * w + j] = nodes.iter().any(|&n| {
                let z = zbuf[i * w + n];
                !z.is_finite() || (z - d).abs() > 0.05 * d
            });
        }
    }

    let right_image = Image::new(w, h, ch, right)?;
    let left_view = CameraView::at_origin(k)?;
    let right_view = CameraView::translated(k, Vector3::new(spec.baseline, 0.0, 0.0))?;
    let pair = ViewPair::new(left_view, left, right_view, right_image)?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        pair,
        gt_depth,
        gt_relative,
        right_filled,
        left_occluded,
    })
}

/// `n` relative-depth fields from seeds derived from `seed`, mapped to `[-1, 1]`.
pub fn generate_corpus(n: usize, template: &SceneSpec, seed: u64) -> Result<Vec<Field>> {
    if n == 0 {
        return Err(Error::InvalidValue("corpus size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let spec = SceneSpec {
                seed: rng.random(),
                ..template.clone()
            };
            let rel = relative_depth(&spec)?;
            Field::new(rel.width(), rel.height(), rel.data().iter().map(|x| 2.0 * x - 1.0).collect())
        })
        .collect()
}

/// Twenty-scene style suite: layouts and textures cycle, depth ranges spread over
/// 2–50 m, baselines chosen for a fixed maximum disparity.
pub fn standard_suite(n: usize, size: usize, max_disparity: f64, seed: u64) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = size as f64 * 1.25;
    (0..n)
        .map(|k| {
            let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            let d_min = 2.0 * (10.0f64).powf(frac * 1.1 + rng.random_range(-0.05..0.05));
            let ratio = rng.random_range(1.5..2.5);
            let d_max = (d_min * ratio).min(50.0);
            SceneSpec {
                layout: Layout::ALL[k % 4],
                texture: Texture::ALL[k % 3],
                d_min,
                d_max,
                baseline: max_disparity * d_min / focal,
                focal,
                width: size,
                height: size,
                channels: 1,
                rectangles: 2,
                seed: rng.random(),
            }
        })
        .collect()
}

/// Writes `left.png`, `right.png`, `gt_depth.pfm`, `rig.txt`, and the `right_filled.png` and
/// `left_occluded.png` masks.
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_image(&dir.join("left.png"), &scene.pair.left_image)?;
    write_image(&dir.join("right.png"), &scene.pair.right_image)?;
    write_pfm(&dir.join("gt_depth.pfm"), &scene.gt_depth)?;
    write_calibration(&dir.join("rig.txt"), &scene.pair.left, &scene.pair.right)?;
    write_mask(
        &dir.join("right_filled.png"),
        scene.spec.width,
        scene.spec.height,
        &scene.right_filled,
    )?;
    write_mask(
        &dir.join("left_occluded.png"),
        scene.spec.width,
        scene.spec.height,
        &scene.left_occluded,
    )
}
