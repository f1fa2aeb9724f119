//! A small dilated-convolution noise predictor with a sinusoidal time embedding.
//!
//! Every layer is a 3×3 convolution with zero padding; hidden layers use SiLU. The time
//! embedding enters as a per-layer bias `b + A·emb(t)`, and the output adds a learned
//! skip term `c(t)·z_t` with `c(t) = wᵀemb(t) + c₀`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Field, Linearized, Timestep};
use crate::error::{Error, Result};
use crate::scene::Image;

const TAPS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyArchitecture {
    pub hidden_channels: usize,
    /// Image channels concatenated to the latent; 0 for an unconditional prior.
    pub cond_channels: usize,
    pub dilations: Vec<usize>,
    pub embed_dim: usize,
    /// Timestep range the embedding is normalized by.
    pub train_steps: usize,
}

impl Default for ToyArchitecture {
    fn default() -> Self {
        Self {
            hidden_channels: 24,
            cond_channels: 0,
            dilations: vec![1, 2, 4, 1],
            embed_dim: 16,
            train_steps: 1000,
        }
    }
}

impl ToyArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.dilations.len() < 2 {
            return Err(Error::InvalidConfig(
                "toy denoiser needs hidden channels and at least two layers".into(),
            ));
        }
        if self.dilations.contains(&0) {
            return Err(Error::InvalidConfig("dilations must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 == 1 {
            return Err(Error::InvalidConfig("embed_dim must be even and positive".into()));
        }
        if self.train_steps == 0 {
            return Err(Error::InvalidConfig("train_steps must be >= 1".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let n = self.dilations.len();
        (0..n)
            .map(|l| {
                let cin = if l == 0 { 1 + self.cond_channels } else { self.hidden_channels };
                let cout = if l + 1 == n { 1 } else { self.hidden_channels };
                (cin, cout)
            })
            .collect()
    }

    /// Tensor shapes in storage order: per layer weight `(cout, cin·9)`, bias `(cout)`,
    /// time projection `(cout, embed_dim)`; then skip weights `(embed_dim)` and skip bias `(1)`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (cin, cout) in self.layer_dims() {
            shapes.push(vec![cout, cin * TAPS]);
            shapes.push(vec![cout]);
            shapes.push(vec![cout, self.embed_dim]);
        }
        shapes.push(vec![self.embed_dim]);
        shapes.push(vec![1]);
        shapes
    }

    pub fn embed(&self, t: usize) -> Vec<f64> {
        let s = t as f64 / self.train_steps as f64;
        let half = self.embed_dim / 2;
        let mut e = Vec::with_capacity(self.embed_dim);
        for k in 0..half {
            let a = s * std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64;
            e.push(a.sin());
            e.push(a.cos());
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn view2(&self) -> ArrayView2<'_, f64> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (*n, 1),
            _ => unreachable!("tensors are rank 1 or 2"),
        };
        ArrayView2::from_shape((r, c), &self.data).expect("tensor shape matches data")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    arch: ToyArchitecture,
    tensors: Vec<Tensor>,
}

/// Activations kept for the backward pass.
pub(crate) struct Tape {
    width: usize,
    height: usize,
    batch: usize,
    cols: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
    embeds: Array2<f64>,
    z: Vec<f64>,
    skip: Vec<f64>,
}

impl ToyDenoiser {
    /// He-initialized hidden layers, a small output layer and a zero skip term.
    pub fn new<R: Rng + ?Sized>(arch: ToyArchitecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let n = dims.len();
        let mut tensors = Vec::new();
        for (l, (cin, cout)) in dims.into_iter().enumerate() {
            let fan_in = (cin * TAPS) as f64;
            let gain = if l + 1 == n { 0.1 } else { 2.0f64.sqrt() };
            let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
            let mut w = Tensor::zeros(&[cout, cin * TAPS]);
            w.data.iter_mut().for_each(|v| *v = normal.sample(rng));
            tensors.push(w);
            tensors.push(Tensor::zeros(&[cout]));
            let mut a = Tensor::zeros(&[cout, arch.embed_dim]);
            let tn = Normal::new(0.0, 0.1).expect("valid std");
            a.data.iter_mut().for_each(|v| *v = tn.sample(rng));
            tensors.push(a);
        }
        tensors.push(Tensor::zeros(&[arch.embed_dim]));
        tensors.push(Tensor::zeros(&[1]));
        Ok(Self { arch, tensors })
    }

    pub fn from_tensors(arch: ToyArchitecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.tensor_shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| *s != t.shape) {
            return Err(Error::DimensionMismatch("tensor table does not match architecture".into()));
        }
        if tensors.iter().any(|t| t.data.len() != t.shape.iter().product::<usize>()) {
            return Err(Error::DimensionMismatch("tensor data length".into()));
        }
        if tensors.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidValue("non-finite weight".into()));
        }
        Ok(Self { arch, tensors })
    }

    pub fn architecture(&self) -> &ToyArchitecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn weights_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Stacks latents (and conditioning) into a `(channels, batch·H·W)` matrix.
    pub(crate) fn stack_inputs(&self, zs: &[&Field], cond: Option<&Image>) -> Result<Array2<f64>> {
        let first = zs.first().ok_or_else(|| Error::InvalidValue("empty batch".into()))?;
        let (w, h) = (first.width(), first.height());
        if zs.iter().any(|z| !z.same_shape(first)) {
            return Err(Error::DimensionMismatch("batch members differ in shape".into()));
        }
        let hw = w * h;
        let cin = 1 + self.arch.cond_channels;
        let mut x = Array2::zeros((cin, zs.len() * hw));
        for (b, z) in zs.iter().enumerate() {
            x.row_mut(0)
                .as_slice_mut()
                .expect("standard layout")[b * hw..(b + 1) * hw]
                .copy_from_slice(z.data());
        }
        if self.arch.cond_channels > 0 {
            let img = cond.ok_or_else(|| {
                Error::InvalidValue("conditional prior needs a conditioning image".into())
            })?;
            if img.width() != w || img.height() != h || img.channels() != self.arch.cond_channels {
                return Err(Error::DimensionMismatch("conditioning image shape".into()));
            }
            let ch = img.channels();
            for c in 0..ch {
                let mut row = x.row_mut(1 + c);
                let row = row.as_slice_mut().expect("standard layout");
                for b in 0..zs.len() {
                    for k in 0..hw {
                        row[b * hw + k] = img.data()[k * ch + c] * 2.0 - 1.0;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Forward pass over a batch. Returns `ε̂` as a `(1, batch·H·W)` matrix.
    pub(crate) fn forward(
        &self,
        x: Array2<f64>,
        width: usize,
        height: usize,
        timesteps: &[usize],
    ) -> (Array2<f64>, Tape) {
        let batch = timesteps.len();
        let hw = width * height;
        let e = self.arch.embed_dim;
        let mut embeds = Array2::zeros((e, batch));
        for (b, &t) in timesteps.iter().enumerate() {
            for (k, v) in self.arch.embed(t).into_iter().enumerate() {
                embeds[[k, b]] = v;
            }
        }
        let z: Vec<f64> = x.row(0).to_vec();
        let n_layers = self.arch.dilations.len();
        let mut cols = Vec::with_capacity(n_layers);
        let mut pres = Vec::with_capacity(n_layers);
        let mut act = x;
        for l in 0..n_layers {
            let col = im2col(&act, batch, width, height, self.arch.dilations[l]);
            let w = self.tensors[3 * l].view2();
            let bias = &self.tensors[3 * l + 1].data;
            let tb = self.tensors[3 * l + 2].view2().dot(&embeds);
            let mut pre = w.dot(&col);
            for (c, mut row) in pre.axis_iter_mut(Axis(0)).enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                for b in 0..batch {
                    let add = bias[c] + tb[[c, b]];
                    row[b * hw..(b + 1) * hw].iter_mut().for_each(|v| *v += add);
                }
            }
            act = if l + 1 < n_layers { pre.mapv(silu) } else { pre.clone() };
            cols.push(col);
            pres.push(pre);
        }
        let sw = &self.tensors[3 * n_layers].data;
        let s0 = self.tensors[3 * n_layers + 1].data[0];
        let skip: Vec<f64> = (0..batch)
            .map(|b| s0 + (0..e).map(|k| sw[k] * embeds[[k, b]]).sum::<f64>())
            .collect();
        {
            let out = act.row_mut(0).into_slice().expect("standard layout");
            for b in 0..batch {
                for k in b * hw..(b + 1) * hw {
                    out[k] += skip[b] * z[k];
                }
            }
        }
        let tape = Tape {
            width,
            height,
            batch,
            cols,
            pres,
            embeds,
            z,
            skip,
        };
        (act, tape)
    }

    /// Backward pass for an upstream gradient `d_out` of shape `(1, batch·H·W)`.
    /// Returns parameter gradients (if requested) and the gradient w.r.t. the latent row.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        d_out: &Array2<f64>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<Vec<f64>>>, Option<Vec<f64>>) {
        let n_layers = self.arch.dilations.len();
        let (batch, hw) = (tape.batch, tape.width * tape.height);
        let e = self.arch.embed_dim;
        let mut grads: Option<Vec<Vec<f64>>> =
            want_params.then(|| self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect());
        let d_out_row = d_out.row(0);
        let d_out_s = d_out_row.as_slice().expect("standard layout");

        if let Some(g) = grads.as_mut() {
            for b in 0..batch {
                let dc: f64 = (b * hw..(b + 1) * hw).map(|k| d_out_s[k] * tape.z[k]).sum();
                for k in 0..e {
                    g[3 * n_layers][k] += dc * tape.embeds[[k, b]];
                }
                g[3 * n_layers + 1][0] += dc;
            }
        }

        let mut d_pre = d_out.clone();
        let mut d_input = None;
        for l in (0..n_layers).rev() {
            if let Some(g) = grads.as_mut() {
                let dw = d_pre.dot(&tape.cols[l].t());
                g[3 * l].copy_from_slice(dw.as_slice().expect("standard layout"));
                let cout = d_pre.nrows();
                for c in 0..cout {
                    let row = d_pre.row(c);
                    let row = row.as_slice().expect("standard layout");
                    for b in 0..batch {
                        let s: f64 = row[b * hw..(b + 1) * hw].iter().sum();
                        g[3 * l + 1][c] += s;
                        for k in 0..e {
                            g[3 * l + 2][c * e + k] += s * tape.embeds[[k, b]];
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let w = self.tensors[3 * l].view2();
            let d_col = w.t().dot(&d_pre);
            let cin = d_col.nrows() / TAPS;
            let d_x = col2im(&d_col, cin, batch, tape.width, tape.height, self.arch.dilations[l]);
            if l == 0 {
                let mut dz = d_x.row(0).to_vec();
                for b in 0..batch {
                    for k in b * hw..(b + 1) * hw {
                        dz[k] += tape.skip[b] * d_out_s[k];
                    }
                }
                d_input = Some(dz);
            } else {
                let pre = &tape.pres[l - 1];
                let mut d = d_x;
                d.zip_mut_with(pre, |g, &p| *g *= silu_grad(p));
                d_pre = d;
            }
        }
        (grads, d_input)
    }

    fn run(&self, z: &Field, t: Timestep, cond: Option<&Image>) -> Result<(Field, Tape)> {
        let x = self.stack_inputs(&[z], cond)?;
        let (out, tape) = self.forward(x, z.width(), z.height(), &[t.index]);
        let eps = Field::new(z.width(), z.height(), out.into_raw_vec_and_offset().0)?;
        Ok((eps, tape))
    }
}

impl Denoiser for ToyDenoiser {
    fn predict(&self, z: &Field, t: Timestep, cond: Option<&Image>) -> Result<Field> {
        Ok(self.run(z, t, cond)?.0)
    }

    fn linearize(&self, z: &Field, t: Timestep, cond: Option<&Image>) -> Result<Option<Linearized<'_>>> {
        let (eps, tape) = self.run(z, t, cond)?;
        let (w, h) = (z.width(), z.height());
        Ok(Some(Linearized {
            eps,
            pullback: Box::new(move |v: &Field| {
                if v.width() != w || v.height() != h {
                    return Err(Error::DimensionMismatch("pullback vector".into()));
                }
                let d_out = Array2::from_shape_vec((1, w * h), v.data().to_vec())
                    .expect("shape matches");
                let (_, dz) = self.backward(&tape, &d_out, false, true);
                Field::new(w, h, dz.expect("input gradient requested"))
            }),
        }))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row `c·9 + ky·3 + kx` holds channel `c` shifted by `((ky−1)·d, (kx−1)·d)`, zero padded.
fn im2col(x: &Array2<f64>, batch: usize, w: usize, h: usize, dil: usize) -> Array2<f64> {
    let cin = x.nrows();
    let hw = w * h;
    let n = batch * hw;
    let mut col = Array2::zeros((cin * TAPS, n));
    let d = dil as isize;
    for c in 0..cin {
        let src = x.row(c);
        let src = src.as_slice().expect("standard layout");
        for ky in 0..3isize {
            for kx in 0..3isize {
                let (dy, dx) = ((ky - 1) * d, (kx - 1) * d);
                let mut dst = col.row_mut(c * TAPS + (ky * 3 + kx) as usize);
                let dst = dst.as_slice_mut().expect("standard layout");
                let (j0, j1) = col_range(dx, w);
                if j0 >= j1 {
                    continue;
                }
                for b in 0..batch {
                    for i in 0..h {
                        let si = i as isize + dy;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let di = b * hw + i * w;
                        let sb = b * hw + si as usize * w;
                        let s0 = (j0 as isize + dx) as usize;
                        dst[di + j0..di + j1].copy_from_slice(&src[sb + s0..sb + s0 + (j1 - j0)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &Array2<f64>, cin: usize, batch: usize, w: usize, h: usize, dil: usize) -> Array2<f64> {
    let hw = w * h;
    let mut x = Array2::zeros((cin, batch * hw));
    let d = dil as isize;
    for c in 0..cin {
        let mut dst = x.row_mut(c);
        let dst = dst.as_slice_mut().expect("standard layout");
        for ky in 0..3isize {
            for kx in 0..3isize {
                let (dy, dx) = ((ky - 1) * d, (kx - 1) * d);
                let src = col.row(c * TAPS + (ky * 3 + kx) as usize);
                let src = src.as_slice().expect("standard layout");
                let (j0, j1) = col_range(dx, w);
                if j0 >= j1 {
                    continue;
                }
                for b in 0..batch {
                    for i in 0..h {
                        let si = i as isize + dy;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let di = b * hw + i * w;
                        let sb = b * hw + si as usize * w;
                        let s0 = (j0 as isize + dx) as usize;
                        for (o, v) in dst[sb + s0..sb + s0 + (j1 - j0)]
                            .iter_mut()
                            .zip(&src[di + j0..di + j1])
                        {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Output columns `j` for which `j + dx` lies inside `[0, w)`.
fn col_range(dx: isize, w: usize) -> (usize, usize) {
    let j0 = (-dx).max(0) as usize;
    let j1 = (w as isize - dx.max(0)).max(0) as usize;
    (j0.min(w), j1.min(w))
}
