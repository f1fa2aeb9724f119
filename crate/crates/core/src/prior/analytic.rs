use crate::diffusion::{Denoiser, Field, Linearized, Timestep};
use crate::error::{Error, Result};
use crate::scene::Image;

/// Exact denoiser for the prior `z₀ ~ N(μ, σ₀² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    mu: Field,
    sigma0: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Field, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidValue(format!("sigma0 {sigma0} must be positive")));
        }
        if !mu.is_finite() {
            return Err(Error::InvalidValue("prior mean must be finite".into()));
        }
        Ok(Self { mu, sigma0 })
    }

    pub fn mu(&self) -> &Field {
        &self.mu
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// `E[z₀ | z_t]` for the conjugate Gaussian pair.
    pub fn posterior_mean(&self, z: &Field, alpha_bar: f64) -> Result<Field> {
        self.check(z)?;
        let v = self.sigma0 * self.sigma0;
        let d = alpha_bar * v + (1.0 - alpha_bar);
        let data = z
            .data()
            .iter()
            .zip(self.mu.data())
            .map(|(z, m)| (alpha_bar.sqrt() * v * z + (1.0 - alpha_bar) * m) / d)
            .collect();
        Field::new(z.width(), z.height(), data)
    }

    /// `∂ε̂/∂z_t`, a multiple of the identity.
    pub fn jacobian_scale(&self, alpha_bar: f64) -> f64 {
        let d = alpha_bar * self.sigma0 * self.sigma0 + (1.0 - alpha_bar);
        (1.0 - alpha_bar).sqrt() / d
    }

    fn check(&self, z: &Field) -> Result<()> {
        if z.same_shape(&self.mu) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "latent {}x{} vs prior mean {}x{}",
                z.width(),
                z.height(),
                self.mu.width(),
                self.mu.height()
            )))
        }
    }
}

/// `ε̂ = (z_t − √ᾱ·E[z₀|z_t])/√(1−ᾱ)`, which simplifies to `√(1−ᾱ)(z_t − √ᾱ μ)/(ᾱσ₀² + 1 − ᾱ)`.
pub fn analytic_predict(z: &Field, alpha_bar: f64, mu: &Field, sigma0: f64) -> Result<Field> {
    AnalyticGaussianDenoiser::new(mu.clone(), sigma0)?.eps(z, alpha_bar)
}

impl AnalyticGaussianDenoiser {
    fn eps(&self, z: &Field, alpha_bar: f64) -> Result<Field> {
        self.check(z)?;
        let c = self.jacobian_scale(alpha_bar);
        let a = alpha_bar.sqrt();
        let data = z
            .data()
            .iter()
            .zip(self.mu.data())
            .map(|(z, m)| c * (z - a * m))
            .collect();
        Field::new(z.width(), z.height(), data)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict(&self, z: &Field, t: Timestep, _cond: Option<&Image>) -> Result<Field> {
        self.eps(z, t.alpha_bar)
    }

    fn linearize(&self, z: &Field, t: Timestep, _cond: Option<&Image>) -> Result<Option<Linearized<'_>>> {
        let eps = self.eps(z, t.alpha_bar)?;
        let c = self.jacobian_scale(t.alpha_bar);
        let (w, h) = (z.width(), z.height());
        Ok(Some(Linearized {
            eps,
            pullback: Box::new(move |v: &Field| {
                if v.width() != w || v.height() != h {
                    return Err(Error::DimensionMismatch("pullback vector".into()));
                }
                Field::new(w, h, v.data().iter().map(|x| c * x).collect())
            }),
        }))
    }
}
