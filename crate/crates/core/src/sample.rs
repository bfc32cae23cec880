//! One-step and few-step sampling with classifier-free guidance.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prior_draw, Condition, VelocityField};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub guidance_w: f32,
    /// When false every condition is replaced by the null condition.
    pub conditional: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            nfe: 1,
            guidance_w: 1.5,
            conditional: true,
            seed: 0,
        }
    }
}

/// `w·u_cond + (1 − w)·u_uncond`.
pub fn guide(u_cond: &Tensor, u_uncond: &Tensor, w: f32) -> Result<Tensor> {
    u_cond.zip_map(u_uncond, "guide", |c, u| w * c + (1.0 - w) * u)
}

/// `t_k = 1 − k/K` for `k = 0..=K`.
pub fn time_grid(k: usize) -> Result<Vec<f32>> {
    if k == 0 {
        return Err(Error::invalid("at least one sampling step is required"));
    }
    Ok((0..=k).map(|i| 1.0 - i as f32 / k as f32).collect())
}

/// Starting noise and, for latent models, the prior latent.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub eps: Tensor,
    pub latent: Option<Tensor>,
}

/// Draw `eps ~ N(0, I)` for `n` samples, then `h ~ N(0, I)` when the field
/// takes a latent.
pub fn draw_noise(n: usize, sample_len: usize, token_dim: usize, latent_dim: usize, seed: u64) -> NoiseDraw {
    let mut rng = stream(seed, 0, Stream::Sample);
    let eps = Tensor::randn(&[n * sample_len, token_dim], 1.0, &mut rng);
    let latent = (latent_dim > 0).then(|| prior_draw(n, latent_dim, &mut rng));
    NoiseDraw { eps, latent }
}

/// The guided velocity at one point. Unconditional sampling and `w = 1`
/// each take a single pass.
#[allow(clippy::too_many_arguments)]
pub fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    x: &Tensor,
    latent: Option<&Tensor>,
    r: f32,
    t: f32,
    w: f32,
    conditional: bool,
) -> Result<Tensor> {
    let nulls = vec![Condition::Null; conds.len()];
    let u = if !conditional {
        field.velocity(&nulls, x, latent, r, t)?
    } else if w == 1.0 {
        field.velocity(conds, x, latent, r, t)?
    } else {
        let uc = field.velocity(conds, x, latent, r, t)?;
        let uu = field.velocity(&nulls, x, latent, r, t)?;
        guide(&uc, &uu, w)?
    };
    if !u.is_finite() {
        return Err(Error::NonFinite("sampled velocity".into()));
    }
    Ok(u)
}

/// `x̂ = eps − u(eps, r = 0, t = 1)`.
pub fn sample_one_nfe<F: VelocityField + ?Sized>(field: &F, conds: &[Condition], noise: &NoiseDraw, w: f32, conditional: bool) -> Result<Tensor> {
    let u = guided_velocity(field, conds, &noise.eps, noise.latent.as_ref(), 0.0, 1.0, w, conditional)?;
    noise.eps.zip_map(&u, "sample", |e, u| e - u)
}

/// `K` steps on the uniform grid from `t = 1` to `t = 0`, each moving
/// `x̂ ← x̂ − (t_k − t_{k+1})·u`.
pub fn sample_multi_step<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    noise: &NoiseDraw,
    k: usize,
    w: f32,
    conditional: bool,
) -> Result<Tensor> {
    let grid = time_grid(k)?;
    let mut x = noise.eps.clone();
    for pair in grid.windows(2) {
        let (t, r) = (pair[0], pair[1]);
        let u = guided_velocity(field, conds, &x, noise.latent.as_ref(), r, t, w, conditional)?;
        let h = t - r;
        x = x.zip_map(&u, "sample", |a, u| a - h * u)?;
    }
    Ok(x)
}

/// Draw noise from `cfg.seed` and run the `cfg.nfe`-step sampler.
pub fn generate<F: VelocityField + ?Sized>(
    field: &F,
    conds: &[Condition],
    sample_len: usize,
    token_dim: usize,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let noise = draw_noise(conds.len(), sample_len, token_dim, field.latent_dim(), cfg.seed);
    sample_multi_step(field, conds, &noise, cfg.nfe, cfg.guidance_w, cfg.conditional)
}

/// Wraps a field and counts its evaluations.
pub struct CountingField<F> {
    pub inner: F,
    calls: Cell<usize>,
    null_calls: Cell<usize>,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        CountingField {
            inner,
            calls: Cell::new(0),
            null_calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    /// Evaluations where every condition was null.
    pub fn null_calls(&self) -> usize {
        self.null_calls.get()
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn velocity(&self, conds: &[Condition], z: &Tensor, latent: Option<&Tensor>, r: f32, t: f32) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        if conds.iter().all(|c| *c == Condition::Null) {
            self.null_calls.set(self.null_calls.get() + 1);
        }
        self.inner.velocity(conds, z, latent, r, t)
    }
}
