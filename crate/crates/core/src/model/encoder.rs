//! Variational encoder producing the latent token `h`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub token_dim: usize,
    pub cond_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            latent_dim: 16,
            token_dim: 16,
            cond_dim: 16,
        }
    }
}

/// Graph handles of `(mu, log_var, h)`, each `[batch, latent_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct VariationalVars {
    pub mu: Var,
    pub log_var: Var,
    pub h: Var,
}

/// Evaluated encoder output together with the reparameterisation draw.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalOutput {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub h: Tensor,
    pub noise: Tensor,
}

pub struct EncoderInputs {
    pub batch: usize,
    /// `[batch * cond_len, cond_dim]`.
    pub cond: Var,
    /// `[batch * sample_len, token_dim]` each.
    pub eps: Var,
    pub x: Var,
    pub z: Var,
    /// `[batch, 1]` each.
    pub t: Var,
    pub r: Var,
    /// Standard normal draw, `[batch, latent_dim]`.
    pub noise: Var,
}

/// Three-layer MLP over pooled `(c, eps, x, z)` and `(t, r)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.hidden == 0 || cfg.latent_dim == 0 || cfg.token_dim == 0 || cfg.cond_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let fan_in = cfg.cond_dim + 3 * cfg.token_dim + 2;
        Ok(Encoder {
            cfg: cfg.clone(),
            l1: Linear::new(store, "phi/l1", fan_in, cfg.hidden, true, 1.0, rng),
            l2: Linear::new(store, "phi/l2", cfg.hidden, cfg.hidden, true, 1.0, rng),
            l3: Linear::new(store, "phi/l3", cfg.hidden, 2 * cfg.latent_dim, true, 0.1, rng),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inp: &EncoderInputs) -> Result<VariationalVars> {
        let b = inp.batch;
        for (name, v) in [("c", inp.cond), ("eps", inp.eps), ("x", inp.x), ("z", inp.z), ("t", inp.t), ("r", inp.r), ("noise", inp.noise)] {
            if g.value(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("encoder input {name}")));
            }
        }
        let pool = |g: &mut Graph, v: Var| {
            let rows = g.shape(v)[0];
            if b == 0 || rows % b != 0 {
                return Err(Error::ShapeMismatch {
                    op: "encoder pooling",
                    lhs: g.shape(v).to_vec(),
                    rhs: vec![b],
                });
            }
            g.pool_rows(v, rows / b)
        };
        let parts = [
            pool(g, inp.cond)?,
            pool(g, inp.eps)?,
            pool(g, inp.x)?,
            pool(g, inp.z)?,
            inp.t,
            inp.r,
        ];
        let feats = g.concat_cols(&parts)?;
        let a = self.l1.forward(g, p, feats)?;
        let a = g.silu(a);
        let a = self.l2.forward(g, p, a)?;
        let a = g.silu(a);
        let out = self.l3.forward(g, p, a)?;
        let l = self.cfg.latent_dim;
        let mu = g.slice_cols(out, 0, l)?;
        let raw = g.slice_cols(out, l, 2 * l)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        let half = g.scale(log_var, 0.5);
        let sigma = g.exp(half);
        let spread = g.mul(sigma, inp.noise)?;
        let h = g.add(mu, spread)?;
        Ok(VariationalVars { mu, log_var, h })
    }

    /// Evaluate the encoder on concrete tensors, drawing the reparameterisation
    /// noise from `rng`.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        cond: &Tensor,
        eps: &Tensor,
        x: &Tensor,
        z: &Tensor,
        t: &Tensor,
        r: &Tensor,
        rng: &mut R,
    ) -> Result<VariationalOutput> {
        let batch = t.numel();
        let noise = Tensor::randn(&[batch, self.cfg.latent_dim], 1.0, rng);
        self.evaluate_with_noise(store, cond, eps, x, z, t, r, &noise)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn evaluate_with_noise(
        &self,
        store: &ParamStore,
        cond: &Tensor,
        eps: &Tensor,
        x: &Tensor,
        z: &Tensor,
        t: &Tensor,
        r: &Tensor,
        noise: &Tensor,
    ) -> Result<VariationalOutput> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let batch = t.numel();
        let tv = g.constant(&t.clone().reshape(vec![batch, 1])?);
        let rv = g.constant(&r.clone().reshape(vec![batch, 1])?);
        let inp = EncoderInputs {
            batch,
            cond: g.constant(cond),
            eps: g.constant(eps),
            x: g.constant(x),
            z: g.constant(z),
            t: tv,
            r: rv,
            noise: g.constant(noise),
        };
        let out = self.forward(&mut g, &p, &inp)?;
        Ok(VariationalOutput {
            mu: g.tensor(out.mu),
            log_var: g.tensor(out.log_var),
            h: g.tensor(out.h),
            noise: noise.clone(),
        })
    }
}

/// Standard normal prior draw for `batch` latents.
pub fn prior_draw<R: Rng + ?Sized>(batch: usize, latent_dim: usize, rng: &mut R) -> Tensor {
    let data = (0..batch * latent_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::matrix(batch, latent_dim, data).expect("prior shape")
}
