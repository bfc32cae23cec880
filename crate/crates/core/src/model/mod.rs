//! The velocity network θ, the encoder φ, and the traits the trainer and
//! sampler are written against.

pub mod cat;
pub mod encoder;

use serde::{Deserialize, Serialize};

pub use cat::{Cat, CatConfig, CatInputs, CatOutput, Condition, SequenceLayout};
pub use encoder::{prior_draw, Encoder, EncoderConfig, EncoderInputs, VariationalOutput, VariationalVars};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::AttentionMask;
use crate::params::{Bound, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Where the latent token comes from in a training forward pass.
#[derive(Clone, Copy, Debug)]
pub enum LatentInput {
    None,
    /// Encode with φ and reparameterise with this standard normal draw.
    Posterior { noise: Var },
    /// Use a draw from the prior directly.
    Prior { h: Var },
}

pub struct FlowInputs<'a> {
    pub batch: usize,
    pub conds: &'a [Condition],
    /// `[batch * sample_len, token_dim]` each.
    pub x: Var,
    pub eps: Var,
    pub z: Var,
    /// Visible clean prefix, `[batch * visible_len, token_dim]`.
    pub clean: Option<Var>,
    /// `[batch, 1]` each.
    pub t: Var,
    pub r: Var,
    pub mask: &'a AttentionMask,
    pub latent: LatentInput,
    pub want_hidden: bool,
}

pub struct FlowOutputs {
    /// Average velocity at the noisy positions, same shape as `z`.
    pub u: Var,
    pub variational: Option<VariationalVars>,
    pub hidden: Option<Var>,
}

/// A trainable average-velocity network.
pub trait FlowNet {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Width of the latent token, 0 when the network has none.
    fn latent_dim(&self) -> usize;
    fn cond_len(&self) -> usize;
    fn forward(&self, g: &mut Graph, p: &Bound, inp: &FlowInputs<'_>) -> Result<FlowOutputs>;
}

/// An average-velocity field evaluated eagerly at inference time.
pub trait VelocityField {
    fn latent_dim(&self) -> usize;
    /// `z` is `[n * sample_len, token_dim]`; `latent`, when present, `[n, latent_dim]`.
    fn velocity(&self, conds: &[Condition], z: &Tensor, latent: Option<&Tensor>, r: f32, t: f32) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub time_freqs: usize,
    pub dispersive_layer: usize,
    pub max_sample_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            latent_dim: 16,
            encoder_hidden: 64,
            time_freqs: 8,
            dispersive_layer: 1,
            max_sample_len: 16,
        }
    }
}

/// Token geometry fixed by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub sample_len: usize,
    pub token_dim: usize,
    pub cond_len: usize,
    pub cond_dim: usize,
}

/// θ plus an optional φ sharing one parameter store.
#[derive(Clone, Debug)]
pub struct VmfModel {
    store: ParamStore,
    cat: Cat,
    encoder: Option<Encoder>,
    shape: DataShape,
}

impl VmfModel {
    /// `variational` adds φ and the latent token; the width comes from
    /// `cfg.latent_dim`, which must then be positive.
    pub fn new(cfg: &ModelConfig, shape: DataShape, variational: bool, seed: u64) -> Result<Self> {
        if variational && cfg.latent_dim == 0 {
            return Err(Error::Config("a variational model needs latent_dim > 0".into()));
        }
        let cat_cfg = CatConfig {
            width: cfg.width,
            heads: cfg.heads,
            blocks: cfg.blocks,
            mlp_ratio: cfg.mlp_ratio,
            token_dim: shape.token_dim,
            cond_dim: shape.cond_dim,
            cond_len: shape.cond_len,
            latent_dim: if variational { cfg.latent_dim } else { 0 },
            max_sample_len: cfg.max_sample_len.max(shape.sample_len),
            time_freqs: cfg.time_freqs,
            dispersive_layer: cfg.dispersive_layer,
        };
        let mut store = ParamStore::new();
        let cat = Cat::new(&cat_cfg, &mut store, &mut stream(seed, 0, Stream::Init))?;
        let encoder = if variational {
            let enc_cfg = EncoderConfig {
                hidden: cfg.encoder_hidden,
                latent_dim: cfg.latent_dim,
                token_dim: shape.token_dim,
                cond_dim: shape.cond_dim,
            };
            Some(Encoder::new(&enc_cfg, &mut store, &mut stream(seed, 1, Stream::Init))?)
        } else {
            None
        };
        Ok(VmfModel {
            store,
            cat,
            encoder,
            shape,
        })
    }

    pub fn cat(&self) -> &Cat {
        &self.cat
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        self.encoder.as_ref()
    }

    pub fn data_shape(&self) -> DataShape {
        self.shape
    }

    /// Width of the latent token, 0 without an encoder.
    pub fn latent_dim(&self) -> usize {
        self.cat.config().latent_dim
    }

    pub fn is_variational(&self) -> bool {
        self.encoder.is_some()
    }

    /// Named parameter snapshot for checkpointing.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

impl FlowNet for VmfModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn latent_dim(&self) -> usize {
        self.cat.config().latent_dim
    }

    fn cond_len(&self) -> usize {
        self.shape.cond_len
    }

    fn forward(&self, g: &mut Graph, p: &Bound, inp: &FlowInputs<'_>) -> Result<FlowOutputs> {
        let cond = self.cat.condition_tokens(g, p, inp.conds)?;
        let (latent, variational) = match (inp.latent, &self.encoder) {
            (LatentInput::None, None) => (None, None),
            (LatentInput::Prior { h }, Some(_)) => (Some(h), None),
            (LatentInput::Posterior { noise }, Some(enc)) => {
                let vars = enc.forward(
                    g,
                    p,
                    &EncoderInputs {
                        batch: inp.batch,
                        cond,
                        eps: inp.eps,
                        x: inp.x,
                        z: inp.z,
                        t: inp.t,
                        r: inp.r,
                        noise,
                    },
                )?;
                (Some(vars.h), Some(vars))
            }
            (LatentInput::None, Some(_)) => {
                return Err(Error::LayoutMismatch("variational model called without a latent".into()))
            }
            (_, None) => return Err(Error::LayoutMismatch("latent given to a model without an encoder".into())),
        };
        let out = self.cat.forward(
            g,
            p,
            &CatInputs {
                batch: inp.batch,
                cond,
                latent,
                clean: inp.clean,
                noisy: inp.z,
                t: inp.t,
                r: inp.r,
                mask: inp.mask,
                want_hidden: inp.want_hidden,
            },
        )?;
        Ok(FlowOutputs {
            u: out.velocity,
            variational,
            hidden: out.hidden,
        })
    }
}

impl VelocityField for VmfModel {
    fn latent_dim(&self) -> usize {
        self.cat.config().latent_dim
    }

    fn velocity(&self, conds: &[Condition], z: &Tensor, latent: Option<&Tensor>, r: f32, t: f32) -> Result<Tensor> {
        let n = conds.len();
        if n == 0 {
            return Err(Error::invalid("no conditions given"));
        }
        if z.rows() % n != 0 {
            return Err(Error::ShapeMismatch {
                op: "velocity",
                lhs: z.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let sample_len = z.rows() / n;
        let latent_len = usize::from(latent.is_some());
        let mask = AttentionMask::inference(sample_len, self.shape.cond_len, latent_len)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let cond = self.cat.condition_tokens(&mut g, &p, conds)?;
        let noisy = g.constant(z);
        let latent = latent.map(|h| g.constant(h));
        let tv = g.constant(&Tensor::full(&[n, 1], t));
        let rv = g.constant(&Tensor::full(&[n, 1], r));
        let out = self.cat.forward(
            &mut g,
            &p,
            &CatInputs {
                batch: n,
                cond,
                latent,
                clean: None,
                noisy,
                t: tv,
                r: rv,
                mask: &mask,
                want_hidden: false,
            },
        )?;
        let u = g.tensor(out.velocity);
        if !u.is_finite() {
            return Err(Error::NonFinite("model velocity".into()));
        }
        Ok(u)
    }
}
