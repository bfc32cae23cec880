//! Layer building blocks over [`ParamStore`] parameters.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights `N(0, (gain / sqrt(fan_in))^2)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in.max(1) as f32).sqrt();
        let weight = store.add(format!("{name}/w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let bias = bias.then(|| store.add(format!("{name}/b"), Tensor::zeros(&[1, fan_out])));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Row normalisation followed by a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}/gain"), Tensor::full(&[1, width], 1.0)),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, p.var(self.gain))?;
        g.add_row(s, p.var(self.bias))
    }
}
