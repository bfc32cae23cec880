//! Causality-aware transformer: the velocity network.
//!
//! Condition, latent, clean and noisy tokens are embedded separately, tagged
//! with a learned segment vector, concatenated per example and run through
//! pre-norm masked self-attention blocks. Time conditioning is added to the
//! noisy tokens only, and the velocity is read off the noisy positions.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::AttentionMask;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Feature width of one sample token.
    pub token_dim: usize,
    /// Feature width of one condition token.
    pub cond_dim: usize,
    pub cond_len: usize,
    /// Width of the variational latent; 0 disables the latent token.
    pub latent_dim: usize,
    pub max_sample_len: usize,
    pub time_freqs: usize,
    /// Block whose noisy-token activations feed the dispersive loss.
    pub dispersive_layer: usize,
}

impl Default for CatConfig {
    fn default() -> Self {
        CatConfig {
            width: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4,
            token_dim: 16,
            cond_dim: 16,
            cond_len: 1,
            latent_dim: 16,
            max_sample_len: 16,
            time_freqs: 8,
            dispersive_layer: 1,
        }
    }
}

/// A condition for one example: explicit values or the learned null token.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    /// `cond_len * cond_dim` values, token-major.
    Given(Vec<f32>),
    Null,
}

/// Segment lengths of one example's token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub cond_len: usize,
    pub latent_len: usize,
    pub visible_len: usize,
    pub sample_len: usize,
}

impl SequenceLayout {
    pub fn seq_len(&self) -> usize {
        self.cond_len + self.latent_len + self.visible_len + self.sample_len
    }

    /// Start offsets of `[c, h, x_p, z]`.
    pub fn offsets(&self) -> [usize; 4] {
        let h = self.cond_len;
        let xp = h + self.latent_len;
        [0, h, xp, xp + self.visible_len]
    }

    fn check(&self, mask: &AttentionMask) -> Result<()> {
        let want = (mask.cond_len(), mask.latent_len(), mask.visible_len(), mask.sample_len());
        let got = (self.cond_len, self.latent_len, self.visible_len, self.sample_len);
        if want != got {
            return Err(Error::LayoutMismatch(format!(
                "tokens (c, h, x_p, z) = {got:?}, mask expects {want:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter handles of the velocity network.
#[derive(Clone, Debug)]
pub struct Cat {
    cfg: CatConfig,
    cond_proj: Linear,
    latent_proj: Option<Linear>,
    clean_proj: Linear,
    noisy_proj: Linear,
    segments: [ParamId; 4],
    positions: ParamId,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
    c_null: ParamId,
}

/// Graph-level inputs of one batched forward pass.
pub struct CatInputs<'a> {
    pub batch: usize,
    /// `[batch * cond_len, cond_dim]`, see [`Cat::condition_tokens`].
    pub cond: Var,
    /// `[batch, latent_dim]`.
    pub latent: Option<Var>,
    /// `[batch * visible_len, token_dim]`.
    pub clean: Option<Var>,
    /// `[batch * sample_len, token_dim]`.
    pub noisy: Var,
    /// `[batch, 1]` each.
    pub t: Var,
    pub r: Var,
    pub mask: &'a AttentionMask,
    pub want_hidden: bool,
}

pub struct CatOutput {
    /// `[batch * sample_len, token_dim]`.
    pub velocity: Var,
    /// Mean noisy-token activation after the dispersive block, `[batch, width]`.
    pub hidden: Option<Var>,
}

impl Cat {
    pub fn new<R: Rng + ?Sized>(cfg: &CatConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                cfg.width, cfg.heads
            )));
        }
        if cfg.blocks == 0 || cfg.token_dim == 0 || cfg.cond_dim == 0 || cfg.cond_len == 0 || cfg.max_sample_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let w = cfg.width;
        let cond_proj = Linear::new(store, "theta/cond_proj", cfg.cond_dim, w, true, 1.0, rng);
        let clean_proj = Linear::new(store, "theta/clean_proj", cfg.token_dim, w, true, 1.0, rng);
        let noisy_proj = Linear::new(store, "theta/noisy_proj", cfg.token_dim, w, true, 1.0, rng);
        let segments = ["cond", "latent", "clean", "noisy"]
            .map(|s| store.add(format!("theta/segment/{s}"), Tensor::randn(&[1, w], 0.1, rng)));
        let positions = store.add("theta/positions", Tensor::randn(&[cfg.max_sample_len, w], 0.1, rng));
        let time_in = Linear::new(store, "theta/time/in", 4 * cfg.time_freqs, w, true, 1.0, rng);
        let time_out = Linear::new(store, "theta/time/out", w, w, true, 1.0, rng);
        let residual_gain = 1.0 / (2.0 * cfg.blocks as f32).sqrt();
        let hidden = w * cfg.mlp_ratio.max(1);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let n = format!("theta/block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}/ln1"), w),
                    wq: Linear::new(store, &format!("{n}/q"), w, w, false, 1.0, rng),
                    wk: Linear::new(store, &format!("{n}/k"), w, w, false, 1.0, rng),
                    wv: Linear::new(store, &format!("{n}/v"), w, w, false, 1.0, rng),
                    wo: Linear::new(store, &format!("{n}/o"), w, w, true, residual_gain, rng),
                    ln2: LayerNorm::new(store, &format!("{n}/ln2"), w),
                    fc1: Linear::new(store, &format!("{n}/fc1"), w, hidden, true, 1.0, rng),
                    fc2: Linear::new(store, &format!("{n}/fc2"), hidden, w, true, residual_gain, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, "theta/final_ln", w);
        let head = Linear::new(store, "theta/head", w, cfg.token_dim, true, 0.5, rng);
        let c_null = store.add("theta/c_null", Tensor::randn(&[1, cfg.cond_dim], 1.0, rng));
        // Created last so models with and without a latent share every other initial weight.
        let latent_proj =
            (cfg.latent_dim > 0).then(|| Linear::new(store, "theta/latent_proj", cfg.latent_dim, w, true, 1.0, rng));
        Ok(Cat {
            cfg: cfg.clone(),
            cond_proj,
            latent_proj,
            clean_proj,
            noisy_proj,
            segments,
            positions,
            time_in,
            time_out,
            blocks,
            final_ln,
            head,
            c_null,
        })
    }

    pub fn config(&self) -> &CatConfig {
        &self.cfg
    }

    pub fn c_null(&self) -> ParamId {
        self.c_null
    }

    /// Stack per-example conditions into `[batch * cond_len, cond_dim]`,
    /// routing `Null` entries through the learned null token.
    pub fn condition_tokens(&self, g: &mut Graph, p: &Bound, conds: &[Condition]) -> Result<Var> {
        let (cl, cd) = (self.cfg.cond_len, self.cfg.cond_dim);
        let mut data = Vec::with_capacity(conds.len() * cl * cd);
        let mut index = Vec::with_capacity(conds.len() * cl);
        let mut given = 0;
        for c in conds {
            match c {
                Condition::Given(v) => {
                    if v.len() != cl * cd {
                        return Err(Error::ShapeMismatch {
                            op: "condition",
                            lhs: vec![cl, cd],
                            rhs: vec![v.len()],
                        });
                    }
                    data.extend_from_slice(v);
                    index.extend(given * cl..(given + 1) * cl);
                    given += 1;
                }
                Condition::Null => index.extend(std::iter::repeat_n(usize::MAX, cl)),
            }
        }
        let null_row = given * cl;
        for i in index.iter_mut() {
            if *i == usize::MAX {
                *i = null_row;
            }
        }
        let table = if given > 0 {
            let c = g.constant(&Tensor::matrix(given * cl, cd, data)?);
            g.concat_rows(&[c, p.var(self.c_null)])?
        } else {
            p.var(self.c_null)
        };
        g.gather_rows(table, Arc::from(index))
    }

    /// Sinusoidal features of `t` and `t - r`, passed through a small MLP.
    pub fn embed_time(&self, g: &mut Graph, p: &Bound, t: Var, r: Var) -> Result<Var> {
        for (name, v) in [("t", t), ("r", r)] {
            if let Some(bad) = g.value(v).iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::invalid(format!("time {name} = {bad} outside [0, 1]")));
            }
        }
        let freqs: Vec<f32> = (0..self.cfg.time_freqs).map(|k| (1u32 << k) as f32).collect();
        let freqs = g.constant(&Tensor::matrix(1, freqs.len(), freqs)?);
        let tf = g.matmul(t, freqs)?;
        let gap = g.sub(t, r)?;
        let gf = g.matmul(gap, freqs)?;
        let parts = [g.sin(tf), g.cos(tf), g.sin(gf), g.cos(gf)];
        let feats = g.concat_cols(&parts)?;
        let h = self.time_in.forward(g, p, feats)?;
        let h = g.silu(h);
        self.time_out.forward(g, p, h)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inp: &CatInputs<'_>) -> Result<CatOutput> {
        let b = inp.batch;
        let cfg = &self.cfg;
        let rows_of = |g: &Graph, v: Var| g.shape(v)[0];
        let sample_len = rows_of(g, inp.noisy) / b.max(1);
        if b == 0 || sample_len == 0 {
            return Err(Error::invalid("noisy segment is empty"));
        }
        if sample_len > cfg.max_sample_len {
            return Err(Error::Config(format!(
                "sample length {sample_len} exceeds max_sample_len {}",
                cfg.max_sample_len
            )));
        }
        let visible_len = inp.clean.map_or(0, |c| rows_of(g, c) / b);
        let latent_len = usize::from(inp.latent.is_some());
        if inp.latent.is_some() && self.latent_proj.is_none() {
            return Err(Error::LayoutMismatch("latent token given to a model without one".into()));
        }
        let layout = SequenceLayout {
            cond_len: cfg.cond_len,
            latent_len,
            visible_len,
            sample_len,
        };
        layout.check(inp.mask)?;
        if rows_of(g, inp.cond) != b * cfg.cond_len {
            return Err(Error::LayoutMismatch(format!(
                "{} condition rows for batch {b} x cond_len {}",
                rows_of(g, inp.cond),
                cfg.cond_len
            )));
        }
        for i in 0..b {
            let (t, r) = (g.value(inp.t)[i], g.value(inp.r)[i]);
            if !(0.0..=1.0).contains(&r) || !(r..=1.0).contains(&t) {
                return Err(Error::invalid(format!("times must satisfy 0 <= r <= t <= 1, got r={r}, t={t}")));
            }
        }

        let pos_index = |len: usize| -> Arc<[usize]> { (0..b).flat_map(|_| 0..len).collect() };

        // Segment embeddings.
        let c = self.cond_proj.forward(g, p, inp.cond)?;
        let c = g.add_row(c, p.var(self.segments[0]))?;
        let mut parts = vec![c];
        if let (Some(h), Some(proj)) = (inp.latent, &self.latent_proj) {
            let e = proj.forward(g, p, h)?;
            parts.push(g.add_row(e, p.var(self.segments[1]))?);
        }
        if let Some(x) = inp.clean.filter(|_| visible_len > 0) {
            let e = self.clean_proj.forward(g, p, x)?;
            let e = g.add_row(e, p.var(self.segments[2]))?;
            let pos = g.gather_rows(p.var(self.positions), pos_index(visible_len))?;
            parts.push(g.add(e, pos)?);
        }
        let z = self.noisy_proj.forward(g, p, inp.noisy)?;
        let z = g.add_row(z, p.var(self.segments[3]))?;
        let pos = g.gather_rows(p.var(self.positions), pos_index(sample_len))?;
        let z = g.add(z, pos)?;
        let te = self.embed_time(g, p, inp.t, inp.r)?;
        let te = g.gather_rows(te, (0..b).flat_map(|i| std::iter::repeat_n(i, sample_len)).collect())?;
        parts.push(g.add(z, te)?);

        // Interleave into per-example sequences [c | h | x_p | z].
        let stacked = g.concat_rows(&parts)?;
        let seq = layout.seq_len();
        let seg_lens = [cfg.cond_len, latent_len, visible_len, sample_len];
        let mut seg_base = [0usize; 4];
        let mut acc = 0;
        for (i, len) in seg_lens.iter().enumerate() {
            seg_base[i] = acc;
            acc += b * len;
        }
        let mut order = Vec::with_capacity(b * seq);
        for ex in 0..b {
            for (s, &len) in seg_lens.iter().enumerate() {
                order.extend((0..len).map(|i| seg_base[s] + ex * len + i));
            }
        }
        let mut x = g.gather_rows(stacked, Arc::from(order))?;

        let blocked = inp.mask.blocked_flags();
        let z_off = layout.offsets()[3];
        let z_rows: Arc<[usize]> = (0..b).flat_map(|ex| (0..sample_len).map(move |i| ex * seq + z_off + i)).collect();
        let dispersive_at = cfg.dispersive_layer.min(cfg.blocks - 1);
        let mut hidden = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let n = blk.ln1.forward(g, p, x)?;
            let q = blk.wq.forward(g, p, n)?;
            let k = blk.wk.forward(g, p, n)?;
            let v = blk.wv.forward(g, p, n)?;
            let a = g.attention(q, k, v, blocked.clone(), seq, cfg.heads)?;
            let o = blk.wo.forward(g, p, a)?;
            x = g.add(x, o)?;
            let n = blk.ln2.forward(g, p, x)?;
            let f = blk.fc1.forward(g, p, n)?;
            let f = g.silu(f);
            let f = blk.fc2.forward(g, p, f)?;
            x = g.add(x, f)?;
            if inp.want_hidden && i == dispersive_at {
                let zs = g.gather_rows(x, z_rows.clone())?;
                hidden = Some(g.pool_rows(zs, sample_len)?);
            }
        }
        let x = g.gather_rows(x, z_rows)?;
        let x = self.final_ln.forward(g, p, x)?;
        let velocity = self.head.forward(g, p, x)?;
        Ok(CatOutput { velocity, hidden })
    }
}
