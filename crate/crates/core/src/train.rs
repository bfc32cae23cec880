//! Mean-flow training: batch construction, the JVP target, the composite
//! loss and the optimizer step.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{TimeSampling, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::{build_mask, split_with_decay, AttentionMask, GroupSplit};
use crate::model::{prior_draw, Condition, FlowInputs, FlowNet, LatentInput};
use crate::optim::{adam_update, AdamConfig, AdamState};
use crate::params::{Bound, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Draw `(t, r)` with `r <= t`; with probability `p_equal` the pair collapses to `r = t`.
pub fn sample_time_pair<R: Rng + ?Sized>(strategy: TimeSampling, p_equal: f64, rng: &mut R) -> (f32, f32) {
    let mut draw = || match strategy {
        TimeSampling::Uniform => rng.random::<f32>(),
        TimeSampling::LogNormal { mean, std } => sigmoid(mean + std * rng.sample::<f32, _>(StandardNormal)),
    };
    let (a, b) = (draw(), draw());
    let (t, r) = (a.max(b), a.min(b));
    if rng.random_bool(p_equal) {
        (t, t)
    } else {
        (t, r)
    }
}

/// `½ Σ_j (exp(lv) + mu² − 1 − lv)` summed over latent dims, averaged over rows.
pub fn kl_loss(mu: &Tensor, log_var: &Tensor) -> Result<f32> {
    if mu.shape() != log_var.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_loss",
            lhs: mu.shape().to_vec(),
            rhs: log_var.shape().to_vec(),
        });
    }
    if !mu.is_finite() || !log_var.is_finite() {
        return Err(Error::NonFinite("kl_loss input".into()));
    }
    let mut g = Graph::new();
    let m = g.constant(mu);
    let lv = g.constant(log_var);
    let k = kl_term(&mut g, m, lv)?;
    Ok(g.scalar(k))
}

/// Graph form of [`kl_loss`].
pub fn kl_term(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let rows = g.shape(mu)[0].max(1);
    let e = g.exp(log_var);
    let m2 = g.square(mu);
    let s = g.add(e, m2)?;
    let s = g.sub(s, log_var)?;
    let s = g.add_const(s, -1.0);
    let total = g.sum(s);
    Ok(g.scale(total, 0.5 / rows as f32))
}

/// Log mean of `exp(-‖z_i − z_j‖² / tau)` over all row pairs.
pub fn dispersive_loss(reps: &Tensor, tau: f32) -> Result<f32> {
    let mut g = Graph::new();
    let z = g.constant(reps);
    let d = g.dispersive(z, tau)?;
    Ok(g.scalar(d))
}

/// One training batch with its interpolant and velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub sample_len: usize,
    /// `[batch * sample_len, token_dim]`.
    pub x: Tensor,
    pub conds: Vec<Condition>,
    pub eps: Tensor,
    pub z: Tensor,
    pub v: Tensor,
    pub t: Vec<f32>,
    pub r: Vec<f32>,
}

impl FlowBatch {
    /// Build `z = (1 − t)·x + t·eps` and `v = eps − x` row by row.
    pub fn new(x: Tensor, conds: Vec<Condition>, eps: Tensor, t: Vec<f32>, r: Vec<f32>) -> Result<Self> {
        let b = conds.len();
        if b == 0 || t.len() != b || r.len() != b || x.rows() % b != 0 || x.rows() == 0 {
            return Err(Error::invalid(format!(
                "batch of {b} conditions, {} times, {} x rows",
                t.len(),
                x.rows()
            )));
        }
        if x.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "flow batch",
                lhs: x.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        for (&ti, &ri) in t.iter().zip(&r) {
            if !(0.0..=1.0).contains(&ri) || !(ri..=1.0).contains(&ti) {
                return Err(Error::invalid(format!("times must satisfy 0 <= r <= t <= 1, got r={ri}, t={ti}")));
            }
        }
        let sample_len = x.rows() / b;
        let per_example = sample_len * x.cols();
        let mut z = x.clone();
        let mut v = x.clone();
        for (i, ((zi, vi), (&xi, &ei))) in z
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(x.data().iter().zip(eps.data()))
            .enumerate()
        {
            let ti = t[i / per_example];
            *zi = (1.0 - ti) * xi + ti * ei;
            *vi = ei - xi;
        }
        Ok(FlowBatch {
            sample_len,
            x,
            conds,
            eps,
            z,
            v,
            t,
            r,
        })
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }

    pub fn token_dim(&self) -> usize {
        self.x.cols()
    }
}

/// The latent drawn for a step.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentDraw {
    None,
    /// Reparameterisation noise for the encoder posterior.
    Posterior(Tensor),
    /// A prior sample used in place of the posterior.
    Prior(Tensor),
}

/// Every random choice of a training step, made up front.
#[derive(Clone, Debug)]
pub struct PreparedStep {
    pub batch: FlowBatch,
    pub mask: AttentionMask,
    pub latent: LatentDraw,
    /// Whether this step uses the inference layout.
    pub inference_layout: bool,
}

/// Draw noise, times, condition dropout, the group split and the latent for
/// `step`, each from its own stream.
pub fn prepare_step(
    x: Tensor,
    conds: Vec<Condition>,
    cfg: &TrainConfig,
    cond_len: usize,
    latent_dim: usize,
    step: u64,
) -> Result<PreparedStep> {
    let b = conds.len();
    if b == 0 || x.rows() % b != 0 {
        return Err(Error::invalid(format!("{} rows do not split into {b} examples", x.rows())));
    }
    let sample_len = x.rows() / b;
    let eps = Tensor::randn(x.shape(), 1.0, &mut stream(cfg.seed, step, Stream::Noise));
    let mut trng = stream(cfg.seed, step, Stream::Time);
    let (t, r): (Vec<f32>, Vec<f32>) = (0..b)
        .map(|_| sample_time_pair(cfg.time_sampling, cfg.p_equal, &mut trng))
        .unzip();
    let mut drng = stream(cfg.seed, step, Stream::Dropout);
    let conds = conds
        .into_iter()
        .map(|c| if drng.random_bool(cfg.cond_dropout) { Condition::Null } else { c })
        .collect();
    let mut srng = stream(cfg.seed, step, Stream::Split);
    let inference_layout = srng.random_bool(cfg.inference_layout_prob);
    let split = if inference_layout {
        GroupSplit::single(sample_len)?
    } else {
        split_with_decay(sample_len, cfg.split_decay, &mut srng)?
    };
    let latent = if latent_dim == 0 {
        LatentDraw::None
    } else if inference_layout {
        LatentDraw::Prior(prior_draw(b, latent_dim, &mut stream(cfg.seed, step, Stream::Prior)))
    } else {
        LatentDraw::Posterior(Tensor::randn(&[b, latent_dim], 1.0, &mut stream(cfg.seed, step, Stream::Reparam)))
    };
    let mask = build_mask(sample_len, cond_len, usize::from(latent_dim > 0), &split)?;
    Ok(PreparedStep {
        batch: FlowBatch::new(x, conds, eps, t, r)?,
        mask,
        latent,
        inference_layout,
    })
}

/// `u_t = v − (t − r)·u̇` per row; rows with `t == r` copy `v` exactly.
pub fn mean_flow_target(v: &Tensor, u_dot: &Tensor, t: &[f32], r: &[f32]) -> Result<Tensor> {
    if v.shape() != u_dot.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_flow_target",
            lhs: v.shape().to_vec(),
            rhs: u_dot.shape().to_vec(),
        });
    }
    let b = t.len().max(1);
    let per_example = v.numel() / b;
    let mut out = v.clone();
    for (i, (o, &d)) in out.data_mut().iter_mut().zip(u_dot.data()).enumerate() {
        let e = i / per_example;
        if t[e] != r[e] {
            *o -= (t[e] - r[e]) * d;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l2: f32,
    pub kl: f32,
    pub dispersive: f32,
    pub total: f32,
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
    pub t_mean: f32,
    pub r_mean: f32,
}

/// The recorded loss graph of one step.
pub struct LossGraph {
    pub graph: Graph,
    pub bound: Bound,
    pub u: Var,
    pub u_dot: Tensor,
    pub target: Tensor,
    pub total: Var,
    pub report: LossReport,
}

/// Run the joint JVP of θ and φ over `(z, r, t)` with tangent `(v, 0, 1)`,
/// form the detached target and the composite loss.
///
/// `target` replaces the computed mean-flow target when given.
pub fn forward_loss<N: FlowNet + ?Sized>(
    net: &N,
    prep: &PreparedStep,
    cfg: &TrainConfig,
    step: u64,
    target: Option<&Tensor>,
) -> Result<LossGraph> {
    let batch = &prep.batch;
    let (b, s, d) = (batch.batch(), batch.sample_len, batch.token_dim());
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g, true);
    let x = g.constant(&batch.x);
    let eps = g.constant(&batch.eps);
    let z = g.input_with_tangent(&batch.z, &batch.v)?;
    let t = g.input_with_tangent(&Tensor::matrix(b, 1, batch.t.clone())?, &Tensor::full(&[b, 1], 1.0))?;
    let r = g.input_with_tangent(&Tensor::matrix(b, 1, batch.r.clone())?, &Tensor::zeros(&[b, 1]))?;
    let visible = prep.mask.visible_len();
    let clean = if visible > 0 {
        let index: Arc<[usize]> = (0..b).flat_map(|e| (0..visible).map(move |i| e * s + i)).collect();
        Some(g.gather_rows(x, index)?)
    } else {
        None
    };
    let latent = match &prep.latent {
        LatentDraw::None => LatentInput::None,
        LatentDraw::Posterior(n) => LatentInput::Posterior { noise: g.constant(n) },
        LatentDraw::Prior(h) => LatentInput::Prior { h: g.constant(h) },
    };
    let out = net.forward(
        &mut g,
        &bound,
        &FlowInputs {
            batch: b,
            conds: &batch.conds,
            x,
            eps,
            z,
            clean,
            t,
            r,
            mask: &prep.mask,
            latent,
            want_hidden: cfg.beta > 0.0,
        },
    )?;
    let u_dot = g.tangent_tensor(out.u);
    let target = match target {
        Some(t) => t.clone(),
        None => mean_flow_target(&batch.v, &u_dot, &batch.t, &batch.r)?,
    };
    let tgt = g.constant(&target);
    let diff = g.sub(out.u, tgt)?;
    let sq = g.square(diff);
    let rows = g.sum_cols(sq);
    let per_example = g.pool_rows(rows, s)?;
    let per_example = g.scale(per_example, 1.0 / d as f32);
    let l2 = if cfg.adaptive_l2 {
        let w: Vec<f32> = g
            .value(per_example)
            .iter()
            .map(|&e| 1.0 / (e + cfg.adaptive_offset).powf(cfg.adaptive_power))
            .collect();
        let w = g.constant(&Tensor::matrix(b, 1, w)?);
        let weighted = g.mul(per_example, w)?;
        g.mean(weighted)
    } else {
        g.mean(per_example)
    };
    let kl = match out.variational {
        Some(vars) => kl_term(&mut g, vars.mu, vars.log_var)?,
        None => g.constant(&Tensor::scalar(0.0)),
    };
    let disp = match (cfg.beta > 0.0, out.hidden) {
        (true, Some(h)) => g.dispersive(h, cfg.tau)?,
        (true, None) => return Err(Error::invalid("dispersive loss requested but the network exposes no representation")),
        (false, _) => g.constant(&Tensor::scalar(0.0)),
    };
    let kl_w = g.scale(kl, cfg.alpha);
    let disp_w = g.scale(disp, cfg.beta);
    let total = g.add(l2, kl_w)?;
    let total = g.add(total, disp_w)?;
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    let report = LossReport {
        step,
        l2: g.scalar(l2),
        kl: g.scalar(kl),
        dispersive: g.scalar(disp),
        total: g.scalar(total),
        alpha: cfg.alpha,
        beta: cfg.beta,
        tau: cfg.tau,
        t_mean: mean(&batch.t),
        r_mean: mean(&batch.r),
    };
    Ok(LossGraph {
        u: out.u,
        graph: g,
        bound,
        u_dot,
        target,
        total,
        report,
    })
}

/// Adam state for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Optimizer {
            cfg,
            states: store.iter().map(|(_, t)| AdamState::new(t.numel())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }

    /// Apply one update from graph gradients. Parameters off the loss path
    /// receive a zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore, bound: &Bound, grads: &crate::graph::Gradients) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if let Some(gr) = grads.wrt(bound.var(id)) {
                if let Some(i) = gr.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}` at index {i}", store.name(id))));
                }
            }
        }
        for (k, &id) in ids.iter().enumerate() {
            let name = store.name(id).to_string();
            let zeros;
            let gr = match grads.wrt(bound.var(id)) {
                Some(gr) => gr,
                None => {
                    zeros = vec![0.0; store.get(id).numel()];
                    &zeros
                }
            };
            adam_update(&name, store.get_mut(id), gr, &mut self.states[k], &self.cfg)?;
        }
        Ok(())
    }

    /// Moments as named tensors, plus the shared step counter.
    pub fn to_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.states.len() + 1);
        for ((name, p), st) in store.iter().zip(&self.states) {
            out.push((format!("adam/m/{name}"), Tensor::new(p.shape().to_vec(), st.first_moment.clone()).expect("moment shape")));
            out.push((format!("adam/v/{name}"), Tensor::new(p.shape().to_vec(), st.second_moment.clone()).expect("moment shape")));
        }
        out.push(("adam/step".into(), encode_u64(self.step_count())));
        out
    }

    pub fn load_tensors(&mut self, store: &ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |key: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry `{key}`")))
        };
        let step = decode_u64(find("adam/step")?)?;
        for ((name, p), st) in store.iter().zip(self.states.iter_mut()) {
            let m = find(&format!("adam/m/{name}"))?;
            let v = find(&format!("adam/v/{name}"))?;
            if m.numel() != p.numel() || v.numel() != p.numel() {
                return Err(Error::Checkpoint(format!("optimizer moments of `{name}` have the wrong size")));
            }
            st.first_moment = m.data().to_vec();
            st.second_moment = v.data().to_vec();
            st.step_count = step;
        }
        Ok(())
    }
}

/// A `u64` stored exactly as four 16-bit chunks, least significant first.
pub fn encode_u64(v: u64) -> Tensor {
    let words = (0..4).map(|k| ((v >> (16 * k)) & 0xFFFF) as f32).collect();
    Tensor::matrix(1, 4, words).expect("four words")
}

pub fn decode_u64(t: &Tensor) -> Result<u64> {
    let d = t.data();
    if d.len() != 4 || d.iter().any(|w| !(0.0..65536.0).contains(w) || w.fract() != 0.0) {
        return Err(Error::Checkpoint(format!("malformed counter tensor of shape {:?}", t.shape())));
    }
    Ok(d.iter().enumerate().map(|(k, &w)| (w as u64) << (16 * k)).sum())
}

/// One full step: prepare, forward with JVP, backward, Adam.
pub fn train_step<N: FlowNet + ?Sized>(
    net: &mut N,
    opt: &mut Optimizer,
    x: Tensor,
    conds: Vec<Condition>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossReport> {
    let prep = prepare_step(x, conds, cfg, net.cond_len(), net.latent_dim(), step)?;
    let lg = forward_loss(&*net, &prep, cfg, step, None)?;
    let rep = &lg.report;
    if !rep.total.is_finite() {
        return Err(Error::Diverged {
            step,
            report: format!(
                "l2={} kl={} dispersive={} total={} t_mean={} r_mean={}",
                rep.l2, rep.kl, rep.dispersive, rep.total, rep.t_mean, rep.r_mean
            ),
        });
    }
    let grads = lg.graph.backward(lg.total)?;
    opt.apply(net.params_mut(), &lg.bound, &grads)?;
    Ok(lg.report)
}

/// Network, optimizer and progress counters of a training run.
pub struct Trainer<N> {
    pub net: N,
    pub cfg: TrainConfig,
    pub opt: Optimizer,
    pub step: u64,
    pub epoch: u64,
}

impl<N: FlowNet> Trainer<N> {
    pub fn new(net: N, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Optimizer::new(net.params(), cfg.adam);
        Ok(Trainer {
            net,
            cfg,
            opt,
            step: 0,
            epoch: 0,
        })
    }

    pub fn step_on(&mut self, x: Tensor, conds: Vec<Condition>) -> Result<LossReport> {
        let rep = train_step(&mut self.net, &mut self.opt, x, conds, &self.cfg, self.step)?;
        self.step += 1;
        Ok(rep)
    }

    /// One shuffled pass over `data`, stopping early at `max_steps` total
    /// steps. Returns `false` once the step budget is exhausted.
    pub fn run_epoch(&mut self, data: &Dataset, max_steps: Option<u64>, mut on_step: impl FnMut(&LossReport)) -> Result<bool> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(self.cfg.seed, self.epoch, Stream::Shuffle));
        for chunk in order.chunks(self.cfg.batch_size) {
            if max_steps.is_some_and(|m| self.step >= m) {
                return Ok(false);
            }
            let (x, conds) = data.batch(chunk)?;
            let rep = self.step_on(x, conds)?;
            on_step(&rep);
        }
        self.epoch += 1;
        Ok(max_steps.is_none_or(|m| self.step < m))
    }

    /// Parameters, optimizer moments and progress counters.
    pub fn checkpoint(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        out.extend(self.opt.to_tensors(self.net.params()));
        out.push(("train/step".into(), encode_u64(self.step)));
        out.push(("train/epoch".into(), encode_u64(self.epoch)));
        out
    }

    /// Restore from [`Trainer::checkpoint`] output. Entries without
    /// optimizer state restore parameters only.
    pub fn restore(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let params: Vec<(&str, &Tensor)> = tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam/") && !n.starts_with("train/"))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        self.net.params_mut().load_from(params)?;
        if tensors.iter().any(|(n, _)| n == "adam/step") {
            self.opt.load_tensors(self.net.params(), tensors)?;
        }
        let counter = |key: &str| tensors.iter().find(|(n, _)| n == key).map(|(_, t)| decode_u64(t)).transpose();
        self.step = counter("train/step")?.unwrap_or(0);
        self.epoch = counter("train/epoch")?.unwrap_or(0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn kl_reference_values() {
        assert_eq!(kl_loss(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).unwrap(), 0.0);
        assert_eq!(kl_loss(&Tensor::scalar(1.0), &Tensor::scalar(0.0)).unwrap(), 0.5);
        let v = kl_loss(&Tensor::scalar(0.0), &Tensor::scalar(2f32.ln())).unwrap();
        assert!((v - 0.5 * (1.0 - 2f32.ln())).abs() < 1e-6);
        assert!(kl_loss(&Tensor::scalar(f32::NAN), &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn dispersive_two_rows_at_tau() {
        let reps = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let v = dispersive_loss(&reps, 1.0).unwrap();
        let want = ((2.0 + 2.0 * (-1f64).exp()) / 4.0).ln();
        assert!((v as f64 - want).abs() < 1e-6);
        assert!(dispersive_loss(&reps, 0.0).is_err());
    }

    #[test]
    fn equal_times_always_when_forced() {
        let mut rng = seeded(1);
        for _ in 0..200 {
            let (t, r) = sample_time_pair(TimeSampling::Uniform, 1.0, &mut rng);
            assert_eq!(t, r);
        }
        for _ in 0..200 {
            let (t, r) = sample_time_pair(TimeSampling::lognormal(), 0.0, &mut rng);
            assert!(r <= t && r > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn batch_interpolant() {
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let eps = Tensor::matrix(2, 1, vec![0.0, -1.0]).unwrap();
        let conds = vec![Condition::Null, Condition::Null];
        let fb = FlowBatch::new(x, conds.clone(), eps.clone(), vec![0.25, 1.0], vec![0.0, 0.5]).unwrap();
        assert_eq!(fb.z.data(), &[0.75, -1.0]);
        assert_eq!(fb.v.data(), &[-1.0, -3.0]);
        let x = Tensor::zeros(&[2, 1]);
        assert!(FlowBatch::new(x, conds, eps, vec![0.2, 0.2], vec![0.3, 0.0]).is_err());
    }

    #[test]
    fn target_copies_velocity_when_times_match() {
        let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let du = Tensor::matrix(2, 2, vec![f32::NAN, 1.0, 10.0, 10.0]).unwrap();
        let out = mean_flow_target(&v, &du, &[0.5, 0.75], &[0.5, 0.25]).unwrap();
        assert_eq!(&out.data()[..2], &[1.0, 2.0]);
        assert_eq!(&out.data()[2..], &[3.0 - 5.0, 4.0 - 5.0]);
    }

    #[test]
    fn counters_survive_f32_storage() {
        for v in [0, 1, 12345, u64::MAX, 1 << 40] {
            assert_eq!(decode_u64(&encode_u64(v)).unwrap(), v);
        }
    }
}
