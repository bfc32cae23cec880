#![allow(dead_code)]

use rand::Rng;
use vmflow::model::{Condition, DataShape, ModelConfig, VmfModel};
use vmflow::rng::seeded;
use vmflow::train::{forward_loss, prepare_step, PreparedStep};
use vmflow::{FlowBatch, FlowNet, Tensor, TrainConfig, Variant};

pub const SHAPE: DataShape = DataShape {
    sample_len: 3,
    token_dim: 2,
    cond_len: 1,
    cond_dim: 3,
};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        width: 16,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        latent_dim: 3,
        encoder_hidden: 16,
        time_freqs: 4,
        dispersive_layer: 1,
        max_sample_len: 4,
    }
}

pub fn tiny_model(variant: Variant, seed: u64) -> VmfModel {
    VmfModel::new(&tiny_config(), SHAPE, variant.variational(), seed).unwrap()
}

/// A config that always exercises the mean-flow branch with a multi-group layout.
pub fn mean_flow_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(variant);
    cfg.seed = seed;
    if !variant.instantaneous() {
        cfg.p_equal = 0.0;
    }
    cfg.inference_layout_prob = 0.0;
    cfg.split_decay = 1.0;
    cfg.cond_dropout = 0.0;
    cfg
}

pub fn random_batch(n: usize, seed: u64) -> (Tensor, Vec<Condition>) {
    let mut rng = seeded(seed);
    let x = Tensor::randn(&[n * SHAPE.sample_len, SHAPE.token_dim], 1.0, &mut rng);
    let conds = (0..n)
        .map(|i| {
            if i % 4 == 3 {
                Condition::Null
            } else {
                Condition::Given((0..SHAPE.cond_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
        })
        .collect();
    (x, conds)
}

/// A prepared step whose times stay `margin` away from the ends and from each other.
pub fn prepared(net: &VmfModel, cfg: &TrainConfig, n: usize, seed: u64, margin: f32) -> PreparedStep {
    let (x, conds) = random_batch(n, seed);
    let mut prep = prepare_step(x, conds, cfg, net.cond_len(), FlowNet::latent_dim(net), seed).unwrap();
    let mut rng = seeded(seed ^ 0x5eed);
    let t: Vec<f32> = (0..n).map(|_| rng.random_range(0.2..0.9)).collect();
    let r: Vec<f32> = t.iter().map(|&t| rng.random_range(0.0..t - margin)).collect();
    prep.batch = FlowBatch::new(prep.batch.x.clone(), prep.batch.conds.clone(), prep.batch.eps.clone(), t, r).unwrap();
    prep
}

/// Same step with every `t` moved by `dt`, which moves `z` by `dt·v`.
pub fn shifted(prep: &PreparedStep, dt: f32) -> PreparedStep {
    let mut p = prep.clone();
    let t: Vec<f32> = prep.batch.t.iter().map(|t| t + dt).collect();
    p.batch = FlowBatch::new(p.batch.x.clone(), p.batch.conds.clone(), p.batch.eps.clone(), t, p.batch.r.clone()).unwrap();
    p
}

pub fn u_of(net: &VmfModel, prep: &PreparedStep, cfg: &TrainConfig) -> Tensor {
    let lg = forward_loss(net, prep, cfg, 0, None).unwrap();
    lg.graph.tensor(lg.u)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

/// JVP tangent of `u` and its central difference along `(v, 0, 1)`.
pub fn jvp_and_fd(net: &VmfModel, prep: &PreparedStep, cfg: &TrainConfig, delta: f32) -> (Tensor, Tensor) {
    let lg = forward_loss(net, prep, cfg, 0, None).unwrap();
    let up = u_of(net, &shifted(prep, delta), cfg);
    let dn = u_of(net, &shifted(prep, -delta), cfg);
    let fd = up.zip_map(&dn, "fd", |a, b| (a - b) / (2.0 * delta)).unwrap();
    (lg.u_dot, fd)
}

/// Tangent of `u` for arbitrary tangents on `(z, t, r)`, reusing the step's layout and latent draw.
pub fn model_jvp(net: &VmfModel, prep: &PreparedStep, tz: &Tensor, tt: &Tensor, tr: &Tensor) -> Tensor {
    use std::sync::Arc;
    use vmflow::model::{FlowInputs, LatentInput};
    use vmflow::train::LatentDraw;
    use vmflow::Graph;

    let b = &prep.batch;
    let n = b.batch();
    let s = b.sample_len;
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, false);
    let x = g.constant(&b.x);
    let eps = g.constant(&b.eps);
    let z = g.input_with_tangent(&b.z, tz).unwrap();
    let t = g.input_with_tangent(&Tensor::matrix(n, 1, b.t.clone()).unwrap(), tt).unwrap();
    let r = g.input_with_tangent(&Tensor::matrix(n, 1, b.r.clone()).unwrap(), tr).unwrap();
    let visible = prep.mask.visible_len();
    let clean = (visible > 0).then(|| {
        let index: Arc<[usize]> = (0..n).flat_map(|e| (0..visible).map(move |i| e * s + i)).collect();
        g.gather_rows(x, index).unwrap()
    });
    let latent = match &prep.latent {
        LatentDraw::None => LatentInput::None,
        LatentDraw::Posterior(noise) => LatentInput::Posterior { noise: g.constant(noise) },
        LatentDraw::Prior(h) => LatentInput::Prior { h: g.constant(h) },
    };
    let out = net
        .forward(
            &mut g,
            &p,
            &FlowInputs {
                batch: n,
                conds: &b.conds,
                x,
                eps,
                z,
                clean,
                t,
                r,
                mask: &prep.mask,
                latent,
                want_hidden: false,
            },
        )
        .unwrap();
    g.tangent_tensor(out.u)
}

pub const FD_STEPS: [f32; 6] = [5e-2, 6e-2, 7e-2, 8e-2, 9e-2, 1e-1];

pub fn loss_at(net: &VmfModel, prep: &PreparedStep, cfg: &TrainConfig, target: &Tensor) -> f64 {
    forward_loss(net, prep, cfg, 0, Some(target)).unwrap().report.total as f64
}

/// Relative errors of reverse-mode gradients against central differences on
/// `count` random coordinates of parameters whose name starts with `prefix`.
pub fn gradient_errors(variant: Variant, prefix: &str, count: usize, seed: u64) -> Vec<(String, f64, f64, f64)> {
    let mut net = tiny_model(variant, seed);
    let mut cfg = mean_flow_config(variant, seed);
    if variant.variational() {
        cfg.alpha = 0.1;
    }
    let prep = prepared(&net, &cfg, 4, seed, 0.01);
    let lg = forward_loss(&net, &prep, &cfg, 0, None).unwrap();
    let target = lg.target.clone();
    let grads = lg.graph.backward(lg.total).unwrap();
    let ids: Vec<_> = net.params().ids().filter(|&id| net.params().name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let analytic: Vec<Vec<f32>> = ids.iter().map(|&id| grads.wrt(lg.bound.var(id)).map_or_else(|| vec![0.0; net.params().get(id).numel()], <[f32]>::to_vec)).collect();

    let mut rng = seeded(seed + 1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let which = rng.random_range(0..ids.len());
        let id = ids[which];
        let k = rng.random_range(0..net.params().get(id).numel());
        let orig = net.params().get(id).data()[k];
        let mut at = |offset: f32| {
            net.params_mut().get_mut(id).data_mut()[k] = orig + offset;
            loss_at(&net, &prep, &cfg, &target)
        };
        // fourth-order stencil averaged over a few step sizes to damp f32 rounding in the loss
        let mut fd = 0.0;
        for d in FD_STEPS {
            fd += (8.0 * (at(d) - at(-d)) - (at(2.0 * d) - at(-2.0 * d))) / (12.0 * d as f64);
        }
        let fd = fd / FD_STEPS.len() as f64;
        net.params_mut().get_mut(id).data_mut()[k] = orig;
        let g = analytic[which][k] as f64;
        // coordinates whose gradient is at the f32 noise floor are compared absolutely
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
        out.push((format!("{}[{k}]", net.params().name(id)), g, fd, err));
    }
    out
}

/// Attention rule written directly from the segment semantics: everything
/// sees the condition and latent prefix, clean and noisy rows of group `g`
/// see clean positions before group `g` starts, and noisy rows see their
/// own noisy group.
pub fn mask_oracle(sample_len: usize, cond_len: usize, latent_len: usize, sizes: &[usize]) -> Vec<u8> {
    let prefix = cond_len + latent_len;
    let visible = sample_len - sizes.last().unwrap();
    let n = prefix + visible + sample_len;
    let mut starts = vec![0];
    for s in sizes {
        starts.push(starts.last().unwrap() + s);
    }
    let group = |pos: usize| starts.iter().rposition(|&b| b <= pos).unwrap().min(sizes.len() - 1);
    #[derive(Clone, Copy)]
    enum Seg {
        Prefix,
        Clean(usize),
        Noisy(usize),
    }
    let seg = |i: usize| {
        if i < prefix {
            Seg::Prefix
        } else if i < prefix + visible {
            Seg::Clean(i - prefix)
        } else {
            Seg::Noisy(i - prefix - visible)
        }
    };
    let mut m = vec![1u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let open = match (seg(r), seg(c)) {
                (_, Seg::Prefix) => true,
                (Seg::Clean(p), Seg::Clean(q)) | (Seg::Noisy(p), Seg::Clean(q)) => q < starts[group(p)],
                (Seg::Noisy(p), Seg::Noisy(q)) => group(p) == group(q),
                _ => false,
            };
            if open {
                m[r * n + c] = 0;
            }
        }
    }
    m
}

/// Every structural invariant of a mask, as an error message on failure.
pub fn check_mask(m: &vmflow::AttentionMask) -> std::result::Result<(), String> {
    let split = m.split();
    let sizes = split.sizes();
    let cs = split.cumsum();
    if sizes.iter().sum::<usize>() != m.sample_len() || sizes.contains(&0) {
        return Err(format!("bad sizes {sizes:?}"));
    }
    if cs.len() != sizes.len() + 1 || cs[0] != 0 || *cs.last().unwrap() != m.sample_len() || cs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("bad cumsum {cs:?}"));
    }
    let n = m.seq_len();
    if n != m.cond_len() + m.latent_len() + m.visible_len() + m.sample_len() {
        return Err("segment lengths do not add up".into());
    }
    if m.visible_len() != m.sample_len() - sizes.last().unwrap() {
        return Err("visible length is not sample_len minus the last group".into());
    }
    let mat = m.matrix();
    if mat.len() != n * n || mat.iter().any(|&v| v > 1) {
        return Err("entries outside {0, 1}".into());
    }
    let prefix = m.cond_len() + m.latent_len();
    for r in 0..n {
        if (0..prefix).any(|c| mat[r * n + c] != 0) {
            return Err(format!("row {r} blocks a prefix column"));
        }
    }
    for r in 0..m.visible_len() {
        let start = cs[split.group_of(r)];
        for c in start..m.visible_len() {
            if mat[(prefix + r) * n + prefix + c] == 0 {
                return Err(format!("clean position {r} sees clean position {c}"));
            }
        }
    }
    let z0 = prefix + m.visible_len();
    for r in 0..m.sample_len() {
        for c in 0..m.sample_len() {
            let same = split.group_of(r) == split.group_of(c);
            if (mat[(z0 + r) * n + z0 + c] == 0) != same {
                return Err(format!("noisy block ({r}, {c}) does not follow the split"));
            }
        }
    }
    if mat != mask_oracle(m.sample_len(), m.cond_len(), m.latent_len(), sizes).as_slice() {
        return Err("mask differs from the rule-based oracle".into());
    }
    Ok(())
}

/// Velocity of a prepared step with the clean tokens optionally replaced.
pub fn forward_u(net: &VmfModel, prep: &PreparedStep, clean_override: Option<&Tensor>) -> Tensor {
    use std::sync::Arc;
    use vmflow::model::{FlowInputs, LatentInput};
    use vmflow::train::LatentDraw;
    use vmflow::Graph;

    let b = &prep.batch;
    let n = b.batch();
    let s = b.sample_len;
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, false);
    let x = g.constant(&b.x);
    let eps = g.constant(&b.eps);
    let z = g.constant(&b.z);
    let t = g.constant(&Tensor::matrix(n, 1, b.t.clone()).unwrap());
    let r = g.constant(&Tensor::matrix(n, 1, b.r.clone()).unwrap());
    let visible = prep.mask.visible_len();
    let clean = (visible > 0).then(|| match clean_override {
        Some(c) => g.constant(c),
        None => {
            let index: Arc<[usize]> = (0..n).flat_map(|e| (0..visible).map(move |i| e * s + i)).collect();
            g.gather_rows(x, index).unwrap()
        }
    });
    let latent = match &prep.latent {
        LatentDraw::None => LatentInput::None,
        LatentDraw::Posterior(noise) => LatentInput::Posterior { noise: g.constant(noise) },
        LatentDraw::Prior(h) => LatentInput::Prior { h: g.constant(h) },
    };
    let out = net
        .forward(
            &mut g,
            &p,
            &FlowInputs {
                batch: n,
                conds: &b.conds,
                x,
                eps,
                z,
                clean,
                t,
                r,
                mask: &prep.mask,
                latent,
                want_hidden: false,
            },
        )
        .unwrap();
    g.tensor(out.u)
}

/// Clean rows `[batch * visible_len, token_dim]` of a prepared step.
pub fn clean_rows(prep: &PreparedStep) -> Tensor {
    let b = &prep.batch;
    let (s, d, visible) = (b.sample_len, b.token_dim(), prep.mask.visible_len());
    let data: Vec<f32> = (0..b.batch())
        .flat_map(|e| b.x.data()[e * s * d..(e * s + visible) * d].to_vec())
        .collect();
    Tensor::matrix(b.batch() * visible, d, data).unwrap()
}

/// Step with a fixed split and every other random choice from `seed`.
pub fn prepared_with_split(net: &VmfModel, variant: Variant, sizes: Vec<usize>, n: usize, seed: u64) -> PreparedStep {
    use vmflow::train::LatentDraw;
    let cfg = mean_flow_config(variant, seed);
    let mut prep = prepared(net, &cfg, n, seed, 0.01);
    let split = vmflow::GroupSplit::from_sizes(sizes).unwrap();
    prep.mask = vmflow::build_mask(SHAPE.sample_len, 1, usize::from(FlowNet::latent_dim(net) > 0), &split).unwrap();
    if let LatentDraw::Posterior(noise) = &prep.latent {
        prep.latent = LatentDraw::Prior(noise.clone());
    }
    prep
}
