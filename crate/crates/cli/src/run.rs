use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vmflow::data::Codec;
use vmflow::metrics::{self, TradeoffPoint};
use vmflow::sample::SamplerConfig;
use vmflow::{checkpoint, generate, Condition, DataSource, MetricReport, Trainer};

use crate::artifacts::{
    build_model, ensure_dir, load_run_config, load_splits, load_weights, read_jsonl, write_json, write_jsonl, RunDir,
    SampleRow, TrainLogRow,
};
use crate::{EvalArgs, SampleArgs, TrainArgs};

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
    let tcfg = cfg.train_config()?;
    let splits = load_splits(&cfg)?;
    let data = splits.train.scaled(cfg.data_scale)?;
    let dir = RunDir::new(&args.out);
    ensure_dir(&dir.checkpoints())?;
    write_json(&dir.config(), &cfg)?;

    let model = build_model(&cfg, &data)?;
    let mut trainer = Trainer::new(model, tcfg)?;
    if let Some(path) = &args.resume {
        let tensors = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        trainer.restore(&tensors)?;
    }
    let log_file = OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(dir.train_log())
        .with_context(|| format!("opening {}", dir.train_log().display()))?;
    let mut log = BufWriter::new(log_file);

    let start = Instant::now();
    let mut last = None;
    let mut io_err = None;
    while (trainer.epoch as usize) < cfg.epochs {
        let more = trainer.run_epoch(&data, cfg.max_steps, |rep| {
            let row = TrainLogRow {
                step: rep.step,
                l2: rep.l2,
                kl: rep.kl,
                dispersive: rep.dispersive,
                total: rep.total,
                t_mean: rep.t_mean,
                r_mean: rep.r_mean,
                wallclock_ms: start.elapsed().as_millis() as u64,
            };
            if io_err.is_none() {
                if let Err(e) = serde_json::to_writer(&mut log, &row).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log)?)) {
                    io_err = Some(e);
                }
            }
            last = Some(row);
        })?;
        if let Some(e) = io_err.take() {
            return Err(e);
        }
        if !more {
            break;
        }
        if cfg.checkpoint_every > 0 && trainer.epoch % cfg.checkpoint_every as u64 == 0 {
            checkpoint::save(dir.epoch_checkpoint(trainer.epoch), &trainer.checkpoint())?;
        }
    }
    log.flush()?;
    checkpoint::save(dir.final_checkpoint(), &trainer.checkpoint())?;
    let summary = serde_json::json!({
        "run": dir.root,
        "variant": cfg.variant,
        "steps": trainer.step,
        "epochs": trainer.epoch,
        "last": last,
    });
    println!("{summary}");
    Ok(())
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let dir = RunDir::new(&args.run);
    let cfg = dir.load_config()?;
    let splits = load_splits(&cfg)?;
    let mut model = build_model(&cfg, &splits.train)?;
    load_weights(&mut model, args.checkpoint.as_deref().unwrap_or(&dir.final_checkpoint()))?;

    let scfg = SamplerConfig {
        nfe: args.nfe.unwrap_or(cfg.nfe),
        guidance_w: args.guidance_w.unwrap_or(cfg.guidance_w),
        conditional: !args.unconditional,
        seed: args.seed.unwrap_or(cfg.sample_seed),
    };
    if scfg.nfe == 0 {
        return Err(vmflow::Error::Config("nfe must be at least 1".into()).into());
    }
    let n = args.n.unwrap_or(cfg.n_samples);
    if n == 0 {
        bail!("nothing to sample: n = 0");
    }
    let pool = if splits.reference.is_empty() { &splits.train } else { &splits.reference };
    let (conds, ids): (Vec<Condition>, Vec<Option<usize>>) = (0..n)
        .map(|i| {
            if scfg.conditional {
                let k = i % pool.len();
                (Condition::Given(pool.examples()[k].c.clone()), Some(k))
            } else {
                (Condition::Null, None)
            }
        })
        .unzip();
    let shape = pool.shape();
    let x = generate(&model, &conds, shape.sample_len, shape.token_dim, &scfg)?;
    let codec = cfg.data.codec()?;
    let width = shape.sample_len * shape.token_dim;
    let rows = x
        .data()
        .chunks(width)
        .zip(ids)
        .enumerate()
        .map(|(id, (chunk, condition_id))| {
            let latent: Vec<f32> = chunk.iter().map(|v| v * cfg.data_scale).collect();
            let decoded = codec.as_ref().map(|c| c.decode(&latent)).transpose()?;
            Ok(SampleRow {
                id,
                condition_id,
                latent,
                decoded,
                nfe: scfg.nfe,
                w: scfg.guidance_w,
                seed: scfg.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.samples(), &rows)?;
    println!("{}", serde_json::json!({ "samples": dir.samples(), "n": rows.len(), "nfe": scfg.nfe, "w": scfg.guidance_w }));
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    conditional: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unconditional: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode_coverage: Option<ModeCoverage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tradeoff: Option<Vec<TradeoffPoint>>,
}

#[derive(Serialize)]
struct ModeCoverage {
    coverage: f64,
    radius: f32,
    min_count: usize,
    modes: usize,
}

/// Histogram features of one token sequence: latent norm and each position's token.
fn token_features(latent: &[f32], tokens: &[usize]) -> Vec<f64> {
    let norm = latent.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    std::iter::once(norm).chain(tokens.iter().map(|&t| t as f64)).collect()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let dir = RunDir::new(&args.run);
    let cfg = dir.load_config()?;
    let rows: Vec<SampleRow> = read_jsonl(&dir.samples())?;
    if rows.is_empty() {
        bail!("{} holds no samples", dir.samples().display());
    }
    let splits = load_splits(&cfg)?;
    let pool = if splits.reference.is_empty() { &splits.train } else { &splits.reference };
    let mut out = EvalOutput {
        n_samples: rows.len(),
        conditional: None,
        unconditional: None,
        mode_coverage: None,
        tradeoff: None,
    };

    if let DataSource::Ring(ring) = &cfg.data {
        let gmm = ring.to_gmm();
        let samples: Vec<Vec<f32>> = rows.iter().map(|r| r.latent.clone()).collect();
        let radius = 3.0 * ring.scale;
        out.mode_coverage = Some(ModeCoverage {
            coverage: metrics::mode_coverage(&samples, &gmm.mode_means(), radius, args.min_count)?,
            radius,
            min_count: args.min_count,
            modes: gmm.modes.len(),
        });
    }

    if let Some(codec) = cfg.data.codec()? {
        let (cond, uncond): (Vec<&SampleRow>, Vec<&SampleRow>) = rows.iter().partition(|r| r.condition_id.is_some());
        if !cond.is_empty() {
            let (gen, refs, ok) = conditional_inputs(&cond, pool, &codec)?;
            out.conditional = Some(metrics::conditional_metrics(
                &gen,
                &refs,
                &ok,
                metrics::COSINE,
                args.valid_thresh,
                args.novel_thresh,
            )?);
            if args.tradeoff {
                let thresholds: Vec<f32> = (1..=9).map(|k| k as f32 / 10.0).collect();
                let curve = metrics::tradeoff_curve(&gen, &refs, &ok, metrics::COSINE, &thresholds)?;
                let mut csv = String::from("threshold,similarity,novelty,diversity\n");
                for p in &curve {
                    csv.push_str(&format!("{},{},{},{}\n", p.threshold, p.similarity, p.novelty, p.diversity));
                }
                std::fs::write(dir.tradeoff(), csv)?;
                out.tradeoff = Some(curve);
            }
        }
        if !uncond.is_empty() {
            let decoded: Vec<Vec<usize>> = uncond.iter().map(|r| decoded_or_decode(r, &codec)).collect::<Result<_>>()?;
            let gen_feats: Vec<Vec<f64>> = uncond.iter().zip(&decoded).map(|(r, d)| token_features(&r.latent, d)).collect();
            let train_tokens: Vec<Vec<usize>> = splits
                .train
                .examples()
                .iter()
                .map(|e| e.meta.tokens.clone().map_or_else(|| codec.decode(&e.x), Ok))
                .collect::<vmflow::Result<_>>()?;
            let train_feats: Vec<Vec<f64>> = splits
                .train
                .examples()
                .iter()
                .zip(&train_tokens)
                .map(|(e, t)| token_features(&e.x, t))
                .collect();
            out.unconditional =
                Some(metrics::unconditional_metrics(&decoded, &train_tokens, &gen_feats, &train_feats, args.bins)?);
        }
    }
    write_json(&dir.metrics(), &out)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn decoded_or_decode(row: &SampleRow, codec: &Codec) -> Result<Vec<usize>> {
    match &row.decoded {
        Some(d) => Ok(d.clone()),
        None => Ok(codec.decode(&row.latent)?),
    }
}

type ConditionalInputs = (Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<bool>);

/// Token histograms of generated and reference sequences, paired by condition.
fn conditional_inputs(rows: &[&SampleRow], pool: &vmflow::Dataset, codec: &Codec) -> Result<ConditionalInputs> {
    let vocab = codec.vocab();
    let mut gen = Vec::with_capacity(rows.len());
    let mut refs = Vec::with_capacity(rows.len());
    let mut ok = Vec::with_capacity(rows.len());
    for r in rows {
        let k = r.condition_id.unwrap_or_default();
        let example = pool
            .examples()
            .get(k)
            .with_context(|| format!("sample {} refers to condition {k}, pool has {}", r.id, pool.len()))?;
        let ref_tokens = match &example.meta.tokens {
            Some(t) => t.clone(),
            None => codec.decode(&example.x)?,
        };
        match decoded_or_decode(r, codec) {
            Ok(tokens) if tokens.iter().all(|&t| t < vocab) => {
                gen.push(metrics::token_histogram(&tokens, vocab));
                ok.push(true);
            }
            _ => {
                gen.push(vec![0.0; vocab]);
                ok.push(false);
            }
        }
        refs.push(metrics::token_histogram(&ref_tokens, vocab));
    }
    Ok((gen, refs, ok))
}
