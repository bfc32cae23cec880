use std::fs;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vmflow::mask::{build_mask, split_with_decay, GroupSplit, MaskLayout};
use vmflow::rng::{stream, Stream};
use vmflow::{granger_test, latent_causality_report, Dataset, RunConfig};

use crate::artifacts::{read_json, read_jsonl, write_json, RunDir, SampleRow};
use crate::{GenDataArgs, GrangerArgs, MaskArgs};

#[derive(Serialize)]
struct MaskSidecar {
    layout: MaskLayout,
    /// Row-major, 1 where attention is allowed.
    allowed: Vec<Vec<u8>>,
}

pub fn mask(args: &MaskArgs) -> Result<()> {
    let split = match &args.split {
        Some(sizes) => GroupSplit::from_sizes(sizes.clone())?,
        None => split_with_decay(args.sample_len, args.decay, &mut stream(args.seed, 0, Stream::Split))?,
    };
    if split.sample_len() != args.sample_len {
        return Err(vmflow::Error::Config(format!(
            "split {:?} covers {} tokens, sample_len is {}",
            split.sizes(),
            split.sample_len(),
            args.sample_len
        ))
        .into());
    }
    let m = build_mask(args.sample_len, args.cond_len, args.latent_len, &split)?;
    let ascii = m.to_ascii();
    match &args.out {
        None => print!("{ascii}"),
        Some(prefix) => {
            let with_ext = |ext: &str| {
                let mut p = prefix.clone().into_os_string();
                p.push(ext);
                std::path::PathBuf::from(p)
            };
            fs::write(with_ext(".txt"), &ascii)?;
            fs::write(with_ext(".pgm"), m.to_pgm())?;
            let n = m.seq_len();
            let sidecar = MaskSidecar {
                layout: m.layout(),
                allowed: m.matrix().chunks(n).map(|row| row.iter().map(|&b| 1 - b).collect()).collect(),
            };
            write_json(&with_ext(".json"), &sidecar)?;
            println!("{}", serde_json::to_string(&sidecar.layout)?);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct SeriesPair {
    x: Vec<f64>,
    y: Vec<f64>,
}

pub fn granger(args: &GrangerArgs) -> Result<()> {
    if let Some(path) = &args.series {
        let pair: SeriesPair = read_json(path)?;
        let res = granger_test(&pair.x, &pair.y, args.max_lag)?;
        println!("{}", serde_json::to_string(&res)?);
        return Ok(());
    }
    let Some(run) = &args.run else {
        bail!("pass --series or --run");
    };
    let dir = RunDir::new(run);
    let cfg: RunConfig = dir.load_config()?;
    let rows: Vec<SampleRow> = read_jsonl(&dir.samples())?;
    let shape = cfg.data.load()?.shape();
    // each token of a sample is one group; its values across the token width form the series
    let latents: Vec<Vec<Vec<f64>>> = rows
        .iter()
        .map(|r| {
            r.latent
                .chunks(shape.token_dim)
                .map(|tok| tok.iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect();
    let report = latent_causality_report(&latents, args.max_lag)?;
    write_json(&dir.causality(), &report)?;
    let mut csv = String::from("p_low,p_high,count\n");
    for (edge, count) in report.bin_edges.windows(2).zip(&report.counts) {
        csv.push_str(&format!("{},{},{count}\n", edge[0], edge[1]));
    }
    fs::write(dir.causality_csv(), csv)?;
    println!(
        "{}",
        serde_json::json!({ "bin_edges": report.bin_edges, "counts": report.counts, "skipped_pairs": report.skipped_pairs })
    );
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        match &mut cfg.data {
            vmflow::DataSource::Ring(r) => r.seed = seed,
            vmflow::DataSource::Sequences(s) => s.seed = seed,
            vmflow::DataSource::File { .. } => {}
        }
    }
    let ds: Dataset = cfg.data.load()?;
    ds.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{}", serde_json::json!({ "out": args.out, "rows": ds.len(), "shape": ds.shape() }));
    Ok(())
}
