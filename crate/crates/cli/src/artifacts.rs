//! Run-directory layout and the JSON rows written into it.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use vmflow::{checkpoint, Dataset, FlowNet, RunConfig, VmfModel};

use crate::Overrides;

pub const SEED_ENV: &str = "VMFLOW_SEED";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epoch:05}.ckpt"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train.log.jsonl")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn tradeoff(&self) -> PathBuf {
        self.root.join("tradeoff.csv")
    }

    pub fn causality(&self) -> PathBuf {
        self.root.join("causality.json")
    }

    pub fn causality_csv(&self) -> PathBuf {
        self.root.join("causality.csv")
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        read_json(&self.config())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub l2: f32,
    pub kl: f32,
    pub dispersive: f32,
    pub total: f32,
    pub t_mean: f32,
    pub r_mean: f32,
    pub wallclock_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: usize,
    /// Index into the reference pool; absent for unconditional samples.
    pub condition_id: Option<usize>,
    /// Generated continuous representation in data units, flattened.
    pub latent: Vec<f32>,
    /// Token sequence for codec-backed datasets.
    pub decoded: Option<Vec<usize>>,
    pub nfe: usize,
    pub w: f32,
    pub seed: u64,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(rows)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// File values, then `VMFLOW_SEED`, then flags.
pub fn load_run_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| vmflow::Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
    }
    if let Some(v) = &ov.variant {
        cfg.variant = v.clone();
    }
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(e) = ov.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = ov.max_steps {
        cfg.max_steps = Some(m);
    }
    if let Some(lr) = ov.lr {
        cfg.lr = lr;
    }
    if let Some(a) = ov.alpha {
        cfg.alpha = Some(a);
    }
    if let Some(b) = ov.beta {
        cfg.beta = Some(b);
    }
    if let Some(p) = ov.p_equal {
        cfg.p_equal = Some(p);
    }
    if let Some(b) = ov.batch_size {
        cfg.batch_size = b;
    }
    if ov.adaptive_l2 {
        cfg.adaptive_l2 = true;
    }
    Ok(cfg.resolved()?)
}

/// Training rows and evaluation references, both in data units.
pub struct Splits {
    pub train: Dataset,
    pub reference: Dataset,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let full = cfg.data.load()?;
    if cfg.holdout >= full.len() {
        return Err(vmflow::Error::Config(format!(
            "holdout {} leaves no training rows out of {}",
            cfg.holdout,
            full.len()
        ))
        .into());
    }
    let (train, reference) = full.split_holdout(cfg.holdout, cfg.seed);
    Ok(Splits { train, reference })
}

pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<VmfModel> {
    Ok(VmfModel::new(&cfg.model, data.shape(), cfg.variant()?.variational(), cfg.seed)?)
}

/// Model parameters from a checkpoint, ignoring optimizer and counter entries.
pub fn load_weights(model: &mut VmfModel, path: &Path) -> Result<()> {
    let tensors = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let params = tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("adam/") && !n.starts_with("train/"))
        .map(|(n, t)| (n.as_str(), t));
    model.params_mut().load_from(params)?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
