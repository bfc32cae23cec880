//! Synthetic conditional datasets: Gaussian mixtures in latent space and a
//! token-sequence domain behind an invertible linear codec.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Condition, DataShape};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    pub label: usize,
}

/// One dataset row: a flattened latent `x` and its condition `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f32>,
    pub c: Vec<f32>,
    pub meta: Meta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: DataShape,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(shape: DataShape, examples: Vec<Example>) -> Result<Self> {
        let xw = shape.sample_len * shape.token_dim;
        let cw = shape.cond_len * shape.cond_dim;
        for (i, e) in examples.iter().enumerate() {
            if e.x.len() != xw || e.c.len() != cw {
                return Err(Error::invalid(format!(
                    "row {i}: x has {} values and c has {}, expected {xw} and {cw}",
                    e.x.len(),
                    e.c.len()
                )));
            }
        }
        Ok(Dataset { shape, examples })
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stack the given rows into `[n * sample_len, token_dim]` plus conditions.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<Condition>)> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.sample_len * self.shape.token_dim);
        let mut conds = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = self
                .examples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("row {i} out of range for {} rows", self.len())))?;
            data.extend_from_slice(&e.x);
            conds.push(Condition::Given(e.c.clone()));
        }
        let x = Tensor::matrix(indices.len() * self.shape.sample_len, self.shape.token_dim, data)?;
        Ok((x, conds))
    }

    /// Copy with every `x` divided by `scale`.
    pub fn scaled(&self, scale: f32) -> Result<Dataset> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("data scale must be positive, got {scale}")));
        }
        let examples = self
            .examples
            .iter()
            .map(|e| Example {
                x: e.x.iter().map(|v| v / scale).collect(),
                ..e.clone()
            })
            .collect();
        Ok(Dataset {
            shape: self.shape,
            examples,
        })
    }

    /// Split off the last `holdout` rows, after a seeded shuffle.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut stream(seed, 0, Stream::Shuffle));
        let cut = self.len().saturating_sub(holdout);
        let pick = |ids: &[usize]| Dataset {
            shape: self.shape,
            examples: ids.iter().map(|&i| self.examples[i].clone()).collect(),
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.examples {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Read JSONL rows. Rows carrying `meta.tokens` fix the sample length;
    /// otherwise each row is one token. Conditions are one token.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut examples = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str::<Example>(&line)?);
        }
        let first = examples.first().ok_or_else(|| Error::invalid("dataset has no rows"))?;
        let sample_len = first.meta.tokens.as_ref().map_or(1, Vec::len).max(1);
        if first.x.len() % sample_len != 0 {
            return Err(Error::invalid(format!(
                "x width {} not divisible by {sample_len} tokens",
                first.x.len()
            )));
        }
        let shape = DataShape {
            sample_len,
            token_dim: first.x.len() / sample_len,
            cond_len: 1,
            cond_dim: first.c.len(),
        };
        Dataset::new(shape, examples)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::read_jsonl(BufReader::new(File::open(path)?))
    }
}

/// Fixed seeded projection of one-hot labels into condition vectors.
pub fn label_projection(labels: usize, cond_dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = stream(seed, 1, Stream::Data);
    (0..labels)
        .map(|_| (0..cond_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmMode {
    pub mean: Vec<f32>,
    pub scale: f32,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub modes: Vec<GmmMode>,
    pub samples_per_mode: usize,
    pub cond_dim: usize,
    pub seed: u64,
}

impl GmmSpec {
    /// `n` isotropic modes evenly spaced on a circle in the plane.
    pub fn ring(n: usize, radius: f32, scale: f32, samples_per_mode: usize, shared_label: bool, cond_dim: usize, seed: u64) -> Self {
        let modes = (0..n)
            .map(|k| {
                let a = 2.0 * std::f32::consts::PI * k as f32 / n as f32;
                GmmMode {
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    scale,
                    label: if shared_label { 0 } else { k },
                }
            })
            .collect();
        GmmSpec {
            modes,
            samples_per_mode,
            cond_dim,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.modes.first().map_or(0, |m| m.mean.len())
    }

    pub fn mode_means(&self) -> Vec<Vec<f32>> {
        self.modes.iter().map(|m| m.mean.clone()).collect()
    }
}

pub fn make_gmm_dataset(spec: &GmmSpec) -> Result<Dataset> {
    let dim = spec.dim();
    if spec.modes.is_empty() || dim == 0 {
        return Err(Error::invalid("mixture needs at least one mode of dimension >= 1"));
    }
    if spec.cond_dim == 0 {
        return Err(Error::invalid("cond_dim must be positive"));
    }
    for (i, m) in spec.modes.iter().enumerate() {
        if m.mean.len() != dim {
            return Err(Error::invalid(format!("mode {i} has dimension {}, expected {dim}", m.mean.len())));
        }
        if !(m.scale > 0.0) {
            return Err(Error::invalid(format!("mode {i} has non-positive scale {}", m.scale)));
        }
        if spec.modes[..i].iter().any(|o| o.mean == m.mean) {
            return Err(Error::invalid(format!("mode {i} repeats an earlier mean")));
        }
    }
    let labels = spec.modes.iter().map(|m| m.label).max().unwrap_or(0) + 1;
    let proj = label_projection(labels, spec.cond_dim, spec.seed);
    let mut rng = stream(spec.seed, 0, Stream::Data);
    let mut examples = Vec::with_capacity(spec.modes.len() * spec.samples_per_mode);
    for (k, m) in spec.modes.iter().enumerate() {
        for _ in 0..spec.samples_per_mode {
            let x = m
                .mean
                .iter()
                .map(|&mu| mu + m.scale * rng.sample::<f32, _>(StandardNormal))
                .collect();
            examples.push(Example {
                x,
                c: proj[m.label].clone(),
                meta: Meta {
                    mode: Some(k),
                    tokens: None,
                    label: m.label,
                },
            });
        }
    }
    let shape = DataShape {
        sample_len: 1,
        token_dim: dim,
        cond_len: 1,
        cond_dim: spec.cond_dim,
    };
    Dataset::new(shape, examples)
}

/// Orthogonal codewords, one per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    codewords: Vec<Vec<f32>>,
}

impl Codec {
    /// Gram-Schmidt on seeded Gaussian vectors, scaled to norm `scale`.
    pub fn new(vocab: usize, dim: usize, scale: f32, seed: u64) -> Result<Self> {
        if vocab == 0 || dim < vocab {
            return Err(Error::Config(format!(
                "codec needs 0 < vocab <= embed_dim, got vocab {vocab}, embed_dim {dim}"
            )));
        }
        let mut rng = stream(seed, 2, Stream::Data);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vocab);
        while basis.len() < vocab {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let codewords = basis
            .into_iter()
            .map(|b| b.into_iter().map(|a| (a * scale as f64) as f32).collect())
            .collect();
        Ok(Codec { codewords })
    }

    pub fn vocab(&self) -> usize {
        self.codewords.len()
    }

    pub fn dim(&self) -> usize {
        self.codewords[0].len()
    }

    pub fn codeword(&self, token: usize) -> &[f32] {
        &self.codewords[token]
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(tokens.len() * self.dim());
        for &t in tokens {
            let w = self
                .codewords
                .get(t)
                .ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary of {}", self.vocab())))?;
            out.extend_from_slice(w);
        }
        Ok(out)
    }

    /// Nearest codeword per position; ties go to the lower token id.
    pub fn decode(&self, x: &[f32]) -> Result<Vec<usize>> {
        let d = self.dim();
        if x.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: vec![x.len()],
                rhs: vec![d],
            });
        }
        Ok(x.chunks(d)
            .map(|pos| {
                let mut best = (f32::INFINITY, 0);
                for (t, w) in self.codewords.iter().enumerate() {
                    let dist: f32 = pos.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.0 {
                        best = (dist, t);
                    }
                }
                best.1
            })
            .collect())
    }

    /// Smallest distance between two distinct codewords.
    pub fn min_gap(&self) -> f32 {
        let mut gap = f32::INFINITY;
        for i in 0..self.vocab() {
            for j in i + 1..self.vocab() {
                let d: f32 = self.codewords[i]
                    .iter()
                    .zip(&self.codewords[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                gap = gap.min(d.sqrt());
            }
        }
        gap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySequenceSpec {
    pub vocab: usize,
    /// Contiguous token groups; the label is the dominant group.
    pub groups: usize,
    pub sample_len: usize,
    pub embed_dim: usize,
    pub codec_scale: f32,
    /// Chance that a position is drawn from the label's group.
    pub in_group_prob: f64,
    pub cond_dim: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ToySequenceSpec {
    fn default() -> Self {
        ToySequenceSpec {
            vocab: 8,
            groups: 4,
            sample_len: 6,
            embed_dim: 8,
            codec_scale: 1.0,
            in_group_prob: 0.8,
            cond_dim: 8,
            n_samples: 2000,
            seed: 0,
        }
    }
}

impl ToySequenceSpec {
    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.vocab, self.embed_dim, self.codec_scale, self.seed)
    }

    pub fn group_of(&self, token: usize) -> usize {
        token * self.groups / self.vocab
    }

    /// Dominant group of a sequence, lowest index on ties.
    pub fn label_of(&self, tokens: &[usize]) -> usize {
        let mut counts = vec![0usize; self.groups];
        for &t in tokens {
            counts[self.group_of(t)] += 1;
        }
        let max = counts.iter().copied().max().unwrap_or(0);
        counts.iter().position(|&c| c == max).unwrap_or(0)
    }
}

pub fn make_sequence_dataset(spec: &ToySequenceSpec) -> Result<(Dataset, Codec)> {
    if spec.groups == 0 || spec.groups > spec.vocab || spec.sample_len == 0 || spec.cond_dim == 0 {
        return Err(Error::Config("sequence spec needs 0 < groups <= vocab and positive lengths".into()));
    }
    if !(0.0..=1.0).contains(&spec.in_group_prob) {
        return Err(Error::Config(format!("in_group_prob {} outside [0, 1]", spec.in_group_prob)));
    }
    let codec = spec.codec()?;
    let proj = label_projection(spec.groups, spec.cond_dim, spec.seed);
    let members: Vec<Vec<usize>> = (0..spec.groups)
        .map(|g| (0..spec.vocab).filter(|&t| spec.group_of(t) == g).collect())
        .collect();
    let mut rng = stream(spec.seed, 0, Stream::Data);
    let mut examples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let g = rng.random_range(0..spec.groups);
        let tokens: Vec<usize> = (0..spec.sample_len)
            .map(|_| {
                if rng.random_bool(spec.in_group_prob) {
                    members[g][rng.random_range(0..members[g].len())]
                } else {
                    rng.random_range(0..spec.vocab)
                }
            })
            .collect();
        let label = spec.label_of(&tokens);
        examples.push(Example {
            x: codec.encode(&tokens)?,
            c: proj[label].clone(),
            meta: Meta {
                mode: None,
                tokens: Some(tokens),
                label,
            },
        });
    }
    let shape = DataShape {
        sample_len: spec.sample_len,
        token_dim: spec.embed_dim,
        cond_len: 1,
        cond_dim: spec.cond_dim,
    };
    Ok((Dataset::new(shape, examples)?, codec))
}

/// Ring mixture parameters as they appear in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingSpec {
    pub modes: usize,
    pub radius: f32,
    pub scale: f32,
    pub samples_per_mode: usize,
    pub shared_label: bool,
    pub cond_dim: usize,
    pub seed: u64,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec {
            modes: 8,
            radius: 5.0,
            scale: 0.1,
            samples_per_mode: 500,
            shared_label: true,
            cond_dim: 4,
            seed: 0,
        }
    }
}

impl RingSpec {
    pub fn to_gmm(&self) -> GmmSpec {
        GmmSpec::ring(
            self.modes,
            self.radius,
            self.scale,
            self.samples_per_mode,
            self.shared_label,
            self.cond_dim,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Ring(RingSpec),
    Sequences(ToySequenceSpec),
    File { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Ring(RingSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Ring(r) => make_gmm_dataset(&r.to_gmm()),
            DataSource::Sequences(s) => Ok(make_sequence_dataset(s)?.0),
            DataSource::File { path } => Dataset::load(path),
        }
    }

    /// The decoder for token datasets generated from a spec.
    pub fn codec(&self) -> Result<Option<Codec>> {
        match self {
            DataSource::Sequences(s) => s.codec().map(Some),
            _ => Ok(None),
        }
    }
}
