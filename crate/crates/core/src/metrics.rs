//! Generation metrics for the synthetic domains.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTOGRAM_SMOOTHING: f64 = 1e-6;

/// A named symmetric similarity with values in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct SimFn {
    pub name: &'static str,
    pub f: fn(&[f32], &[f32]) -> f32,
}

/// Cosine similarity clamped to `[0, 1]`. Two zero vectors count as identical.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(0.0, 1.0) as f32
}

pub const COSINE: SimFn = SimFn {
    name: "cosine",
    f: cosine_similarity,
};

/// Token counts over a vocabulary.
pub fn token_histogram(tokens: &[usize], vocab: usize) -> Vec<f32> {
    let mut h = vec![0.0; vocab];
    for &t in tokens {
        if t < vocab {
            h[t] += 1.0;
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub valid: f32,
    pub novel: f32,
}

/// Percentages in `[0, 100]`; `overall` is the mean of those present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub novelty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub uniqueness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl_score: Option<f64>,
    pub overall: f64,
    pub n_samples: usize,
    pub sim_fn: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub thresholds: Option<Thresholds>,
}

impl MetricReport {
    fn finish(mut self) -> Self {
        let present: Vec<f64> = [
            self.similarity,
            self.novelty,
            self.diversity,
            self.validity,
            self.uniqueness,
            self.kl_score,
        ]
        .into_iter()
        .flatten()
        .collect();
        self.overall = present.iter().sum::<f64>() / present.len().max(1) as f64;
        self
    }
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// Mean `1 − f` over unordered pairs; 0 with fewer than two items.
pub fn mean_pairwise_distance(items: &[&[f32]], sim: SimFn) -> f64 {
    let n = items.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            acc += 1.0 - (sim.f)(items[i], items[j]) as f64;
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

/// Conditional metrics of `generated[i]` against `references[i]`.
///
/// A sample counts toward diversity when it decodes and its similarity to
/// its reference reaches `valid_thresh`.
pub fn conditional_metrics(
    generated: &[Vec<f32>],
    references: &[Vec<f32>],
    decodable: &[bool],
    sim: SimFn,
    valid_thresh: f32,
    novel_thresh: f32,
) -> Result<MetricReport> {
    let n = generated.len();
    if n == 0 {
        return Err(Error::invalid("no generated samples"));
    }
    if references.len() != n || decodable.len() != n {
        return Err(Error::invalid(format!(
            "{n} samples but {} references and {} validity flags",
            references.len(),
            decodable.len()
        )));
    }
    let scores: Vec<f32> = generated.iter().zip(references).map(|(g, r)| (sim.f)(g, r)).collect();
    let similar = scores.iter().zip(decodable).filter(|(&f, &ok)| ok && f >= valid_thresh).count();
    let novel = scores.iter().filter(|&&f| f < novel_thresh).count();
    let valid_items: Vec<&[f32]> = generated
        .iter()
        .zip(&scores)
        .zip(decodable)
        .filter(|((_, &f), &ok)| ok && f >= valid_thresh)
        .map(|((g, _), _)| g.as_slice())
        .collect();
    Ok(MetricReport {
        similarity: Some(percent(similar, n)),
        novelty: Some(percent(novel, n)),
        diversity: Some(100.0 * mean_pairwise_distance(&valid_items, sim)),
        validity: Some(percent(decodable.iter().filter(|&&v| v).count(), n)),
        uniqueness: None,
        kl_score: None,
        overall: 0.0,
        n_samples: n,
        sim_fn: sim.name.to_string(),
        thresholds: Some(Thresholds {
            valid: valid_thresh,
            novel: novel_thresh,
        }),
    }
    .finish())
}

/// One point of a threshold sweep where the same threshold gates
/// similarity, diversity validity and novelty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f32,
    pub similarity: f64,
    pub novelty: f64,
    pub diversity: f64,
}

pub fn tradeoff_curve(
    generated: &[Vec<f32>],
    references: &[Vec<f32>],
    decodable: &[bool],
    sim: SimFn,
    thresholds: &[f32],
) -> Result<Vec<TradeoffPoint>> {
    thresholds
        .iter()
        .map(|&th| {
            let r = conditional_metrics(generated, references, decodable, sim, th, th)?;
            Ok(TradeoffPoint {
                threshold: th,
                similarity: r.similarity.unwrap_or(0.0),
                novelty: r.novelty.unwrap_or(0.0),
                diversity: r.diversity.unwrap_or(0.0),
            })
        })
        .collect()
}

/// Equal-width histogram of `values` over `[lo, hi]`.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        h[i.clamp(0, bins as isize - 1) as usize] += 1.0;
    }
    h
}

/// `KL(p ‖ q)` in nats after adding [`HISTOGRAM_SMOOTHING`] to every bin
/// and normalising.
pub fn smoothed_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("histograms must be non-empty and equally binned"));
    }
    let norm = |h: &[f64]| {
        let s: f64 = h.iter().map(|v| v + HISTOGRAM_SMOOTHING).sum();
        h.iter().map(|v| (v + HISTOGRAM_SMOOTHING) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// `exp(−KL(gen ‖ train)) · 100` for each feature column, averaged.
pub fn kl_score(gen_features: &[Vec<f64>], train_features: &[Vec<f64>], bins: usize) -> Result<f64> {
    let width = gen_features.first().map_or(0, Vec::len);
    if gen_features.is_empty() || train_features.is_empty() || width == 0 || bins == 0 {
        return Err(Error::invalid("kl_score needs non-empty feature sets and bins"));
    }
    if gen_features.iter().chain(train_features).any(|f| f.len() != width) {
        return Err(Error::invalid("feature rows differ in width"));
    }
    let mut total = 0.0;
    for k in 0..width {
        let g: Vec<f64> = gen_features.iter().map(|f| f[k]).collect();
        let t: Vec<f64> = train_features.iter().map(|f| f[k]).collect();
        let lo = g.iter().chain(&t).copied().fold(f64::INFINITY, f64::min);
        let hi = g.iter().chain(&t).copied().fold(f64::NEG_INFINITY, f64::max);
        let kl = smoothed_kl(&histogram(&g, lo, hi, bins), &histogram(&t, lo, hi, bins))?;
        total += (-kl).exp();
    }
    Ok(100.0 * total / width as f64)
}

/// Uniqueness, novelty against the training set, and the histogram KL score.
pub fn unconditional_metrics<T: Eq + Hash>(
    generated: &[T],
    training: &[T],
    gen_features: &[Vec<f64>],
    train_features: &[Vec<f64>],
    bins: usize,
) -> Result<MetricReport> {
    let n = generated.len();
    if n == 0 || training.is_empty() {
        return Err(Error::invalid("unconditional metrics need generated and training samples"));
    }
    let distinct: HashSet<&T> = generated.iter().collect();
    let seen: HashSet<&T> = training.iter().collect();
    let novel = generated.iter().filter(|g| !seen.contains(g)).count();
    Ok(MetricReport {
        similarity: None,
        novelty: Some(percent(novel, n)),
        diversity: None,
        validity: None,
        uniqueness: Some(percent(distinct.len(), n)),
        kl_score: Some(kl_score(gen_features, train_features, bins)?),
        overall: 0.0,
        n_samples: n,
        sim_fn: "exact-match".into(),
        thresholds: None,
    }
    .finish())
}

/// Fraction of modes with at least `min_count` samples within `radius`.
pub fn mode_coverage(samples: &[Vec<f32>], means: &[Vec<f32>], radius: f32, min_count: usize) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::invalid("no modes"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let covered = means
        .iter()
        .filter(|m| {
            samples
                .iter()
                .filter(|s| s.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() <= r2)
                .count()
                >= min_count
        })
        .count();
    Ok(covered as f64 / means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets() {
        let g = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let r = conditional_metrics(&g, &g, &[true, true], COSINE, 0.5, 0.8).unwrap();
        assert_eq!((r.similarity, r.novelty, r.diversity), (Some(100.0), Some(0.0), Some(0.0)));
        assert_eq!(r.overall, (100.0 + 0.0 + 0.0 + 100.0) / 4.0);
    }

    #[test]
    fn orthogonal_sets() {
        let g = vec![vec![1.0, 0.0]];
        let refs = vec![vec![0.0, 1.0]];
        let r = conditional_metrics(&g, &refs, &[true], COSINE, 0.5, 0.8).unwrap();
        assert_eq!((r.similarity, r.novelty), (Some(0.0), Some(100.0)));
        assert!(conditional_metrics(&[], &[], &[], COSINE, 0.5, 0.8).is_err());
    }

    #[test]
    fn histogram_kl_example() {
        let kl = smoothed_kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((kl - 0.143841).abs() < 1e-4);
        assert!((100.0 * (-kl).exp() - 86.6).abs() < 0.05);
    }

    #[test]
    fn uniqueness_of_repeats() {
        let gen = vec![3u8; 4];
        let feats = vec![vec![1.0]; 4];
        let r = unconditional_metrics(&gen, &[1u8, 2], &feats, &[vec![0.0], vec![2.0]], 4).unwrap();
        assert_eq!(r.uniqueness, Some(25.0));
        assert_eq!(r.novelty, Some(100.0));
    }

    #[test]
    fn coverage_counts() {
        let means = vec![vec![0.0, 0.0], vec![5.0, 0.0]];
        let at_first = vec![vec![0.0, 0.0]; 20];
        assert_eq!(mode_coverage(&at_first, &means, 0.3, 10).unwrap(), 0.5);
        assert!(mode_coverage(&at_first, &[], 0.3, 10).is_err());
        assert!(mode_coverage(&at_first, &means, 0.0, 10).is_err());
    }
}
