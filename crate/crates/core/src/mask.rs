//! Grouped causal attention masks.
//!
//! A sample of `sample_len` tokens is cut into contiguous groups whose count
//! follows a truncated geometric law. The mask covers the concatenated
//! sequence `[c | h | x_p | z]`, where `x_p` holds every group but the last
//! in clean form and `z` holds all groups noised:
//!
//! * every row may attend the condition and latent columns;
//! * clean rows of group `i` attend clean groups `0..i` only;
//! * noisy rows of group `i` attend clean groups `0..i` and their own noisy
//!   group.
//!
//! Convention: `1` = blocked, `0` = attend.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous group sizes over a sample and their running boundaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    sizes: Vec<usize>,
    cumsum: Vec<usize>,
}

impl GroupSplit {
    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::invalid(format!("group sizes must be positive and non-empty, got {sizes:?}")));
        }
        let mut cumsum = Vec::with_capacity(sizes.len() + 1);
        cumsum.push(0);
        for s in &sizes {
            cumsum.push(cumsum.last().unwrap() + s);
        }
        Ok(GroupSplit { sizes, cumsum })
    }

    /// Split at sorted, distinct interior cut points in `1..sample_len`.
    pub fn from_cuts(sample_len: usize, cuts: &[usize]) -> Result<Self> {
        let mut bounds = Vec::with_capacity(cuts.len() + 2);
        bounds.push(0);
        bounds.extend_from_slice(cuts);
        bounds.push(sample_len);
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "cut points {cuts:?} are not strictly inside 1..{sample_len}"
            )));
        }
        Self::from_sizes(bounds.windows(2).map(|w| w[1] - w[0]).collect())
    }

    /// One group spanning the whole sample.
    pub fn single(sample_len: usize) -> Result<Self> {
        Self::from_sizes(vec![sample_len])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn cumsum(&self) -> &[usize] {
        &self.cumsum
    }

    pub fn sample_len(&self) -> usize {
        *self.cumsum.last().unwrap()
    }

    pub fn groups(&self) -> usize {
        self.sizes.len()
    }

    /// Group index of sample position `pos`.
    pub fn group_of(&self, pos: usize) -> usize {
        self.cumsum[1..].iter().position(|&end| pos < end).unwrap_or(self.sizes.len() - 1)
    }
}

/// Probabilities of drawing `1..=sample_len` groups for a decay factor below 1.
pub fn group_count_probabilities(sample_len: usize, decay: f64) -> Vec<f64> {
    if decay >= 1.0 {
        return vec![1.0 / sample_len as f64; sample_len];
    }
    let base = (1.0 - decay) / (1.0 - decay.powi(sample_len as i32));
    (0..sample_len).map(|i| base * decay.powi(i as i32)).collect()
}

/// Randomly split `sample_len` positions into contiguous groups.
///
/// The number of groups is uniform on `1..=sample_len` when `decay == 1`, and
/// otherwise drawn with probability proportional to `decay^(n-1)`. Cut points
/// are distinct positions sampled without replacement.
pub fn split_with_decay<R: Rng + ?Sized>(sample_len: usize, decay: f64, rng: &mut R) -> Result<GroupSplit> {
    if sample_len == 0 {
        return Err(Error::invalid("sample_len must be at least 1"));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid(format!("decay factor must lie in (0, 1], got {decay}")));
    }
    let groups = if decay == 1.0 {
        rng.random_range(1..=sample_len)
    } else {
        let p = group_count_probabilities(sample_len, decay);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = sample_len;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                pick = i + 1;
                break;
            }
        }
        pick
    };
    let mut cuts: Vec<usize> = if groups > 1 {
        rand::seq::index::sample(rng, sample_len - 1, groups - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect()
    } else {
        Vec::new()
    };
    cuts.sort_unstable();
    GroupSplit::from_cuts(sample_len, &cuts)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    matrix: Vec<u8>,
    seq_len: usize,
    cond_len: usize,
    latent_len: usize,
    visible_len: usize,
    sample_len: usize,
    split: GroupSplit,
}

/// Segment lengths and split of a mask, as written next to mask dumps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskLayout {
    pub seq_len: usize,
    pub cond_len: usize,
    pub latent_len: usize,
    pub visible_len: usize,
    pub sample_len: usize,
    pub split_sizes: Vec<usize>,
    pub cumsum: Vec<usize>,
}

pub fn build_mask(sample_len: usize, cond_len: usize, latent_len: usize, split: &GroupSplit) -> Result<AttentionMask> {
    if split.sample_len() != sample_len {
        return Err(Error::invalid(format!(
            "split covers {} positions but sample_len is {sample_len}",
            split.sample_len()
        )));
    }
    let open_prefix = cond_len + latent_len;
    let visible_len = sample_len - split.sizes().last().unwrap();
    let ctx_len = open_prefix + visible_len;
    let seq_len = ctx_len + sample_len;
    let mut m = vec![1u8; seq_len * seq_len];
    let mut open = |r0: usize, r1: usize, c0: usize, c1: usize| {
        for r in r0..r1 {
            m[r * seq_len + c0..r * seq_len + c1].fill(0);
        }
    };
    open(0, seq_len, 0, open_prefix);
    let cs = split.cumsum();
    let n = split.groups();
    for i in 0..n.saturating_sub(1) {
        // Clean group i sees clean groups strictly before it.
        open(open_prefix + cs[i], open_prefix + cs[i + 1], open_prefix, open_prefix + cs[i]);
        // Noisy group i+1 sees clean groups 0..=i.
        open(ctx_len + cs[i + 1], ctx_len + cs[i + 2], open_prefix, open_prefix + cs[i + 1]);
    }
    for i in 0..n {
        open(ctx_len + cs[i], ctx_len + cs[i + 1], ctx_len + cs[i], ctx_len + cs[i + 1]);
    }
    Ok(AttentionMask {
        matrix: m,
        seq_len,
        cond_len,
        latent_len,
        visible_len,
        sample_len,
        split: split.clone(),
    })
}

impl AttentionMask {
    /// Single-group mask used at inference time (no clean tokens).
    pub fn inference(sample_len: usize, cond_len: usize, latent_len: usize) -> Result<Self> {
        build_mask(sample_len, cond_len, latent_len, &GroupSplit::single(sample_len)?)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn cond_len(&self) -> usize {
        self.cond_len
    }
    pub fn latent_len(&self) -> usize {
        self.latent_len
    }
    pub fn visible_len(&self) -> usize {
        self.visible_len
    }
    pub fn sample_len(&self) -> usize {
        self.sample_len
    }
    pub fn split(&self) -> &GroupSplit {
        &self.split
    }

    /// Row-major `seq_len × seq_len` entries.
    pub fn matrix(&self) -> &[u8] {
        &self.matrix
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.matrix[row * self.seq_len + col] == 1
    }

    pub fn blocked_flags(&self) -> Arc<[bool]> {
        self.matrix.iter().map(|&v| v == 1).collect()
    }

    /// Offsets of the `[c, h, x_p, z]` segments.
    pub fn offsets(&self) -> [usize; 4] {
        let h = self.cond_len;
        let xp = h + self.latent_len;
        let z = xp + self.visible_len;
        [0, h, xp, z]
    }

    pub fn layout(&self) -> MaskLayout {
        MaskLayout {
            seq_len: self.seq_len,
            cond_len: self.cond_len,
            latent_len: self.latent_len,
            visible_len: self.visible_len,
            sample_len: self.sample_len,
            split_sizes: self.split.sizes().to_vec(),
            cumsum: self.split.cumsum().to_vec(),
        }
    }

    /// One text line per row: `#` blocked, `.` open.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.seq_len * (self.seq_len + 1));
        for r in 0..self.seq_len {
            for c in 0..self.seq_len {
                s.push(if self.is_blocked(r, c) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Plain-text PGM (P2), blocked cells black.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n1\n", self.seq_len, self.seq_len);
        for r in 0..self.seq_len {
            let row: Vec<&str> = (0..self.seq_len)
                .map(|c| if self.is_blocked(r, c) { "0" } else { "1" })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn length_one_has_one_group() {
        let mut rng = seeded(3);
        for decay in [0.1, 0.5, 1.0] {
            let s = split_with_decay(1, decay, &mut rng).unwrap();
            assert_eq!(s.sizes(), &[1]);
            assert_eq!(s.cumsum(), &[0, 1]);
        }
    }

    #[test]
    fn three_positions_half_decay() {
        // base = 0.5 / (1 - 0.125) = 4/7
        let p = group_count_probabilities(3, 0.5);
        for (got, want) in p.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_cut_gives_two_pairs() {
        let s = GroupSplit::from_cuts(4, &[2]).unwrap();
        assert_eq!(s.sizes(), &[2, 2]);
        assert_eq!(s.cumsum(), &[0, 2, 4]);
    }

    #[test]
    fn bad_arguments() {
        let mut rng = seeded(0);
        assert!(split_with_decay(0, 0.5, &mut rng).is_err());
        assert!(split_with_decay(4, 0.0, &mut rng).is_err());
        assert!(split_with_decay(4, 1.5, &mut rng).is_err());
        assert!(GroupSplit::from_cuts(4, &[2, 2]).is_err());
        let s = GroupSplit::from_sizes(vec![2, 2]).unwrap();
        assert!(build_mask(5, 1, 1, &s).is_err());
    }

    #[test]
    fn four_group_layout() {
        let s = GroupSplit::from_sizes(vec![9, 1]).unwrap();
        let m = build_mask(10, 4, 4, &s).unwrap();
        assert_eq!(m.seq_len(), 27);
        assert_eq!(m.visible_len(), 9);
        for r in 0..27 {
            for c in 0..8 {
                assert!(!m.is_blocked(r, c));
            }
        }
    }

    #[test]
    fn single_group_only_sees_prefix_and_itself() {
        let m = AttentionMask::inference(5, 2, 1).unwrap();
        assert_eq!(m.visible_len(), 0);
        assert_eq!(m.seq_len(), 8);
        for r in 3..8 {
            for c in 0..8 {
                assert!(!m.is_blocked(r, c));
            }
        }
        // condition / latent rows never see the sample
        for r in 0..3 {
            for c in 3..8 {
                assert!(m.is_blocked(r, c));
            }
        }
    }

    #[test]
    fn two_by_two_trace() {
        // sizes [2,2]: prefix = 2, visible = 2 (rows 2..4), z rows 4..8.
        let s = GroupSplit::from_sizes(vec![2, 2]).unwrap();
        let m = build_mask(4, 1, 1, &s).unwrap();
        let (xp, z) = (2, 4);
        for r in xp..xp + 2 {
            for c in xp..xp + 2 {
                assert!(m.is_blocked(r, c), "clean group 0 must not see clean tokens");
            }
        }
        // second noisy group sees clean columns 0..1 and its own block
        for r in z + 2..z + 4 {
            assert!(!m.is_blocked(r, xp) && !m.is_blocked(r, xp + 1));
            assert!(m.is_blocked(r, z) && m.is_blocked(r, z + 1));
            assert!(!m.is_blocked(r, z + 2) && !m.is_blocked(r, z + 3));
        }
        // first noisy group sees no clean tokens
        for r in z..z + 2 {
            assert!(m.is_blocked(r, xp) && m.is_blocked(r, xp + 1));
        }
    }
}
