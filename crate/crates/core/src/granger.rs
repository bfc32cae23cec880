//! Granger causality F-tests between scalar series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to each Gram diagonal, relative to the mean diagonal entry.
pub const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrangerResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub lags: usize,
    /// Regression rows after dropping the first `lags` points.
    pub n_observations: usize,
    pub rss_restricted: f64,
    pub rss_unrestricted: f64,
    pub df: (usize, usize),
}

/// Does `x` help predict `y` beyond `y`'s own `max_lag` lags?
///
/// Both regressions carry an intercept. The p-value comes from the F
/// distribution with `(max_lag, n_obs − 2·max_lag − 1)` degrees of freedom.
pub fn granger_test(x: &[f64], y: &[f64], max_lag: usize) -> Result<GrangerResult> {
    let n = y.len();
    if max_lag == 0 {
        return Err(Error::invalid("max_lag must be at least 1"));
    }
    if x.len() != n {
        return Err(Error::invalid(format!("series lengths differ: {} vs {n}", x.len())));
    }
    if n < 3 * max_lag + 5 {
        return Err(Error::invalid(format!(
            "series of length {n} too short for {max_lag} lags (need {})",
            3 * max_lag + 5
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("granger series".into()));
    }
    let target: Vec<f64> = y[max_lag..].to_vec();
    let rows = target.len();
    let mean = target.iter().sum::<f64>() / rows as f64;
    let tss: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
    if tss <= f64::EPSILON * target.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate("target series is constant".into()));
    }
    let design = |with_x: bool| -> Vec<Vec<f64>> {
        (max_lag..n)
            .map(|t| {
                let mut row = Vec::with_capacity(1 + 2 * max_lag);
                row.push(1.0);
                row.extend((1..=max_lag).map(|k| y[t - k]));
                if with_x {
                    row.extend((1..=max_lag).map(|k| x[t - k]));
                }
                row
            })
            .collect()
    };
    let restricted = design(false);
    let unrestricted = design(true);
    check_rank(&restricted)?;
    let rss_r = ridge_rss(&restricted, &target)?;
    let rss_u = ridge_rss(&unrestricted, &target)?.min(rss_r);
    let df1 = max_lag;
    let df2 = rows - 2 * max_lag - 1;
    if rss_u <= 1e-12 * tss {
        return Err(Error::Degenerate("unrestricted regression fits exactly".into()));
    }
    let f = (((rss_r - rss_u) / df1 as f64) / (rss_u / df2 as f64)).max(0.0);
    let p = f_survival(f, df1 as f64, df2 as f64);
    Ok(GrangerResult {
        f_statistic: f,
        p_value: p,
        lags: max_lag,
        n_observations: rows,
        rss_restricted: rss_r,
        rss_unrestricted: rss_u,
        df: (df1, df2),
    })
}

fn gram(design: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = design[0].len();
    let mut g = vec![vec![0.0; k]; k];
    for row in design {
        for i in 0..k {
            for j in 0..=i {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            g[j][i] = g[i][j];
        }
    }
    g
}

/// In-place Cholesky; returns the smallest pivot relative to the largest
/// diagonal entry.
fn cholesky(a: &mut [Vec<f64>]) -> f64 {
    let k = a.len();
    let scale = (0..k).map(|i| a[i][i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut min_pivot = f64::INFINITY;
    for j in 0..k {
        let mut d = a[j][j];
        for p in 0..j {
            d -= a[j][p] * a[j][p];
        }
        min_pivot = min_pivot.min(d / scale);
        if d <= 0.0 {
            return min_pivot;
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..k {
            let mut s = a[i][j];
            for p in 0..j {
                s -= a[i][p] * a[j][p];
            }
            a[i][j] = s / d;
        }
    }
    min_pivot
}

fn check_rank(design: &[Vec<f64>]) -> Result<()> {
    // Standardise columns so the pivot test does not depend on units.
    let k = design[0].len();
    let n = design.len() as f64;
    let mut cols: Vec<(f64, f64)> = Vec::with_capacity(k);
    for c in 0..k {
        let m = design.iter().map(|r| r[c]).sum::<f64>() / n;
        let s = (design.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n).sqrt();
        cols.push((m, s));
    }
    // The intercept stays as is; any other constant column is collinear with it.
    if let Some(c) = (1..k).find(|&c| cols[c].1 <= 1e-12 * cols[c].0.abs().max(1.0)) {
        return Err(Error::Degenerate(format!("restricted design column {c} is constant")));
    }
    let scaled: Vec<Vec<f64>> = design
        .iter()
        .map(|r| {
            (0..k)
                .map(|c| if c == 0 { 1.0 } else { (r[c] - cols[c].0) / cols[c].1 })
                .collect()
        })
        .collect();
    let mut g = gram(&scaled);
    if cholesky(&mut g) <= 1e-10 {
        return Err(Error::Degenerate("restricted design matrix is rank deficient".into()));
    }
    Ok(())
}

/// Residual sum of squares of a ridge-stabilised least-squares fit. The
/// first design column is the intercept; the rest are centred and scaled to
/// unit variance so the fit and the penalty ignore units and offsets.
fn ridge_rss(design: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let n = design.len() as f64;
    let k = design[0].len() - 1;
    let y_mean = y.iter().sum::<f64>() / n;
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut x: Vec<Vec<f64>> = design.iter().map(|r| r[1..].to_vec()).collect();
    for c in 0..k {
        let m = x.iter().map(|r| r[c]).sum::<f64>() / n;
        let s = (x.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n).sqrt().max(f64::MIN_POSITIVE);
        for r in x.iter_mut() {
            r[c] = (r[c] - m) / s;
        }
    }
    let mut g = gram(&x);
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += RIDGE * n;
    }
    let mut rhs = vec![0.0; k];
    for (row, &v) in x.iter().zip(&yc) {
        for i in 0..k {
            rhs[i] += row[i] * v;
        }
    }
    if cholesky(&mut g) <= 0.0 {
        return Err(Error::Degenerate("normal equations are not positive definite".into()));
    }
    // Forward then backward substitution with the lower factor.
    for i in 0..k {
        let mut s = rhs[i];
        for p in 0..i {
            s -= g[i][p] * rhs[p];
        }
        rhs[i] = s / g[i][i];
    }
    for i in (0..k).rev() {
        let mut s = rhs[i];
        for p in i + 1..k {
            s -= g[p][i] * rhs[p];
        }
        rhs[i] = s / g[i][i];
    }
    Ok(x
        .iter()
        .zip(&yc)
        .map(|(row, &v)| {
            let fit: f64 = row.iter().zip(&rhs).map(|(a, b)| a * b).sum();
            (v - fit).powi(2)
        })
        .sum())
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// `P(F > f)` for an F distribution with `(d1, d2)` degrees of freedom.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if !(f > 0.0) {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Upper edges of the p-value bins; the last bin is closed at 1.
pub const P_BIN_EDGES: [f64; 6] = [0.0, 0.001, 0.01, 0.05, 0.1, 1.0];

fn p_bin(p: f64) -> usize {
    (0..5).find(|&i| p < P_BIN_EDGES[i + 1]).unwrap_or(4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Minimum p over ordered group pairs, per sample; `None` if every pair failed.
    pub min_p: Vec<Option<f64>>,
    pub skipped_pairs: usize,
    pub n_samples: usize,
    pub lags: usize,
}

/// For each sample (`[groups][dim]`), test every ordered pair of groups,
/// using each group's values along the latent dimension as its series, and
/// bin the minimum p-value.
pub fn latent_causality_report(latents: &[Vec<Vec<f64>>], max_lag: usize) -> Result<CausalityReport> {
    let mut counts = vec![0usize; 5];
    let mut min_p = Vec::with_capacity(latents.len());
    let mut skipped = 0;
    for (s, groups) in latents.iter().enumerate() {
        if groups.len() < 2 {
            return Err(Error::invalid(format!("sample {s} has {} groups, need at least 2", groups.len())));
        }
        let mut best: Option<f64> = None;
        for a in 0..groups.len() {
            for b in 0..groups.len() {
                if a == b {
                    continue;
                }
                match granger_test(&groups[a], &groups[b], max_lag) {
                    Ok(r) => best = Some(best.map_or(r.p_value, |p| p.min(r.p_value))),
                    Err(_) => skipped += 1,
                }
            }
        }
        if let Some(p) = best {
            counts[p_bin(p)] += 1;
        }
        min_p.push(best);
    }
    Ok(CausalityReport {
        bin_edges: P_BIN_EDGES.to_vec(),
        counts,
        min_p,
        skipped_pairs: skipped,
        n_samples: latents.len(),
        lags: max_lag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn beta_symmetry_and_edges() {
        assert_eq!(incomplete_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(incomplete_beta(2.0, 3.0, 1.0), 1.0);
        let x = 0.3;
        let s = incomplete_beta(2.5, 4.0, x) + incomplete_beta(4.0, 2.5, 1.0 - x);
        assert!((s - 1.0).abs() < 1e-12);
        // I_x(1, 1) = x
        assert!((incomplete_beta(1.0, 1.0, 0.37) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn constant_target_is_degenerate() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let y = vec![2.0; 30];
        assert!(matches!(granger_test(&x, &y, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn short_series_rejected() {
        assert!(granger_test(&[0.0; 7], &[1.0; 7], 1).is_err());
        assert!(granger_test(&[0.0; 10], &[1.0; 9], 1).is_err());
    }

    #[test]
    fn bins() {
        assert_eq!(p_bin(0.0), 0);
        assert_eq!(p_bin(0.001), 1);
        assert_eq!(p_bin(0.07), 3);
        assert_eq!(p_bin(1.0), 4);
    }
}
