use proptest::prelude::*;
use rand::Rng;
use vmflow::data::make_gmm_dataset;
use vmflow::metrics::{
    conditional_metrics, kl_score, mode_coverage, smoothed_kl, token_histogram, tradeoff_curve, unconditional_metrics, SimFn,
    COSINE,
};
use vmflow::rng::seeded;
use vmflow::GmmSpec;

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

#[test]
fn conditional_metrics_match_brute_force() {
    let mut rng = seeded(80);
    let n = 20;
    let gen: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(0.0..3.0f32).floor()).map(|v| v + 0.01).collect()).collect();
    let refs: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(0.0..3.0f32).floor()).map(|v| v + 0.01).collect()).collect();
    let ok: Vec<bool> = (0..n).map(|i| i % 7 != 3).collect();
    let report = conditional_metrics(&gen, &refs, &ok, COSINE, 0.5, 0.8).unwrap();

    let f: Vec<f64> = (0..n).map(|i| cos64(&gen[i], &refs[i])).collect();
    let similar = (0..n).filter(|&i| ok[i] && f[i] >= 0.5).count();
    let novel = (0..n).filter(|&i| f[i] < 0.8).count();
    let valid: Vec<usize> = (0..n).filter(|&i| ok[i] && f[i] >= 0.5).collect();
    // ordered pairs, each unordered pair counted twice
    let mut acc = 0.0;
    let mut pairs = 0;
    for &i in &valid {
        for &j in &valid {
            if i != j {
                acc += 1.0 - cos64(&gen[i], &gen[j]);
                pairs += 1;
            }
        }
    }
    let diversity = if pairs == 0 { 0.0 } else { 100.0 * acc / pairs as f64 };
    let validity = 100.0 * ok.iter().filter(|&&v| v).count() as f64 / n as f64;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-4;
    assert!(close(report.similarity.unwrap(), 100.0 * similar as f64 / n as f64));
    assert!(close(report.novelty.unwrap(), 100.0 * novel as f64 / n as f64));
    assert!(close(report.diversity.unwrap(), diversity), "{:?} vs {diversity}", report.diversity);
    assert!(close(report.validity.unwrap(), validity));
    let mean = (report.similarity.unwrap() + report.novelty.unwrap() + report.diversity.unwrap() + validity) / 4.0;
    assert_eq!(report.overall, mean);
    assert_eq!(report.sim_fn, "cosine");
}

/// Similarities looked up by item id stored in the first coordinate.
fn table_sim(a: &[f32], b: &[f32]) -> f32 {
    let (i, j) = (a[0] as usize, b[0] as usize);
    if i == j {
        return 1.0;
    }
    match (i.min(j), i.max(j)) {
        (0, 1) => 0.2,
        (0, 2) => 0.4,
        (1, 2) => 0.6,
        _ => 0.0,
    }
}

#[test]
fn three_item_diversity_example() {
    let items: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32]).collect();
    let sim = SimFn { name: "table", f: table_sim };
    let r = conditional_metrics(&items, &items, &[true; 3], sim, 0.5, 0.8).unwrap();
    assert!((r.diversity.unwrap() - 60.0).abs() < 1e-5);
    assert_eq!(r.similarity, Some(100.0));
    assert_eq!(r.novelty, Some(0.0));
}

#[test]
fn fewer_than_two_valid_samples_have_zero_diversity() {
    let gen = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let refs = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    let r = conditional_metrics(&gen, &refs, &[true, true], COSINE, 0.5, 0.8).unwrap();
    assert_eq!(r.diversity, Some(0.0));
    assert_eq!(r.similarity, Some(50.0));
}

#[test]
fn tradeoff_points_share_one_threshold() {
    let gen = vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![1.0, 1.0]];
    let refs = vec![vec![1.0, 0.0]; 3];
    let curve = tradeoff_curve(&gen, &refs, &[true; 3], COSINE, &[0.1, 0.5, 0.9]).unwrap();
    for p in &curve {
        let r = conditional_metrics(&gen, &refs, &[true; 3], COSINE, p.threshold, p.threshold).unwrap();
        assert_eq!((p.similarity, p.novelty, p.diversity), (r.similarity.unwrap(), r.novelty.unwrap(), r.diversity.unwrap()));
    }
    assert!(curve.windows(2).all(|w| w[0].similarity >= w[1].similarity && w[0].novelty <= w[1].novelty));
}

#[test]
fn histogram_kl_reference_value() {
    // 0.5·ln 2 + 0.5·ln(2/3)
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0 / 3.0f64).ln();
    let kl = smoothed_kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    assert!((kl - want).abs() < 1e-5);
    assert!((100.0 * (-kl).exp() - 86.6).abs() < 0.05);
}

#[test]
fn unconditional_reference_cases() {
    let train: Vec<u32> = (0..50).collect();
    let feats: Vec<Vec<f64>> = train.iter().map(|&v| vec![v as f64, (v % 5) as f64]).collect();
    let copy = unconditional_metrics(&train, &train, &feats, &feats, 10).unwrap();
    assert_eq!(copy.novelty, Some(0.0));
    assert_eq!(copy.uniqueness, Some(100.0));
    assert!((copy.kl_score.unwrap() - 100.0).abs() < 1e-9);
    let same = vec![7u32; 10];
    let r = unconditional_metrics(&same, &train, &vec![vec![7.0, 2.0]; 10], &feats, 10).unwrap();
    assert_eq!(r.uniqueness, Some(10.0));
    let k = r.kl_score.unwrap();
    assert!(k > 0.0 && k < 100.0);
    assert!(unconditional_metrics::<u32>(&[], &train, &[], &feats, 10).is_err());
}

#[test]
fn exact_samples_cover_every_mode() {
    let spec = GmmSpec::ring(8, 5.0, 0.1, 1, true, 2, 0);
    let means = spec.mode_means();
    let samples: Vec<Vec<f32>> = means.iter().flat_map(|m| std::iter::repeat(m.clone()).take(10)).collect();
    assert_eq!(mode_coverage(&samples, &means, 0.3, 10).unwrap(), 1.0);
    let one: Vec<Vec<f32>> = vec![means[3].clone(); 100];
    assert_eq!(mode_coverage(&one, &means, 0.3, 10).unwrap(), 1.0 / 8.0);
}

#[test]
fn true_mixture_sampler_covers_the_ring() {
    for seed in 0..5 {
        let spec = GmmSpec::ring(8, 5.0, 0.1, 125, true, 2, seed);
        let ds = make_gmm_dataset(&spec).unwrap();
        let samples: Vec<Vec<f32>> = ds.examples().iter().map(|e| e.x.clone()).collect();
        assert_eq!(mode_coverage(&samples, &spec.mode_means(), 0.3, 10).unwrap(), 1.0);
    }
}

#[test]
fn token_histogram_counts() {
    assert_eq!(token_histogram(&[0, 2, 2, 5], 4), vec![1.0, 0.0, 2.0, 0.0]);
}

proptest! {
    #[test]
    fn metrics_ignore_sample_order(
        rows in prop::collection::vec(prop::collection::vec(0.0f32..2.0, 4), 2..12),
        shift in 0usize..12,
    ) {
        let n = rows.len();
        let refs: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().rev().cloned().collect()).collect();
        let ok: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
        let a = conditional_metrics(&rows, &refs, &ok, COSINE, 0.5, 0.8).unwrap();
        let rot = |v: &[Vec<f32>]| { let mut v = v.to_vec(); v.rotate_left(shift % n); v };
        let mut ok_r = ok.clone();
        ok_r.rotate_left(shift % n);
        let b = conditional_metrics(&rot(&rows), &rot(&refs), &ok_r, COSINE, 0.5, 0.8).unwrap();
        prop_assert_eq!(a.similarity, b.similarity);
        prop_assert_eq!(a.novelty, b.novelty);
        prop_assert!((a.diversity.unwrap() - b.diversity.unwrap()).abs() < 1e-9);
        for v in [a.similarity, a.novelty, a.diversity, a.validity] {
            let v = v.unwrap();
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn kl_score_is_bounded(g in prop::collection::vec(-3.0f64..3.0, 5..40), t in prop::collection::vec(-3.0f64..3.0, 5..40)) {
        let gf: Vec<Vec<f64>> = g.iter().map(|v| vec![*v]).collect();
        let tf: Vec<Vec<f64>> = t.iter().map(|v| vec![*v]).collect();
        let s = kl_score(&gf, &tf, 8).unwrap();
        prop_assert!(s > 0.0 && s <= 100.0);
        prop_assert!((kl_score(&gf, &gf, 8).unwrap() - 100.0).abs() < 1e-9);
    }
}
