mod common;

use mergeforge::evaluation::{
    anp_from_perfs, combinations, cosine_similarity_matrix, mean_and_ci95, rouge1, spearman,
    PerfResult,
};
use mergeforge::tasks::MetricKind;
use mergeforge::train::task_vector;
use proptest::prelude::*;

use common::{perturbed, tiny_model};

#[test]
fn spearman_known_values() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // Ties: ranks [1.5, 1.5, 3, 4] against [1, 2, 3, 4].
    let rx = [1.5, 1.5, 3.0, 4.0];
    let ry = [1.0, 2.0, 3.0, 4.0];
    let mean = 2.5;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mean) * (a - mean)).sum();
    let syy: f64 = ry.iter().map(|b| (b - mean) * (b - mean)).sum();
    let want = sxy / (sxx * syy).sqrt();
    let got = spearman(&[0.2, 0.2, 0.5, 0.9], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((got - want).abs() < 1e-12);
}

fn perf(id: &str, value: f64) -> PerfResult {
    PerfResult {
        task_id: id.into(),
        metric: MetricKind::Accuracy,
        value,
        n_examples: 100,
    }
}

#[test]
fn anp_is_the_mean_ratio() {
    let merged = [perf("a", 0.45), perf("b", 0.9), perf("c", 0.3)];
    let ft = [perf("a", 0.9), perf("b", 0.9), perf("c", 0.6)];
    let r = anp_from_perfs("m", None, &merged, &ft).unwrap();
    assert!((r.anp - (0.5 + 1.0 + 0.5) / 3.0).abs() < 1e-15);
    assert!(anp_from_perfs("m", None, &merged, &[perf("a", 0.0), perf("b", 1.0), perf("c", 1.0)]).is_err());
}

#[test]
fn combination_counts() {
    assert_eq!(combinations(7, 2).len(), 21);
    assert_eq!(combinations(4, 2).len(), 6);
    assert_eq!(combinations(10, 3).len(), 120);
    let total: usize = (2..=7).map(|k| combinations(7, k).len()).sum();
    assert_eq!(total, 120);
    assert_eq!(combinations(4, 2)[0], vec![0, 1]);
    assert_eq!(combinations(4, 2)[5], vec![2, 3]);
}

#[test]
fn ci95_of_known_sample() {
    let (m, h) = mean_and_ci95(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m - 2.5).abs() < 1e-15);
    let sd = (5.0f64 / 3.0).sqrt();
    assert!((h - 1.96 * sd / 2.0).abs() < 1e-12);
}

#[test]
fn cosine_matrix_matches_flat_oracle() {
    let base = tiny_model(1);
    let tvs: Vec<_> = (0..3)
        .map(|i| task_vector(&base, &perturbed(&base, 0.1, i)).unwrap())
        .collect();
    let m = cosine_similarity_matrix(&tvs).unwrap();
    let flats: Vec<Vec<f64>> = tvs.iter().map(|t| t.flatten()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for i in 0..3 {
        for j in 0..3 {
            let want = dot(&flats[i], &flats[j]) / (dot(&flats[i], &flats[i]) * dot(&flats[j], &flats[j])).sqrt();
            assert!((m[i][j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn rouge_known_value() {
    // Overlap 2 of 3 candidate and 2 of 4 reference tokens.
    let want = 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5);
    assert!((rouge1("a b c", "a b d e") - want).abs() < 1e-15);
}

proptest! {
    #[test]
    fn rouge_is_bounded_symmetric_and_reflexive(a in "[ab c]{0,12}", b in "[ab c]{0,12}") {
        let r = rouge1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((r - rouge1(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(rouge1(&a, &a), 1.0);
    }

    #[test]
    fn spearman_is_invariant_under_monotone_maps(xs in prop::collection::vec(-10.0f64..10.0, 4..12)) {
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.5 + x.powi(3)).collect();
        if let Ok(r) = spearman(&xs, &ys) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }
}
