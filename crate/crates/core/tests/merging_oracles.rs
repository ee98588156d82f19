mod common;

use mergeforge::divergence::{sequence_divergence, DivergenceKind};
use mergeforge::merging::{
    apply_task_arithmetic, divergence_loss, divergence_loss_and_grad, kracher_mean_flat, merge,
    model_average, optimize_divergence_coeffs, slerp_weights, spherical_weighted_mean,
    ties_vector, MergeCoefficients, MergeInputs, MergeLevel, MergeSpec, OptimizerConfig,
    TaskReference,
};
use mergeforge::model::ParameterSet;
use mergeforge::train::task_vector;
use proptest::prelude::*;

use common::{perturbed, tiny_model};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

fn max_abs_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

struct Fixture {
    base: ParameterSet,
    finetuned: Vec<ParameterSet>,
    task_vectors: Vec<ParameterSet>,
    references: Vec<TaskReference>,
}

fn fixture(n_prompts: usize) -> Fixture {
    let base = tiny_model(11);
    let finetuned: Vec<ParameterSet> = (0..2).map(|i| perturbed(&base, 0.08, 100 + i)).collect();
    let task_vectors = finetuned
        .iter()
        .map(|f| task_vector(&base, f).unwrap())
        .collect();
    let prompts = [
        ["@12\nAnswer: ", "@7\nAnswer: ", "@305\nAnswer: ", "@88\nAnswer: "],
        ["#40\nAnswer: ", "#9\nAnswer: ", "#613\nAnswer: ", "#2\nAnswer: "],
    ];
    let references = finetuned
        .iter()
        .zip(&prompts)
        .enumerate()
        .map(|(t, (f, p))| TaskReference::new(&format!("t{t}"), f, &p[..n_prompts], 3).unwrap())
        .collect();
    Fixture {
        base,
        finetuned,
        task_vectors,
        references,
    }
}

#[test]
fn layer_level_with_equal_coefficients_equals_task_level() {
    let f = fixture(1);
    let task = MergeCoefficients::task_level(&ids(2), &[0.3, -0.7]);
    let mut layer = MergeCoefficients::uniform(MergeLevel::Layer, &ids(2), 4, 0.0);
    layer.values = vec![vec![0.3; 4], vec![-0.7; 4]];
    let a = apply_task_arithmetic(&f.base, &f.task_vectors, &task).unwrap();
    let b = apply_task_arithmetic(&f.base, &f.task_vectors, &layer).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-15);
}

#[test]
fn task_arithmetic_matches_flat_oracle() {
    let f = fixture(1);
    let c = MergeCoefficients::task_level(&ids(2), &[0.25, 1.5]);
    let got = apply_task_arithmetic(&f.base, &f.task_vectors, &c).unwrap().flatten();
    let (b, t0, t1) = (
        f.base.flatten(),
        f.task_vectors[0].flatten(),
        f.task_vectors[1].flatten(),
    );
    for i in 0..b.len() {
        assert!((got[i] - (b[i] + 0.25 * t0[i] + 1.5 * t1[i])).abs() < 1e-12);
    }
}

#[test]
fn average_is_the_elementwise_mean() {
    let f = fixture(1);
    let avg = model_average(&f.finetuned).unwrap().flatten();
    let (a, b) = (f.finetuned[0].flatten(), f.finetuned[1].flatten());
    for i in 0..avg.len() {
        assert!((avg[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
    }
}

#[test]
fn average_merge_through_dispatch_equals_model_average() {
    let f = fixture(1);
    let out = merge(
        &MergeSpec::Average,
        MergeInputs {
            base: &f.base,
            task_ids: ids(2),
            finetuned: f.finetuned.iter().collect(),
            prompts: vec![vec![], vec![]],
            references: None,
        },
    )
    .unwrap();
    assert!(max_abs_diff(out.params(), &model_average(&f.finetuned).unwrap()) < 1e-15);
}

#[test]
fn slerp_of_orthogonal_vectors_at_midpoint() {
    let (a, b) = slerp_weights(&[3.0, 0.0], &[0.0, 0.5], 0.5).unwrap();
    let half = std::f64::consts::FRAC_1_SQRT_2;
    assert!((a - half).abs() < 1e-12 && (b - half).abs() < 1e-12);
    let (a, b) = slerp_weights(&[1.0, 2.0], &[2.0, 4.0], 0.3).unwrap();
    assert!((a - 0.7).abs() < 1e-12 && (b - 0.3).abs() < 1e-12);
}

fn geodesic_objective(x: &[f64], units: &[Vec<f64>], w: &[f64]) -> f64 {
    units
        .iter()
        .zip(w)
        .map(|(u, wi)| {
            let c: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
            wi * c.clamp(-1.0, 1.0).acos().powi(2)
        })
        .sum()
}

fn sphere_point(theta: f64, phi: f64) -> Vec<f64> {
    vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

#[test]
fn spherical_mean_matches_grid_search_in_three_dimensions() {
    let units = vec![
        sphere_point(0.3, 0.1),
        sphere_point(1.1, 0.9),
        sphere_point(0.7, 2.0),
    ];
    let w = [0.5, 0.2, 0.3];
    let got = spherical_weighted_mean(&units, &w).unwrap();
    let (mut best, mut best_tp) = (f64::INFINITY, (0.0, 0.0));
    let mut span = (0.0, std::f64::consts::PI, 0.0, 2.0 * std::f64::consts::PI);
    for _ in 0..6 {
        let (t0, t1, p0, p1) = span;
        for i in 0..=60 {
            for j in 0..=60 {
                let th = t0 + (t1 - t0) * i as f64 / 60.0;
                let ph = p0 + (p1 - p0) * j as f64 / 60.0;
                let v = geodesic_objective(&sphere_point(th, ph), &units, &w);
                if v < best {
                    best = v;
                    best_tp = (th, ph);
                }
            }
        }
        let (dt, dp) = ((t1 - t0) / 20.0, (p1 - p0) / 20.0);
        span = (best_tp.0 - dt, best_tp.0 + dt, best_tp.1 - dp, best_tp.1 + dp);
    }
    let want = sphere_point(best_tp.0, best_tp.1);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-4, "{got:?} vs {want:?}");
    }
}

#[test]
fn ties_hand_example() {
    let t1 = vec![0.5, -0.2, 0.1, 0.9, -0.4];
    let t2 = vec![-0.3, 0.6, -0.05, 0.2, 0.8];
    let got = ties_vector(&[t1, t2], 0.6).unwrap();
    let want = [0.5, 0.6, 0.0, 0.9, 0.8];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-15, "{got:?}");
    }
}

#[test]
fn kracher_mean_minimizes_the_squared_distance_sum() {
    let mut rng = mergeforge::rng::substream(5, "kracher");
    let vectors: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..6).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
        .collect();
    let objective = |x: &[f64]| -> f64 {
        vectors
            .iter()
            .map(|v| v.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum()
    };
    let mean = kracher_mean_flat(&vectors).unwrap();
    let at_mean = objective(&mean);
    for _ in 0..100 {
        let probe: Vec<f64> = mean
            .iter()
            .map(|m| m + rand::Rng::gen_range(&mut rng, -0.1..0.1))
            .collect();
        assert!(at_mean <= objective(&probe));
    }
}

#[test]
fn coefficient_gradient_matches_finite_differences() {
    let f = fixture(2);
    for level in [MergeLevel::Task, MergeLevel::Layer] {
        let mut c = MergeCoefficients::uniform(level, &ids(2), 4, 0.5);
        let mut flat = c.flat();
        for (i, v) in flat.iter_mut().enumerate() {
            *v += 0.07 * i as f64;
        }
        c.set_flat(&flat);
        let batches: Vec<Vec<_>> = f.references.iter().map(|r| r.trajectories.iter().collect()).collect();
        for kind in [DivergenceKind::Kl, DivergenceKind::Js] {
            let (loss, grad) =
                divergence_loss_and_grad(&f.base, &f.task_vectors, &c, &batches, kind).unwrap();
            let direct = divergence_loss(&f.base, &f.task_vectors, &c, &f.references, kind).unwrap();
            assert!((loss - direct).abs() < 1e-12);
            let h = 1e-5;
            for k in 0..flat.len() {
                let eval = |delta: f64| {
                    let mut p = flat.clone();
                    p[k] += delta;
                    let mut cc = c.clone();
                    cc.set_flat(&p);
                    divergence_loss(&f.base, &f.task_vectors, &cc, &f.references, kind).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (grad[k] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "{level} {kind} coord {k}: {} vs {fd}", grad[k]);
            }
        }
    }
}

#[test]
fn first_iteration_loss_is_the_divergence_at_initial_coefficients() {
    let f = fixture(4);
    let config = OptimizerConfig {
        dataset_size: 4,
        batch_per_task: 4,
        epochs: 1,
        max_new_tokens: 3,
        ..OptimizerConfig::divergence(MergeLevel::Task)
    };
    let res = optimize_divergence_coeffs(
        &f.base,
        &f.task_vectors,
        &f.references,
        DivergenceKind::Js,
        MergeLevel::Task,
        &config,
    )
    .unwrap();
    let start = apply_task_arithmetic(
        &f.base,
        &f.task_vectors,
        &MergeCoefficients::task_level(&ids(2), &[0.5, 0.5]),
    )
    .unwrap();
    let prompts = [
        ["@12\nAnswer: ", "@7\nAnswer: ", "@305\nAnswer: ", "@88\nAnswer: "],
        ["#40\nAnswer: ", "#9\nAnswer: ", "#613\nAnswer: ", "#2\nAnswer: "],
    ];
    let want: f64 = f
        .finetuned
        .iter()
        .zip(&prompts)
        .map(|(ft, p)| sequence_divergence(ft, &start, p, DivergenceKind::Js, 3).unwrap().value)
        .sum();
    assert!((res.log[0].loss - want).abs() < 1e-10, "{} vs {want}", res.log[0].loss);
    assert_eq!(res.log[0].coefficients, vec![vec![0.5], vec![0.5]]);
}

#[test]
fn full_batch_optimization_decreases_the_loss() {
    let f = fixture(4);
    let config = OptimizerConfig {
        dataset_size: 4,
        batch_per_task: 4,
        epochs: 20,
        max_new_tokens: 3,
        ..OptimizerConfig::divergence(MergeLevel::Layer)
    };
    let res = optimize_divergence_coeffs(
        &f.base,
        &f.task_vectors,
        &f.references,
        DivergenceKind::Js,
        MergeLevel::Layer,
        &config,
    )
    .unwrap();
    assert_eq!(res.log.len(), 20);
    for w in res.log.windows(2) {
        assert!(w[1].loss <= w[0].loss * 1.05, "{} then {}", w[0].loss, w[1].loss);
    }
    assert!(res.final_loss < res.log[0].loss);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn task_arithmetic_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let f = fixture(1);
        let at = |x: f64, y: f64| {
            apply_task_arithmetic(&f.base, &f.task_vectors, &MergeCoefficients::task_level(&ids(2), &[x, y]))
                .unwrap()
                .flatten()
        };
        let (base, pa, pb, pab) = (f.base.flatten(), at(a, 0.0), at(0.0, b), at(a, b));
        for i in 0..base.len() {
            prop_assert!(((pab[i] - base[i]) - (pa[i] - base[i]) - (pb[i] - base[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_coefficients_return_the_base(level_is_task in any::<bool>()) {
        let f = fixture(1);
        let level = if level_is_task { MergeLevel::Task } else { MergeLevel::Layer };
        let c = MergeCoefficients::uniform(level, &ids(2), 4, 0.0);
        let merged = apply_task_arithmetic(&f.base, &f.task_vectors, &c).unwrap();
        prop_assert_eq!(merged.flatten(), f.base.flatten());
    }
}
