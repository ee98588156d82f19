mod common;

use mergeforge::model::{encode_prompt, next_token_distribution, EOS};
use mergeforge::tasks::{Split, SplitSizes, TaskFamily, TaskKind};
use mergeforge::train::{
    finetune, sequence_nll, task_vector, TrainConfig, TrainingSequence,
};
use proptest::prelude::*;

use common::{perturbed, tiny_model};

#[test]
fn completion_loss_scores_only_the_answer_tokens() {
    let m = tiny_model(3);
    let (prompt, answer) = ("@42\nAnswer: ", "even");
    let got = sequence_nll(&m, &TrainingSequence::completion(prompt, answer)).unwrap();
    let mut context = encode_prompt(prompt.as_bytes());
    let mut want = 0.0;
    let targets: Vec<usize> = answer.bytes().map(usize::from).chain([EOS]).collect();
    for &t in &targets {
        want -= next_token_distribution(&m, &context).unwrap().probs()[t].ln();
        context.push(t);
    }
    assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn empty_train_split_leaves_the_base_bitwise_unchanged() {
    let base = tiny_model(1);
    let mut task = TaskFamily {
        kind: TaskKind::Classification,
        rule: "parity".into(),
        sizes: SplitSizes {
            train: 4,
            validation: 2,
            test: 2,
        },
        sentinel: None,
        seed: 0,
    }
    .generate()
    .unwrap();
    task.splits.train.clear();
    let (tuned, log) = finetune(&base, &task, &TrainConfig::default()).unwrap();
    assert_eq!(tuned.flatten(), base.flatten());
    assert_eq!(log.steps, 0);
}

#[test]
fn finetuning_is_deterministic() {
    let base = tiny_model(2);
    let task = TaskFamily {
        kind: TaskKind::Classification,
        rule: "parity".into(),
        sizes: SplitSizes {
            train: 8,
            validation: 2,
            test: 2,
        },
        sentinel: None,
        seed: 0,
    }
    .generate()
    .unwrap();
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = finetune(&base, &task, &config).unwrap();
    let b = finetune(&base, &task, &config).unwrap();
    assert_eq!(a.0.flatten(), b.0.flatten());
    assert_eq!(a.1, b.1);
    assert_eq!(a.1.epoch_losses.len(), 2);
    assert_eq!(task.split(Split::Train).count(), 8);
}

#[test]
fn zero_task_vector_for_identical_models() {
    let base = tiny_model(4);
    assert!(task_vector(&base, &base).unwrap().flatten().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// `b + (t - b)` recovers `t` exactly when the subtraction is exact,
    /// which holds whenever `t` and `b` are within a factor of two.
    #[test]
    fn task_vector_inverse(seed in 0u64..1000) {
        let base = tiny_model(seed);
        let tuned = perturbed(&base, 1e-3, seed);
        let tau = task_vector(&base, &tuned).unwrap();
        let back = base.zip_map(&tau, |b, d| b + d).unwrap();
        for ((b, t), r) in base.flatten().iter().zip(tuned.flatten()).zip(back.flatten()) {
            let sterbenz = b.signum() == t.signum() && t.abs() <= 2.0 * b.abs() && b.abs() <= 2.0 * t.abs();
            if sterbenz {
                prop_assert_eq!(r, t);
            } else {
                prop_assert!((r - t).abs() <= f64::EPSILON * t.abs().max(b.abs()));
            }
        }
    }
}
