use std::collections::HashSet;

use mergeforge::tasks::{
    brackets_balanced, default_classification_suite, default_generation_suite,
    make_disjoint_suite, ClassificationRule, Split, SplitSizes, TaskDataset, Transformation,
};
use proptest::prelude::*;

fn balanced_by_stack(s: &str) -> bool {
    let mut stack = Vec::new();
    for c in s.chars() {
        match c {
            '(' => stack.push(c),
            ')' => {
                if stack.pop().is_none() {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.is_empty()
}

fn number_label_oracle(rule: ClassificationRule, n: u32) -> &'static str {
    let s = n.to_string();
    let d: Vec<u32> = s.chars().map(|c| c.to_digit(10).unwrap()).collect();
    let first = match rule {
        ClassificationRule::Parity => n % 2 == 0,
        ClassificationRule::Magnitude => d[0] >= 5,
        ClassificationRule::HasSeven => s.contains('7'),
        ClassificationRule::Order => d[0] < *d.last().unwrap(),
        ClassificationRule::Middle => d[d.len() / 2] >= 5,
        ClassificationRule::Repeated => (0..d.len()).any(|i| d[i + 1..].contains(&d[i])),
        ClassificationRule::LeadOdd => d[0] % 2 == 1,
        ClassificationRule::Round => n % 5 == 0,
        _ => unreachable!(),
    };
    rule.labels()[usize::from(!first)]
}

proptest! {
    #[test]
    fn brackets_match_a_stack_checker(s in "[()]{0,16}") {
        prop_assert_eq!(brackets_balanced(&s), balanced_by_stack(&s));
    }

    #[test]
    fn number_rules_match_arithmetic(n in 100u32..10_000) {
        for rule in ClassificationRule::NUMBER_RULES {
            prop_assert_eq!(rule.label(&n.to_string()).unwrap(), number_label_oracle(rule, n));
        }
    }
}

#[test]
fn transformations_on_known_payloads() {
    assert_eq!(Transformation::Reverse.apply("ab cd"), "dc ba");
    assert_eq!(Transformation::Sort.apply("dcba zyx"), "abcd xyz");
    assert_eq!(Transformation::Duplicate.apply("hi yo"), "hi yo hi yo");
    assert_eq!(Transformation::UppercaseVowels.apply("banana pie"), "bAnAnA pIE");
}

#[test]
fn stored_answers_agree_with_the_rules() {
    let sizes = SplitSizes::default();
    for (task, rule) in default_classification_suite(sizes, 3)
        .unwrap()
        .iter()
        .zip(ClassificationRule::DEFAULT_SUITE)
    {
        for e in &task.examples {
            assert_eq!(rule.label(TaskDataset::payload(&e.prompt)).unwrap(), e.answer);
        }
    }
    for (task, t) in default_generation_suite(sizes, 3).unwrap().iter().zip(Transformation::ALL) {
        for e in &task.examples {
            assert_eq!(t.apply(TaskDataset::payload(&e.prompt)), e.answer);
        }
    }
}

#[test]
fn splits_partition_the_examples_and_labels_are_balanced() {
    for task in default_classification_suite(SplitSizes::default(), 9).unwrap() {
        let mut all: Vec<usize> = task
            .splits
            .train
            .iter()
            .chain(&task.splits.validation)
            .chain(&task.splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..task.examples.len()).collect::<Vec<_>>());
        let prompts: HashSet<&str> = task.examples.iter().map(|e| e.prompt.as_str()).collect();
        assert_eq!(prompts.len(), task.examples.len());
        let first = task.examples.iter().filter(|e| e.answer == task.examples[0].answer).count();
        assert_eq!(first * 2, task.examples.len());
    }
}

#[test]
fn disjoint_suite_shares_payloads_but_not_prompts() {
    let suite = make_disjoint_suite(3, 1).unwrap();
    let payloads: Vec<HashSet<&str>> = suite
        .iter()
        .map(|t| t.examples.iter().map(|e| TaskDataset::payload(&e.prompt)).collect())
        .collect();
    let stripped: Vec<HashSet<String>> = payloads
        .iter()
        .map(|p| p.iter().map(|s| s.trim_start_matches(|c: char| !c.is_ascii_digit()).to_string()).collect())
        .collect();
    assert!(stripped[0].intersection(&stripped[1]).count() > 10);
    for (i, t) in suite.iter().enumerate() {
        let tag = t.support_tag.unwrap();
        assert!(t.examples.iter().all(|e| e.prompt.as_bytes()[0] == tag));
        for other in &suite[i + 1..] {
            assert_ne!(other.support_tag, Some(tag));
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = default_generation_suite(SplitSizes::default(), 4).unwrap();
    let b = default_generation_suite(SplitSizes::default(), 4).unwrap();
    let c = default_generation_suite(SplitSizes::default(), 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].prompts(Split::Test), c[0].prompts(Split::Test));
}
