//! Numerical checks of the merging theory on synthetic inputs and on a
//! small disjoint merge.

use mergeforge::divergence::DivergenceKind;
use mergeforge::merging::{MergeLevel, MergeSpec};
use mergeforge::pipeline::{disjoint_tasks, Lab, LabConfig};
use mergeforge::tasks::SplitSizes;
use mergeforge::theory_checks::{
    check_cross_entropy_identity, check_disentanglement, check_kracher_span_trials,
    check_tv_bound_trials, CheckReport, DISENTANGLEMENT_EPSILON,
};

fn show(r: &CheckReport) {
    println!("{:<24} {}", r.check_id, if r.passed { "pass" } else { "FAIL" });
    for (k, v) in &r.measured {
        println!("    {k} = {v:.3e}");
    }
}

fn main() -> mergeforge::Result<()> {
    show(&check_cross_entropy_identity(10_000, 259, 0)?);
    show(&check_kracher_span_trials(20, 5, 1000, 0)?);

    let mut config = LabConfig::default();
    config.sizes = SplitSizes {
        train: 80,
        validation: 40,
        test: 40,
    };
    config.pretrain.epochs = 15;
    let (targets, aux) = disjoint_tasks(&config, 2)?;
    let lab = Lab::build(&config, targets, &aux)?;
    let mut spec = MergeSpec::from_name("divergence_guided", DivergenceKind::Js, MergeLevel::Task, false)?;
    spec.optimizer_mut().expect("optimizer").dataset_size = 40;
    let (outcome, _) = lab.merge_and_score(&[0, 1], &spec)?;
    let merged = outcome.params();
    show(&check_disentanglement(
        merged,
        &lab.finetuned.iter().collect::<Vec<_>>(),
        &lab.tasks.iter().collect::<Vec<_>>(),
        DISENTANGLEMENT_EPSILON,
        40,
        8,
    )?);
    show(&check_tv_bound_trials(&lab.finetuned[0], merged, &lab.tasks[0], 10, 0.2, 8, 0)?);
    Ok(())
}
