//! Rank correlation between the divergence of fine-tuned models on a task
//! and their performance on that task.

use mergeforge::divergence::DivergenceKind;
use mergeforge::pipeline::{classification_tasks, Lab, LabConfig};
use mergeforge::tasks::SplitSizes;

fn main() -> mergeforge::Result<()> {
    let mut config = LabConfig::default();
    config.sizes = SplitSizes {
        train: 80,
        validation: 40,
        test: 40,
    };
    config.pretrain.epochs = 10;
    let (targets, aux) = classification_tasks(&config)?;
    let lab = Lab::build(&config, targets, &aux)?;
    let report = lab.correlation(DivergenceKind::Js, 8)?;
    println!("tasks {:?}", report.heatmap.task_ids);
    for (id, rho) in report.heatmap.task_ids.iter().zip(&report.per_task) {
        println!("{id:<14} spearman {rho:+.3}");
    }
    println!("average {:+.3}", report.average);
    Ok(())
}
