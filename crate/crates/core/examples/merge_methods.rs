//! Merges two support-disjoint fine-tuned models with every method and
//! prints their normalized performance.

use mergeforge::divergence::DivergenceKind;
use mergeforge::merging::{MergeLevel, MergeSpec};
use mergeforge::pipeline::{disjoint_tasks, Lab, LabConfig};
use mergeforge::tasks::SplitSizes;

fn main() -> mergeforge::Result<()> {
    let mut config = LabConfig::default();
    config.sizes = SplitSizes {
        train: 80,
        validation: 40,
        test: 40,
    };
    config.pretrain.epochs = 15;
    let (targets, aux) = disjoint_tasks(&config, 2)?;
    let lab = Lab::build(&config, targets, &aux)?;
    for (t, p) in lab.tasks.iter().zip(&lab.finetuned_perf) {
        println!("{} fine-tuned accuracy {:.3}", t.task_id, p.value);
    }
    let subset = [0, 1];
    println!("base anp {:.4}", lab.score_base(&subset)?.anp);
    let mut specs: Vec<MergeSpec> = ["average", "task_arithmetic", "slerp", "multi_slerp", "ties", "kracher"]
        .iter()
        .map(|m| MergeSpec::from_name(m, DivergenceKind::Js, MergeLevel::Task, false))
        .collect::<mergeforge::Result<_>>()?;
    for level in [MergeLevel::Task, MergeLevel::Layer] {
        for kind in [DivergenceKind::Kl, DivergenceKind::Js] {
            let mut s = MergeSpec::from_name("divergence_guided", kind, level, false)?;
            s.optimizer_mut().expect("optimizer").dataset_size = 40;
            specs.push(s);
        }
        let mut s = MergeSpec::from_name("entropy_min", DivergenceKind::Js, level, false)?;
        s.optimizer_mut().expect("optimizer").dataset_size = 40;
        specs.push(s);
    }
    for spec in &specs {
        let (outcome, report) = lab.merge_and_score(&subset, spec)?;
        let loss = outcome.final_loss.map(|l| format!(" final loss {l:.4}")).unwrap_or_default();
        println!("{:<16} anp {:.4} ratios {:?}{loss}", spec.label(), report.anp, report.ratios);
    }
    Ok(())
}
