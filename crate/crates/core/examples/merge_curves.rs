//! Normalized performance along the coefficient optimization and as a
//! function of the merging dataset size.

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
    let subset = [0, 1];
    let mut spec = MergeSpec::from_name("divergence_guided", DivergenceKind::Js, MergeLevel::Layer, false)?;
    spec.optimizer_mut().expect("optimizer").dataset_size = 40;
    let (outcome, _) = lab.merge_and_score(&subset, &spec)?;
    println!("iteration  loss      anp");
    for p in lab.iteration_curve(&subset, &outcome, 10)? {
        println!("{:>9}  {:.5}  {:.4}", p.iteration, p.loss.unwrap_or(f64::NAN), p.anp);
    }
    println!("size  final loss  anp");
    for p in lab.budget_curve(&subset, &spec, &[5, 10, 20, 40])? {
        println!("{:>4}  {:.5}     {:.4}", p.size, p.final_loss.unwrap_or(f64::NAN), p.anp);
    }
    Ok(())
}
