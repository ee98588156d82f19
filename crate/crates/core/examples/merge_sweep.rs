//! Merges every subset of four tasks and reports mean normalized
//! performance with 95% confidence margins per subset size.

use mergeforge::evaluation::write_sweep_csv;
use mergeforge::merging::MergeSpec;
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
    let (mut targets, aux) = classification_tasks(&config)?;
    targets.truncate(4);
    let lab = Lab::build(&config, targets, &aux)?;
    let out = std::env::temp_dir().join("mergeforge-sweep");
    std::fs::create_dir_all(&out).map_err(|e| mergeforge::Error::io(&out, e))?;
    for label in ["average", "ties", "tl-js"] {
        let mut spec = MergeSpec::from_label(label, false)?;
        if let Some(o) = spec.optimizer_mut() {
            o.dataset_size = 40;
        }
        let reports = lab.sweep(&spec, 2, 4)?;
        for r in &reports {
            println!("{label:<8} k={} mean anp {:.4} +- {:.4}", r.k, r.mean_anp, r.ci95_margin);
        }
        write_sweep_csv(out.join(format!("sweep_{label}.csv")), &reports)?;
    }
    println!("csv files in {}", out.display());
    Ok(())
}
