//! Pretrains a small base model and fine-tunes it on one task.

use mergeforge::evaluation::{complete, perf};
use mergeforge::model::ModelConfig;
use mergeforge::tasks::{
    auxiliary_classification_suite, default_classification_suite, Split, SplitSizes,
};
use mergeforge::train::{finetune, pretrain, task_vector, TrainConfig};

fn main() -> mergeforge::Result<()> {
    let sizes = SplitSizes {
        train: 60,
        validation: 20,
        test: 40,
    };
    let targets = default_classification_suite(sizes, 1)?;
    let aux = auxiliary_classification_suite(sizes, 1)?;
    let config = ModelConfig::toy();
    println!("{} parameters", config.parameter_count());
    let pre = TrainConfig {
        learning_rate: 2e-3,
        epochs: 10,
        ..TrainConfig::default()
    };
    let (base, log) = pretrain(&config, &aux, &targets, &pre)?;
    println!("pretraining losses {:?}", log.epoch_losses);
    let task = &targets[0];
    let ft = TrainConfig {
        learning_rate: 1e-3,
        epochs: 20,
        ..TrainConfig::default()
    };
    let (tuned, log) = finetune(&base, task, &ft)?;
    println!("fine-tuning losses {:?}", log.epoch_losses);
    println!("base accuracy {:.3}", perf(&base, task, task.metric())?.value);
    println!("tuned accuracy {:.3}", perf(&tuned, task, task.metric())?.value);
    println!("task vector norm {:.4}", task_vector(&base, &tuned)?.norm());
    for e in task.split(Split::Test).take(4) {
        println!("{:?} -> {:?} (want {:?})", e.prompt, complete(&tuned, &e.prompt)?, e.answer);
    }
    Ok(())
}
