//! Token-level and sequence-level divergences between two models.

use mergeforge::divergence::{js, kl, sequence_divergence, DivergenceKind};
use mergeforge::model::{init_model, ModelConfig};

fn main() -> mergeforge::Result<()> {
    let p = [0.7, 0.2, 0.1];
    let q = [0.1, 0.3, 0.6];
    println!("KL(p||q) {:.6}  KL(q||p) {:.6}", kl(&p, &q)?, kl(&q, &p)?);
    println!("JS(p,q) {:.6}  ln 2 = {:.6}", js(&p, &q)?, std::f64::consts::LN_2);

    let config = ModelConfig::toy();
    let a = init_model(&config, 1)?.map_layers(|_, v| v * 10.0)?;
    let b = a.map_layers(|_, v| v * 1.05)?;
    let prompts = ["Even or odd?\n1234\nAnswer: ", "Reverse:\nab cd\nAnswer: "];
    for kind in [DivergenceKind::Kl, DivergenceKind::Js] {
        let est = sequence_divergence(&a, &b, &prompts, kind, 8)?;
        println!("{kind}: {:.6}", est.value);
        for e in &est.per_example {
            println!("  {} steps, mean {:.6}", e.steps, e.mean());
        }
    }
    Ok(())
}
