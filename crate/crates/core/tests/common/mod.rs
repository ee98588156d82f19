#![allow(dead_code)]

use mergeforge::model::{init_model, ModelConfig, ParameterSet};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        max_seq_len: 48,
        ..ModelConfig::default()
    }
}

/// A randomly initialized model with weights scaled up so that its
/// distributions are far from uniform.
pub fn tiny_model(seed: u64) -> ParameterSet {
    init_model(&tiny_config(), seed)
        .unwrap()
        .map_layers(|_, v| v * 15.0)
        .unwrap()
}

/// `base` plus Gaussian noise of standard deviation `scale`.
pub fn perturbed(base: &ParameterSet, scale: f64, seed: u64) -> ParameterSet {
    let mut rng = mergeforge::rng::substream(seed, "test/perturb");
    base.map_layers(|_, v| {
        let n: f64 = StandardNormal.sample(&mut rng);
        v + scale * n
    })
    .unwrap()
}

pub fn simplex(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
