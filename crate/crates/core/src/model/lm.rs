use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, EOS};
use super::params::{Layer, ParameterSet};
use crate::autodiff::{softmax_into, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

const INIT_STD: f64 = 0.02;

/// Parameter names of one transformer block, in canonical order.
pub const BLOCK_PARAMS: [&str; 8] = [
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_out",
    "mlp_in",
    "mlp_in_bias",
    "mlp_out",
    "mlp_out_bias",
];

/// Seeded GPT-style initialization: N(0, 0.02) weights, residual output
/// projections scaled by 1/sqrt(2 * n_layers), zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = rng::substream(seed, "init_model");
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let (v, d, s) = (config.vocab_size, config.d_model, config.max_seq_len);
    let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();

    let mut sample = |shape: &[usize], scale: f64| -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng) * scale).collect();
        Tensor::from_parts(shape.to_vec(), data)
    };

    let mut layers = Vec::with_capacity(config.layer_count());
    layers.push(Layer {
        name: "embed".into(),
        params: vec![
            ("token_embedding".into(), sample(&[v, d], 1.0)),
            ("position_embedding".into(), sample(&[s, d], 1.0)),
        ],
    });
    for b in 0..config.n_layers {
        let params = vec![
            ("attn_q".into(), sample(&[d, d], 1.0)),
            ("attn_k".into(), sample(&[d, d], 1.0)),
            ("attn_v".into(), sample(&[d, d], 1.0)),
            ("attn_out".into(), sample(&[d, d], resid_scale)),
            ("mlp_in".into(), sample(&[d, 4 * d], 1.0)),
            ("mlp_in_bias".into(), Tensor::zeros(&[4 * d])),
            ("mlp_out".into(), sample(&[4 * d, d], resid_scale)),
            ("mlp_out_bias".into(), Tensor::zeros(&[d])),
        ];
        layers.push(Layer {
            name: format!("block{b}"),
            params,
        });
    }
    layers.push(Layer {
        name: "head".into(),
        params: vec![
            ("out_proj".into(), sample(&[d, v], 1.0)),
            ("out_bias".into(), Tensor::zeros(&[v])),
        ],
    });
    ParameterSet::new(*config, layers)
}

/// A parameter set recorded on a tape, either as leaves (to be
/// differentiated) or as constants.
pub struct BoundModel {
    config: ModelConfig,
    vars: Vec<Vec<Var>>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> Result<Self> {
        let mut vars = Vec::with_capacity(params.layers().len());
        for layer in params.layers() {
            let mut lv = Vec::with_capacity(layer.params.len());
            for (_, t) in &layer.params {
                lv.push(if trainable {
                    tape.leaf(t.clone())?
                } else {
                    tape.constant(t.clone())?
                });
            }
            vars.push(lv);
        }
        Ok(Self {
            config: *params.config(),
            vars,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &[Vec<Var>] {
        &self.vars
    }

    /// Logits `[tokens.len(), vocab]` for every position.
    pub fn logits(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let hidden = self.hidden(tape, tokens)?;
        self.head(tape, hidden)
    }

    /// Logits only for the listed positions, `[rows.len(), vocab]`.
    pub fn logits_at(&self, tape: &mut Tape, tokens: &[usize], rows: &[usize]) -> Result<Var> {
        let hidden = self.hidden(tape, tokens)?;
        let picked = tape.take_rows(hidden, rows)?;
        self.head(tape, picked)
    }

    /// Gradients for every bound parameter, shaped like `like`.
    pub fn gradients(&self, grads: &mut Gradients, like: &ParameterSet) -> Result<ParameterSet> {
        let mut out = like.clone();
        for (li, lv) in self.vars.iter().enumerate() {
            for (pi, &v) in lv.iter().enumerate() {
                let g = grads
                    .take(v)
                    .ok_or_else(|| Error::contract("model was not bound as trainable"))?;
                *out.tensor_mut(li, pi) = g;
            }
        }
        Ok(out)
    }

    fn hidden(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        let embed = &self.vars[0];
        let tok = tape.embedding_lookup(embed[0], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.embedding_lookup(embed[1], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for b in 0..cfg.n_layers {
            let p = &self.vars[1 + b];
            let h = tape.rms_norm_rows(x)?;
            let q = tape.matmul(h, p[0])?;
            let k = tape.matmul(h, p[1])?;
            let v = tape.matmul(h, p[2])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.multiply_scalar(scores, scale)?;
                let attn = tape.causal_softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = tape.matmul(merged, p[3])?;
            x = tape.add(x, attn_out)?;

            let h = tape.rms_norm_rows(x)?;
            let up = tape.matmul(h, p[4])?;
            let up = tape.add_row(up, p[5])?;
            let up = tape.relu(up)?;
            let down = tape.matmul(up, p[6])?;
            let down = tape.add_row(down, p[7])?;
            x = tape.add(x, down)?;
        }
        tape.rms_norm_rows(x)
    }

    fn head(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let head = &self.vars[self.vars.len() - 1];
        let logits = tape.matmul(hidden, head[0])?;
        tape.add_row(logits, head[1])
    }
}

/// A probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract("distribution has negative or non-finite entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("distribution sums to {total}")));
        }
        Ok(Self { probs })
    }

    /// Softmax of a logit row.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = vec![0.0; logits.len()];
        softmax_into(logits, &mut probs);
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Most likely token; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// `M(· | context; params)` for the next position.
pub fn next_token_distribution(params: &ParameterSet, context: &[usize]) -> Result<TokenDistribution> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, false)?;
    check_tokens(params.config(), context)?;
    let logits = model.logits_at(&mut tape, context, &[context.len() - 1])?;
    Ok(TokenDistribution::from_logits(tape.value(logits).row(0)))
}

/// Output of [`greedy_generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens only (the prompt is not repeated); ends with `EOS`
    /// when generation stopped on it.
    pub tokens: Vec<usize>,
    /// Distribution from which each generated token was chosen.
    pub distributions: Vec<TokenDistribution>,
}

impl Generation {
    pub fn stopped_on_eos(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Greedy decoding. Stops after emitting `EOS`, after `max_new_tokens`
/// steps, or when the context has filled `max_seq_len`.
pub fn greedy_generate(
    params: &ParameterSet,
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Generation> {
    if max_new_tokens == 0 {
        return Err(Error::contract("max_new_tokens must be at least 1"));
    }
    check_tokens(params.config(), prompt)?;
    let max_len = params.config().max_seq_len;
    let mut context = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut distributions = Vec::new();
    while tokens.len() < max_new_tokens && context.len() <= max_len {
        let dist = next_token_distribution(params, &context)?;
        let next = dist.argmax();
        distributions.push(dist);
        tokens.push(next);
        context.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(Generation {
        tokens,
        distributions,
    })
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::contract("context must contain at least one token"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::contract(format!(
            "context of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::contract(format!("token {bad} outside the vocabulary")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{encode_prompt, VOCAB_SIZE};

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&small(), 3).unwrap();
        let b = init_model(&small(), 3).unwrap();
        let c = init_model(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest_hash(), c.manifest_hash());
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn default_parameter_count_matches_closed_form() {
        // V*d + S*d + L*(12 d^2 + 5 d) + d*V + V with V=259, d=64, S=64, L=2
        let expected = 259 * 64 + 64 * 64 + 2 * (12 * 64 * 64 + 5 * 64) + 64 * 259 + 259;
        assert_eq!(expected, 136_451);
        let cfg = ModelConfig::default();
        assert_eq!(cfg.parameter_count(), expected);
        assert_eq!(init_model(&cfg, 0).unwrap().numel(), expected);
    }

    #[test]
    fn distribution_sums_to_one() {
        let params = init_model(&small(), 1).unwrap();
        let d = next_token_distribution(&params, &encode_prompt(b"hello")).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d.probs().len(), VOCAB_SIZE);
    }

    #[test]
    fn zeroed_head_gives_uniform_distribution() {
        let params = init_model(&small(), 1).unwrap();
        let head = params.layers().len() - 1;
        let zeroed = params.map_layers(|li, v| if li == head { 0.0 } else { v }).unwrap();
        let d = next_token_distribution(&zeroed, &encode_prompt(b"xyz")).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / VOCAB_SIZE as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn too_long_context_is_rejected() {
        let params = init_model(&small(), 1).unwrap();
        let ctx = vec![1; 17];
        assert!(matches!(
            next_token_distribution(&params, &ctx),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn generation_respects_bounds_and_consistency() {
        let params = init_model(&small(), 5).unwrap();
        let prompt = encode_prompt(b"ab");
        let one = greedy_generate(&params, &prompt, 1).unwrap();
        assert_eq!(one.distributions.len(), 1);

        let gen = greedy_generate(&params, &prompt, 6).unwrap();
        let mut ctx = prompt.clone();
        for (tok, dist) in gen.tokens.iter().zip(&gen.distributions) {
            assert_eq!(&next_token_distribution(&params, &ctx).unwrap(), dist);
            ctx.push(*tok);
        }
        assert_eq!(greedy_generate(&params, &prompt, 6).unwrap(), gen);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = TokenDistribution::new(vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(d.argmax(), 1);
    }
}
