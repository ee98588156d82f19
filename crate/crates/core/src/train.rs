//! Fine-tuning and pretraining of the byte-level model.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{encode_answer, encode_prompt, init_model, BoundModel, ModelConfig, ParameterSet};
use crate::rng;
use crate::tasks::{Split, TaskDataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("Adam state and parameter lengths differ"));
        }
        self.t += 1;
        self.update(0, params, grads);
        Ok(())
    }

    /// One step on every tensor of `params`, treating the set as one flat
    /// vector in canonical order.
    pub fn step_params(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        params.check_compatible(grads)?;
        if params.numel() != self.m.len() {
            return Err(Error::contract("Adam state and parameter lengths differ"));
        }
        self.t += 1;
        let mut offset = 0;
        let shape: Vec<(usize, usize)> = params
            .layers()
            .iter()
            .enumerate()
            .flat_map(|(li, l)| (0..l.params.len()).map(move |pi| (li, pi)))
            .collect();
        for (li, pi) in shape {
            let g = grads.tensor(li, pi).data().to_vec();
            let p = params.tensor_mut(li, pi).data_mut();
            self.update(offset, p, &g);
            offset += g.len();
        }
        Ok(())
    }

    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[offset + i];
            let v = &mut self.v[offset + i];
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 40,
            seed: 0,
        }
    }
}

/// Mean per-token training loss of every epoch, in nats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Model input tokens with the positions whose next-token prediction is
/// scored and the tokens they should predict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSequence {
    pub inputs: Vec<usize>,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainingSequence {
    /// Completion-only objective: only the answer tokens (and `EOS`) are
    /// scored.
    pub fn completion(prompt: &str, answer: &str) -> Self {
        let mut inputs = encode_prompt(prompt.as_bytes());
        let targets = encode_answer(answer.as_bytes());
        let first = inputs.len() - 1;
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        Self {
            rows: (first..first + targets.len()).collect(),
            inputs,
            targets,
        }
    }

    /// Language-modelling objective over every byte of `text`.
    pub fn language_model(text: &str) -> Self {
        let tokens = encode_prompt(text.as_bytes());
        Self {
            inputs: tokens[..tokens.len() - 1].to_vec(),
            rows: (0..tokens.len() - 1).collect(),
            targets: tokens[1..].to_vec(),
        }
    }

    /// Language-modelling objective over the prompt, the answer and `EOS`.
    pub fn full(prompt: &str, answer: &str) -> Self {
        let mut tokens = encode_prompt(prompt.as_bytes());
        tokens.extend(encode_answer(answer.as_bytes()));
        Self {
            inputs: tokens[..tokens.len() - 1].to_vec(),
            rows: (0..tokens.len() - 1).collect(),
            targets: tokens[1..].to_vec(),
        }
    }

    pub fn scored_tokens(&self) -> usize {
        self.targets.len()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.inputs.len() > config.max_seq_len {
            return Err(Error::contract(format!(
                "training sequence of {} tokens exceeds max_seq_len {}",
                self.inputs.len(),
                config.max_seq_len
            )));
        }
        Ok(())
    }
}

/// Summed negative log-likelihood of the scored tokens.
pub fn sequence_nll(params: &ParameterSet, seq: &TrainingSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, false)?;
    let nll = record_nll(&mut tape, &model, seq)?;
    tape.value(nll).item()
}

/// Summed negative log-likelihood and its gradient.
pub fn sequence_nll_and_grad(
    params: &ParameterSet,
    seq: &TrainingSequence,
) -> Result<(f64, ParameterSet)> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params, true)?;
    let nll = record_nll(&mut tape, &model, seq)?;
    let value = tape.value(nll).item()?;
    let mut grads = tape.backward(nll)?;
    Ok((value, model.gradients(&mut grads, params)?))
}

fn record_nll(
    tape: &mut Tape,
    model: &BoundModel,
    seq: &TrainingSequence,
) -> Result<crate::autodiff::Var> {
    seq.check(model.config())?;
    let logits = model.logits_at(tape, &seq.inputs, &seq.rows)?;
    let logp = tape.log_softmax_rows(logits)?;
    let idx: Vec<usize> = (0..seq.targets.len()).collect();
    let picked = tape.gather_rows(logp, &idx, &seq.targets)?;
    let total = tape.sum(picked)?;
    tape.multiply_scalar(total, -1.0)
}

/// Mean per-token loss of `params` on `seqs`.
pub fn mean_token_loss(params: &ParameterSet, seqs: &[TrainingSequence]) -> Result<f64> {
    let nll: Vec<f64> = seqs
        .par_iter()
        .map(|s| sequence_nll(params, s))
        .collect::<Result<_>>()?;
    let tokens: usize = seqs.iter().map(TrainingSequence::scored_tokens).sum();
    Ok(nll.iter().sum::<f64>() / tokens.max(1) as f64)
}

/// Mini-batch Adam on the per-token mean loss of each batch. Batches are
/// drawn from a seeded shuffle each epoch; per-sequence gradients are summed
/// in batch order so results do not depend on thread scheduling.
pub fn train_sequences(
    init: &ParameterSet,
    seqs: &[TrainingSequence],
    config: &TrainConfig,
    stream: &str,
) -> Result<(ParameterSet, TrainLog)> {
    if config.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let mut params = init.clone();
    let mut log = TrainLog::default();
    if seqs.is_empty() {
        return Ok((params, log));
    }
    for s in seqs {
        s.check(init.config())?;
    }
    let mut adam = Adam::new(params.numel(), AdamConfig::with_learning_rate(config.learning_rate));
    let mut shuffle = rng::substream(config.seed, stream);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let (mut epoch_nll, mut epoch_tokens) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, ParameterSet)> = batch
                .par_iter()
                .map(|&i| sequence_nll_and_grad(&params, &seqs[i]))
                .collect::<Result<_>>()?;
            let tokens: usize = batch.iter().map(|&i| seqs[i].scored_tokens()).sum();
            let mut grad = params.zeros_like();
            let mut nll = 0.0;
            for (value, g) in &results {
                nll += value;
                grad.axpy_in_place(g, 1.0 / tokens as f64, None);
            }
            if !nll.is_finite() {
                return Err(Error::numeric(format!("loss diverged in epoch {epoch}")));
            }
            adam.step_params(&mut params, &grad)?;
            if params.tensors().any(|(_, _, t)| !t.all_finite()) {
                return Err(Error::numeric(format!("parameters diverged in epoch {epoch}")));
            }
            epoch_nll += nll;
            epoch_tokens += tokens;
            log.steps += 1;
        }
        log.epoch_losses.push(epoch_nll / epoch_tokens as f64);
    }
    Ok((params, log))
}

/// Completion-only fine-tuning on the train split of `task`.
pub fn finetune(
    base: &ParameterSet,
    task: &TaskDataset,
    config: &TrainConfig,
) -> Result<(ParameterSet, TrainLog)> {
    let seqs: Vec<TrainingSequence> = task
        .split(Split::Train)
        .map(|e| TrainingSequence::completion(&e.prompt, &e.answer))
        .collect();
    train_sequences(base, &seqs, config, &format!("finetune/{}", task.task_id))
}

/// A shared base model trained from a fresh initialization on full
/// prompt-and-answer sequences. Auxiliary tasks keep their answers; target
/// tasks have their answers permuted across examples, so the base sees each
/// target's answer format but not its input-answer rule.
pub fn pretrain(
    config: &ModelConfig,
    auxiliary: &[TaskDataset],
    targets: &[TaskDataset],
    train: &TrainConfig,
) -> Result<(ParameterSet, TrainLog)> {
    let init = init_model(config, rng::derive_seed(train.seed, "pretrain/init"))?;
    let mut seqs: Vec<TrainingSequence> = auxiliary
        .iter()
        .flat_map(|t| t.split(Split::Train))
        .map(|e| TrainingSequence::full(&e.prompt, &e.answer))
        .collect();
    for t in targets {
        let mut answers: Vec<&str> = t.split(Split::Train).map(|e| e.answer.as_str()).collect();
        answers.shuffle(&mut rng::substream(train.seed, &format!("pretrain/answers/{}", t.task_id)));
        seqs.extend(
            t.split(Split::Train)
                .zip(answers)
                .map(|(e, a)| TrainingSequence::full(&e.prompt, a)),
        );
    }
    train_sequences(&init, &seqs, train, "pretrain")
}

/// `tuned - base`, elementwise.
pub fn task_vector(base: &ParameterSet, tuned: &ParameterSet) -> Result<ParameterSet> {
    base.check_compatible(tuned)?;
    tuned.zip_map(base, |t, b| t - b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_steps_by_hand() {
        // x = 1, loss = x^2, lr 0.1.
        let mut adam = Adam::new(1, AdamConfig::with_learning_rate(0.1));
        let mut x = [1.0];
        adam.step(&mut x, &[2.0]).unwrap();
        // m_hat = 2, v_hat = 4: x = 1 - 0.1 * 2 / (2 + 1e-8)
        assert!((x[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        let x1 = x[0];
        let g = 2.0 * x1;
        adam.step(&mut x, &[g]).unwrap();
        let m = 0.9 * 0.2 + 0.1 * g;
        let v = 0.999 * 0.004 + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.998001);
        let expected = x1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn completion_sequence_layout() {
        let s = TrainingSequence::completion("ab", "c");
        // BOS a b c -> score positions 2 (predict c) and 3 (predict EOS).
        assert_eq!(s.inputs, vec![256, 97, 98, 99]);
        assert_eq!(s.rows, vec![2, 3]);
        assert_eq!(s.targets, vec![99, 257]);
    }

    #[test]
    fn language_model_sequence_layout() {
        let s = TrainingSequence::language_model("ab");
        assert_eq!(s.inputs, vec![256, 97]);
        assert_eq!(s.targets, vec![97, 98]);
    }
}
