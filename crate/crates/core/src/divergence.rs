//! KL and JS divergences between next-token distributions and between
//! language models on a prompt set.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{encode_prompt, greedy_generate, BoundModel, ParameterSet, TokenDistribution};

/// Lower bound applied to the candidate distribution inside KL.
pub const EPSILON_FLOOR: f64 = 1e-12;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Js,
}

impl DivergenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Js => "js",
        }
    }

    pub fn eval(self, mu: &[f64], nu: &[f64]) -> Result<f64> {
        match self {
            DivergenceKind::Kl => kl(mu, nu),
            DivergenceKind::Js => js(mu, nu),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "js" => Ok(DivergenceKind::Js),
            other => Err(Error::contract(format!("unknown divergence `{other}`"))),
        }
    }
}

fn check_pair(mu: &[f64], nu: &[f64]) -> Result<()> {
    if mu.len() != nu.len() || mu.is_empty() {
        return Err(Error::contract(format!(
            "distributions of length {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    if mu.iter().chain(nu).any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::contract("distribution has negative or non-finite entries"));
    }
    Ok(())
}

/// The candidate after flooring at [`EPSILON_FLOOR`]; renormalized only when
/// some entry was raised.
fn floored(nu: &[f64]) -> (Vec<f64>, bool) {
    let raised = nu.iter().any(|&q| q < EPSILON_FLOOR);
    if !raised {
        return (nu.to_vec(), false);
    }
    let mut out: Vec<f64> = nu.iter().map(|&q| q.max(EPSILON_FLOOR)).collect();
    let z: f64 = out.iter().sum();
    for q in &mut out {
        *q /= z;
    }
    (out, true)
}

/// `KL(mu || nu) = sum mu(i) ln(mu(i) / nu(i))` in nats, with `nu` floored.
pub fn kl(mu: &[f64], nu: &[f64]) -> Result<f64> {
    check_pair(mu, nu)?;
    let (q, _) = floored(nu);
    Ok(kl_terms(mu, &q).max(0.0))
}

fn kl_terms(mu: &[f64], q: &[f64]) -> f64 {
    mu.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats; symmetric and bounded by ln 2.
pub fn js(mu: &[f64], nu: &[f64]) -> Result<f64> {
    check_pair(mu, nu)?;
    let m: Vec<f64> = mu.iter().zip(nu).map(|(&p, &q)| 0.5 * (p + q)).collect();
    let (m, _) = floored(&m);
    let value = 0.5 * kl_terms(mu, &m) + 0.5 * kl_terms(nu, &m);
    Ok(value.clamp(0.0, std::f64::consts::LN_2))
}

/// Divergence of `reference` from `softmax(logits)` together with its
/// gradient with respect to the logits.
pub fn divergence_and_logit_grad(
    kind: DivergenceKind,
    reference: &[f64],
    logits: &[f64],
) -> (f64, Vec<f64>) {
    let q = TokenDistribution::from_logits(logits).into_probs();
    let (value, dq) = match kind {
        DivergenceKind::Kl => {
            let (qf, raised) = floored(&q);
            let value = kl_terms(reference, &qf).max(0.0);
            // d/dq_i of -sum p ln(max(q, eps)) + ln Z, where Z = 1 when no
            // entry was floored.
            let z: f64 = if raised {
                q.iter().map(|&x| x.max(EPSILON_FLOOR)).sum()
            } else {
                1.0
            };
            let dq = reference
                .iter()
                .zip(&q)
                .map(|(&p, &qi)| {
                    if qi >= EPSILON_FLOOR || !raised {
                        let data = if p > 0.0 { -p / qi } else { 0.0 };
                        data + if raised { 1.0 / z } else { 0.0 }
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>();
            (value, dq)
        }
        DivergenceKind::Js => {
            let value = js(reference, &q).unwrap_or(f64::NAN);
            let dq = reference
                .iter()
                .zip(&q)
                .map(|(&p, &qi)| {
                    if qi > 0.0 {
                        0.5 * (qi / (0.5 * (p + qi))).ln()
                    } else {
                        0.0
                    }
                })
                .collect();
            (value, dq)
        }
    };
    (value, softmax_backward(&q, &dq))
}

/// Entropy of `softmax(logits)` and its gradient with respect to the logits.
pub fn entropy_and_logit_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let q = TokenDistribution::from_logits(logits).into_probs();
    let value: f64 = q.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    let dq: Vec<f64> = q
        .iter()
        .map(|&x| if x > 0.0 { -x.ln() - 1.0 } else { 0.0 })
        .collect();
    (value, softmax_backward(&q, &dq))
}

/// Chain rule through softmax: `dz = q * (dq - <q, dq>)`.
fn softmax_backward(q: &[f64], dq: &[f64]) -> Vec<f64> {
    let inner: f64 = q.iter().zip(dq).map(|(a, b)| a * b).sum();
    q.iter().zip(dq).map(|(&qi, &gi)| qi * (gi - inner)).collect()
}

/// Greedy continuation of one prompt by a reference model together with
/// the distribution stored at every step. Depends only on the reference, so
/// it can be computed once and reused for every candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    pub prompt_tokens: Vec<usize>,
    pub generated: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
}

impl ReferenceTrajectory {
    pub fn new(reference: &ParameterSet, prompt: &str, max_new_tokens: usize) -> Result<Self> {
        let prompt_tokens = encode_prompt(prompt.as_bytes());
        let g = greedy_generate(reference, &prompt_tokens, max_new_tokens)?;
        Ok(Self {
            prompt_tokens,
            generated: g.tokens,
            distributions: g
                .distributions
                .into_iter()
                .map(TokenDistribution::into_probs)
                .collect(),
        })
    }

    /// Number of scored steps, `T_x`.
    pub fn steps(&self) -> usize {
        self.generated.len()
    }

    /// Prompt plus every generated token except the last, i.e. the single
    /// sequence whose positions predict each generated token.
    pub fn candidate_inputs(&self) -> Vec<usize> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.generated[..self.generated.len() - 1]);
        t
    }

    pub fn candidate_rows(&self) -> Vec<usize> {
        let first = self.prompt_tokens.len() - 1;
        (first..first + self.steps()).collect()
    }
}

/// Reference trajectories for every prompt, in prompt order.
pub fn reference_trajectories(
    reference: &ParameterSet,
    prompts: &[&str],
    max_new_tokens: usize,
) -> Result<Vec<ReferenceTrajectory>> {
    prompts
        .par_iter()
        .map(|p| ReferenceTrajectory::new(reference, p, max_new_tokens))
        .collect()
}

/// Records on `tape` the mean per-token divergence between a stored
/// reference trajectory and the bound candidate, and returns the scalar.
pub fn record_trajectory_divergence(
    tape: &mut Tape,
    candidate: &BoundModel,
    trajectory: &ReferenceTrajectory,
    kind: DivergenceKind,
) -> Result<Var> {
    let logits = candidate.logits_at(
        tape,
        &trajectory.candidate_inputs(),
        &trajectory.candidate_rows(),
    )?;
    let per_token = tape.row_functional(logits, |r, row| {
        divergence_and_logit_grad(kind, &trajectory.distributions[r], row)
    })?;
    tape.mean(per_token)
}

/// Per-token divergences of `candidate` along a stored trajectory.
pub fn trajectory_divergences(
    candidate: &ParameterSet,
    trajectory: &ReferenceTrajectory,
    kind: DivergenceKind,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, candidate, false)?;
    let logits = model.logits_at(
        &mut tape,
        &trajectory.candidate_inputs(),
        &trajectory.candidate_rows(),
    )?;
    let value = tape.value(logits);
    (0..trajectory.steps())
        .map(|r| {
            let q = TokenDistribution::from_logits(value.row(r)).into_probs();
            kind.eval(&trajectory.distributions[r], &q)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: DivergenceKind,
    pub max_new_tokens: usize,
    pub epsilon_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleDivergence {
    pub example_id: usize,
    pub per_token: Vec<f64>,
    pub steps: usize,
}

impl ExampleDivergence {
    pub fn mean(&self) -> f64 {
        self.per_token.iter().sum::<f64>() / self.steps as f64
    }
}

/// Sequence-level divergence of a candidate from a reference on a prompt
/// set: the mean over prompts of the mean over generated tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub per_example: Vec<ExampleDivergence>,
    pub estimator_config: EstimatorConfig,
}

/// Estimates `D_X(reference || candidate)`.
pub fn sequence_divergence(
    reference: &ParameterSet,
    candidate: &ParameterSet,
    prompts: &[&str],
    kind: DivergenceKind,
    max_new_tokens: usize,
) -> Result<DivergenceEstimate> {
    reference.check_compatible(candidate)?;
    if prompts.is_empty() {
        return Err(Error::contract("sequence divergence needs at least one prompt"));
    }
    let trajectories = reference_trajectories(reference, prompts, max_new_tokens)?;
    divergence_from_trajectories(candidate, &trajectories, kind, max_new_tokens)
}

/// Sequence divergence against precomputed reference trajectories.
pub fn divergence_from_trajectories(
    candidate: &ParameterSet,
    trajectories: &[ReferenceTrajectory],
    kind: DivergenceKind,
    max_new_tokens: usize,
) -> Result<DivergenceEstimate> {
    if trajectories.is_empty() {
        return Err(Error::contract("sequence divergence needs at least one prompt"));
    }
    let per_example: Vec<ExampleDivergence> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let per_token = trajectory_divergences(candidate, t, kind)?;
            Ok(ExampleDivergence {
                example_id: i,
                steps: per_token.len(),
                per_token,
            })
        })
        .collect::<Result<_>>()?;
    let value =
        per_example.iter().map(ExampleDivergence::mean).sum::<f64>() / per_example.len() as f64;
    Ok(DivergenceEstimate {
        value,
        per_example,
        estimator_config: EstimatorConfig {
            kind,
            max_new_tokens,
            epsilon_floor: EPSILON_FLOOR,
        },
    })
}

/// Matrix of `D_{X_i}(theta_i || theta_j)`: rows are reference tasks, columns
/// candidate tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub task_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Pairwise divergence heatmap between fine-tuned models, each row using
/// the reference task's prompts.
pub fn divergence_heatmap(
    task_ids: &[String],
    models: &[ParameterSet],
    prompts: &[Vec<&str>],
    kind: DivergenceKind,
    max_new_tokens: usize,
) -> Result<Heatmap> {
    if task_ids.len() != models.len() || models.len() != prompts.len() {
        return Err(Error::contract("heatmap needs one model and prompt set per task"));
    }
    let mut values = Vec::with_capacity(models.len());
    for (i, reference) in models.iter().enumerate() {
        let traj = reference_trajectories(reference, &prompts[i], max_new_tokens)?;
        let row = models
            .iter()
            .map(|cand| Ok(divergence_from_trajectories(cand, &traj, kind, max_new_tokens)?.value))
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    Ok(Heatmap {
        task_ids: task_ids.to_vec(),
        values,
    })
}

impl Heatmap {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["reference".to_string()];
        header.extend(self.task_ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.task_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
