//! Model merging: task arithmetic, averaging, SLERP, Multi-SLERP, TIES, the
//! Kracher mean, and coefficient optimization by divergence or entropy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::divergence::{
    entropy_and_logit_grad, record_trajectory_divergence, reference_trajectories,
    DivergenceKind, ReferenceTrajectory, DEFAULT_MAX_NEW_TOKENS,
};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ParameterSet};
use crate::rng;
use crate::train::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeLevel {
    Task,
    Layer,
}

impl MergeLevel {
    pub fn name(self) -> &'static str {
        match self {
            MergeLevel::Task => "task",
            MergeLevel::Layer => "layer",
        }
    }
}

impl fmt::Display for MergeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(MergeLevel::Task),
            "layer" => Ok(MergeLevel::Layer),
            other => Err(Error::contract(format!("unknown merge level `{other}`"))),
        }
    }
}

/// Merging coefficients: one per task, or one per (task, layer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeCoefficients {
    pub level: MergeLevel,
    pub task_ids: Vec<String>,
    /// `values[t]` holds one entry at task level and one per layer at layer
    /// level.
    pub values: Vec<Vec<f64>>,
}

impl MergeCoefficients {
    pub fn uniform(level: MergeLevel, task_ids: &[String], n_layers: usize, value: f64) -> Self {
        let width = match level {
            MergeLevel::Task => 1,
            MergeLevel::Layer => n_layers,
        };
        Self {
            level,
            task_ids: task_ids.to_vec(),
            values: vec![vec![value; width]; task_ids.len()],
        }
    }

    pub fn task_level(task_ids: &[String], values: &[f64]) -> Self {
        Self {
            level: MergeLevel::Task,
            task_ids: task_ids.to_vec(),
            values: values.iter().map(|&v| vec![v]).collect(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.values.len()
    }

    /// Coefficient of task `t` on layer `layer`.
    pub fn get(&self, t: usize, layer: usize) -> f64 {
        match self.level {
            MergeLevel::Task => self.values[t][0],
            MergeLevel::Layer => self.values[t][layer],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for row in &mut self.values {
            for v in row {
                *v = *it.next().expect("flat length matches");
            }
        }
    }

    fn validate(&self, n_tasks: usize, n_layers: usize) -> Result<()> {
        if self.values.len() != n_tasks {
            return Err(Error::contract(format!(
                "{} coefficient rows for {n_tasks} task vectors",
                self.values.len()
            )));
        }
        let width = match self.level {
            MergeLevel::Task => 1,
            MergeLevel::Layer => n_layers,
        };
        if self.values.iter().any(|r| r.len() != width) {
            return Err(Error::contract(format!(
                "{} level needs {width} coefficients per task",
                self.level
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite merge coefficient"));
        }
        Ok(())
    }
}

fn check_all_compatible(base: &ParameterSet, others: &[ParameterSet]) -> Result<()> {
    others.iter().try_for_each(|o| base.check_compatible(o))
}

/// `base + sum_t coeffs[t] * task_vectors[t]`, per layer at layer level.
pub fn apply_task_arithmetic(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    coeffs: &MergeCoefficients,
) -> Result<ParameterSet> {
    check_all_compatible(base, task_vectors)?;
    let n_layers = base.layers().len();
    coeffs.validate(task_vectors.len(), n_layers)?;
    let mut out = base.clone();
    for (t, tv) in task_vectors.iter().enumerate() {
        match coeffs.level {
            MergeLevel::Task => out.axpy_in_place(tv, coeffs.values[t][0], None),
            MergeLevel::Layer => {
                for l in 0..n_layers {
                    out.axpy_in_place(tv, coeffs.values[t][l], Some(l));
                }
            }
        }
    }
    if out.tensors().any(|(_, _, t)| !t.all_finite()) {
        return Err(Error::numeric("task arithmetic produced a non-finite value"));
    }
    Ok(out)
}

/// Elementwise mean of the checkpoints.
pub fn model_average(checkpoints: &[ParameterSet]) -> Result<ParameterSet> {
    if checkpoints.len() < 2 {
        return Err(Error::contract("averaging needs at least two checkpoints"));
    }
    check_all_compatible(&checkpoints[0], &checkpoints[1..])?;
    let n = checkpoints.len() as f64;
    let mut sum = checkpoints[0].clone();
    for c in &checkpoints[1..] {
        sum.axpy_in_place(c, 1.0, None);
    }
    sum.map_layers(|_, v| v / n)
}

/// [`kracher_mean`] on plain vectors.
pub fn kracher_mean_flat(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::contract("Kracher mean of an empty set"))?;
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::contract("Kracher mean of vectors with different lengths"));
    }
    let n = vectors.len() as f64;
    Ok((0..first.len())
        .map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / n)
        .collect())
}

fn flat_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn flat_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weights on the normalized task vectors: `sin((1-t)W)/sin W` and
/// `sin(tW)/sin W`, with linear weights when the angle `W` is below 1e-8.
pub fn slerp_weights(tau1: &[f64], tau2: &[f64], t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("slerp t = {t} outside [0, 1]")));
    }
    let (n1, n2) = (flat_norm(tau1), flat_norm(tau2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::contract("slerp needs nonzero task vectors"));
    }
    let cos = (flat_dot(tau1, tau2) / (n1 * n2)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega < 1e-8 {
        return Ok((1.0 - t, t));
    }
    let s = omega.sin();
    Ok((((1.0 - t) * omega).sin() / s, (t * omega).sin() / s))
}

/// `base + a * tau1/|tau1| + b * tau2/|tau2|` with the SLERP weights.
pub fn slerp_merge(
    base: &ParameterSet,
    tau1: &ParameterSet,
    tau2: &ParameterSet,
    t: f64,
) -> Result<ParameterSet> {
    check_all_compatible(base, &[tau1.clone(), tau2.clone()])?;
    let (f1, f2) = (tau1.flatten(), tau2.flatten());
    let (a, b) = slerp_weights(&f1, &f2, t)?;
    let coeffs = MergeCoefficients::task_level(
        &["tau1".to_string(), "tau2".to_string()],
        &[a / flat_norm(&f1), b / flat_norm(&f2)],
    );
    apply_task_arithmetic(base, &[tau1.clone(), tau2.clone()], &coeffs)
}

const FRECHET_TOL: f64 = 1e-10;
const FRECHET_MAX_ITERS: usize = 1000;

/// Weighted Frechet mean of unit vectors on the hypersphere, by repeated
/// averaging in the tangent space.
pub fn spherical_weighted_mean(units: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let dim = units[0].len();
    let mut x = vec![0.0; dim];
    for (u, &w) in units.iter().zip(weights) {
        for (xi, ui) in x.iter_mut().zip(u) {
            *xi += w * ui;
        }
    }
    let n = flat_norm(&x);
    if n < 1e-12 {
        return Err(Error::Convergence(
            "weighted mean direction vanishes (antipodal task vectors)".into(),
        ));
    }
    x.iter_mut().for_each(|v| *v /= n);
    for _ in 0..FRECHET_MAX_ITERS {
        let mut step = vec![0.0; dim];
        for (u, &w) in units.iter().zip(weights) {
            let cos = flat_dot(&x, u).clamp(-1.0, 1.0);
            let theta = cos.acos();
            if theta < 1e-15 {
                continue;
            }
            let scale = w * theta / theta.sin();
            for ((s, ui), xi) in step.iter_mut().zip(u).zip(&x) {
                *s += scale * (ui - cos * xi);
            }
        }
        let len = flat_norm(&step);
        if len < FRECHET_TOL {
            return Ok(x);
        }
        let (c, s) = (len.cos(), len.sin() / len);
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi = c * *xi + s * si;
        }
        let n = flat_norm(&x);
        x.iter_mut().for_each(|v| *v /= n);
    }
    Err(Error::Convergence(format!(
        "spherical mean did not converge in {FRECHET_MAX_ITERS} iterations"
    )))
}

/// Spherical mean of the normalized task vectors, rescaled by the weighted
/// mean of their norms.
pub fn multi_slerp_merge(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    weights: &[f64],
) -> Result<ParameterSet> {
    check_all_compatible(base, task_vectors)?;
    if task_vectors.is_empty() || weights.len() != task_vectors.len() {
        return Err(Error::contract("one weight per task vector required"));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract("multi-slerp weights must lie on the simplex"));
    }
    let flats: Vec<Vec<f64>> = task_vectors.iter().map(ParameterSet::flatten).collect();
    let norms: Vec<f64> = flats.iter().map(|f| flat_norm(f)).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::contract("multi-slerp needs nonzero task vectors"));
    }
    let units: Vec<Vec<f64>> = flats
        .iter()
        .zip(&norms)
        .map(|(f, n)| f.iter().map(|v| v / n).collect())
        .collect();
    let direction = spherical_weighted_mean(&units, weights)?;
    let radius: f64 = weights.iter().zip(&norms).map(|(w, n)| w * n).sum();
    let merged: Vec<f64> = base
        .flatten()
        .iter()
        .zip(&direction)
        .map(|(b, d)| b + radius * d)
        .collect();
    base.with_flat(&merged)
}

/// Trim, elect sign, disjoint mean, on flat vectors. Returns the merged
/// update before scaling.
pub fn ties_vector(task_vectors: &[Vec<f64>], mask_rate: f64) -> Result<Vec<f64>> {
    if !(mask_rate > 0.0 && mask_rate <= 1.0) {
        return Err(Error::contract(format!("mask rate {mask_rate} outside (0, 1]")));
    }
    let dim = task_vectors.first().map_or(0, Vec::len);
    let keep = ((mask_rate * dim as f64).round() as usize).clamp(1, dim.max(1));
    let trimmed: Vec<Vec<f64>> = task_vectors
        .iter()
        .map(|v| {
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
            let mut out = vec![0.0; v.len()];
            for &i in &order[..keep.min(v.len())] {
                out[i] = v[i];
            }
            out
        })
        .collect();
    let mut merged = vec![0.0; dim];
    for (i, m) in merged.iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|v| v[i]).sum();
        if total == 0.0 {
            continue;
        }
        let sign = total.signum();
        let (mut sum, mut count) = (0.0, 0usize);
        for v in &trimmed {
            if v[i] != 0.0 && v[i].signum() == sign {
                sum += v[i];
                count += 1;
            }
        }
        if count > 0 {
            *m = sum / count as f64;
        }
    }
    Ok(merged)
}

/// TIES merging: `base + lambda * ties_vector(...)`.
pub fn ties_merge(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    mask_rate: f64,
    lambda: f64,
) -> Result<ParameterSet> {
    check_all_compatible(base, task_vectors)?;
    let flats: Vec<Vec<f64>> = task_vectors.iter().map(ParameterSet::flatten).collect();
    let merged = ties_vector(&flats, mask_rate)?;
    let out: Vec<f64> = base
        .flatten()
        .iter()
        .zip(&merged)
        .map(|(b, m)| b + lambda * m)
        .collect();
    base.with_flat(&out)
}

/// The minimizer of `sum_t |tau - tau_t|^2`: the arithmetic mean.
pub fn kracher_mean(task_vectors: &[ParameterSet]) -> Result<ParameterSet> {
    let first = task_vectors
        .first()
        .ok_or_else(|| Error::contract("Kracher mean of an empty set"))?;
    check_all_compatible(first, &task_vectors[1..])?;
    let n = task_vectors.len() as f64;
    let mut sum = first.zeros_like();
    for tv in task_vectors {
        sum.axpy_in_place(tv, 1.0, None);
    }
    sum.map_layers(|_, v| v / n)
}

/// Hyperparameters of a coefficient optimization run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub init: f64,
    pub epochs: usize,
    /// Prompts drawn from each task per iteration.
    pub batch_per_task: usize,
    /// Merging prompts per task.
    pub dataset_size: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Settings of the divergence-guided method.
    pub fn divergence(level: MergeLevel) -> Self {
        Self {
            learning_rate: 1e-2,
            init: 0.5,
            epochs: 4,
            batch_per_task: 4,
            dataset_size: match level {
                MergeLevel::Task => 200,
                MergeLevel::Layer => 400,
            },
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
        }
    }

    /// Settings of the entropy-minimization baseline.
    pub fn entropy_min(level: MergeLevel, generation: bool) -> Self {
        Self {
            learning_rate: if generation { 1e-2 } else { 1e-3 },
            epochs: 5,
            ..Self::divergence(level)
        }
    }
}

/// State of one optimization iteration: the loss at `coefficients`, which
/// are the values before that iteration's update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: f64,
    pub coefficients: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub coefficients: MergeCoefficients,
    pub log: Vec<IterationLog>,
    /// Objective at the final coefficients over the full merging dataset.
    pub final_loss: f64,
}

/// Reference trajectories of each fine-tuned model on its own merging
/// prompts; reusable across every optimization that includes the task.
#[derive(Clone, Debug)]
pub struct TaskReference {
    pub task_id: String,
    pub max_new_tokens: usize,
    pub trajectories: Vec<ReferenceTrajectory>,
}

impl TaskReference {
    pub fn new(
        task_id: &str,
        finetuned: &ParameterSet,
        prompts: &[&str],
        max_new_tokens: usize,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::contract(format!("task `{task_id}` has no merging prompts")));
        }
        Ok(Self {
            task_id: task_id.to_string(),
            max_new_tokens,
            trajectories: reference_trajectories(finetuned, prompts, max_new_tokens)?,
        })
    }
}

/// Summed per-task divergence of the merged model over the given trajectory
/// subsets, and its gradient with respect to the coefficients (flat, in
/// [`MergeCoefficients::flat`] order).
pub fn divergence_loss_and_grad(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    coeffs: &MergeCoefficients,
    batches: &[Vec<&ReferenceTrajectory>],
    kind: DivergenceKind,
) -> Result<(f64, Vec<f64>)> {
    let merged = apply_task_arithmetic(base, task_vectors, coeffs)?;
    let jobs: Vec<(usize, &ReferenceTrajectory)> = batches
        .iter()
        .enumerate()
        .flat_map(|(t, b)| b.iter().map(move |tr| (t, *tr)))
        .collect();
    let results: Vec<(f64, Vec<Vec<f64>>)> = jobs
        .par_iter()
        .map(|&(t, tr)| {
            let weight = 1.0 / batches[t].len() as f64;
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &merged, true)?;
            let loss = record_trajectory_divergence(&mut tape, &model, tr, kind)?;
            let value = tape.value(loss).item()?;
            let mut grads = tape.backward(loss)?;
            let g = model.gradients(&mut grads, &merged)?;
            let dots = task_vectors
                .iter()
                .map(|tv| g.layer_dots(tv).iter().map(|d| d * weight).collect())
                .collect();
            Ok((value * weight, dots))
        })
        .collect::<Result<_>>()?;
    reduce_coefficient_grads(coeffs, task_vectors.len(), base.layers().len(), &results)
}

fn reduce_coefficient_grads(
    coeffs: &MergeCoefficients,
    n_tasks: usize,
    n_layers: usize,
    results: &[(f64, Vec<Vec<f64>>)],
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut layer_grads = vec![vec![0.0; n_layers]; n_tasks];
    for (value, dots) in results {
        loss += value;
        for (acc, d) in layer_grads.iter_mut().zip(dots) {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric("merging loss is not finite"));
    }
    let grad = match coeffs.level {
        MergeLevel::Task => layer_grads.iter().map(|l| l.iter().sum()).collect(),
        MergeLevel::Layer => layer_grads.into_iter().flatten().collect(),
    };
    Ok((loss, grad))
}

/// Summed per-task divergence loss without gradients.
pub fn divergence_loss(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    coeffs: &MergeCoefficients,
    references: &[TaskReference],
    kind: DivergenceKind,
) -> Result<f64> {
    let merged = apply_task_arithmetic(base, task_vectors, coeffs)?;
    let mut total = 0.0;
    for r in references {
        let est = crate::divergence::divergence_from_trajectories(
            &merged,
            &r.trajectories,
            kind,
            r.max_new_tokens,
        )?;
        total += est.value;
    }
    Ok(total)
}

/// Seeded per-epoch batches: for every iteration, the indices drawn from
/// each task.
fn epoch_batches(
    counts: &[usize],
    batch: usize,
    epoch: usize,
    seed: u64,
) -> Vec<Vec<Vec<usize>>> {
    let per_epoch = counts
        .iter()
        .map(|&c| c.div_ceil(batch))
        .min()
        .unwrap_or(0);
    let orders: Vec<Vec<usize>> = counts
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            let mut o: Vec<usize> = (0..c).collect();
            o.shuffle(&mut rng::substream(seed, &format!("merge-batches/{epoch}/{t}")));
            o
        })
        .collect();
    (0..per_epoch)
        .map(|it| {
            orders
                .iter()
                .map(|o| {
                    let start = (it * batch) % o.len();
                    (0..batch.min(o.len())).map(|k| o[(start + k) % o.len()]).collect()
                })
                .collect()
        })
        .collect()
}

/// Minimizes `sum_t D_{X_t}(theta_t || merged(coeffs))` over the coefficients
/// with Adam, differentiating only through the merged model.
pub fn optimize_divergence_coeffs(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    references: &[TaskReference],
    kind: DivergenceKind,
    level: MergeLevel,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    check_references(task_vectors, references)?;
    let task_ids: Vec<String> = references.iter().map(|r| r.task_id.clone()).collect();
    let counts: Vec<usize> = references.iter().map(|r| r.trajectories.len()).collect();
    run_optimizer(base, &task_ids, &counts, level, config, |coeffs, batch| {
        let picked: Vec<Vec<&ReferenceTrajectory>> = references
            .iter()
            .zip(batch)
            .map(|(r, idx)| idx.iter().map(|&i| &r.trajectories[i]).collect())
            .collect();
        divergence_loss_and_grad(base, task_vectors, coeffs, &picked, kind)
    }, |coeffs| divergence_loss(base, task_vectors, coeffs, references, kind))
}

fn check_references(task_vectors: &[ParameterSet], references: &[TaskReference]) -> Result<()> {
    if task_vectors.is_empty() {
        return Err(Error::contract("no task vectors to merge"));
    }
    if references.len() != task_vectors.len() {
        return Err(Error::contract("one prompt set per task vector required"));
    }
    if references.iter().any(|r| r.trajectories.is_empty()) {
        return Err(Error::contract("empty merging dataset"));
    }
    Ok(())
}

fn run_optimizer<F, G>(
    base: &ParameterSet,
    task_ids: &[String],
    counts: &[usize],
    level: MergeLevel,
    config: &OptimizerConfig,
    mut loss_and_grad: F,
    final_loss: G,
) -> Result<OptimizationResult>
where
    F: FnMut(&MergeCoefficients, &[Vec<usize>]) -> Result<(f64, Vec<f64>)>,
    G: FnOnce(&MergeCoefficients) -> Result<f64>,
{
    let mut coeffs =
        MergeCoefficients::uniform(level, task_ids, base.layers().len(), config.init);
    let mut flat = coeffs.flat();
    let mut adam = Adam::new(flat.len(), AdamConfig::with_learning_rate(config.learning_rate));
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        for batch in epoch_batches(counts, config.batch_per_task, epoch, config.seed) {
            let (loss, grad) = loss_and_grad(&coeffs, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite merging loss at iteration {}",
                    log.len()
                )));
            }
            log.push(IterationLog {
                iteration: log.len(),
                loss,
                coefficients: coeffs.values.clone(),
            });
            adam.step(&mut flat, &grad)?;
            coeffs.set_flat(&flat);
        }
    }
    let final_loss = final_loss(&coeffs)?;
    Ok(OptimizationResult {
        coefficients: coeffs,
        log,
        final_loss,
    })
}

/// Mean prediction entropy of the merged model along its own greedy
/// continuations of `prompts`, with the gradient in the coefficients.
pub fn entropy_loss_and_grad(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    coeffs: &MergeCoefficients,
    prompts: &[Vec<&str>],
    max_new_tokens: usize,
) -> Result<(f64, Vec<f64>)> {
    let merged = apply_task_arithmetic(base, task_vectors, coeffs)?;
    let jobs: Vec<(usize, &str)> = prompts
        .iter()
        .enumerate()
        .flat_map(|(t, b)| b.iter().map(move |p| (t, *p)))
        .collect();
    let results: Vec<(f64, Vec<Vec<f64>>)> = jobs
        .par_iter()
        .map(|&(t, prompt)| {
            let weight = 1.0 / prompts[t].len() as f64;
            let own = ReferenceTrajectory::new(&merged, prompt, max_new_tokens)?;
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &merged, true)?;
            let logits =
                model.logits_at(&mut tape, &own.candidate_inputs(), &own.candidate_rows())?;
            let per_token = tape.row_functional(logits, |_, row| entropy_and_logit_grad(row))?;
            let loss = tape.mean(per_token)?;
            let value = tape.value(loss).item()?;
            let mut grads = tape.backward(loss)?;
            let g = model.gradients(&mut grads, &merged)?;
            let dots = task_vectors
                .iter()
                .map(|tv| g.layer_dots(tv).iter().map(|d| d * weight).collect())
                .collect();
            Ok((value * weight, dots))
        })
        .collect::<Result<_>>()?;
    reduce_coefficient_grads(coeffs, task_vectors.len(), base.layers().len(), &results)
}

/// Entropy-minimization baseline: the same loop as the divergence-guided
/// optimizer with the merged model's own prediction entropy as the loss.
pub fn entropy_min_coeffs(
    base: &ParameterSet,
    task_vectors: &[ParameterSet],
    task_ids: &[String],
    prompts: &[Vec<&str>],
    level: MergeLevel,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    if prompts.len() != task_vectors.len() || task_ids.len() != task_vectors.len() {
        return Err(Error::contract("one prompt set per task vector required"));
    }
    if prompts.iter().any(Vec::is_empty) {
        return Err(Error::contract("empty merging dataset"));
    }
    let counts: Vec<usize> = prompts.iter().map(Vec::len).collect();
    run_optimizer(
        base,
        task_ids,
        &counts,
        level,
        config,
        |coeffs, batch| {
            let picked: Vec<Vec<&str>> = prompts
                .iter()
                .zip(batch)
                .map(|(p, idx)| idx.iter().map(|&i| p[i]).collect())
                .collect();
            entropy_loss_and_grad(base, task_vectors, coeffs, &picked, config.max_new_tokens)
        },
        |coeffs| {
            let all: Vec<Vec<&str>> = prompts.to_vec();
            Ok(entropy_loss_and_grad(base, task_vectors, coeffs, &all, config.max_new_tokens)?.0)
        },
    )
}

/// A merging method with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergeSpec {
    Average,
    /// Task arithmetic with one shared coefficient.
    TaskArithmetic { scale: f64 },
    Slerp { t: f64 },
    MultiSlerp { weights: Option<Vec<f64>> },
    Ties { mask_rate: f64, lambda: f64 },
    EntropyMin { level: MergeLevel, optimizer: OptimizerConfig },
    DivergenceGuided { kind: DivergenceKind, level: MergeLevel, optimizer: OptimizerConfig },
    Kracher,
}

impl MergeSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MergeSpec::Average => "average",
            MergeSpec::TaskArithmetic { .. } => "task_arithmetic",
            MergeSpec::Slerp { .. } => "slerp",
            MergeSpec::MultiSlerp { .. } => "multi_slerp",
            MergeSpec::Ties { .. } => "ties",
            MergeSpec::EntropyMin { .. } => "entropy_min",
            MergeSpec::DivergenceGuided { .. } => "divergence_guided",
            MergeSpec::Kracher => "kracher",
        }
    }

    /// Short label such as `ll-js` or `ties`, used in reports.
    pub fn label(&self) -> String {
        match self {
            MergeSpec::DivergenceGuided { kind, level, .. } => {
                format!("{}-{}", level_prefix(*level), kind)
            }
            MergeSpec::EntropyMin { level, .. } => format!("{}-entropy", level_prefix(*level)),
            other => other.name().to_string(),
        }
    }

    pub fn level(&self) -> Option<MergeLevel> {
        match self {
            MergeSpec::EntropyMin { level, .. } | MergeSpec::DivergenceGuided { level, .. } => {
                Some(*level)
            }
            _ => None,
        }
    }

    pub fn needs_data(&self) -> bool {
        self.level().is_some()
    }

    /// Default parameters for a method name; `kind` and `level` apply to
    /// the optimization-based methods.
    pub fn from_name(
        name: &str,
        kind: DivergenceKind,
        level: MergeLevel,
        generation: bool,
    ) -> Result<Self> {
        Ok(match name {
            "average" => MergeSpec::Average,
            "task_arithmetic" => MergeSpec::TaskArithmetic { scale: 1.0 },
            "slerp" => MergeSpec::Slerp { t: 0.5 },
            "multi_slerp" => MergeSpec::MultiSlerp { weights: None },
            "ties" => MergeSpec::Ties {
                mask_rate: 0.2,
                lambda: 1.0,
            },
            "entropy_min" => MergeSpec::EntropyMin {
                level,
                optimizer: OptimizerConfig::entropy_min(level, generation),
            },
            "divergence_guided" => MergeSpec::DivergenceGuided {
                kind,
                level,
                optimizer: OptimizerConfig::divergence(level),
            },
            "kracher" => MergeSpec::Kracher,
            other => return Err(Error::contract(format!("unknown merge method `{other}`"))),
        })
    }

    /// Parses labels such as `ll-js`, `tl-kl`, `ll-entropy` or a method name.
    pub fn from_label(label: &str, generation: bool) -> Result<Self> {
        let level_of = |p: &str| match p {
            "tl" => Ok(MergeLevel::Task),
            "ll" => Ok(MergeLevel::Layer),
            other => Err(Error::contract(format!("unknown level prefix `{other}`"))),
        };
        if let Some((prefix, rest)) = label.split_once('-') {
            let level = level_of(prefix)?;
            return if rest == "entropy" {
                Self::from_name("entropy_min", DivergenceKind::Js, level, generation)
            } else {
                Self::from_name("divergence_guided", rest.parse()?, level, generation)
            };
        }
        Self::from_name(label, DivergenceKind::Js, MergeLevel::Task, generation)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            MergeSpec::EntropyMin { optimizer, .. } | MergeSpec::DivergenceGuided { optimizer, .. } => {
                optimizer.seed = seed;
            }
            _ => {}
        }
        self
    }

    pub fn optimizer(&self) -> Option<&OptimizerConfig> {
        match self {
            MergeSpec::EntropyMin { optimizer, .. } | MergeSpec::DivergenceGuided { optimizer, .. } => {
                Some(optimizer)
            }
            _ => None,
        }
    }

    pub fn optimizer_mut(&mut self) -> Option<&mut OptimizerConfig> {
        match self {
            MergeSpec::EntropyMin { optimizer, .. } | MergeSpec::DivergenceGuided { optimizer, .. } => {
                Some(optimizer)
            }
            _ => None,
        }
    }
}

fn level_prefix(level: MergeLevel) -> &'static str {
    match level {
        MergeLevel::Task => "tl",
        MergeLevel::Layer => "ll",
    }
}

/// Inputs of one merge: the base, the fine-tuned models and, for the
/// optimization-based methods, the merging prompts of every task.
pub struct MergeInputs<'a> {
    pub base: &'a ParameterSet,
    pub task_ids: Vec<String>,
    pub finetuned: Vec<&'a ParameterSet>,
    pub prompts: Vec<Vec<&'a str>>,
    /// Precomputed reference trajectories, reused when present.
    pub references: Option<Vec<TaskReference>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    #[serde(skip)]
    pub params: Option<ParameterSet>,
    pub method: String,
    pub spec: MergeSpec,
    pub task_ids: Vec<String>,
    pub iterations: Vec<IterationLog>,
    pub final_coefficients: Option<MergeCoefficients>,
    pub final_loss: Option<f64>,
}

impl MergeOutcome {
    pub fn params(&self) -> &ParameterSet {
        self.params.as_ref().expect("merge outcome holds parameters")
    }

    /// Writes `merge_log.json`.
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Runs a merge described by `spec`.
pub fn merge(spec: &MergeSpec, inputs: MergeInputs<'_>) -> Result<MergeOutcome> {
    let base = inputs.base;
    let n = inputs.finetuned.len();
    if n == 0 {
        return Err(Error::contract("nothing to merge"));
    }
    let task_vectors: Vec<ParameterSet> = inputs
        .finetuned
        .iter()
        .map(|ft| crate::train::task_vector(base, ft))
        .collect::<Result<_>>()?;
    let mut outcome = MergeOutcome {
        params: None,
        method: spec.name().to_string(),
        spec: spec.clone(),
        task_ids: inputs.task_ids.clone(),
        iterations: Vec::new(),
        final_coefficients: None,
        final_loss: None,
    };
    let params = match spec {
        MergeSpec::Average => {
            let models: Vec<ParameterSet> = inputs.finetuned.iter().map(|p| (*p).clone()).collect();
            model_average(&models)?
        }
        MergeSpec::TaskArithmetic { scale } => {
            let c = MergeCoefficients::uniform(MergeLevel::Task, &inputs.task_ids, 1, *scale);
            outcome.final_coefficients = Some(c.clone());
            apply_task_arithmetic(base, &task_vectors, &c)?
        }
        MergeSpec::Slerp { t } => {
            if n != 2 {
                return Err(Error::contract("slerp merges exactly two models"));
            }
            slerp_merge(base, &task_vectors[0], &task_vectors[1], *t)?
        }
        MergeSpec::MultiSlerp { weights } => {
            let w = weights.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
            multi_slerp_merge(base, &task_vectors, &w)?
        }
        MergeSpec::Ties { mask_rate, lambda } => {
            ties_merge(base, &task_vectors, *mask_rate, *lambda)?
        }
        MergeSpec::Kracher => {
            let mean = kracher_mean(&task_vectors)?;
            let mut out = base.clone();
            out.axpy_in_place(&mean, 1.0, None);
            out
        }
        MergeSpec::DivergenceGuided {
            kind,
            level,
            optimizer,
        } => {
            let references = match inputs.references {
                Some(r) => r,
                None => inputs
                    .task_ids
                    .iter()
                    .zip(&inputs.finetuned)
                    .zip(&inputs.prompts)
                    .map(|((id, ft), p)| {
                        let p: Vec<&str> = p.iter().take(optimizer.dataset_size).copied().collect();
                        TaskReference::new(id, ft, &p, optimizer.max_new_tokens)
                    })
                    .collect::<Result<_>>()?,
            };
            let res =
                optimize_divergence_coeffs(base, &task_vectors, &references, *kind, *level, optimizer)?;
            let merged = apply_task_arithmetic(base, &task_vectors, &res.coefficients)?;
            outcome.iterations = res.log;
            outcome.final_loss = Some(res.final_loss);
            outcome.final_coefficients = Some(res.coefficients);
            merged
        }
        MergeSpec::EntropyMin { level, optimizer } => {
            let prompts: Vec<Vec<&str>> = inputs
                .prompts
                .iter()
                .map(|p| p.iter().take(optimizer.dataset_size).copied().collect())
                .collect();
            let res = entropy_min_coeffs(
                base,
                &task_vectors,
                &inputs.task_ids,
                &prompts,
                *level,
                optimizer,
            )?;
            let merged = apply_task_arithmetic(base, &task_vectors, &res.coefficients)?;
            outcome.iterations = res.log;
            outcome.final_loss = Some(res.final_loss);
            outcome.final_coefficients = Some(res.coefficients);
            merged
        }
    };
    outcome.params = Some(params);
    Ok(outcome)
}
