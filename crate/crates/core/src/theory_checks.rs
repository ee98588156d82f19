//! Executable checks of the theoretical statements behind divergence-guided
//! merging, each producing a machine-readable [`CheckReport`].

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::divergence::{
    divergence_from_trajectories, kl, reference_trajectories, DivergenceKind,
};
use crate::error::{Error, Result};
use crate::merging::kracher_mean_flat;
use crate::model::ParameterSet;
use crate::rng;
use crate::tasks::{Split, TaskDataset};

pub const DISENTANGLEMENT_EPSILON: f64 = 0.1;
pub const TV_SLACK: f64 = 1e-9;
pub const CROSS_ENTROPY_TOLERANCE: f64 = 1e-10;
pub const SPAN_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_id: String,
    pub passed: bool,
    pub measured: BTreeMap<String, f64>,
    pub tolerances: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckReport {
    fn new(check_id: &str, passed: bool) -> Self {
        Self {
            check_id: check_id.to_string(),
            passed,
            measured: BTreeMap::new(),
            tolerances: BTreeMap::new(),
            note: None,
        }
    }

    fn measure(mut self, key: impl Into<String>, value: f64) -> Self {
        self.measured.insert(key.into(), value);
        self
    }

    fn tolerance(mut self, key: &str, value: f64) -> Self {
        self.tolerances.insert(key.to_string(), value);
        self
    }
}

fn ensure_disjoint(tasks: &[&TaskDataset]) -> Result<()> {
    let mut tags = HashSet::new();
    for t in tasks {
        let tag = t.support_tag.ok_or_else(|| {
            Error::contract(format!("task {} has no support tag", t.task_id))
        })?;
        if !tags.insert(tag) {
            return Err(Error::contract(format!(
                "support tag {:?} appears in more than one task",
                tag as char
            )));
        }
        if t.examples.iter().any(|e| e.prompt.as_bytes().first() != Some(&tag)) {
            return Err(Error::contract(format!(
                "task {} has prompts outside its tagged support",
                t.task_id
            )));
        }
    }
    Ok(())
}

/// Compares a merged model with each fine-tuned model on that task's
/// support. The per-support divergence is measured on test prompts; the
/// merging loss is the sum over tasks of the same divergence on the
/// `loss_prompts` first merging prompts.
pub fn check_disentanglement(
    merged: &ParameterSet,
    finetuned: &[&ParameterSet],
    tasks: &[&TaskDataset],
    epsilon: f64,
    loss_prompts: usize,
    max_new_tokens: usize,
) -> Result<CheckReport> {
    if finetuned.len() != tasks.len() || tasks.is_empty() {
        return Err(Error::contract("one fine-tuned model per task is required"));
    }
    ensure_disjoint(tasks)?;
    let kind = DivergenceKind::Js;
    let mut per_support = Vec::with_capacity(tasks.len());
    let mut loss = 0.0;
    for (ft, task) in finetuned.iter().zip(tasks) {
        merged.check_compatible(ft)?;
        let test = reference_trajectories(ft, &task.prompts(Split::Test), max_new_tokens)?;
        per_support.push(divergence_from_trajectories(merged, &test, kind, max_new_tokens)?.value);
        let merging =
            reference_trajectories(ft, &task.merging_prompts(loss_prompts), max_new_tokens)?;
        loss += divergence_from_trajectories(merged, &merging, kind, max_new_tokens)?.value;
    }
    let max = per_support.iter().cloned().fold(0.0, f64::max);
    let mut report = CheckReport::new("disentanglement", max < epsilon)
        .measure("max_support_divergence", max)
        .measure("merging_loss", loss)
        .tolerance("epsilon", epsilon);
    for (task, d) in tasks.iter().zip(&per_support) {
        report = report.measure(format!("support_divergence/{}", task.task_id), *d);
    }
    Ok(report)
}

/// Total variation between the empirical distributions of two prompt
/// multisets.
pub fn empirical_tv(x: &[&str], x_tilde: &[&str]) -> f64 {
    let mut p: HashMap<&str, f64> = HashMap::new();
    for s in x {
        *p.entry(s).or_default() += 1.0 / x.len() as f64;
    }
    let mut q: HashMap<&str, f64> = HashMap::new();
    for s in x_tilde {
        *q.entry(s).or_default() += 1.0 / x_tilde.len() as f64;
    }
    let keys: HashSet<&str> = p.keys().chain(q.keys()).copied().collect();
    0.5 * keys
        .iter()
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

fn per_prompt_divergence<'a>(
    theta_t: &ParameterSet,
    merged: &ParameterSet,
    prompts: impl Iterator<Item = &'a str>,
    max_new_tokens: usize,
) -> Result<HashMap<&'a str, f64>> {
    let mut unique: Vec<&str> = prompts.collect();
    unique.sort_unstable();
    unique.dedup();
    let traj = reference_trajectories(theta_t, &unique, max_new_tokens)?;
    let est = divergence_from_trajectories(merged, &traj, DivergenceKind::Js, max_new_tokens)?;
    Ok(unique
        .into_iter()
        .zip(&est.per_example)
        .map(|(p, e)| (p, e.mean()))
        .collect())
}

fn tv_gap_and_bound(per_prompt: &HashMap<&str, f64>, x: &[&str], x_tilde: &[&str]) -> (f64, f64) {
    let mean = |set: &[&str]| set.iter().map(|p| per_prompt[p]).sum::<f64>() / set.len() as f64;
    let lhs = (mean(x) - mean(x_tilde)).abs();
    let rhs = 2.0 * std::f64::consts::LN_2 * empirical_tv(x, x_tilde);
    (lhs, rhs)
}

/// Checks that moving the prompt distribution from `x` to `x_tilde` changes
/// the sequence JS divergence by at most `2 ln 2 TV(x, x_tilde)`.
pub fn check_tv_bound(
    theta_t: &ParameterSet,
    merged: &ParameterSet,
    x: &[&str],
    x_tilde: &[&str],
    max_new_tokens: usize,
) -> Result<CheckReport> {
    if x.is_empty() || x_tilde.is_empty() {
        return Err(Error::contract("prompt sets must be non-empty"));
    }
    let per_prompt =
        per_prompt_divergence(theta_t, merged, x.iter().chain(x_tilde).copied(), max_new_tokens)?;
    let (lhs, rhs) = tv_gap_and_bound(&per_prompt, x, x_tilde);
    Ok(CheckReport::new("tv_bound", lhs <= rhs + TV_SLACK)
        .measure("divergence_gap", lhs)
        .measure("bound", rhs)
        .tolerance("slack", TV_SLACK))
}

/// `x` with a random `fraction` of its entries replaced by distinct
/// prompts drawn from `pool`.
pub fn perturb_prompts<'a>(
    x: &[&'a str],
    pool: &[&'a str],
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<&'a str> {
    let n_swap = ((x.len() as f64 * fraction).round() as usize).min(pool.len());
    let positions = rand::seq::index::sample(rng, x.len(), n_swap.min(x.len()));
    let fresh = rand::seq::index::sample(rng, pool.len(), n_swap);
    let mut out = x.to_vec();
    for (pos, f) in positions.iter().zip(fresh.iter()) {
        out[pos] = pool[f];
    }
    out
}

/// The TV bound on `trials` random perturbations of the validation prompts of
/// `task`, each swapping `fraction` of them for training prompts.
pub fn check_tv_bound_trials(
    theta_t: &ParameterSet,
    merged: &ParameterSet,
    task: &TaskDataset,
    trials: usize,
    fraction: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<CheckReport> {
    let x = task.prompts(Split::Validation);
    let pool = task.prompts(Split::Train);
    if x.is_empty() || trials == 0 {
        return Err(Error::contract("need validation prompts and at least one trial"));
    }
    let per_prompt =
        per_prompt_divergence(theta_t, merged, x.iter().chain(&pool).copied(), max_new_tokens)?;
    let mut r = rng::substream(seed, &format!("theory/tv/{}", task.task_id));
    let (mut violations, mut worst_gap, mut min_slack) = (0usize, 0.0f64, f64::INFINITY);
    for _ in 0..trials {
        let x_tilde = perturb_prompts(&x, &pool, fraction, &mut r);
        let (lhs, rhs) = tv_gap_and_bound(&per_prompt, &x, &x_tilde);
        if lhs > rhs + TV_SLACK {
            violations += 1;
        }
        worst_gap = worst_gap.max(lhs);
        min_slack = min_slack.min(rhs - lhs);
    }
    Ok(CheckReport::new("tv_bound_trials", violations == 0)
        .measure("trials", trials as f64)
        .measure("violations", violations as f64)
        .measure("max_divergence_gap", worst_gap)
        .measure("min_bound_minus_gap", min_slack)
        .tolerance("slack", TV_SLACK))
}

/// A point drawn uniformly from the probability simplex.
pub fn random_simplex(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(a, b)| a * b.ln())
        .sum::<f64>()
}

/// Checks `H(p, q) = H(p) + KL(p || q)` on random simplex pairs.
pub fn check_cross_entropy_identity(n_trials: usize, dim: usize, seed: u64) -> Result<CheckReport> {
    if n_trials == 0 || dim == 0 {
        return Err(Error::contract("need at least one trial of positive dimension"));
    }
    let mut r = rng::substream(seed, "theory/cross_entropy");
    let mut worst: f64 = 0.0;
    for _ in 0..n_trials {
        let p = random_simplex(&mut r, dim);
        let q = random_simplex(&mut r, dim);
        let residual = (cross_entropy(&p, &q) - entropy(&p) - kl(&p, &q)?).abs();
        worst = worst.max(residual);
    }
    Ok(CheckReport::new("cross_entropy_identity", worst < CROSS_ENTROPY_TOLERANCE)
        .measure("max_residual", worst)
        .measure("trials", n_trials as f64)
        .tolerance("residual", CROSS_ENTROPY_TOLERANCE))
}

/// Distance from `v` to the span of `basis`, by modified Gram-Schmidt with
/// dependent directions dropped.
pub fn span_residual(v: &[f64], basis: &[Vec<f64>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let scale = dot(b, b).sqrt();
        let mut u = b.clone();
        for _ in 0..2 {
            for q in &ortho {
                let c = dot(&u, q);
                u.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&u, &u).sqrt();
        if n > 1e-12 * scale && n > 0.0 {
            ortho.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    let mut r = v.to_vec();
    for _ in 0..2 {
        for q in &ortho {
            let c = dot(&r, q);
            r.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
    }
    dot(&r, &r).sqrt()
}

/// Checks that the Kracher mean of task vectors lies in their span.
pub fn check_kracher_span(task_vectors: &[Vec<f64>]) -> Result<CheckReport> {
    if task_vectors.len() < 2 {
        return Err(Error::contract("the span check needs at least two vectors"));
    }
    let mean = kracher_mean_flat(task_vectors)?;
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if task_vectors.iter().all(|v| v.iter().all(|&x| x == 0.0)) || norm == 0.0 {
        let mut report = CheckReport::new("kracher_span", true)
            .measure("relative_residual", 0.0)
            .tolerance("relative_residual", SPAN_TOLERANCE);
        report.note = Some("mean is the zero vector; the check is vacuous".to_string());
        return Ok(report);
    }
    let rel = span_residual(&mean, task_vectors) / norm;
    Ok(CheckReport::new("kracher_span", rel < SPAN_TOLERANCE)
        .measure("relative_residual", rel)
        .tolerance("relative_residual", SPAN_TOLERANCE))
}

/// The span check on `n_sets` sets of `n_vectors` Gaussian vectors of
/// dimension `dim`, reporting the worst relative residual.
pub fn check_kracher_span_trials(
    n_sets: usize,
    n_vectors: usize,
    dim: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut r = rng::substream(seed, "theory/kracher");
    let mut worst: f64 = 0.0;
    for _ in 0..n_sets {
        let vectors: Vec<Vec<f64>> = (0..n_vectors)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let report = check_kracher_span(&vectors)?;
        worst = worst.max(report.measured["relative_residual"]);
    }
    Ok(CheckReport::new("kracher_span_trials", worst < SPAN_TOLERANCE)
        .measure("sets", n_sets as f64)
        .measure("max_relative_residual", worst)
        .tolerance("relative_residual", SPAN_TOLERANCE))
}
