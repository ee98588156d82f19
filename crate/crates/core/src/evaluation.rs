//! Task performance, normalized performance of merged models, rank
//! correlation and combinatorial merge sweeps.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_heatmap, DivergenceKind, Heatmap};
use crate::error::{Error, Result};
use crate::model::{decode_until_eos, encode_prompt, greedy_generate, ParameterSet};
use crate::tasks::{MetricKind, Split, TaskDataset};

pub const EVAL_MAX_NEW_TOKENS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfResult {
    pub task_id: String,
    pub metric: MetricKind,
    pub value: f64,
    pub n_examples: usize,
}

/// Greedy completion of `prompt`, truncated at `EOS` and trimmed.
pub fn complete(model: &ParameterSet, prompt: &str) -> Result<String> {
    let g = greedy_generate(model, &encode_prompt(prompt.as_bytes()), EVAL_MAX_NEW_TOKENS)?;
    let bytes = decode_until_eos(&g.tokens);
    Ok(String::from_utf8_lossy(&bytes).trim().to_string())
}

/// Unigram-overlap F1 over whitespace tokens.
pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refs.is_empty() {
        return if cand.is_empty() && refs.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &refs {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &cand {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand.len() as f64;
    let r = overlap as f64 / refs.len() as f64;
    2.0 * p * r / (p + r)
}

/// Score of one completion against the reference answer.
pub fn score(metric: MetricKind, completion: &str, answer: &str) -> f64 {
    match metric {
        MetricKind::Accuracy => f64::from(u8::from(completion == answer.trim())),
        MetricKind::Rouge1 => rouge1(completion, answer),
    }
}

/// Mean score of greedy completions on the test split.
pub fn perf(model: &ParameterSet, task: &TaskDataset, metric: MetricKind) -> Result<PerfResult> {
    let examples: Vec<_> = task.split(Split::Test).collect();
    if examples.is_empty() {
        return Err(Error::contract(format!("task `{}` has no test examples", task.task_id)));
    }
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|e| Ok(score(metric, &complete(model, &e.prompt)?, &e.answer)))
        .collect::<Result<_>>()?;
    Ok(PerfResult {
        task_id: task.task_id.clone(),
        metric,
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        n_examples: scores.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnpReport {
    pub method: String,
    pub level: Option<String>,
    pub task_ids: Vec<String>,
    pub ratios: Vec<f64>,
    pub anp: f64,
}

/// Average of `merged[t] / finetuned[t]` over tasks.
pub fn anp_from_perfs(
    method: &str,
    level: Option<String>,
    merged: &[PerfResult],
    finetuned: &[PerfResult],
) -> Result<AnpReport> {
    if merged.len() != finetuned.len() || merged.is_empty() {
        return Err(Error::contract("one merged and one fine-tuned score per task"));
    }
    let mut ratios = Vec::with_capacity(merged.len());
    for (m, f) in merged.iter().zip(finetuned) {
        if f.value <= 0.0 {
            return Err(Error::Undefined(format!(
                "fine-tuned model scores 0 on task `{}`",
                f.task_id
            )));
        }
        ratios.push(m.value / f.value);
    }
    Ok(AnpReport {
        method: method.to_string(),
        level,
        task_ids: merged.iter().map(|p| p.task_id.clone()).collect(),
        anp: ratios.iter().sum::<f64>() / ratios.len() as f64,
        ratios,
    })
}

/// Average normalized performance of `merged` against each task's own
/// fine-tuned model.
pub fn anp(
    merged: &ParameterSet,
    tasks: &[&TaskDataset],
    finetuned: &[&ParameterSet],
) -> Result<AnpReport> {
    if tasks.len() != finetuned.len() {
        return Err(Error::contract("one fine-tuned model per task"));
    }
    let m: Vec<PerfResult> = tasks
        .iter()
        .map(|t| perf(merged, t, t.metric()))
        .collect::<Result<_>>()?;
    let f: Vec<PerfResult> = tasks
        .iter()
        .zip(finetuned)
        .map(|(t, ft)| perf(ft, t, t.metric()))
        .collect::<Result<_>>()?;
    anp_from_perfs("merged", None, &m, &f)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::contract("spearman needs two equal-length inputs of length >= 3"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::contract("spearman input is not finite"));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("spearman of a constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kind: DivergenceKind,
    pub heatmap: Heatmap,
    /// `perf[i][j]`: score of model j on task i.
    pub perf: Vec<Vec<f64>>,
    pub per_task: Vec<f64>,
    pub average: f64,
}

/// For every task i, the Spearman correlation between `-D_{X_i}(theta_i ||
/// theta_j)` on validation prompts and the test score of `theta_j` on task i.
pub fn divergence_perf_correlation(
    models: &[&ParameterSet],
    tasks: &[&TaskDataset],
    kind: DivergenceKind,
    max_new_tokens: usize,
) -> Result<CorrelationReport> {
    if tasks.len() < 3 || models.len() != tasks.len() {
        return Err(Error::contract("correlation needs one model per task and at least 3 tasks"));
    }
    let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let owned: Vec<ParameterSet> = models.iter().map(|m| (*m).clone()).collect();
    let prompts: Vec<Vec<&str>> = tasks.iter().map(|t| t.prompts(Split::Validation)).collect();
    let heatmap = divergence_heatmap(&ids, &owned, &prompts, kind, max_new_tokens)?;
    let perf_matrix: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| {
            models
                .iter()
                .map(|m| Ok(perf(m, t, t.metric())?.value))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    correlation_from_matrices(kind, heatmap, perf_matrix)
}

/// Correlation report from a precomputed heatmap and score matrix.
pub fn correlation_from_matrices(
    kind: DivergenceKind,
    heatmap: Heatmap,
    perf: Vec<Vec<f64>>,
) -> Result<CorrelationReport> {
    let per_task = heatmap
        .values
        .iter()
        .zip(&perf)
        .map(|(d, p)| {
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            spearman(&neg, p)
        })
        .collect::<Result<Vec<f64>>>()?;
    let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(CorrelationReport {
        kind,
        heatmap,
        perf,
        per_task,
        average,
    })
}

impl CorrelationReport {
    /// Score matrix as CSV: rows are tasks, columns are models.
    pub fn write_perf_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["task".to_string()];
        header.extend(self.heatmap.task_ids.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.heatmap.task_ids.iter().zip(&self.perf) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Pairwise cosine similarities of task vectors; the diagonal is 1.
pub fn cosine_similarity_matrix(task_vectors: &[ParameterSet]) -> Result<Vec<Vec<f64>>> {
    if task_vectors.len() < 2 {
        return Err(Error::contract("cosine matrix needs at least two vectors"));
    }
    for tv in &task_vectors[1..] {
        task_vectors[0].check_compatible(tv)?;
    }
    let norms: Vec<f64> = task_vectors.iter().map(ParameterSet::norm).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    let n = task_vectors.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = (task_vectors[i].dot(&task_vectors[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// All k-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub k: usize,
    pub experiments: Vec<AnpReport>,
    pub mean_anp: f64,
    pub ci95_margin: f64,
}

/// Mean and 1.96 standard errors of the mean.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

impl SweepReport {
    pub fn from_experiments(k: usize, experiments: Vec<AnpReport>) -> Self {
        let anps: Vec<f64> = experiments.iter().map(|e| e.anp).collect();
        let (mean_anp, ci95_margin) = mean_and_ci95(&anps);
        Self {
            k,
            experiments,
            mean_anp,
            ci95_margin,
        }
    }
}

/// Runs `experiment` on every k-subset of `n_tasks` tasks for each k in
/// `k_min..=k_max`.
pub fn merge_sweep<F>(
    n_tasks: usize,
    k_min: usize,
    k_max: usize,
    mut experiment: F,
) -> Result<Vec<SweepReport>>
where
    F: FnMut(&[usize]) -> Result<AnpReport>,
{
    if k_min < 2 || k_max > n_tasks || k_min > k_max {
        return Err(Error::contract(format!(
            "sweep range {k_min}..={k_max} outside 2..={n_tasks}"
        )));
    }
    (k_min..=k_max)
        .map(|k| {
            let experiments = combinations(n_tasks, k)
                .iter()
                .map(|combo| experiment(combo))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepReport::from_experiments(k, experiments))
        })
        .collect()
}

/// One row per experiment: method, level, tasks, per-task ratios, ANP.
pub fn write_sweep_csv(path: impl AsRef<Path>, reports: &[SweepReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "level", "k", "tasks", "ratios", "anp"])?;
    for r in reports {
        for e in &r.experiments {
            w.write_record([
                e.method.clone(),
                e.level.clone().unwrap_or_default(),
                r.k.to_string(),
                e.task_ids.join("+"),
                e.ratios
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                e.anp.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    method: &'a str,
    k: usize,
    experiments: usize,
    mean_anp: f64,
    ci95_margin: f64,
}

/// Per-k summary as a JSON array.
pub fn write_sweep_summary(path: impl AsRef<Path>, reports: &[SweepReport]) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<SweepSummary<'_>> = reports
        .iter()
        .map(|r| SweepSummary {
            method: r.experiments.first().map_or("", |e| e.method.as_str()),
            k: r.k,
            experiments: r.experiments.len(),
            mean_anp: r.mean_anp,
            ci95_margin: r.ci95_margin,
        })
        .collect();
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_edge_cases() {
        assert_eq!(rouge1("", "abc"), 0.0);
        assert_eq!(rouge1("ab cd", "ab cd"), 1.0);
        assert!((rouge1("ab", "ab cd") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_hand_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0]), vec![1.5, 3.0, 1.5]);
    }

    #[test]
    fn combination_counts() {
        assert_eq!(combinations(7, 2).len(), 21);
        assert_eq!(combinations(7, 3).len(), 35);
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn constant_anp_has_zero_margin() {
        let (m, ci) = mean_and_ci95(&[0.7, 0.7, 0.7]);
        assert!((m - 0.7).abs() < 1e-12);
        assert!(ci < 1e-12);
    }
}
