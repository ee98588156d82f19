//! Experiment plumbing shared by the command line, the examples and the
//! acceptance tests: a base model, one fine-tuned model per task, cached
//! reference trajectories, and helpers that merge and score task subsets.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::evaluation::{
    anp_from_perfs, divergence_perf_correlation, merge_sweep, perf, AnpReport,
    CorrelationReport, PerfResult, SweepReport,
};
use crate::merging::{
    apply_task_arithmetic, merge, MergeCoefficients, MergeInputs, MergeOutcome, MergeSpec,
    TaskReference,
};
use crate::model::{ModelConfig, ParameterSet};
use crate::tasks::{
    auxiliary_classification_suite, default_classification_suite, default_generation_suite,
    make_disjoint_suite_sized, SplitSizes, TaskDataset, SENTINELS,
};
use crate::train::{finetune, pretrain, task_vector, TrainConfig};

/// Everything needed to build a [`Lab`] from scratch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub sizes: SplitSizes,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sizes: SplitSizes::default(),
            pretrain: TrainConfig {
                learning_rate: 1e-3,
                epochs: 40,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 3e-4,
                epochs: 10,
                ..TrainConfig::default()
            },
            seed: 0,
        }
    }
}

impl LabConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self
    }
}

/// The seven default classification tasks with the remaining rules as
/// auxiliary pretraining data.
pub fn classification_tasks(config: &LabConfig) -> Result<(Vec<TaskDataset>, Vec<TaskDataset>)> {
    Ok((
        default_classification_suite(config.sizes, config.seed)?,
        auxiliary_classification_suite(config.sizes, config.seed)?,
    ))
}

/// The first `n_tasks` tasks of the full disjoint suite as targets and the
/// remaining ones as auxiliary pretraining data.
pub fn disjoint_tasks(
    config: &LabConfig,
    n_tasks: usize,
) -> Result<(Vec<TaskDataset>, Vec<TaskDataset>)> {
    if n_tasks == 0 || n_tasks > SENTINELS.len() {
        return Err(Error::contract(format!(
            "disjoint suites hold 1..={} tasks, asked for {n_tasks}",
            SENTINELS.len()
        )));
    }
    let mut all = make_disjoint_suite_sized(SENTINELS.len(), config.sizes, config.seed)?;
    let aux = all.split_off(n_tasks);
    Ok((all, aux))
}

/// Every task of the standard experiments.
#[derive(Clone, Debug)]
pub struct Suite {
    /// Sentinel-tagged targets with disjoint supports.
    pub disjoint: Vec<TaskDataset>,
    pub classification: Vec<TaskDataset>,
    pub generation: Vec<TaskDataset>,
    /// Tasks the base is pretrained on with their answers.
    pub auxiliary: Vec<TaskDataset>,
}

impl Suite {
    /// `n_disjoint` disjoint targets, the default classification and
    /// generation suites, and the remaining disjoint and classification
    /// tasks as auxiliary data.
    pub fn generate(config: &LabConfig, n_disjoint: usize) -> Result<Self> {
        let (disjoint, mut auxiliary) = disjoint_tasks(config, n_disjoint)?;
        let (classification, aux) = classification_tasks(config)?;
        auxiliary.extend(aux);
        Ok(Self {
            disjoint,
            classification,
            generation: default_generation_suite(config.sizes, config.seed)?,
            auxiliary,
        })
    }

    /// Every task that receives a fine-tuned model.
    pub fn targets(&self) -> Vec<TaskDataset> {
        let mut t = self.disjoint.clone();
        t.extend(self.classification.iter().cloned());
        t.extend(self.generation.iter().cloned());
        t
    }

    /// One base for every experiment of the suite.
    pub fn pretrain_base(&self, config: &LabConfig) -> Result<ParameterSet> {
        Ok(pretrain(&config.model, &self.auxiliary, &self.targets(), &config.pretrain)?.0)
    }
}

/// A base model, tasks and their fine-tuned models.
pub struct Lab {
    pub base: ParameterSet,
    pub tasks: Vec<TaskDataset>,
    pub finetuned: Vec<ParameterSet>,
    pub finetuned_perf: Vec<PerfResult>,
    references: Mutex<HashMap<(usize, usize), TaskReference>>,
}

impl Lab {
    /// Pretrains a base on `auxiliary` and `targets`, then fine-tunes one
    /// model per target.
    pub fn build(
        config: &LabConfig,
        targets: Vec<TaskDataset>,
        auxiliary: &[TaskDataset],
    ) -> Result<Self> {
        let (base, _) = pretrain(&config.model, auxiliary, &targets, &config.pretrain)?;
        Self::finetune_all(config, base, targets)
    }

    /// Fine-tunes one model per task from `base`.
    pub fn finetune_all(config: &LabConfig, base: ParameterSet, tasks: Vec<TaskDataset>) -> Result<Self> {
        let finetuned = tasks
            .iter()
            .map(|t| Ok(finetune(&base, t, &config.finetune)?.0))
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, tasks, finetuned)
    }

    pub fn new(
        base: ParameterSet,
        tasks: Vec<TaskDataset>,
        finetuned: Vec<ParameterSet>,
    ) -> Result<Self> {
        if tasks.len() != finetuned.len() || tasks.is_empty() {
            return Err(Error::contract("one fine-tuned model per task is required"));
        }
        for ft in &finetuned {
            base.check_compatible(ft)?;
        }
        let finetuned_perf = tasks
            .iter()
            .zip(&finetuned)
            .map(|(t, ft)| perf(ft, t, t.metric()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            tasks,
            finetuned,
            finetuned_perf,
            references: Mutex::new(HashMap::new()),
        })
    }

    pub fn task_ids(&self, subset: &[usize]) -> Vec<String> {
        subset.iter().map(|&i| self.tasks[i].task_id.clone()).collect()
    }

    pub fn task_vectors(&self, subset: &[usize]) -> Result<Vec<ParameterSet>> {
        subset
            .iter()
            .map(|&i| task_vector(&self.base, &self.finetuned[i]))
            .collect()
    }

    /// Reference trajectories of task `t` on its first `size` merging
    /// prompts, computed once per task and generation length.
    pub fn reference(&self, t: usize, size: usize, max_new_tokens: usize) -> Result<TaskReference> {
        let key = (t, max_new_tokens);
        {
            let cache = self.references.lock().expect("reference cache");
            if let Some(r) = cache.get(&key) {
                let available = self.tasks[t].merging_prompts(size).len();
                if r.trajectories.len() >= available {
                    let mut out = r.clone();
                    out.trajectories.truncate(available);
                    return Ok(out);
                }
            }
        }
        let task = &self.tasks[t];
        let r = TaskReference::new(
            &task.task_id,
            &self.finetuned[t],
            &task.merging_prompts(size),
            max_new_tokens,
        )?;
        self.references
            .lock()
            .expect("reference cache")
            .insert(key, r.clone());
        Ok(r)
    }

    /// Merges the fine-tuned models of `subset`.
    pub fn merge(&self, subset: &[usize], spec: &MergeSpec) -> Result<MergeOutcome> {
        if subset.is_empty() || subset.iter().any(|&i| i >= self.tasks.len()) {
            return Err(Error::contract("task subset out of range"));
        }
        let references = match spec {
            MergeSpec::DivergenceGuided { optimizer, .. } => Some(
                subset
                    .iter()
                    .map(|&t| self.reference(t, optimizer.dataset_size, optimizer.max_new_tokens))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let size = spec.optimizer().map_or(0, |o| o.dataset_size);
        merge(
            spec,
            MergeInputs {
                base: &self.base,
                task_ids: self.task_ids(subset),
                finetuned: subset.iter().map(|&i| &self.finetuned[i]).collect(),
                prompts: subset
                    .iter()
                    .map(|&i| self.tasks[i].merging_prompts(size))
                    .collect(),
                references,
            },
        )
    }

    /// Normalized performance of `merged` on the tasks of `subset`.
    pub fn score(&self, subset: &[usize], merged: &ParameterSet, spec: &MergeSpec) -> Result<AnpReport> {
        let m = subset
            .iter()
            .map(|&i| perf(merged, &self.tasks[i], self.tasks[i].metric()))
            .collect::<Result<Vec<_>>>()?;
        let f: Vec<PerfResult> = subset.iter().map(|&i| self.finetuned_perf[i].clone()).collect();
        anp_from_perfs(
            &spec.label(),
            spec.level().map(|l| l.to_string()),
            &m,
            &f,
        )
    }

    pub fn merge_and_score(
        &self,
        subset: &[usize],
        spec: &MergeSpec,
    ) -> Result<(MergeOutcome, AnpReport)> {
        let outcome = self.merge(subset, spec)?;
        let report = self.score(subset, outcome.params(), spec)?;
        Ok((outcome, report))
    }

    /// The base model scored as if it were the merge.
    pub fn score_base(&self, subset: &[usize]) -> Result<AnpReport> {
        let mut r = self.score(subset, &self.base, &MergeSpec::Average)?;
        r.method = "base".to_string();
        Ok(r)
    }

    /// Every k-subset for k in `k_min..=k_max`.
    pub fn sweep(&self, spec: &MergeSpec, k_min: usize, k_max: usize) -> Result<Vec<SweepReport>> {
        merge_sweep(self.tasks.len(), k_min, k_max, |subset| {
            Ok(self.merge_and_score(subset, spec)?.1)
        })
    }

    /// Spearman correlation between divergence and cross-task performance
    /// of the fine-tuned models.
    pub fn correlation(&self, kind: DivergenceKind, max_new_tokens: usize) -> Result<CorrelationReport> {
        let models: Vec<&ParameterSet> = self.finetuned.iter().collect();
        let tasks: Vec<&TaskDataset> = self.tasks.iter().collect();
        divergence_perf_correlation(&models, &tasks, kind, max_new_tokens)
    }

    /// ANP of an optimization-based merge for each merging dataset size.
    pub fn budget_curve(
        &self,
        subset: &[usize],
        spec: &MergeSpec,
        sizes: &[usize],
    ) -> Result<Vec<BudgetPoint>> {
        sizes
            .iter()
            .map(|&size| {
                let mut s = spec.clone();
                s.optimizer_mut()
                    .ok_or_else(|| Error::contract(format!("`{}` uses no merging data", spec.name())))?
                    .dataset_size = size;
                let (outcome, report) = self.merge_and_score(subset, &s)?;
                Ok(BudgetPoint {
                    size,
                    final_loss: outcome.final_loss,
                    anp: report.anp,
                })
            })
            .collect()
    }

    /// Replays the coefficients logged by an optimization-based merge and
    /// scores every `every`-th iterate together with the final one.
    pub fn iteration_curve(
        &self,
        subset: &[usize],
        outcome: &MergeOutcome,
        every: usize,
    ) -> Result<Vec<IterationPoint>> {
        let task_vectors = self.task_vectors(subset)?;
        let level = outcome
            .spec
            .level()
            .ok_or_else(|| Error::contract("iteration curves need an optimization-based merge"))?;
        let mut points = Vec::new();
        let every = every.max(1);
        let mut evaluate = |iteration: usize, loss: Option<f64>, values: &[Vec<f64>]| -> Result<()> {
            let coeffs = MergeCoefficients {
                level,
                task_ids: outcome.task_ids.clone(),
                values: values.to_vec(),
            };
            let merged = apply_task_arithmetic(&self.base, &task_vectors, &coeffs)?;
            let report = self.score(subset, &merged, &outcome.spec)?;
            points.push(IterationPoint {
                iteration,
                loss,
                anp: report.anp,
                coefficients: values.to_vec(),
            });
            Ok(())
        };
        for it in outcome.iterations.iter().filter(|it| it.iteration % every == 0) {
            evaluate(it.iteration, Some(it.loss), &it.coefficients)?;
        }
        if let Some(c) = &outcome.final_coefficients {
            evaluate(outcome.iterations.len(), outcome.final_loss, &c.values)?;
        }
        Ok(points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub size: usize,
    pub final_loss: Option<f64>,
    pub anp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationPoint {
    pub iteration: usize,
    pub loss: Option<f64>,
    pub anp: f64,
    pub coefficients: Vec<Vec<f64>>,
}
