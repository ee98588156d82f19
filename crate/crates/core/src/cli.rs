//! The `mergeforge` command line: task generation, pretraining,
//! fine-tuning, merging, sweeps, correlation, theory checks and curves.
//!
//! Every numeric setting resolves as built-in default < `--config` file
//! (`key = value` lines) < flag, and each command writes the resolved
//! settings next to its outputs as `run_config.json`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::divergence::{DivergenceKind, DEFAULT_MAX_NEW_TOKENS};
use crate::error::{Error, Result};
use crate::evaluation::{divergence_perf_correlation, write_sweep_csv, write_sweep_summary};
use crate::merging::{merge, MergeInputs, MergeLevel, MergeOutcome, MergeSpec};
use crate::model::{Checkpoint, ModelConfig, ParameterSet};
use crate::pipeline::{Lab, LabConfig, Suite};
use crate::tasks::{SplitSizes, TaskDataset, TaskKind};
use crate::theory_checks::{
    check_cross_entropy_identity, check_disentanglement, check_kracher_span,
    check_kracher_span_trials, check_tv_bound_trials, CheckReport, DISENTANGLEMENT_EPSILON,
};
use crate::train::{finetune, pretrain, task_vector, TrainConfig};

pub const THREADS_ENV: &str = "MERGEFORGE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mergeforge", version, about = "Divergence-guided model merging on byte-level toy language models")]
pub struct Cli {
    /// Global seed; every random draw derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` settings file, overridden by flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write task datasets as JSONL.
    GenTasks(GenTasksArgs),
    /// Train a base model from scratch.
    Pretrain(PretrainArgs),
    /// Fine-tune a base model on one task.
    Finetune(FinetuneArgs),
    /// Merge fine-tuned checkpoints.
    Merge(MergeArgs),
    /// Merge every k-subset of tasks and report normalized performance.
    Sweep(SweepArgs),
    /// Correlate divergence with cross-task performance.
    Correlate(CorrelateArgs),
    /// Run the theory checks.
    Check(CheckArgs),
    /// Produce curve data from merges.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenTasksArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Write only the sentinel-tagged disjoint targets.
    #[arg(long)]
    pub disjoint: bool,
    /// Number of disjoint target tasks; the remaining sentinels become
    /// auxiliary tasks.
    #[arg(long)]
    pub n_tasks: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub validation: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Target task files; their answers are shuffled across examples.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Auxiliary task files, trained on with their answers.
    #[arg(long, num_args = 1..)]
    pub aux: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LevelArg {
    Task,
    Layer,
}

impl From<LevelArg> for MergeLevel {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Task => MergeLevel::Task,
            LevelArg::Layer => MergeLevel::Layer,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DivergenceArg {
    Kl,
    Js,
}

impl From<DivergenceArg> for DivergenceKind {
    fn from(d: DivergenceArg) -> Self {
        match d {
            DivergenceArg::Kl => DivergenceKind::Kl,
            DivergenceArg::Js => DivergenceKind::Js,
        }
    }
}

/// Flags shared by every command that loads a base, fine-tuned checkpoints
/// and their task files.
#[derive(Args, Debug)]
pub struct ModelSet {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Task files in the same order as the checkpoints.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
}

/// Overrides of merging hyperparameters.
#[derive(Args, Debug, Default)]
pub struct MergeFlags {
    /// Merging prompts per task.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub merge_lr: Option<f64>,
    #[arg(long)]
    pub merge_epochs: Option<usize>,
    #[arg(long)]
    pub init: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// average (avg), task_arithmetic (ta), slerp, multi_slerp, ties,
    /// entropy_min (entropy), divergence_guided (divergence) or kracher.
    #[arg(long)]
    pub method: String,
    #[arg(long, value_enum, default_value = "task")]
    pub level: LevelArg,
    #[arg(long, value_enum, default_value = "js")]
    pub divergence: DivergenceArg,
    #[command(flatten)]
    pub models: ModelSet,
    #[command(flatten)]
    pub flags: MergeFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated method labels such as `ll-js,tl-js,average,ties`.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[command(flatten)]
    pub models: ModelSet,
    #[command(flatten)]
    pub flags: MergeFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CorrelateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "js")]
    pub divergence: DivergenceArg,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Run every check the given inputs allow.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub merged: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Also write the JSON array here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CurveArg {
    Iterations,
    Budget,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, value_enum)]
    pub curve: CurveArg,
    /// `merge_log.json` to replay for the iteration curve.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Method label for the budget curve.
    #[arg(long, default_value = "ll-js")]
    pub method: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![25, 50, 100, 200])]
    pub sizes: Vec<usize>,
    /// Score every n-th iterate.
    #[arg(long, default_value_t = 10)]
    pub every: usize,
    #[command(flatten)]
    pub models: ModelSet,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings resolved against the config file, recorded for
/// `run_config.json`.
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    /// `flag`, else the config file entry, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(text) => text.parse().map_err(|e| {
                    Error::Format(format!("config key `{key}`: cannot parse `{text}`: {e}"))
                })?,
                None => default,
            },
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Ok(n) = std::env::var(THREADS_ENV) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{n}`");
                return 2;
            }
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 for numeric and convergence failures, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        1
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let mut s = Settings::from_file(cli.config.as_deref())?;
    let seed = s.get("seed", cli.seed, 0u64)?;
    match cli.command {
        Command::GenTasks(a) => gen_tasks(a, seed, &mut s),
        Command::Pretrain(a) => cmd_pretrain(a, seed, &mut s),
        Command::Finetune(a) => cmd_finetune(a, seed, &mut s),
        Command::Merge(a) => cmd_merge(a, seed, &mut s),
        Command::Sweep(a) => cmd_sweep(a, seed, &mut s),
        Command::Correlate(a) => cmd_correlate(a, &mut s),
        Command::Check(a) => cmd_check(a, seed, &mut s),
        Command::Report(a) => cmd_report(a, seed, &mut s),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_config(dir: &Path, command: &str, s: &Settings) -> Result<()> {
    write_json(
        &dir.join("run_config.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "settings": s.resolved(),
        }),
    )
}

fn load_tasks(paths: &[PathBuf]) -> Result<Vec<TaskDataset>> {
    paths.iter().map(TaskDataset::read_jsonl).collect()
}

fn load_params(path: &Path) -> Result<ParameterSet> {
    Ok(Checkpoint::load(path)?.params)
}

fn sizes(s: &mut Settings, a: &GenTasksArgs) -> Result<SplitSizes> {
    let d = SplitSizes::default();
    Ok(SplitSizes {
        train: s.get("train", a.train, d.train)?,
        validation: s.get("validation", a.validation, d.validation)?,
        test: s.get("test", a.test, d.test)?,
    })
}

fn gen_tasks(a: GenTasksArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    let sizes = sizes(s, &a)?;
    let config = LabConfig {
        sizes,
        ..LabConfig::default().with_seed(seed)
    };
    let suite = Suite::generate(&config, s.get("n_tasks", a.n_tasks, 2usize)?)?;
    let targets = if a.disjoint {
        suite.disjoint.clone()
    } else {
        suite.targets()
    };
    let aux = suite.auxiliary;
    let aux_dir = a.out.join("auxiliary");
    create_dir(&aux_dir)?;
    for t in &targets {
        t.write_jsonl(a.out.join(format!("{}.jsonl", t.task_id)))?;
    }
    for t in &aux {
        t.write_jsonl(aux_dir.join(format!("{}.jsonl", t.task_id)))?;
    }
    write_run_config(&a.out, "gen-tasks", s)?;
    println!("wrote {} task files and {} auxiliary files to {}", targets.len(), aux.len(), a.out.display());
    Ok(0)
}

fn train_config(s: &mut Settings, prefix: &str, lr: Option<f64>, epochs: Option<usize>, seed: u64) -> Result<TrainConfig> {
    let d = LabConfig::default();
    let default = if prefix == "pretrain" { d.pretrain } else { d.finetune };
    Ok(TrainConfig {
        learning_rate: s.get(&format!("{prefix}_lr"), lr, default.learning_rate)?,
        epochs: s.get(&format!("{prefix}_epochs"), epochs, default.epochs)?,
        batch_size: s.get("batch_size", None, default.batch_size)?,
        seed,
    })
}

fn cmd_pretrain(a: PretrainArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    let targets = load_tasks(&a.data)?;
    let aux = load_tasks(&a.aux)?;
    let d = LabConfig::default().model;
    let model = ModelConfig {
        d_model: s.get("d_model", a.d_model, d.d_model)?,
        n_heads: s.get("n_heads", None, d.n_heads)?,
        n_layers: s.get("n_layers", None, d.n_layers)?,
        max_seq_len: s.get("max_seq_len", None, d.max_seq_len)?,
        ..d
    };
    model.validate()?;
    let train = train_config(s, "pretrain", a.lr, a.epochs, seed)?;
    let (params, log) = pretrain(&model, &aux, &targets, &train)?;
    let provenance = json!({
        "command": "pretrain",
        "targets": targets.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
        "auxiliary": aux.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
        "train": train,
    });
    Checkpoint::new(params, Some(seed), provenance).save(&a.out)?;
    write_json(&a.out.join("train_log.json"), &log)?;
    write_run_config(&a.out, "pretrain", s)?;
    println!("final loss {:.4}", log.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(0)
}

fn cmd_finetune(a: FinetuneArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    let base = load_params(&a.base)?;
    let task = TaskDataset::read_jsonl(&a.task)?;
    let train = train_config(s, "finetune", a.lr, a.epochs, seed)?;
    let (params, log) = finetune(&base, &task, &train)?;
    let provenance = json!({
        "command": "finetune",
        "task": task.task_id,
        "base_manifest": base.manifest_hash(),
        "train": train,
    });
    Checkpoint::new(params, Some(seed), provenance).save(&a.out)?;
    write_json(&a.out.join("train_log.json"), &log)?;
    write_run_config(&a.out, "finetune", s)?;
    println!("{}: final loss {:.4}", task.task_id, log.epoch_losses.last().copied().unwrap_or(f64::NAN));
    Ok(0)
}

fn canonical_method(name: &str) -> &str {
    match name {
        "avg" => "average",
        "ta" => "task_arithmetic",
        "entropy" => "entropy_min",
        "divergence" => "divergence_guided",
        other => other,
    }
}

fn apply_flags(mut spec: MergeSpec, f: &MergeFlags, seed: u64, s: &mut Settings) -> Result<MergeSpec> {
    match &mut spec {
        MergeSpec::TaskArithmetic { scale } => *scale = s.get("scale", f.scale, *scale)?,
        MergeSpec::Slerp { t } => *t = s.get("t", f.t, *t)?,
        MergeSpec::Ties { mask_rate, lambda } => {
            *mask_rate = s.get("mask_rate", f.mask_rate, *mask_rate)?;
            *lambda = s.get("lambda", f.lambda, *lambda)?;
        }
        _ => {}
    }
    if let Some(o) = spec.optimizer_mut() {
        o.dataset_size = s.get("budget", f.budget, o.dataset_size)?;
        o.learning_rate = s.get("merge_lr", f.merge_lr, o.learning_rate)?;
        o.epochs = s.get("merge_epochs", f.merge_epochs, o.epochs)?;
        o.init = s.get("init", f.init, o.init)?;
        o.batch_per_task = s.get("batch_per_task", None, o.batch_per_task)?;
        o.max_new_tokens = s.get("max_new_tokens", f.max_new_tokens, o.max_new_tokens)?;
        o.seed = seed;
    }
    Ok(spec)
}

fn is_generation(tasks: &[TaskDataset]) -> bool {
    tasks.iter().any(|t| t.kind == TaskKind::Generation)
}

fn load_lab(m: &ModelSet) -> Result<Lab> {
    if m.data.len() != m.checkpoints.len() {
        return Err(Error::contract(format!(
            "{} checkpoints but {} task files",
            m.checkpoints.len(),
            m.data.len()
        )));
    }
    let base = load_params(&m.base)?;
    let finetuned = m.checkpoints.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
    Lab::new(base, load_tasks(&m.data)?, finetuned)
}

fn ensure_not_input(out: &Path, inputs: &[&PathBuf]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let out = canon(out);
    if inputs.iter().any(|p| canon(p) == out) {
        return Err(Error::contract("--out must not be an input checkpoint directory"));
    }
    Ok(())
}

fn cmd_merge(a: MergeArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    let mut inputs: Vec<&PathBuf> = a.models.checkpoints.iter().collect();
    inputs.push(&a.models.base);
    ensure_not_input(&a.out, &inputs)?;
    let tasks = load_tasks(&a.models.data)?;
    let spec = MergeSpec::from_name(
        canonical_method(&a.method),
        a.divergence.into(),
        a.level.into(),
        is_generation(&tasks),
    )?;
    let spec = apply_flags(spec, &a.flags, seed, s)?;
    let (outcome, anp) = if tasks.is_empty() {
        if spec.needs_data() {
            return Err(Error::contract(format!("`{}` needs --data", spec.name())));
        }
        let base = load_params(&a.models.base)?;
        let fts = a.models.checkpoints.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
        let ids = a
            .models
            .checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        let outcome = merge(
            &spec,
            MergeInputs {
                base: &base,
                task_ids: ids,
                finetuned: fts.iter().collect(),
                prompts: vec![Vec::new(); fts.len()],
                references: None,
            },
        )?;
        (outcome, None)
    } else {
        let lab = load_lab(&a.models)?;
        let subset: Vec<usize> = (0..lab.tasks.len()).collect();
        let (outcome, report) = lab.merge_and_score(&subset, &spec)?;
        (outcome, Some(report))
    };
    save_merge(&a.out, &outcome, seed)?;
    if let Some(r) = &anp {
        write_json(&a.out.join("anp.json"), r)?;
        println!("{}: anp {:.4}", spec.label(), r.anp);
    }
    write_run_config(&a.out, "merge", s)?;
    Ok(0)
}

fn save_merge(out: &Path, outcome: &MergeOutcome, seed: u64) -> Result<()> {
    let provenance = json!({
        "command": "merge",
        "spec": outcome.spec,
        "tasks": outcome.task_ids,
    });
    Checkpoint::new(outcome.params().clone(), Some(seed), provenance).save(out)?;
    outcome.write_log(out.join("merge_log.json"))
}

fn cmd_sweep(a: SweepArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    let lab = load_lab(&a.models)?;
    let generation = is_generation(&lab.tasks);
    let k_max = s.get("k_max", a.k_max, lab.tasks.len())?;
    let k_min = s.get("k_min", Some(a.k_min), 2)?;
    create_dir(&a.out)?;
    let mut all = Vec::new();
    for label in &a.methods {
        let spec = apply_flags(MergeSpec::from_label(label, generation)?, &a.flags, seed, s)?;
        let reports = lab.sweep(&spec, k_min, k_max)?;
        write_sweep_csv(a.out.join(format!("sweep_{label}.csv")), &reports)?;
        for r in &reports {
            println!("{label} k={} mean anp {:.4} +- {:.4}", r.k, r.mean_anp, r.ci95_margin);
        }
        all.extend(reports);
    }
    write_sweep_summary(a.out.join("sweep_summary.json"), &all)?;
    write_run_config(&a.out, "sweep", s)?;
    Ok(0)
}

fn cmd_correlate(a: CorrelateArgs, s: &mut Settings) -> Result<i32> {
    let tasks = load_tasks(&a.data)?;
    let models = a.checkpoints.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
    let max_new = s.get("max_new_tokens", a.max_new_tokens, DEFAULT_MAX_NEW_TOKENS)?;
    let report = divergence_perf_correlation(
        &models.iter().collect::<Vec<_>>(),
        &tasks.iter().collect::<Vec<_>>(),
        a.divergence.into(),
        max_new,
    )?;
    create_dir(&a.out)?;
    report.heatmap.write_csv(a.out.join("heatmap.csv"))?;
    report.write_perf_csv(a.out.join("perf.csv"))?;
    write_json(
        &a.out.join("correlation.json"),
        &json!({
            "kind": report.kind,
            "task_ids": report.heatmap.task_ids,
            "per_task": report.per_task,
            "average": report.average,
        }),
    )?;
    write_run_config(&a.out, "correlate", s)?;
    println!("average spearman {:.4}", report.average);
    Ok(0)
}

fn cmd_check(a: CheckArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    if !a.all {
        return Err(Error::contract("pass --all to run the checks"));
    }
    let trials = s.get("trials", a.trials, 10_000usize)?;
    let epsilon = s.get("epsilon", a.epsilon, DISENTANGLEMENT_EPSILON)?;
    let max_new = s.get("max_new_tokens", None, DEFAULT_MAX_NEW_TOKENS)?;
    let mut reports: Vec<CheckReport> = vec![
        check_cross_entropy_identity(trials, crate::model::VOCAB_SIZE, seed)?,
        check_kracher_span_trials(20, 5, 1000, seed)?,
    ];
    let finetuned = a.checkpoints.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
    if let Some(base) = &a.base {
        if finetuned.len() >= 2 {
            let base = load_params(base)?;
            let tvs: Vec<Vec<f64>> = finetuned
                .iter()
                .map(|f| Ok(task_vector(&base, f)?.flatten()))
                .collect::<Result<_>>()?;
            let mut r = check_kracher_span(&tvs)?;
            r.check_id = "kracher_span_task_vectors".to_string();
            reports.push(r);
        }
    }
    if let Some(merged) = &a.merged {
        let merged = load_params(merged)?;
        let tasks = load_tasks(&a.data)?;
        if !tasks.is_empty() && tasks.len() == finetuned.len() {
            let tv_trials = s.get("tv_trials", None, 50usize)?;
            for (ft, task) in finetuned.iter().zip(&tasks) {
                let mut r = check_tv_bound_trials(ft, &merged, task, tv_trials, 0.2, max_new, seed)?;
                r.check_id = format!("tv_bound_trials/{}", task.task_id);
                reports.push(r);
            }
            if tasks.iter().all(|t| t.support_tag.is_some()) {
                reports.push(check_disentanglement(
                    &merged,
                    &finetuned.iter().collect::<Vec<_>>(),
                    &tasks.iter().collect::<Vec<_>>(),
                    epsilon,
                    200,
                    max_new,
                )?);
            }
        }
    }
    let text = serde_json::to_string_pretty(&reports)?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

fn cmd_report(a: ReportArgs, seed: u64, s: &mut Settings) -> Result<i32> {
    let lab = load_lab(&a.models)?;
    let subset: Vec<usize> = (0..lab.tasks.len()).collect();
    let mut w = csv::Writer::from_path(&a.out)?;
    match a.curve {
        CurveArg::Iterations => {
            let log = a
                .log
                .as_ref()
                .ok_or_else(|| Error::contract("--curve iterations needs --log"))?;
            let text = fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
            let outcome: MergeOutcome = serde_json::from_str(&text)?;
            let every = s.get("every", Some(a.every), 10)?;
            w.write_record(["iteration", "loss", "anp", "coefficients"])?;
            for p in lab.iteration_curve(&subset, &outcome, every)? {
                w.write_record([
                    p.iteration.to_string(),
                    p.loss.map(|v| v.to_string()).unwrap_or_default(),
                    p.anp.to_string(),
                    join_coefficients(&p.coefficients),
                ])?;
            }
        }
        CurveArg::Budget => {
            let spec = apply_flags(
                MergeSpec::from_label(&a.method, is_generation(&lab.tasks))?,
                &MergeFlags::default(),
                seed,
                s,
            )?;
            w.write_record(["size", "final_loss", "anp"])?;
            for p in lab.budget_curve(&subset, &spec, &a.sizes)? {
                w.write_record([
                    p.size.to_string(),
                    p.final_loss.map(|v| v.to_string()).unwrap_or_default(),
                    p.anp.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn join_coefficients(values: &[Vec<f64>]) -> String {
    values
        .iter()
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(";")
}
