//! Acceptance criteria. Runs as a plain binary so every criterion prints its
//! pass/fail line; `cargo test --test acceptance -- 4 8` runs a subset.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use mergeforge::divergence::{js, kl, DivergenceKind};
use mergeforge::evaluation::{write_sweep_csv, AnpReport, SweepReport};
use mergeforge::merging::{
    divergence_loss, divergence_loss_and_grad, MergeCoefficients,
    MergeLevel, MergeOutcome, MergeSpec, TaskReference,
};
use mergeforge::model::{init_model, ModelConfig, ParameterSet};
use mergeforge::pipeline::{Lab, LabConfig, Suite};
use mergeforge::theory_checks::{
    check_cross_entropy_identity, check_kracher_span_trials, check_tv_bound_trials,
    random_simplex, CROSS_ENTROPY_TOLERANCE, SPAN_TOLERANCE,
};
use mergeforge::train::{sequence_nll, sequence_nll_and_grad, task_vector, TrainingSequence};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

const GRAD_REL_TOL: f64 = 1e-4;
const AXIOM_TOL: f64 = 1e-10;
const COEFF_GRAD_REL_TOL: f64 = 1e-3;
const DISJOINT_LOSS_MAX: f64 = 0.05;
const DISJOINT_ANP_MIN: f64 = 0.98;
const BUDGET_GAP_MAX: f64 = 0.05;
const SPEARMAN_MIN: f64 = 0.5;
const PARITY_ACC_MIN: f64 = 0.95;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn out_dir(run: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(run);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    let n_params = config.parameter_count();
    let p = init_model(&config, 1).unwrap().map_layers(|_, v| v * 25.0).unwrap();
    let seq = TrainingSequence::completion("@123\nA: ", "odd");
    let (_, grad) = sequence_nll_and_grad(&p, &seq).unwrap();
    let grad = grad.flatten();
    let flat = p.flatten();
    let mut rng = mergeforge::rng::substream(0, "acceptance/gradients");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in sample(&mut rng, flat.len(), 100).iter() {
        let at = |d: f64| {
            let mut q = flat.clone();
            q[i] += d;
            sequence_nll(&p.with_flat(&q).unwrap(), &seq).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max(rel_err(grad[i], fd, 1e-6));
    }
    let t = start.elapsed();
    outcome(
        worst < GRAD_REL_TOL && n_params <= 10_000 && within(t, 5),
        format!("max rel err {worst:.2e} < {GRAD_REL_TOL:e} over 100 coords of {n_params} params, {t:.2?} (< 5 s)"),
    )
}

fn c2_axioms() -> Outcome {
    let start = Instant::now();
    let mut rng = mergeforge::rng::substream(0, "acceptance/axioms");
    let mut violations = 0usize;
    let (mut worst_self, mut worst_sym, mut min_kl) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..10_000 {
        let mu = random_simplex(&mut rng, 259);
        let nu = random_simplex(&mut rng, 259);
        let k = kl(&mu, &nu).unwrap();
        let k0 = kl(&mu, &mu).unwrap();
        let (j1, j2) = (js(&mu, &nu).unwrap(), js(&nu, &mu).unwrap());
        min_kl = min_kl.min(k);
        worst_self = worst_self.max(k0.abs());
        worst_sym = worst_sym.max((j1 - j2).abs());
        let ok = k >= -AXIOM_TOL
            && k0.abs() <= AXIOM_TOL
            && (j1 - j2).abs() <= AXIOM_TOL
            && j1 >= -AXIOM_TOL
            && j1 <= std::f64::consts::LN_2 + AXIOM_TOL;
        violations += usize::from(!ok);
    }
    let t = start.elapsed();
    outcome(
        violations == 0 && within(t, 5),
        format!(
            "{violations} violations in 1e4 pairs (min KL {min_kl:.2e}, max |KL(mu,mu)| {worst_self:.1e}, max JS asymmetry {worst_sym:.1e}), {t:.2?} (< 5 s)"
        ),
    )
}

fn perturbed(base: &ParameterSet, scale: f64, seed: u64) -> ParameterSet {
    let mut rng = mergeforge::rng::substream(seed, "acceptance/perturb");
    base.map_layers(|_, v| {
        let n: f64 = StandardNormal.sample(&mut rng);
        v + scale * n
    })
    .unwrap()
}

fn c3_coefficient_gradient() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    let base = init_model(&config, 2).unwrap().map_layers(|_, v| v * 10.0).unwrap();
    let finetuned: Vec<ParameterSet> = (0..2).map(|i| perturbed(&base, 0.05, i)).collect();
    let tvs: Vec<ParameterSet> = finetuned.iter().map(|f| task_vector(&base, f).unwrap()).collect();
    let prompts = [["@17\nA: ", "@402\nA: ", "@9\nA: "], ["#55\nA: ", "#3\nA: ", "#810\nA: "]];
    let refs: Vec<TaskReference> = finetuned
        .iter()
        .zip(&prompts)
        .enumerate()
        .map(|(t, (f, p))| TaskReference::new(&format!("t{t}"), f, p, 6).unwrap())
        .collect();
    let ids = vec!["t0".to_string(), "t1".to_string()];
    let mut worst: f64 = 0.0;
    for level in [MergeLevel::Task, MergeLevel::Layer] {
        let mut c = MergeCoefficients::uniform(level, &ids, 4, 0.5);
        let flat: Vec<f64> = c.flat().iter().enumerate().map(|(i, v)| v + 0.1 * i as f64).collect();
        c.set_flat(&flat);
        let batches: Vec<Vec<_>> = refs.iter().map(|r| r.trajectories.iter().collect()).collect();
        for kind in [DivergenceKind::Kl, DivergenceKind::Js] {
            let (_, grad) = divergence_loss_and_grad(&base, &tvs, &c, &batches, kind).unwrap();
            for k in 0..flat.len() {
                let at = |d: f64| {
                    let mut q = flat.clone();
                    q[k] += d;
                    let mut cc = c.clone();
                    cc.set_flat(&q);
                    divergence_loss(&base, &tvs, &cc, &refs, kind).unwrap()
                };
                let h = 1e-5;
                let fd = (at(h) - at(-h)) / (2.0 * h);
                worst = worst.max(rel_err(grad[k], fd, 1e-8));
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst < COEFF_GRAD_REL_TOL && within(t, 30),
        format!("max rel err {worst:.2e} < {COEFF_GRAD_REL_TOL:e} (KL and JS, task and layer level), {t:.2?} (< 30 s)"),
    )
}

fn c5_cross_entropy() -> Outcome {
    let start = Instant::now();
    let r = check_cross_entropy_identity(10_000, 259, 0).unwrap();
    let t = start.elapsed();
    let worst = r.measured.get("max_residual").copied().unwrap_or(f64::NAN);
    outcome(
        r.passed && within(t, 5),
        format!("max |H(p,q) - H(p) - KL| {worst:.2e} < {CROSS_ENTROPY_TOLERANCE:e} over 1e4 trials, {t:.2?} (< 5 s)"),
    )
}

fn c7_kracher() -> Outcome {
    let start = Instant::now();
    let r = check_kracher_span_trials(20, 5, 1000, 0).unwrap();
    let t = start.elapsed();
    let worst = r.measured.get("max_relative_residual").copied().unwrap_or(f64::NAN);
    outcome(
        r.passed && within(t, 5),
        format!("max span residual {worst:.2e} < {SPAN_TOLERANCE:e} over 20 sets, {t:.2?} (< 5 s)"),
    )
}

/// The shared base, pretrained once on every task of the suite.
struct World {
    config: LabConfig,
    suite: Suite,
    base: ParameterSet,
    pretrain_time: Duration,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let config = LabConfig::default();
        let suite = Suite::generate(&config, 2).unwrap();
        let start = Instant::now();
        let base = suite.pretrain_base(&config).unwrap();
        let pretrain_time = start.elapsed();
        println!("(shared base pretrained in {pretrain_time:.1?})");
        World {
            config,
            suite,
            base,
            pretrain_time,
        }
    })
}

struct Disjoint {
    lab: Lab,
    merged: MergeOutcome,
    report: AnpReport,
    csv: String,
    elapsed: Duration,
}

fn layer_js() -> MergeSpec {
    MergeSpec::from_label("ll-js", false).unwrap()
}

fn run_disjoint() -> Disjoint {
    let w = world();
    let start = Instant::now();
    let lab = Lab::finetune_all(&w.config, w.base.clone(), w.suite.disjoint.clone()).unwrap();
    let (merged, report) = lab.merge_and_score(&[0, 1], &layer_js()).unwrap();
    let elapsed = start.elapsed();
    let (tl, tl_report) = lab.merge_and_score(&[0, 1], &MergeSpec::from_label("tl-js", false).unwrap()).unwrap();
    let base_report = lab.score_base(&[0, 1]).unwrap();
    let base_loss = base_divergence(&lab, &merged);
    let mut csv = String::from("model,final_loss,anp,ratios\n");
    for (name, loss, r) in [
        ("ll-js", merged.final_loss.unwrap(), &report),
        ("tl-js", tl.final_loss.unwrap(), &tl_report),
        ("base", base_loss, &base_report),
    ] {
        let ratios: Vec<String> = r.ratios.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{name},{loss},{},{}\n", r.anp, ratios.join(";")));
    }
    Disjoint {
        lab,
        merged,
        report,
        csv,
        elapsed,
    }
}

/// The merging objective evaluated at the base model itself.
fn base_divergence(lab: &Lab, outcome: &MergeOutcome) -> f64 {
    let o = outcome.spec.optimizer().unwrap();
    let refs: Vec<TaskReference> = (0..lab.tasks.len())
        .map(|t| lab.reference(t, o.dataset_size, o.max_new_tokens).unwrap())
        .collect();
    let tvs = lab.task_vectors(&[0, 1]).unwrap();
    let zero = MergeCoefficients::uniform(MergeLevel::Task, &lab.task_ids(&[0, 1]), 4, 0.0);
    divergence_loss(&lab.base, &tvs, &zero, &refs, DivergenceKind::Js).unwrap()
}

fn disjoint() -> &'static Disjoint {
    static D: OnceLock<Disjoint> = OnceLock::new();
    D.get_or_init(run_disjoint)
}

fn c4_disjoint() -> Outcome {
    let d = disjoint();
    let loss = d.merged.final_loss.unwrap();
    let base_loss = base_divergence(&d.lab, &d.merged);
    let base_anp = d.lab.score_base(&[0, 1]).unwrap().anp;
    std::fs::write(out_dir("run1").join("criterion4.csv"), &d.csv).unwrap();
    let merged_ok = loss < DISJOINT_LOSS_MAX && d.report.anp >= DISJOINT_ANP_MIN;
    let base_fails = base_loss >= DISJOINT_LOSS_MAX && base_anp < DISJOINT_ANP_MIN;
    outcome(
        merged_ok && base_fails && within(d.elapsed, 600),
        format!(
            "LL-JS loss {loss:.4} (< {DISJOINT_LOSS_MAX}) ANP {:.4} (>= {DISJOINT_ANP_MIN}), ratios {:?}; base loss {base_loss:.4} ANP {base_anp:.4} (must fail both); fine-tune + merge {:.1?} (< 10 min, base pretraining {:.1?} excluded)",
            d.report.anp,
            d.report.ratios,
            d.elapsed,
            world().pretrain_time
        ),
    )
}

fn c6_tv_bound() -> Outcome {
    let d = disjoint();
    let start = Instant::now();
    let r = check_tv_bound_trials(&d.lab.finetuned[0], d.merged.params(), &d.lab.tasks[0], 50, 0.2, 32, 0).unwrap();
    let t = start.elapsed();
    let violations = r.measured.get("violations").copied().unwrap_or(f64::NAN);
    let worst = r.measured.get("max_divergence_gap").copied().unwrap_or(f64::NAN);
    outcome(
        r.passed && within(t, 300),
        format!("{violations} violations in 50 perturbations (max |JS_X - JS_X~| {worst:.4}), {t:.1?} (< 5 min)"),
    )
}

/// The seven-task classification lab and memoized sweeps over it.
struct Classification {
    lab: Lab,
    sweeps: Mutex<HashMap<(String, usize), (SweepReport, Duration)>>,
}

fn classification() -> &'static Classification {
    static C: OnceLock<Classification> = OnceLock::new();
    C.get_or_init(|| {
        let w = world();
        let lab = Lab::finetune_all(&w.config, w.base.clone(), w.suite.classification.clone()).unwrap();
        for (t, p) in lab.tasks.iter().zip(&lab.finetuned_perf) {
            println!("({} fine-tuned accuracy {:.2})", t.task_id, p.value);
        }
        Classification {
            lab,
            sweeps: Mutex::new(HashMap::new()),
        }
    })
}

fn sweep_k(c: &Classification, label: &str, k: usize) -> (SweepReport, Duration) {
    let key = (label.to_string(), k);
    if let Some(r) = c.sweeps.lock().unwrap().get(&key) {
        return r.clone();
    }
    let start = Instant::now();
    let spec = MergeSpec::from_label(label, false).unwrap();
    let r = c.lab.sweep(&spec, k, k).unwrap().remove(0);
    let out = (r, start.elapsed());
    c.sweeps.lock().unwrap().insert(key, out.clone());
    out
}

const PAIR_METHODS: [&str; 4] = ["ll-js", "tl-js", "average", "ties"];

fn pairwise_csvs(c: &Classification, run: &str) -> Vec<(String, Duration, f64)> {
    let dir = out_dir(run);
    PAIR_METHODS
        .iter()
        .map(|label| {
            let (r, t) = sweep_k(c, label, 2);
            write_sweep_csv(dir.join(format!("criterion8_{label}.csv")), std::slice::from_ref(&r)).unwrap();
            (label.to_string(), t, r.mean_anp)
        })
        .collect()
}

fn c8_ordering() -> Outcome {
    let c = classification();
    let rows = pairwise_csvs(c, "run1");
    let m: BTreeMap<&str, f64> = rows.iter().map(|(l, _, a)| (l.as_str(), *a)).collect();
    let slowest = rows.iter().map(|r| r.1).max().unwrap();
    let ok = m["ll-js"] >= m["tl-js"] && m["tl-js"] >= m["average"] && m["ll-js"] >= m["ties"];
    outcome(
        ok && within(slowest, 7200),
        format!(
            "mean pairwise ANP over 21 pairs: LL-JS {:.4} >= TL-JS {:.4} >= average {:.4}; LL-JS >= TIES {:.4}; slowest method sweep {slowest:.1?} (< 2 h)",
            m["ll-js"], m["tl-js"], m["average"], m["ties"]
        ),
    )
}

fn c9_shape() -> Outcome {
    let c = classification();
    let start = Instant::now();
    let mut avg = Vec::new();
    let mut ll = Vec::new();
    for k in 2..=7 {
        avg.push(sweep_k(c, "average", k).0);
        ll.push(sweep_k(c, "ll-js", k).0);
    }
    let t = start.elapsed();
    let dir = out_dir("run1");
    write_sweep_csv(dir.join("criterion9_average.csv"), &avg).unwrap();
    write_sweep_csv(dir.join("criterion9_ll-js.csv"), &ll).unwrap();
    let monotone = avg.windows(2).all(|w| w[1].mean_anp <= w[0].mean_anp);
    let dominates = avg.iter().zip(&ll).all(|(a, l)| {
        l.mean_anp >= a.mean_anp - (a.ci95_margin.powi(2) + l.ci95_margin.powi(2)).sqrt()
    });
    let fmt = |rs: &[SweepReport]| {
        rs.iter()
            .map(|r| format!("{:.3}+-{:.3}", r.mean_anp, r.ci95_margin))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        monotone && dominates && within(t, 6 * 3600),
        format!(
            "k=2..7 average [{}] non-increasing: {monotone}; LL-JS [{}] dominates within combined CI: {dominates}; {t:.1?} (< 6 h)",
            fmt(&avg),
            fmt(&ll)
        ),
    )
}

fn c10_correlation() -> Outcome {
    let c = classification();
    let start = Instant::now();
    let r = c.lab.correlation(DivergenceKind::Js, 32).unwrap();
    let t = start.elapsed();
    let per: Vec<String> = r.per_task.iter().map(|v| format!("{v:.2}")).collect();
    outcome(
        r.average > SPEARMAN_MIN && within(t, 1800),
        format!("average Spearman {:.3} > {SPEARMAN_MIN} (per task [{}]), {t:.1?} (< 30 min)", r.average, per.join(" ")),
    )
}

fn c11_budget() -> Outcome {
    let c = classification();
    let start = Instant::now();
    let mut gaps = Vec::new();
    for pair in [[0, 1], [2, 3], [4, 5]] {
        let points = c.lab.budget_curve(&pair, &layer_js(), &[25, 200]).unwrap();
        gaps.push((pair, points[0].anp, points[1].anp));
    }
    let t = start.elapsed();
    let ok = gaps.iter().all(|(_, a, b)| (a - b).abs() <= BUDGET_GAP_MAX);
    let text: Vec<String> = gaps
        .iter()
        .map(|(p, a, b)| format!("{p:?}: {a:.4} vs {b:.4}"))
        .collect();
    outcome(
        ok && within(t, 1800),
        format!("LL-JS ANP at budget 25 vs 200 within {BUDGET_GAP_MAX}: {}; {t:.1?} (< 30 min)", text.join(", ")),
    )
}

fn c12_determinism() -> Outcome {
    let first = disjoint();
    let c = classification();
    pairwise_csvs(c, "run1");
    let second = run_disjoint();
    let dir2 = out_dir("run2");
    std::fs::write(dir2.join("criterion4.csv"), &second.csv).unwrap();
    let w = world();
    let lab2 = Lab::finetune_all(&w.config, w.base.clone(), w.suite.classification.clone()).unwrap();
    let c2 = Classification {
        lab: lab2,
        sweeps: Mutex::new(HashMap::new()),
    };
    pairwise_csvs(&c2, "run2");
    let mut files = vec!["criterion4.csv".to_string()];
    files.extend(PAIR_METHODS.iter().map(|l| format!("criterion8_{l}.csv")));
    let dir1 = out_dir("run1");
    std::fs::write(dir1.join("criterion4.csv"), &first.csv).unwrap();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| std::fs::read(dir1.join(f)).unwrap() != std::fs::read(dir2.join(f)).unwrap())
        .collect();
    // Pretraining itself, on a smaller configuration.
    let small = LabConfig {
        model: ModelConfig {
            d_model: 16,
            ..ModelConfig::toy()
        },
        sizes: mergeforge::tasks::SplitSizes {
            train: 20,
            validation: 10,
            test: 10,
        },
        ..LabConfig::default()
    };
    let mut small = small;
    small.pretrain.epochs = 2;
    let s = Suite::generate(&small, 2).unwrap();
    let same_base = s.pretrain_base(&small).unwrap().flatten() == s.pretrain_base(&small).unwrap().flatten();
    outcome(
        differing.is_empty() && same_base,
        format!(
            "{} of {} report CSVs differ between two runs; repeated pretraining bitwise identical: {same_base}",
            differing.len(),
            files.len()
        ),
    )
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 12] = [
        (1, "gradient fidelity", c1_gradients),
        (2, "divergence axioms", c2_axioms),
        (3, "coefficient-gradient identity", c3_coefficient_gradient),
        (5, "cross-entropy identity", c5_cross_entropy),
        (7, "Kracher span", c7_kracher),
        (4, "disjoint-support merge", c4_disjoint),
        (6, "TV bound", c6_tv_bound),
        (8, "pairwise method ordering", c8_ordering),
        (10, "divergence-performance correlation", c10_correlation),
        (11, "merging budget", c11_budget),
        (9, "ANP versus number of tasks", c9_shape),
        (12, "determinism", c12_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = f();
        println!("criterion {id:>2} {name}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(id);
        }
    }
    let mut regression_failed = false;
    if filter.is_empty() || filter.contains(&8) {
        let o = parity_regression();
        println!("regression parity fine-tune: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        regression_failed = !o.passed;
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    if !failed.is_empty() || regression_failed {
        std::process::exit(1);
    }
}

/// Parity fine-tuned from the shared base with the default config.
fn parity_regression() -> Outcome {
    let lab = &classification().lab;
    match lab.tasks.iter().position(|t| t.task_id == "parity") {
        Some(i) => {
            let acc = lab.finetuned_perf[i].value;
            Outcome {
                passed: acc >= PARITY_ACC_MIN,
                detail: format!("test accuracy {acc:.3} (min {PARITY_ACC_MIN})"),
            }
        }
        None => Outcome {
            passed: false,
            detail: "no parity task in the classification suite".to_string(),
        },
    }
}
