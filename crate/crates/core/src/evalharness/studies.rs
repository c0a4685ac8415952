use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::executor::Executor;
use super::passat1::{pass_at_1, GenerationConfig};
use super::report::{ExperimentReport, SeriesPoint, TimingPoint};
use crate::backend::Backend;
use crate::dataset::{split_examples, split_tasks, CodingTask, IoExample, SplitMode, SplitRatios, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    passat1_perplexity_contrast, perplexity, source_perplexity, spearman_scores, target_perplexity, MeanStderr,
    PassPerplexityContrast, PerplexityKind, StudyRow,
};
use crate::mlpranker::{collect_pairs, train_with_validation, MlpModel, TrainConfig, TrainingPair};
use crate::prompting::{render_prompt, PromptTemplate};
use crate::rankers::{rank, select, RankerSpec, Selection};

pub const METRIC_TARGET_PPL: &str = "target_ppl";
pub const METRIC_DELTA: &str = "delta_log_target_ppl";
pub const METRIC_PASS: &str = "pass_at_1";

/// First eight bytes of a length-prefixed sha256 over `parts`.
pub fn derived_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn min_pool(tasks: &[CodingTask]) -> usize {
    tasks.iter().map(|t| t.pool.len()).min().unwrap_or(0)
}

fn require_tasks(tasks: &[CodingTask]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::precondition("study needs at least one task"));
    }
    Ok(())
}

/// One scored request with its latency. The mock backend's simulated
/// clock is used when available so timing is reproducible.
#[derive(Clone, Copy)]
struct TimedScore {
    value: f64,
    log_value: f64,
    tokens: usize,
    seconds: f64,
    simulated: bool,
}

fn timed_target<B: Backend + ?Sized>(
    task: &CodingTask,
    examples: &[IoExample],
    template: &PromptTemplate,
    backend: &B,
) -> Result<TimedScore> {
    let prompt = render_prompt(template, &task.nl_description, examples);
    let start = Instant::now();
    let seq = backend.score(&prompt, &task.ground_truth)?;
    let wall = start.elapsed();
    let score = perplexity(&seq, PerplexityKind::Target)?;
    let (seconds, tokens, simulated) = match backend.simulated_latency(&prompt, &task.ground_truth) {
        Some(d) => (
            d.as_secs_f64(),
            backend.count_tokens(&prompt)? + backend.count_tokens(&task.ground_truth)?,
            true,
        ),
        None => (wall.as_secs_f64(), seq.tokens.len(), false),
    };
    Ok(TimedScore {
        value: score.value,
        log_value: score.log_value,
        tokens,
        seconds,
        simulated,
    })
}

/// (tokens, seconds, simulated clock)
type TimingSample = (usize, f64, bool);

fn timing_point(n: usize, samples: &[TimingSample]) -> Option<TimingPoint> {
    let secs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let stats = MeanStderr::of(&secs)?;
    Some(TimingPoint {
        n,
        count: stats.n,
        mean_tokens: samples.iter().map(|s| s.0 as f64).sum::<f64>() / samples.len() as f64,
        mean_seconds: stats.mean,
        stderr_seconds: stats.stderr,
        clock: if samples.iter().all(|s| s.2) { "simulated" } else { "wall" }.into(),
    })
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn stats(values: &[f64]) -> MeanStderr {
    MeanStderr::of(values).expect("at least one task")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiStudyConfig {
    pub max_n: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Target perplexity as randomly drawn examples are added: for each
/// `N = 0..=max_n`, each task draws `N` distinct pool examples per trial.
/// Per-task trial means are aggregated across tasks.
pub fn run_multi_example_study<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
    config: &MultiStudyConfig,
) -> Result<ExperimentReport> {
    require_tasks(tasks)?;
    if config.trials == 0 {
        return Err(Error::precondition("trials must be at least 1"));
    }
    if config.max_n > min_pool(tasks) {
        return Err(Error::precondition(format!(
            "max_n {} exceeds the smallest pool ({})",
            config.max_n,
            min_pool(tasks)
        )));
    }
    struct TaskCurve {
        // per N: (mean delta, mean target pp, timing samples)
        points: Vec<(f64, f64, Vec<TimingSample>)>,
    }
    let curves = tasks
        .par_iter()
        .map(|task| -> Result<TaskCurve> {
            let base = timed_target(task, &[], template, backend)?;
            let mut points = vec![(0.0, base.value, vec![(base.tokens, base.seconds, base.simulated)])];
            for n in 1..=config.max_n {
                let mut deltas = Vec::with_capacity(config.trials);
                let mut values = Vec::with_capacity(config.trials);
                let mut timing = Vec::with_capacity(config.trials);
                for trial in 0..config.trials {
                    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(&[
                        task.task_id.as_bytes(),
                        &config.seed.to_le_bytes(),
                        &(n as u64).to_le_bytes(),
                        &(trial as u64).to_le_bytes(),
                    ]));
                    let drawn: Vec<IoExample> =
                        sample(&mut rng, task.pool.len(), n).into_iter().map(|i| task.pool[i].clone()).collect();
                    let s = timed_target(task, &drawn, template, backend)?;
                    deltas.push(s.log_value - base.log_value);
                    values.push(s.value);
                    timing.push((s.tokens, s.seconds, s.simulated));
                }
                points.push((mean_of(&deltas), mean_of(&values), timing));
            }
            Ok(TaskCurve { points })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new(
        "multi_example",
        json!({
            "study": "multi",
            "max_n": config.max_n,
            "trials": config.trials,
            "seed": config.seed,
            "template": template,
            "backend": backend.id(),
            "tasks": tasks.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
        }),
    );
    for n in 0..=config.max_n {
        let deltas: Vec<f64> = curves.iter().map(|c| c.points[n].0).collect();
        let values: Vec<f64> = curves.iter().map(|c| c.points[n].1).collect();
        report.series.push(SeriesPoint::new("random", METRIC_DELTA, n, stats(&deltas)));
        report.series.push(SeriesPoint::new("random", METRIC_TARGET_PPL, n, stats(&values)));
        let samples: Vec<TimingSample> = curves.iter().flat_map(|c| c.points[n].2.iter().copied()).collect();
        report.timing.extend(timing_point(n, &samples));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub rankers: Vec<RankerSpec>,
    pub n_values: Vec<usize>,
    pub generation: GenerationConfig,
}

/// Target perplexity (and Pass@1 when an executor is given) of the top-N
/// selection of every ranker, for every N.
pub fn run_main_comparison<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
    model: Option<&MlpModel>,
    executor: Option<&dyn Executor>,
    config: &ComparisonConfig,
) -> Result<ExperimentReport> {
    require_tasks(tasks)?;
    if config.rankers.is_empty() || config.n_values.is_empty() {
        return Err(Error::precondition("comparison needs at least one ranker and one N"));
    }
    if let Some(n) = config.n_values.iter().find(|&&n| n > min_pool(tasks)) {
        return Err(Error::precondition(format!(
            "N = {n} exceeds the smallest pool ({})",
            min_pool(tasks)
        )));
    }
    if model.is_none() && config.rankers.iter().any(RankerSpec::needs_model) {
        return Err(Error::Config("the model-based ranker needs a trained model".into()));
    }

    let baselines: Vec<TimedScore> = tasks
        .par_iter()
        .map(|t| timed_target(t, &[], template, backend))
        .collect::<Result<_>>()?;

    let mut report = ExperimentReport::new(
        "main_comparison",
        json!({
            "study": "compare",
            "rankers": config.rankers.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
            "n_values": config.n_values,
            "generation": config.generation,
            "executor": executor.map(|e| e.id()),
            "model": model.map(|m| json!({"seed": m.meta.seed, "epochs": m.meta.epochs, "learning_rate": m.meta.learning_rate})),
            "template": template,
            "backend": backend.id(),
            "tasks": tasks.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
        }),
    );
    let mut timing: BTreeMap<usize, Vec<TimingSample>> = BTreeMap::new();

    for spec in &config.rankers {
        let label = spec.to_string();
        let rankings = tasks
            .par_iter()
            .map(|t| rank(*spec, t, template, backend, model))
            .collect::<Result<Vec<_>>>()?;
        for &n in &config.n_values {
            let rows = tasks
                .par_iter()
                .zip(&rankings)
                .zip(&baselines)
                .map(|((task, ranking), base)| -> Result<(TimedScore, Option<bool>)> {
                    let chosen = select(ranking, task, &Selection::TopN(n), template, backend)?;
                    let scored = if chosen.is_empty() {
                        *base
                    } else {
                        timed_target(task, &chosen, template, backend)?
                    };
                    let passed = match executor {
                        Some(ex) => Some(pass_at_1(task, &chosen, template, backend, ex, &config.generation)?.passed),
                        None => None,
                    };
                    Ok((scored, passed))
                })
                .collect::<Result<Vec<_>>>()?;
            let values: Vec<f64> = rows.iter().map(|(s, _)| s.value).collect();
            let deltas: Vec<f64> = rows.iter().zip(&baselines).map(|((s, _), b)| s.log_value - b.log_value).collect();
            report.series.push(SeriesPoint::new(&label, METRIC_TARGET_PPL, n, stats(&values)));
            report.series.push(SeriesPoint::new(&label, METRIC_DELTA, n, stats(&deltas)));
            if executor.is_some() {
                let passes: Vec<f64> = rows.iter().map(|(_, p)| if p == &Some(true) { 1.0 } else { 0.0 }).collect();
                report.series.push(SeriesPoint::new(&label, METRIC_PASS, n, stats(&passes)));
            }
            if n > 0 {
                timing.entry(n).or_default().extend(rows.iter().map(|(s, _)| (s.tokens, s.seconds, s.simulated)));
            }
        }
    }
    let base_samples: Vec<TimingSample> = baselines.iter().map(|s| (s.tokens, s.seconds, s.simulated)).collect();
    report.timing.extend(timing_point(0, &base_samples));
    for (n, samples) in &timing {
        report.timing.extend(timing_point(*n, samples));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub train: TrainConfig,
}

/// Held-out agreement between predicted and actual target perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpearmanStats {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    /// Spearman over every held-out pair.
    pub global: f64,
    /// Mean of per-task Spearman over held-out tasks with at least two
    /// non-constant examples; `None` when no task qualifies.
    pub per_task: Option<MeanStderr>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStudyResult {
    /// `by_prompt` split: test prompts never seen in training.
    pub out_of_distribution: SpearmanStats,
    /// `by_example` split: test examples of prompts seen in training.
    pub in_distribution: SpearmanStats,
}

impl ShiftStudyResult {
    pub fn to_report(&self, config: &ShiftConfig, extra: Value) -> ExperimentReport {
        let mut report = ExperimentReport::new(
            "distribution_shift",
            json!({"study": "shift", "ratios": config.ratios, "seed": config.seed, "train": config.train, "run": extra}),
        );
        for (label, s) in [("out_of_distribution", &self.out_of_distribution), ("in_distribution", &self.in_distribution)] {
            report.series.push(SeriesPoint {
                ranker: label.into(),
                metric: "spearman_global".into(),
                n: 1,
                count: s.test_pairs,
                mean: s.global,
                stderr: 0.0,
            });
            if let Some(p) = s.per_task {
                report.series.push(SeriesPoint::new(label, "spearman_per_task", 1, p));
            }
        }
        report
    }
}

/// Trains one regressor on a prompt-level split and one on an
/// example-level split of the same pairs, and compares how well each ranks
/// its held-out pairs.
pub fn run_distribution_shift_study<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
    config: &ShiftConfig,
) -> Result<ShiftStudyResult> {
    require_tasks(tasks)?;
    let pairs = collect_pairs(tasks, template, backend)?;
    distribution_shift_from_pairs(tasks, &pairs, config)
}

fn held_out_stats(model: &MlpModel, test: &[&TrainingPair]) -> Result<(f64, Option<MeanStderr>)> {
    let predicted: Vec<f64> = test.iter().map(|p| model.forward(&p.embedding)).collect::<Result<_>>()?;
    let actual: Vec<f64> = test.iter().map(|p| p.target).collect();
    let global = spearman_scores(&predicted, &actual)?;
    let mut by_task: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((p, pred), act) in test.iter().zip(&predicted).zip(&actual) {
        let e = by_task.entry(p.task_id.as_str()).or_default();
        e.0.push(*pred);
        e.1.push(*act);
    }
    let per: Vec<f64> = by_task
        .values()
        .filter(|(p, _)| p.len() >= 2)
        .filter_map(|(p, a)| spearman_scores(p, a).ok())
        .collect();
    Ok((global, MeanStderr::of(&per)))
}

fn fit_and_score(
    train: Vec<TrainingPair>,
    val: Vec<TrainingPair>,
    test: Vec<&TrainingPair>,
    config: &TrainConfig,
    mode: &str,
) -> Result<SpearmanStats> {
    if train.is_empty() || test.len() < 2 {
        return Err(Error::domain(format!(
            "{mode} split leaves {} training and {} test pairs; need at least 1 and 2",
            train.len(),
            test.len()
        )));
    }
    let outcome = train_with_validation(&train, &val, config)?;
    let (global, per_task) = held_out_stats(&outcome.model, &test)?;
    Ok(SpearmanStats {
        train_pairs: train.len(),
        val_pairs: val.len(),
        test_pairs: test.len(),
        global,
        per_task,
        best_epoch: outcome.history.best_epoch,
    })
}

pub fn distribution_shift_from_pairs(
    tasks: &[CodingTask],
    pairs: &[TrainingPair],
    config: &ShiftConfig,
) -> Result<ShiftStudyResult> {
    require_tasks(tasks)?;
    let index: HashMap<(&str, usize), &TrainingPair> =
        pairs.iter().map(|p| ((p.task_id.as_str(), p.example_id), p)).collect();
    let lookup = |task: &CodingTask, ex: &IoExample| -> Result<&TrainingPair> {
        index.get(&(task.task_id.as_str(), ex.id)).copied().ok_or_else(|| {
            Error::domain(format!("no training pair for task `{}` example {}", task.task_id, ex.id))
        })
    };
    let pairs_of = |ts: &[CodingTask]| -> Result<Vec<&TrainingPair>> {
        ts.iter().flat_map(|t| t.pool.iter().map(move |e| (t, e))).map(|(t, e)| lookup(t, e)).collect()
    };

    let by_prompt = split_tasks(
        tasks,
        &SplitSpec {
            mode: SplitMode::ByPrompt,
            ratios: config.ratios,
            seed: config.seed,
        },
    )?;
    let ood = fit_and_score(
        pairs_of(&by_prompt.train)?.into_iter().cloned().collect(),
        pairs_of(&by_prompt.val)?.into_iter().cloned().collect(),
        pairs_of(&by_prompt.test)?,
        &config.train,
        "by_prompt",
    )?;

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for task in tasks {
        let split = split_examples(
            task,
            &SplitSpec {
                mode: SplitMode::ByExample,
                ratios: config.ratios,
                seed: derived_seed(&[task.task_id.as_bytes(), &config.seed.to_le_bytes()]),
            },
        )?;
        for e in &split.train {
            train.push(lookup(task, e)?.clone());
        }
        for e in &split.val {
            val.push(lookup(task, e)?.clone());
        }
        for e in &split.test {
            test.push(lookup(task, e)?);
        }
    }
    let id = fit_and_score(train, val, test, &config.train, "by_example")?;
    Ok(ShiftStudyResult {
        out_of_distribution: ood,
        in_distribution: id,
    })
}

/// Single-example study rows as a report: one series per backend label.
pub fn single_example_report(rows: &[StudyRow], template: &PromptTemplate, tasks: &[CodingTask]) -> ExperimentReport {
    let mut report = ExperimentReport::new(
        "single_example",
        json!({
            "study": "single",
            "template": template,
            "tasks": tasks.iter().map(|t| &t.task_id).collect::<Vec<_>>(),
        }),
    );
    for r in rows {
        for (metric, n, mean, stderr) in [
            ("no_example", 0, r.no_example, r.no_example_stderr),
            ("best_example", 1, r.best_example, r.best_example_stderr),
            ("average_example", 1, r.average_example, r.average_example_stderr),
            ("median_example", 1, r.median_example, r.median_example_stderr),
        ] {
            report.series.push(SeriesPoint {
                ranker: r.label.clone(),
                metric: metric.into(),
                n,
                count: r.n_prompts,
                mean,
                stderr,
            });
        }
    }
    report
}

/// Pass@1 and target perplexity of every one-example prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub task_id: String,
    pub example_id: usize,
    pub passed: bool,
    pub target_ppl: f64,
}

pub fn run_pass_perplexity_contrast<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
    executor: &dyn Executor,
    generation: &GenerationConfig,
) -> Result<(Vec<ContrastRow>, PassPerplexityContrast)> {
    require_tasks(tasks)?;
    let rows: Vec<ContrastRow> = tasks
        .par_iter()
        .flat_map(|t| t.pool.par_iter().map(move |e| (t, e)))
        .map(|(task, ex)| -> Result<ContrastRow> {
            let one = std::slice::from_ref(ex);
            Ok(ContrastRow {
                task_id: task.task_id.clone(),
                example_id: ex.id,
                passed: pass_at_1(task, one, template, backend, executor, generation)?.passed,
                target_ppl: target_perplexity(task, one, template, backend)?.value,
            })
        })
        .collect::<Result<_>>()?;
    let flat: Vec<(bool, f64)> = rows.iter().map(|r| (r.passed, r.target_ppl)).collect();
    Ok((rows, passat1_perplexity_contrast(&flat)))
}

pub fn contrast_report(contrast: &PassPerplexityContrast, config: Value) -> ExperimentReport {
    let mut report = ExperimentReport::new("pass_perplexity_contrast", config);
    for (label, group) in [("failed", &contrast.failed), ("passed", &contrast.passed)] {
        if let Some(s) = group {
            report.series.push(SeriesPoint::new(label, METRIC_TARGET_PPL, 1, *s));
        }
    }
    report
}

/// Source and target perplexity of every one-example prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTargetRow {
    pub task_id: String,
    pub example_id: usize,
    pub source_ppl: f64,
    pub target_ppl: f64,
}

pub fn source_target_rows<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
) -> Result<Vec<SourceTargetRow>> {
    tasks
        .par_iter()
        .flat_map(|t| t.pool.par_iter().map(move |e| (t, e)))
        .map(|(task, ex)| {
            Ok(SourceTargetRow {
                task_id: task.task_id.clone(),
                example_id: ex.id,
                source_ppl: source_perplexity(task, ex, template, backend)?.value,
                target_ppl: target_perplexity(task, std::slice::from_ref(ex), template, backend)?.value,
            })
        })
        .collect()
}

pub fn write_csv_rows<T: Serialize>(path: impl AsRef<Path>, header: &[&str], rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Harness(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Harness(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Harness(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `task_id, example_id, log_target_ppl, e0 .. e{d-1}`, one row per pair.
pub fn write_embeddings_csv(path: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    let path = path.as_ref();
    let dim = pairs.first().map_or(0, |p| p.embedding.dim());
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["task_id".to_string(), "example_id".to_string(), "log_target_ppl".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    let io = |e: csv::Error| Error::Harness(e.to_string());
    w.write_record(&header).map_err(io)?;
    for p in pairs {
        if p.embedding.dim() != dim {
            return Err(Error::domain("embeddings differ in dimension"));
        }
        let mut rec = vec![p.task_id.clone(), p.example_id.to_string(), p.target.to_string()];
        rec.extend(p.embedding.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Harness(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, SimulatedLatency};
    use crate::evalharness::executor::MockExecutor;
    use crate::prompting::whitespace_token_count;
    use std::time::Duration;

    fn task(id: &str, m: usize) -> CodingTask {
        CodingTask {
            task_id: id.into(),
            nl_description: format!("Solve {id}."),
            entry_point: "f".into(),
            ground_truth: "def f(x): return x".into(),
            pool: (0..m).map(|i| IoExample::new(i, format!("f({i})"), i.to_string())).collect(),
            eval_tests: vec![IoExample::new(50, "f(50)", "50")],
        }
    }

    /// Every example present in the context adds `boost` to each
    /// ground-truth token log-probability.
    fn boost_world(boost: f64) -> MockBackend {
        MockBackend::new().with_scorer(move |ctx, cont| {
            let k = ctx.matches(" == ").count() as f64;
            vec![-1.0 + boost * k; whitespace_token_count(cont)]
        })
    }

    #[test]
    fn multi_zero_is_a_single_zero_point() {
        let tasks = vec![task("a", 3), task("b", 4)];
        let cfg = MultiStudyConfig {
            max_n: 0,
            trials: 2,
            seed: 1,
        };
        let r = run_multi_example_study(&tasks, &PromptTemplate::default(), &boost_world(0.1), &cfg).unwrap();
        let deltas = r.curve("random", METRIC_DELTA);
        assert_eq!(deltas.len(), 1);
        assert_eq!(deltas[0].mean, 0.0);
    }

    #[test]
    fn multi_matches_summed_boosts() {
        let tasks = vec![task("a", 5), task("b", 6)];
        let cfg = MultiStudyConfig {
            max_n: 4,
            trials: 3,
            seed: 7,
        };
        let r = run_multi_example_study(&tasks, &PromptTemplate::default(), &boost_world(0.1), &cfg).unwrap();
        for n in 0..=4 {
            let p = r.point("random", METRIC_DELTA, n).unwrap();
            assert!((p.mean - (-0.1 * n as f64)).abs() < 1e-12, "n={n}: {}", p.mean);
            assert!(p.stderr < 1e-12);
        }
        let again = run_multi_example_study(&tasks, &PromptTemplate::default(), &boost_world(0.1), &cfg).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn multi_preconditions() {
        let tasks = vec![task("a", 2)];
        let world = boost_world(0.0);
        let t = PromptTemplate::default();
        let too_many = MultiStudyConfig {
            max_n: 3,
            trials: 1,
            seed: 0,
        };
        assert!(matches!(run_multi_example_study(&tasks, &t, &world, &too_many), Err(Error::Precondition(_))));
        let no_trials = MultiStudyConfig {
            max_n: 1,
            trials: 0,
            seed: 0,
        };
        assert!(matches!(run_multi_example_study(&tasks, &t, &world, &no_trials), Err(Error::Precondition(_))));
    }

    #[test]
    fn simulated_timing_grows_with_examples() {
        let tasks = vec![task("a", 5)];
        let world = boost_world(0.05).with_latency(SimulatedLatency {
            base: Duration::from_millis(10),
            per_token: Duration::from_millis(1),
        });
        let cfg = MultiStudyConfig {
            max_n: 5,
            trials: 1,
            seed: 0,
        };
        let r = run_multi_example_study(&tasks, &PromptTemplate::default(), &world, &cfg).unwrap();
        assert_eq!(r.timing.len(), 6);
        for w in r.timing.windows(2) {
            assert!(w[1].mean_tokens > w[0].mean_tokens);
            assert!(w[1].mean_seconds >= w[0].mean_seconds && w[0].mean_seconds >= 0.0);
            assert_eq!(w[0].clock, "simulated");
        }
    }

    #[test]
    fn comparison_zero_ties_and_needs_model() {
        let tasks = vec![task("a", 3), task("b", 3)];
        let world = MockBackend::new().with_hashed_scores();
        let t = PromptTemplate::default();
        let cfg = ComparisonConfig {
            rankers: vec![RankerSpec::ModelFree, RankerSpec::Random(3), RankerSpec::HumanOrder, RankerSpec::Oracle],
            n_values: vec![0],
            generation: GenerationConfig::default(),
        };
        let r = run_main_comparison(&tasks, &t, &world, None, None, &cfg).unwrap();
        let zero: Vec<f64> = cfg.rankers.iter().map(|s| r.point(&s.to_string(), METRIC_TARGET_PPL, 0).unwrap().mean).collect();
        assert!(zero.windows(2).all(|w| w[0] == w[1]));

        let with_model = ComparisonConfig {
            rankers: vec![RankerSpec::ModelBased(crate::rankers::Direction::Ascending)],
            ..cfg
        };
        assert!(matches!(run_main_comparison(&tasks, &t, &world, None, None, &with_model), Err(Error::Config(_))));
    }

    #[test]
    fn comparison_records_pass_at_1() {
        let tasks = vec![task("a", 2)];
        let t = PromptTemplate::default();
        let world = MockBackend::new().with_hashed_scores();
        let exec = MockExecutor::new().with_judge(|req| super::super::executor::ExecutionResponse::from_flags(&vec![req.solution_code.is_empty(); req.tests.len()]));
        let cfg = ComparisonConfig {
            rankers: vec![RankerSpec::HumanOrder],
            n_values: vec![0, 1],
            generation: GenerationConfig::default(),
        };
        let r = run_main_comparison(&tasks, &t, &world, None, Some(&exec), &cfg).unwrap();
        // unknown prompts complete to "", which this judge passes
        assert_eq!(r.point("human_order", METRIC_PASS, 1).unwrap().mean, 1.0);
    }

    #[test]
    fn shift_rejects_single_task() {
        let tasks = vec![task("only", 6)];
        let cfg = ShiftConfig {
            ratios: SplitRatios::default(),
            seed: 0,
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        };
        let r = run_distribution_shift_study(&tasks, &PromptTemplate::default(), &MockBackend::new().with_hashed_scores(), &cfg);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn shift_is_deterministic() {
        let tasks: Vec<_> = (0..6).map(|i| task(&format!("t{i}"), 5)).collect();
        let cfg = ShiftConfig {
            ratios: SplitRatios::new(0.6, 0.0, 0.4).unwrap(),
            seed: 2,
            train: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
        };
        let world = MockBackend::new().with_hashed_scores();
        let a = run_distribution_shift_study(&tasks, &PromptTemplate::default(), &world, &cfg).unwrap();
        let b = run_distribution_shift_study(&tasks, &PromptTemplate::default(), &world, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.in_distribution.train_pairs + a.in_distribution.test_pairs, 30);
    }

    #[test]
    fn contrast_and_exports() {
        let tasks = vec![task("a", 2), task("b", 2)];
        let t = PromptTemplate::default();
        let world = MockBackend::new().with_hashed_scores();
        let exec = MockExecutor::new().with_verdict("", vec![false]);
        let (rows, c) = run_pass_perplexity_contrast(&tasks, &t, &world, &exec, &GenerationConfig::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(c.passed.is_none());
        assert_eq!(c.failed.unwrap().n, 4);

        let dir = tempfile::tempdir().unwrap();
        let st = source_target_rows(&tasks, &t, &world).unwrap();
        let path = dir.path().join("st.csv");
        write_csv_rows(&path, &["task_id", "example_id", "source_ppl", "target_ppl"], &st).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);

        let pairs = collect_pairs(&tasks, &t, &world).unwrap();
        let path = dir.path().join("emb.csv");
        write_embeddings_csv(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task_id,example_id,log_target_ppl,e0,"));
        assert_eq!(text.lines().count(), 5);
    }
}
