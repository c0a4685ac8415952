use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use exemplar_core::backend::{Backend, EmbeddingVector};
use exemplar_core::dataset::{self, split_examples, split_tasks, CodingTask, SplitMode, SplitRatios, SplitSpec};
use exemplar_core::evalharness::{
    contrast_report, derived_seed, distribution_shift_from_pairs, export_report, import_report, pass_at_1, pass_rate,
    run_distribution_shift_study, run_main_comparison, run_multi_example_study, run_pass_perplexity_contrast,
    single_example_report, source_target_rows, write_csv_rows, write_embeddings_csv, ComparisonConfig, Executor,
    ExperimentReport, GenerationConfig, MultiStudyConfig, ShiftConfig, SubprocessExecutor,
};
use exemplar_core::metrics::{single_example_study, source_perplexity, target_perplexity};
use exemplar_core::mlpranker::{self, collect_pairs, collect_pairs_resumable, read_pairs, train_with_validation, write_pairs, MlpModel, TrainConfig};
use exemplar_core::prompting::{render_prompt, BudgetSpec};
use exemplar_core::rankers::{rank, read_rankings, select, write_rankings, Direction, RankerSpec, Selection};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{now_ms, RunManifest};
use crate::settings::Settings;
use crate::{usage, Cli, Command, ExecArgs, OptionalExecArgs, Study, TrainArgs};

pub const ERRORS_FILE: &str = "errors.jsonl";

#[derive(Debug, Serialize)]
struct ItemError {
    task_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    example_id: Option<usize>,
    error: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SourceRecord {
    task_id: String,
    example_id: usize,
    ppl: f64,
    log_ppl: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetRecord {
    task_id: String,
    example_ids: Vec<usize>,
    ppl: f64,
    log_ppl: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedRecord {
    task_id: String,
    example_id: usize,
    embedding: EmbeddingVector,
}

/// One line of `selections.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub task_id: String,
    pub ranker_id: String,
    pub example_ids: Vec<usize>,
    pub prompt: String,
}

#[derive(Debug, Serialize)]
struct ExampleSplitRecord {
    task_id: String,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    epoch: usize,
    train_loss: f64,
    val_loss: Option<f64>,
}

struct Run {
    settings: Settings,
    backend: Option<Box<dyn Backend>>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    errors: Vec<ItemError>,
}

impl Run {
    fn backend(&mut self) -> Result<&dyn Backend> {
        if self.backend.is_none() {
            self.backend = Some(self.settings.build_backend()?);
        }
        Ok(self.backend.as_deref().unwrap())
    }

    fn out(&mut self, name: &str) -> PathBuf {
        let p = self.settings.out_dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn tasks(&mut self, path: &Path) -> Result<Vec<CodingTask>> {
        self.inputs.push(path.to_path_buf());
        dataset::load_tasks(path).with_context(|| format!("loading tasks from {}", path.display()))
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<PathBuf> {
        let path = self.out(name);
        write_jsonl(&path, items)?;
        Ok(path)
    }

    fn export(&mut self, report: &ExperimentReport) -> Result<()> {
        let files = export_report(report, &self.settings.out_dir)?;
        self.outputs
            .extend([files.report_json, files.series_csv, files.series_jsonl, files.timing_csv]);
        Ok(())
    }

    /// Runs `f` on every item, keeping successes in order and recording
    /// failures.
    fn batch<T: Sync, R: Send>(
        &mut self,
        items: &[T],
        key: impl Fn(&T) -> (String, Option<usize>) + Sync,
        f: impl Fn(&T) -> exemplar_core::Result<R> + Sync,
    ) -> Vec<R> {
        let results: Vec<_> = items.par_iter().map(|it| f(it).map_err(|e| (key(it), e))).collect();
        let mut ok = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(v) => ok.push(v),
                Err(((task_id, example_id), e)) => {
                    log::warn!("{task_id}: {e}");
                    self.errors.push(ItemError {
                        task_id,
                        example_id,
                        error: e.to_string(),
                    });
                }
            }
        }
        ok
    }

    fn model(&mut self, path: &Path) -> Result<MlpModel> {
        self.inputs.push(path.to_path_buf());
        mlpranker::load(path).with_context(|| format!("loading model {}", path.display()))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn pool_items(tasks: &[CodingTask]) -> Vec<(&CodingTask, &dataset::IoExample)> {
    tasks.iter().flat_map(|t| t.pool.iter().map(move |e| (t, e))).collect()
}

fn example_key((t, e): &(&CodingTask, &dataset::IoExample)) -> (String, Option<usize>) {
    (t.task_id.clone(), Some(e.id))
}

fn train_config(args: &TrainArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed,
        ..TrainConfig::default()
    }
}

fn executor(program: &Path, args: &[String]) -> SubprocessExecutor {
    SubprocessExecutor::new(program, args.to_vec())
}

fn generation(max_new_tokens: usize, timeout_ms: u64) -> GenerationConfig {
    GenerationConfig {
        max_new_tokens,
        timeout_ms,
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::Split { .. } => "split",
        Command::ScoreSource { .. } => "score-source",
        Command::ScoreTarget { .. } => "score-target",
        Command::Embed { .. } => "embed",
        Command::Collect { .. } => "collect",
        Command::Train { .. } => "train",
        Command::Rank { .. } => "rank",
        Command::Select { .. } => "select",
        Command::Eval { .. } => "eval",
        Command::Study(s) => match s {
            Study::Single { .. } => "study single",
            Study::Multi { .. } => "study multi",
            Study::Compare { .. } => "study compare",
            Study::Shift { .. } => "study shift",
            Study::Contrast { .. } => "study contrast",
            Study::SourceTarget { .. } => "study source-target",
            Study::Embeddings { .. } => "study embeddings",
        },
        Command::Report { .. } => "report",
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    let started = now_ms();
    let settings = Settings::resolve(&cli.global, |k| std::env::var(k).ok())?;
    std::fs::create_dir_all(&settings.out_dir)
        .with_context(|| format!("creating {}", settings.out_dir.display()))?;
    let mut run = Run {
        settings,
        backend: None,
        inputs: Vec::new(),
        outputs: Vec::new(),
        errors: Vec::new(),
    };
    let name = command_name(&cli.command);
    dispatch(&mut run, cli.command)?;

    let failed = run.errors.len();
    if failed > 0 {
        let errors = std::mem::take(&mut run.errors);
        run.write_jsonl(ERRORS_FILE, &errors)?;
    }
    let manifest = RunManifest {
        command: name.to_string(),
        args: argv,
        config_hash: run.settings.hash(),
        config: serde_json::to_value(&run.settings)?,
        seeds: BTreeMap::from([("seed".to_string(), run.settings.seed)]),
        backend_id: run.backend.as_ref().map(|b| b.id().to_string()),
        inputs: run.inputs.clone(),
        outputs: run.outputs.clone(),
        failed_items: failed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    manifest.write(&run.settings.out_dir)?;
    if failed > 0 && !run.settings.keep_going {
        bail!(
            "{failed} item(s) failed; see {}",
            run.settings.out_dir.join(ERRORS_FILE).display()
        );
    }
    Ok(())
}

fn dispatch(run: &mut Run, command: Command) -> Result<()> {
    let seed = run.settings.seed;
    let template = run.settings.template.clone();
    match command {
        Command::Ingest { input } => ingest(run, &input),
        Command::Split { tasks, mode, ratios } => split(run, &tasks, mode, ratios),
        Command::ScoreSource { tasks } => {
            let tasks = run.tasks(&tasks)?;
            let backend = run.settings.build_backend()?;
            let items = pool_items(&tasks);
            let records = run.batch(&items, example_key, |(t, e)| {
                let s = source_perplexity(t, e, &template, &backend)?;
                Ok(SourceRecord {
                    task_id: t.task_id.clone(),
                    example_id: e.id,
                    ppl: s.value,
                    log_ppl: s.log_value,
                })
            });
            run.backend = Some(backend);
            run.write_jsonl("source_ppl.jsonl", &records)?;
            Ok(())
        }
        Command::ScoreTarget { tasks, selections } => {
            let tasks = run.tasks(&tasks)?;
            let mut jobs: Vec<(&CodingTask, Vec<usize>)> = Vec::new();
            match selections {
                Some(path) => {
                    run.inputs.push(path.clone());
                    let by_id: HashMap<&str, &CodingTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
                    for s in read_jsonl::<SelectionRecord>(&path)? {
                        let task = by_id
                            .get(s.task_id.as_str())
                            .ok_or_else(|| anyhow!("selection for unknown task `{}`", s.task_id))?;
                        jobs.push((task, s.example_ids));
                    }
                }
                None => {
                    for t in &tasks {
                        jobs.push((t, vec![]));
                        jobs.extend(t.pool.iter().map(|e| (t, vec![e.id])));
                    }
                }
            }
            let backend = run.settings.build_backend()?;
            let records = run.batch(
                &jobs,
                |(t, _)| (t.task_id.clone(), None),
                |(t, ids)| {
                    let examples = ids
                        .iter()
                        .map(|id| {
                            t.pool_example(*id).cloned().ok_or_else(|| {
                                exemplar_core::Error::domain(format!("task `{}` has no pool example {id}", t.task_id))
                            })
                        })
                        .collect::<exemplar_core::Result<Vec<_>>>()?;
                    let s = target_perplexity(t, &examples, &template, &backend)?;
                    Ok(TargetRecord {
                        task_id: t.task_id.clone(),
                        example_ids: ids.clone(),
                        ppl: s.value,
                        log_ppl: s.log_value,
                    })
                },
            );
            run.backend = Some(backend);
            run.write_jsonl("target_ppl.jsonl", &records)?;
            Ok(())
        }
        Command::Embed { tasks } => {
            let tasks = run.tasks(&tasks)?;
            let backend = run.settings.build_backend()?;
            let items = pool_items(&tasks);
            let records = run.batch(&items, example_key, |(t, e)| {
                let prompt = render_prompt(&template, &t.nl_description, std::slice::from_ref(*e));
                Ok(EmbedRecord {
                    task_id: t.task_id.clone(),
                    example_id: e.id,
                    embedding: backend.embed(&prompt)?,
                })
            });
            run.backend = Some(backend);
            run.write_jsonl("embeddings.jsonl", &records)?;
            Ok(())
        }
        Command::Collect { tasks } => {
            let tasks = run.tasks(&tasks)?;
            let checkpoint = run.settings.out_dir.join("pairs.checkpoint.jsonl");
            let pairs = collect_pairs_resumable(&tasks, &template, run.backend()?, Some(&checkpoint))?;
            let path = run.out("pairs.jsonl");
            write_pairs(&path, &pairs)?;
            println!("{} pairs", pairs.len());
            Ok(())
        }
        Command::Train {
            pairs,
            val_pairs,
            train,
            model_file,
        } => {
            run.inputs.push(pairs.clone());
            let train_pairs = read_pairs(&pairs)?;
            let val = match val_pairs {
                Some(p) => {
                    run.inputs.push(p.clone());
                    read_pairs(&p)?
                }
                None => Vec::new(),
            };
            let config = train_config(&train, seed);
            config.validate().map_err(|e| usage(e.to_string()))?;
            let outcome = train_with_validation(&train_pairs, &val, &config)?;
            let path = match model_file {
                Some(p) => {
                    run.outputs.push(p.clone());
                    p
                }
                None => run.out("model.bin"),
            };
            mlpranker::save(&outcome.model, &path)?;
            let h = &outcome.history;
            let rows: Vec<HistoryRow> = h
                .train_loss
                .iter()
                .enumerate()
                .map(|(epoch, &train_loss)| HistoryRow {
                    epoch,
                    train_loss,
                    val_loss: h.val_loss.get(epoch).copied(),
                })
                .collect();
            let hist = run.out("history.csv");
            write_csv_rows(&hist, &["epoch", "train_loss", "val_loss"], &rows)?;
            println!(
                "trained on {} pairs; final loss {:.6}; best epoch {}",
                train_pairs.len(),
                h.train_loss.last().copied().unwrap_or(f64::NAN),
                h.best_epoch
            );
            Ok(())
        }
        Command::Rank {
            tasks,
            ranker,
            model_file,
        } => {
            let tasks = run.tasks(&tasks)?;
            let model = match (&model_file, ranker.needs_model()) {
                (Some(p), _) => Some(run.model(p)?),
                (None, true) => return Err(usage(format!("ranker `{ranker}` needs --model-file"))),
                (None, false) => None,
            };
            let backend = run.settings.build_backend()?;
            let rankings = run.batch(
                &tasks,
                |t| (t.task_id.clone(), None),
                |t| rank(ranker, t, &template, &backend, model.as_ref()),
            );
            run.backend = Some(backend);
            let path = run.out("rankings.jsonl");
            write_rankings(&path, &rankings)?;
            Ok(())
        }
        Command::Select {
            tasks,
            rankings,
            n,
            budget_tokens,
            budget_scope,
        } => {
            let tasks = run.tasks(&tasks)?;
            run.inputs.push(rankings.clone());
            let rankings = read_rankings(&rankings)?;
            let selection = match (n, budget_tokens) {
                (Some(n), None) => Selection::TopN(n),
                (None, Some(b)) => Selection::Budget(BudgetSpec::tokens(b, budget_scope)),
                _ => return Err(usage("give exactly one of --n and --budget-tokens")),
            };
            let by_id: HashMap<&str, &CodingTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
            let backend = run.settings.build_backend()?;
            let records = run.batch(
                &rankings,
                |r| (r.task_id.clone(), None),
                |r| {
                    let task = by_id
                        .get(r.task_id.as_str())
                        .ok_or_else(|| exemplar_core::Error::domain(format!("ranking for unknown task `{}`", r.task_id)))?;
                    let chosen = select(r, task, &selection, &template, backend.as_ref())?;
                    Ok(SelectionRecord {
                        task_id: r.task_id.clone(),
                        ranker_id: r.ranker_id.clone(),
                        example_ids: chosen.iter().map(|e| e.id).collect(),
                        prompt: render_prompt(&template, &task.nl_description, &chosen),
                    })
                },
            );
            run.backend = Some(backend);
            run.write_jsonl("selections.jsonl", &records)?;
            Ok(())
        }
        Command::Eval {
            tasks,
            selections,
            exec,
        } => eval(run, &tasks, selections.as_deref(), &exec),
        Command::Study(study) => run_study(run, study),
        Command::Report { input } => {
            run.inputs.push(input.clone());
            let report = import_report(&input)?;
            run.export(&report)?;
            println!("{}", report.experiment_id);
            for p in &report.series {
                println!("{}\t{}\tN={}\t{:.6} ± {:.6} (n={})", p.ranker, p.metric, p.n, p.mean, p.stderr, p.count);
            }
            Ok(())
        }
    }
}

fn ingest(run: &mut Run, input: &Path) -> Result<()> {
    run.inputs.push(input.to_path_buf());
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = dataset::parse_task_line(&line, i + 1).and_then(|t| t.validate().map(|_| t));
        match parsed {
            Ok(t) if !seen.insert(t.task_id.clone()) => run.errors.push(ItemError {
                task_id: t.task_id,
                example_id: None,
                error: format!("line {}: duplicate task id", i + 1),
            }),
            Ok(t) => tasks.push(t),
            Err(e) => run.errors.push(ItemError {
                task_id: format!("<line {}>", i + 1),
                example_id: None,
                error: e.to_string(),
            }),
        }
    }
    let path = run.out("tasks.jsonl");
    dataset::write_tasks(&path, &tasks)?;
    println!("{} tasks", tasks.len());
    Ok(())
}

fn split(run: &mut Run, tasks: &Path, mode: SplitMode, ratios: SplitRatios) -> Result<()> {
    let tasks = run.tasks(tasks)?;
    let seed = run.settings.seed;
    let parts = match mode {
        SplitMode::ByPrompt => {
            let s = split_tasks(&tasks, &SplitSpec { mode, ratios, seed })?;
            [s.train, s.val, s.test]
        }
        SplitMode::ByExample => {
            let mut parts: [Vec<CodingTask>; 3] = Default::default();
            let mut assignment = Vec::new();
            for t in &tasks {
                let spec = SplitSpec {
                    mode,
                    ratios,
                    seed: derived_seed(&[t.task_id.as_bytes(), &seed.to_le_bytes()]),
                };
                let s = split_examples(t, &spec)?;
                let ids = |v: &[dataset::IoExample]| v.iter().map(|e| e.id).collect::<Vec<_>>();
                assignment.push(ExampleSplitRecord {
                    task_id: t.task_id.clone(),
                    train: ids(&s.train),
                    val: ids(&s.val),
                    test: ids(&s.test),
                });
                for (part, pool) in parts.iter_mut().zip([s.train, s.val, s.test]) {
                    // a task with no examples in a part is left out of that file
                    if !pool.is_empty() {
                        part.push(t.with_pool(pool));
                    }
                }
            }
            run.write_jsonl("example_split.jsonl", &assignment)?;
            parts
        }
    };
    for (name, part) in ["train", "val", "test"].iter().zip(&parts) {
        let path = run.out(&format!("{name}.jsonl"));
        dataset::write_tasks(&path, part)?;
    }
    println!("{}/{}/{}", parts[0].len(), parts[1].len(), parts[2].len());
    Ok(())
}

fn eval(run: &mut Run, tasks: &Path, selections: Option<&Path>, exec: &ExecArgs) -> Result<()> {
    let tasks = run.tasks(tasks)?;
    let chosen: Option<HashMap<String, Vec<usize>>> = match selections {
        Some(p) => {
            run.inputs.push(p.to_path_buf());
            Some(read_jsonl::<SelectionRecord>(p)?.into_iter().map(|s| (s.task_id, s.example_ids)).collect())
        }
        None => None,
    };
    let template = run.settings.template.clone();
    let executor = executor(&exec.executor, &exec.executor_args);
    let config = generation(exec.max_new_tokens, exec.timeout_ms);
    let backend = run.settings.build_backend()?;
    let verdicts = run.batch(
        &tasks,
        |t| (t.task_id.clone(), None),
        |t| {
            let examples = match &chosen {
                None => Vec::new(),
                Some(map) => map
                    .get(&t.task_id)
                    .ok_or_else(|| exemplar_core::Error::domain(format!("no selection for task `{}`", t.task_id)))?
                    .iter()
                    .map(|id| {
                        t.pool_example(*id)
                            .cloned()
                            .ok_or_else(|| exemplar_core::Error::domain(format!("no pool example {id}")))
                    })
                    .collect::<exemplar_core::Result<Vec<_>>>()?,
            };
            pass_at_1(t, &examples, &template, &backend, &executor, &config)
        },
    );
    run.backend = Some(backend);
    run.write_jsonl("verdicts.jsonl", &verdicts)?;
    match pass_rate(&verdicts) {
        Some(r) => println!("pass@1 {r:.4} over {} tasks", verdicts.len()),
        None => println!("no tasks evaluated"),
    }
    Ok(())
}

fn optional_executor(exec: &OptionalExecArgs) -> Option<SubprocessExecutor> {
    exec.executor.as_ref().map(|p| executor(p, &exec.executor_args))
}

fn run_study(run: &mut Run, study: Study) -> Result<()> {
    let seed = run.settings.seed;
    let template = run.settings.template.clone();
    match study {
        Study::Single { tasks } => {
            let tasks = run.tasks(&tasks)?;
            let backend = run.backend()?;
            let rows = single_example_study(&tasks, &template, &[(backend.id(), backend)])?;
            let report = single_example_report(&rows, &template, &tasks);
            run.export(&report)
        }
        Study::Multi { tasks, max_n, trials } => {
            let tasks = run.tasks(&tasks)?;
            let config = MultiStudyConfig { max_n, trials, seed };
            let report = run_multi_example_study(&tasks, &template, run.backend()?, &config)?;
            run.export(&report)
        }
        Study::Compare {
            tasks,
            ranker,
            n,
            model_file,
            exec,
        } => {
            let tasks = run.tasks(&tasks)?;
            let model = match &model_file {
                Some(p) => Some(run.model(p)?),
                None => None,
            };
            let rankers = if ranker.is_empty() {
                let mut r = vec![RankerSpec::ModelFree, RankerSpec::Random(seed), RankerSpec::HumanOrder, RankerSpec::Oracle];
                if model.is_some() {
                    r.push(RankerSpec::ModelBased(Direction::Ascending));
                    r.push(RankerSpec::ModelBased(Direction::Descending));
                }
                r
            } else {
                ranker
            };
            if model.is_none() {
                if let Some(r) = rankers.iter().find(|r| r.needs_model()) {
                    return Err(usage(format!("ranker `{r}` needs --model-file")));
                }
            }
            let executor = optional_executor(&exec);
            let config = ComparisonConfig {
                rankers,
                n_values: n,
                generation: generation(exec.max_new_tokens, exec.timeout_ms),
            };
            let report = run_main_comparison(
                &tasks,
                &template,
                run.backend()?,
                model.as_ref(),
                executor.as_ref().map(|e| e as &dyn Executor),
                &config,
            )?;
            run.export(&report)
        }
        Study::Shift {
            tasks,
            pairs,
            ratios,
            train,
        } => {
            let tasks = run.tasks(&tasks)?;
            let config = ShiftConfig {
                ratios,
                seed,
                train: train_config(&train, seed),
            };
            config.train.validate().map_err(|e| usage(e.to_string()))?;
            let (result, backend_id) = match pairs {
                Some(p) => {
                    run.inputs.push(p.clone());
                    (distribution_shift_from_pairs(&tasks, &read_pairs(&p)?, &config)?, None)
                }
                None => {
                    let backend = run.backend()?;
                    let id = backend.id().to_string();
                    (run_distribution_shift_study(&tasks, &template, backend, &config)?, Some(id))
                }
            };
            let raw = run.out("shift.json");
            let mut json = serde_json::to_vec_pretty(&result)?;
            json.push(b'\n');
            std::fs::write(&raw, json)?;
            let report = result.to_report(&config, json!({"backend": backend_id}));
            run.export(&report)
        }
        Study::Contrast { tasks, exec } => {
            let tasks = run.tasks(&tasks)?;
            let executor = executor(&exec.executor, &exec.executor_args);
            let gen = generation(exec.max_new_tokens, exec.timeout_ms);
            let backend = run.backend()?;
            let id = backend.id().to_string();
            let (rows, contrast) = run_pass_perplexity_contrast(&tasks, &template, backend, &executor, &gen)?;
            run.write_jsonl("contrast_rows.jsonl", &rows)?;
            run.export(&contrast_report(&contrast, json!({"backend": id, "template": template})))
        }
        Study::SourceTarget { tasks } => {
            let tasks = run.tasks(&tasks)?;
            let rows = source_target_rows(&tasks, &template, run.backend()?)?;
            let path = run.out("source_target.csv");
            write_csv_rows(&path, &["task_id", "example_id", "source_ppl", "target_ppl"], &rows)?;
            Ok(())
        }
        Study::Embeddings { tasks, pairs } => {
            let tasks = run.tasks(&tasks)?;
            let pairs = match pairs {
                Some(p) => {
                    run.inputs.push(p.clone());
                    read_pairs(&p)?
                }
                None => collect_pairs(&tasks, &template, run.backend()?)?,
            };
            let path = run.out("embeddings.csv");
            write_embeddings_csv(&path, &pairs)?;
            Ok(())
        }
    }
}
