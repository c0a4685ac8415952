//! Benchmark task ingestion and deterministic splitting.
//!
//! Task files are UTF-8 JSON lines. Each record carries a natural-language
//! description, the reference solution, a pool of candidate input/output
//! examples and a disjoint set of held-out tests:
//!
//! ```json
//! {"task_id": "HumanEval/25", "nl_description": "...", "entry_point": "factorize",
//!  "ground_truth": "def factorize(n): ...",
//!  "pool": [{"input_expr": "factorize(8)", "expected_expr": "[2, 2, 2]"}],
//!  "eval_tests": [{"input_expr": "factorize(25)", "expected_expr": "[5, 5]"}]}
//! ```
//!
//! Example objects may carry an explicit integer `id`; when absent the id is
//! the example's position in its array.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One candidate demonstration: a call expression and its expected value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoExample {
    pub id: usize,
    pub input_expr: String,
    pub expected_expr: String,
}

impl IoExample {
    pub fn new(id: usize, input_expr: impl Into<String>, expected_expr: impl Into<String>) -> Self {
        Self {
            id,
            input_expr: input_expr.into(),
            expected_expr: expected_expr.into(),
        }
    }

    fn pair(&self) -> (&str, &str) {
        (&self.input_expr, &self.expected_expr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingTask {
    pub task_id: String,
    pub nl_description: String,
    pub entry_point: String,
    pub ground_truth: String,
    pub pool: Vec<IoExample>,
    pub eval_tests: Vec<IoExample>,
}

impl CodingTask {
    /// Checks the record-level invariants: non-empty text, at least one pool
    /// example and one held-out test, unique ids, and no (input, expected)
    /// pair shared between pool and held-out tests.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            task_id: self.task_id.clone(),
            message,
        };
        if self.ground_truth.is_empty() {
            return Err(fail("ground_truth is empty".into()));
        }
        if self.pool.is_empty() {
            return Err(fail("pool is empty".into()));
        }
        if self.eval_tests.is_empty() {
            return Err(fail("eval_tests is empty".into()));
        }
        for (section, examples) in [("pool", &self.pool), ("eval_tests", &self.eval_tests)] {
            let mut ids = HashSet::new();
            for ex in examples {
                if ex.input_expr.is_empty() || ex.expected_expr.is_empty() {
                    return Err(fail(format!("{section} example {} has empty text", ex.id)));
                }
                if !ids.insert(ex.id) {
                    return Err(fail(format!("{section} has duplicate id {}", ex.id)));
                }
            }
        }
        let held_out: HashSet<(&str, &str)> = self.eval_tests.iter().map(IoExample::pair).collect();
        if let Some(ex) = self.pool.iter().find(|ex| held_out.contains(&ex.pair())) {
            return Err(fail(format!(
                "pool example {} (`{} == {}`) also appears in eval_tests",
                ex.id, ex.input_expr, ex.expected_expr
            )));
        }
        Ok(())
    }

    pub fn pool_example(&self, id: usize) -> Option<&IoExample> {
        self.pool.iter().find(|ex| ex.id == id)
    }

    /// A copy of this task whose pool is replaced by `pool`.
    pub fn with_pool(&self, pool: Vec<IoExample>) -> CodingTask {
        CodingTask {
            pool,
            ..self.clone()
        }
    }
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<CodingTask>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task = parse_task_line(&line, idx + 1)?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// Symmetric serializer for [`load_tasks`]. Example ids are always written.
pub fn write_tasks(path: impl AsRef<Path>, tasks: &[CodingTask]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for task in tasks {
        let line = serde_json::to_string(task).expect("task serialization is infallible");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_task_line(line: &str, line_no: usize) -> Result<CodingTask> {
    let parse_err = |field: &str, message: String| Error::Parse {
        line: line_no,
        field: field.to_string(),
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| parse_err("<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err("<record>", "expected a JSON object".into()))?;

    let text = |field: &str| -> Result<String> {
        match obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(other) => Err(parse_err(field, format!("expected string, found {other}"))),
            None => Err(parse_err(field, "missing".into())),
        }
    };
    let examples = |field: &str| -> Result<Vec<IoExample>> {
        let items = match obj.get(field) {
            Some(Value::Array(items)) => items,
            Some(_) => return Err(parse_err(field, "expected array".into())),
            None => return Err(parse_err(field, "missing".into())),
        };
        items
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let sub = |name: &str| format!("{field}[{pos}].{name}");
                let item = item
                    .as_object()
                    .ok_or_else(|| parse_err(&format!("{field}[{pos}]"), "expected object".into()))?;
                let get = |name: &str| -> Result<String> {
                    match item.get(name) {
                        Some(Value::String(s)) => Ok(s.clone()),
                        Some(_) => Err(parse_err(&sub(name), "expected string".into())),
                        None => Err(parse_err(&sub(name), "missing".into())),
                    }
                };
                let id = match item.get("id") {
                    None | Some(Value::Null) => pos,
                    Some(v) => v
                        .as_u64()
                        .map(|v| v as usize)
                        .ok_or_else(|| parse_err(&sub("id"), "expected non-negative integer".into()))?,
                };
                Ok(IoExample {
                    id,
                    input_expr: get("input_expr")?,
                    expected_expr: get("expected_expr")?,
                })
            })
            .collect()
    };

    Ok(CodingTask {
        task_id: text("task_id")?,
        nl_description: text("nl_description")?,
        entry_point: text("entry_point")?,
        ground_truth: text("ground_truth")?,
        pool: examples("pool")?,
        eval_tests: examples("eval_tests")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Whole prompts go to exactly one part (out-of-distribution regime).
    ByPrompt,
    /// Examples within each prompt are split (in-distribution regime).
    ByExample,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_prompt" => Ok(SplitMode::ByPrompt),
            "by_example" => Ok(SplitMode::ByExample),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let ratios = Self { train, val, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::domain(format!("split ratios must be non-negative: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Part sizes for `n` items: validation and test are rounded, train
    /// takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let test = ((n as f64 * self.test).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - test);
        (n - val - test, val, test)
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad ratios `{s}`: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(Error::Config(format!("expected three ratios, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Seeded shuffle, contiguous cut, then each part restored to input order.
fn seeded_partition<T: Clone>(items: &[T], ratios: &SplitRatios, seed: u64) -> Split<T> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = ratios.sizes(items.len());
    let part = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<_>>()
    };
    Split {
        train: part(0..n_train),
        val: part(n_train..n_train + n_val),
        test: part(n_train + n_val..items.len()),
    }
}

pub fn split_tasks(tasks: &[CodingTask], spec: &SplitSpec) -> Result<Split<CodingTask>> {
    if spec.mode != SplitMode::ByPrompt {
        return Err(Error::domain("split_tasks requires mode by_prompt"));
    }
    spec.ratios.validate()?;
    if tasks.is_empty() {
        return Err(Error::domain("cannot split an empty task set"));
    }
    Ok(seeded_partition(tasks, &spec.ratios, spec.seed))
}

pub fn split_examples(task: &CodingTask, spec: &SplitSpec) -> Result<Split<IoExample>> {
    if spec.mode != SplitMode::ByExample {
        return Err(Error::domain("split_examples requires mode by_example"));
    }
    spec.ratios.validate()?;
    if task.pool.is_empty() {
        return Err(Error::domain(format!("task `{}` has an empty pool", task.task_id)));
    }
    Ok(seeded_partition(&task.pool, &spec.ratios, spec.seed))
}
