//! Regressor from a one-example prompt embedding to the log target
//! perplexity that prompt achieves.

mod format;
mod gradcheck;
mod model;
mod train;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, EmbeddingVector};
use crate::dataset::CodingTask;
use crate::error::{Error, Result};
use crate::metrics::target_perplexity;
use crate::prompting::{render_prompt, PromptTemplate};

pub use format::{from_bytes, load, save, to_bytes, FORMAT_VERSION, MAGIC};
pub use gradcheck::{
    derivative_error, gradient_check, gradient_check_batch, gradient_check_report, input_gradient, GradCheckReport,
    ABSOLUTE_FLOOR, FD_STEP, SAMPLES_PER_TENSOR,
};
pub use model::{BatchNorm, Linear, MlpModel, Mode, TrainMeta, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM, HIDDEN_WIDTHS};
pub use train::{
    evaluate_mse, moving_average, train, train_with_validation, AdamConfig, TrainConfig, TrainHistory, TrainOutcome,
    FULL_BATCH_LIMIT,
};

/// One (prompt embedding, log target perplexity) supervision pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub task_id: String,
    pub example_id: usize,
    pub embedding: EmbeddingVector,
    /// `ln(raw_target)`.
    pub target: f64,
    /// Target perplexity of the one-example prompt.
    pub raw_target: f64,
}

/// Embeds and scores every `(task, pool example)` one-example prompt.
pub fn collect_pairs<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
) -> Result<Vec<TrainingPair>> {
    collect_pairs_resumable(tasks, template, backend, None)
}

fn collect_one<B: Backend + ?Sized>(
    task: &CodingTask,
    example_idx: usize,
    template: &PromptTemplate,
    backend: &B,
) -> Result<TrainingPair> {
    let example = &task.pool[example_idx];
    let prompt = render_prompt(template, &task.nl_description, std::slice::from_ref(example));
    let embedding = backend.embed(&prompt)?;
    let score = target_perplexity(task, std::slice::from_ref(example), template, backend)?;
    Ok(TrainingPair {
        task_id: task.task_id.clone(),
        example_id: example.id,
        embedding,
        target: score.log_value,
        raw_target: score.value,
    })
}

/// Like [`collect_pairs`], but pairs already present in `checkpoint` are
/// reused and every newly computed pair is appended to it, so a failed
/// run can be resumed. The result is ordered by task, then pool position.
pub fn collect_pairs_resumable<B: Backend + ?Sized>(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backend: &B,
    checkpoint: Option<&Path>,
) -> Result<Vec<TrainingPair>> {
    let mut done: Vec<TrainingPair> = match checkpoint {
        Some(p) if p.exists() => read_pairs_lenient(p)?,
        _ => Vec::new(),
    };
    let have: HashSet<(String, usize)> = done.iter().map(|p| (p.task_id.clone(), p.example_id)).collect();
    let todo: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, task)| (0..task.pool.len()).map(move |e| (t, e)))
        .filter(|&(t, e)| !have.contains(&(tasks[t].task_id.clone(), tasks[t].pool[e].id)))
        .collect();
    if !have.is_empty() {
        info!("resuming: {} pairs from checkpoint, {} to compute", have.len(), todo.len());
    }
    let writer = match checkpoint {
        Some(p) => Some(Mutex::new(
            OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let results: Vec<Result<TrainingPair>> = todo
        .par_iter()
        .map(|&(t, e)| {
            let pair = collect_one(&tasks[t], e, template, backend)?;
            if let (Some(w), Some(p)) = (&writer, checkpoint) {
                let line = serde_json::to_string(&pair).expect("pairs serialize");
                writeln!(w.lock().expect("writer poisoned"), "{line}").map_err(|err| Error::io(p, err))?;
            }
            Ok(pair)
        })
        .collect();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(p) => done.push(p),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let position = |p: &TrainingPair| {
        tasks.iter().position(|t| t.task_id == p.task_id).and_then(|t| {
            tasks[t].pool.iter().position(|e| e.id == p.example_id).map(|e| (t, e))
        })
    };
    let mut keyed: Vec<((usize, usize), TrainingPair)> =
        done.into_iter().filter_map(|p| position(&p).map(|k| (k, p))).collect();
    keyed.sort_by_key(|(k, _)| *k);
    keyed.dedup_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, p)| p).collect())
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pairs serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: TrainingPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            field: "pair".into(),
            message: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Checkpoint reader: a torn final line is skipped.
fn read_pairs_lenient(path: &Path) -> Result<Vec<TrainingPair>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<TrainingPair>(&line) {
            Ok(p) => pairs.push(p),
            Err(e) if !line.trim().is_empty() => warn!("{}:{}: skipping unreadable pair: {e}", path.display(), idx + 1),
            Err(_) => {}
        }
    }
    Ok(pairs)
}
