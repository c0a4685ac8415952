//! Perplexity metrics, study aggregates and rank correlation.
//!
//! Perplexity of a continuation `y` given context `x` is
//! `Pr[y | x]^(-1/|y|)`. Everything is computed in log space,
//! `log PP = -(1/n) * sum(logprob)`, and exponentiated only for reporting:
//! raw products over a few dozen tokens underflow quickly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, LogProbSequence};
use crate::dataset::{CodingTask, IoExample};
use crate::error::{Error, Result};
use crate::prompting::{render_prompt, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityKind {
    /// Reference solution given the prompt.
    Target,
    /// The rendered one-example prompt itself, from an empty context.
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityScore {
    pub value: f64,
    pub log_value: f64,
    pub token_count: usize,
    pub kind: PerplexityKind,
}

pub fn perplexity(scores: &LogProbSequence, kind: PerplexityKind) -> Result<PerplexityScore> {
    if scores.continuation_len == 0 {
        return Err(Error::domain("perplexity of an empty continuation is undefined"));
    }
    let lps = scores.continuation_logprobs();
    let log_value = -lps.iter().sum::<f64>() / lps.len() as f64;
    Ok(PerplexityScore {
        value: log_value.exp(),
        log_value,
        token_count: lps.len(),
        kind,
    })
}

pub fn target_perplexity<B: Backend + ?Sized>(
    task: &CodingTask,
    examples: &[IoExample],
    template: &PromptTemplate,
    backend: &B,
) -> Result<PerplexityScore> {
    if task.ground_truth.is_empty() {
        return Err(Error::precondition(format!("task `{}` has no ground truth", task.task_id)));
    }
    let prompt = render_prompt(template, &task.nl_description, examples);
    perplexity(&backend.score(&prompt, &task.ground_truth)?, PerplexityKind::Target)
}

pub fn source_perplexity<B: Backend + ?Sized>(
    task: &CodingTask,
    example: &IoExample,
    template: &PromptTemplate,
    backend: &B,
) -> Result<PerplexityScore> {
    let prompt = render_prompt(template, &task.nl_description, std::slice::from_ref(example));
    perplexity(&backend.score("", &prompt)?, PerplexityKind::Source)
}

/// `log PP_target(examples) - log PP_target(no examples)`; negative values
/// are improvements.
pub fn delta_target_perplexity<B: Backend + ?Sized>(
    task: &CodingTask,
    examples: &[IoExample],
    template: &PromptTemplate,
    backend: &B,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let treated = target_perplexity(task, examples, template, backend)?;
    let baseline = target_perplexity(task, &[], template, backend)?;
    Ok(treated.log_value - baseline.log_value)
}

/// Mean with standard error (sample standard deviation over `sqrt(n)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    /// `None` for an empty sample. A single observation has stderr 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Some(Self { n, mean, stderr })
    }
}

/// Lower median: for even counts, the smaller of the two middle values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Single-example statistics for one prompt, in raw perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSingleExampleStats {
    pub no_example: f64,
    pub best_example: f64,
    pub average_example: f64,
    pub median_example: f64,
}

impl TaskSingleExampleStats {
    pub fn from_values(no_example: f64, per_example: &[f64]) -> Result<Self> {
        let median_example =
            lower_median(per_example).ok_or_else(|| Error::domain("no per-example perplexities"))?;
        Ok(Self {
            no_example,
            best_example: per_example.iter().copied().fold(f64::INFINITY, f64::min),
            average_example: per_example.iter().sum::<f64>() / per_example.len() as f64,
            median_example,
        })
    }
}

/// One model's row: means across prompts with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub n_prompts: usize,
    pub no_example: f64,
    pub no_example_stderr: f64,
    pub best_example: f64,
    pub best_example_stderr: f64,
    pub average_example: f64,
    pub average_example_stderr: f64,
    pub median_example: f64,
    pub median_example_stderr: f64,
}

impl StudyRow {
    pub fn aggregate(label: &str, per_task: &[TaskSingleExampleStats]) -> Result<Self> {
        let col = |f: fn(&TaskSingleExampleStats) -> f64| {
            MeanStderr::of(&per_task.iter().map(f).collect::<Vec<_>>())
                .ok_or_else(|| Error::domain("study over zero prompts"))
        };
        let no = col(|s| s.no_example)?;
        let best = col(|s| s.best_example)?;
        let avg = col(|s| s.average_example)?;
        let med = col(|s| s.median_example)?;
        Ok(Self {
            label: label.to_string(),
            n_prompts: per_task.len(),
            no_example: no.mean,
            no_example_stderr: no.stderr,
            best_example: best.mean,
            best_example_stderr: best.stderr,
            average_example: avg.mean,
            average_example_stderr: avg.stderr,
            median_example: med.mean,
            median_example_stderr: med.stderr,
        })
    }
}

/// Per-prompt single-example statistics for one backend.
pub fn single_example_task_stats<B: Backend + ?Sized>(
    task: &CodingTask,
    template: &PromptTemplate,
    backend: &B,
) -> Result<TaskSingleExampleStats> {
    if task.pool.is_empty() {
        return Err(Error::precondition(format!("task `{}` has an empty pool", task.task_id)));
    }
    let no_example = target_perplexity(task, &[], template, backend)?.value;
    let per_example = task
        .pool
        .par_iter()
        .map(|ex| target_perplexity(task, std::slice::from_ref(ex), template, backend).map(|s| s.value))
        .collect::<Result<Vec<_>>>()?;
    TaskSingleExampleStats::from_values(no_example, &per_example)
}

/// Target perplexity with no example and with each single pool example,
/// summarized per labelled backend.
pub fn single_example_study(
    tasks: &[CodingTask],
    template: &PromptTemplate,
    backends: &[(&str, &dyn Backend)],
) -> Result<Vec<StudyRow>> {
    backends
        .iter()
        .map(|(label, backend)| {
            let stats = tasks
                .iter()
                .map(|t| single_example_task_stats(t, template, *backend))
                .collect::<Result<Vec<_>>>()?;
            StudyRow::aggregate(label, &stats)
        })
        .collect()
}

fn check_permutation(p: &[usize]) -> Result<()> {
    let mut seen = vec![false; p.len()];
    for &v in p {
        if v >= p.len() || std::mem::replace(&mut seen[v], true) {
            return Err(Error::domain(format!("{p:?} is not a permutation of 0..{}", p.len())));
        }
    }
    Ok(())
}

/// Spearman's rho for two rank vectors over the same items, each a
/// permutation of `0..n`: `1 - 6 * sum(d^2) / (n (n^2 - 1))`.
pub fn spearman(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(Error::domain(format!(
            "rank vectors differ in length ({} vs {})",
            rank_a.len(),
            rank_b.len()
        )));
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(Error::domain("spearman needs at least two items"));
    }
    check_permutation(rank_a)?;
    check_permutation(rank_b)?;
    let d2: f64 = rank_a
        .iter()
        .zip(rank_b)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Fractional ranks (0-based, ties share their average rank).
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Ordinal ranks (ties broken by position), a permutation of `0..n`.
pub fn ordinal_ranks(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        ranks[i] = rank;
    }
    ranks
}

/// Spearman correlation of two score vectors: Pearson correlation of their
/// fractional ranks, which handles ties.
pub fn spearman_scores(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("score vectors differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::domain("spearman needs at least two items"));
    }
    let (ra, rb) = (fractional_ranks(a), fractional_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::domain("spearman is undefined for a constant score vector"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Target-perplexity statistics grouped by the Pass@1 outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassPerplexityContrast {
    /// Group with Pass@1 = 0; absent when no task failed.
    pub failed: Option<MeanStderr>,
    /// Group with Pass@1 = 1; absent when no task passed.
    pub passed: Option<MeanStderr>,
}

pub fn passat1_perplexity_contrast(results: &[(bool, f64)]) -> PassPerplexityContrast {
    let group = |want: bool| {
        let vals: Vec<f64> = results.iter().filter(|(p, _)| *p == want).map(|(_, v)| *v).collect();
        MeanStderr::of(&vals)
    };
    PassPerplexityContrast {
        failed: group(false),
        passed: group(true),
    }
}
