use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::executor::{ExecutionRequest, Executor};
use crate::backend::Backend;
use crate::dataset::{CodingTask, IoExample};
use crate::error::{Error, Result};
use crate::prompting::{render_prompt, PromptTemplate};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;
pub const DEFAULT_TIMEOUT_MS: u64 = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub timeout_ms: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub example_id: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionVerdict {
    pub task_id: String,
    /// True iff every held-out test passed.
    pub passed: bool,
    pub per_test: Vec<TestVerdict>,
    #[serde(with = "seconds")]
    pub duration: Duration,
    pub executor_id: String,
}

mod seconds {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn is_top_level(line: &str) -> bool {
    !line.trim().is_empty() && !line.starts_with([' ', '\t'])
}

/// Cuts a completion down to runnable code: Markdown fences are dropped and
/// the text is split into top-level blocks (a block starts at each
/// unindented line). Blocks are kept up to and including the one that
/// defines `entry_point`; when no block defines it, only the first block is
/// kept. A completion that starts indented (a bare function body) ends at
/// the first unindented line.
pub fn extract_code(completion: &str, entry_point: &str) -> String {
    let text = strip_fences(completion);
    let lines: Vec<&str> = text.lines().collect();
    let Some(first) = lines.iter().position(|l| !l.trim().is_empty()) else {
        return String::new();
    };
    if !is_top_level(lines[first]) {
        let end = lines[first..].iter().position(|l| is_top_level(l)).map_or(lines.len(), |p| first + p);
        return lines[first..end].join("\n").trim_end().to_string();
    }
    let starts: Vec<usize> = (first..lines.len()).filter(|&i| is_top_level(lines[i])).collect();
    let def_prefix = format!("def {entry_point}(");
    let block_end = |b: usize| starts.get(b + 1).copied().unwrap_or(lines.len());
    let last_block = starts
        .iter()
        .position(|&s| lines[s].starts_with(&def_prefix) || lines[s].starts_with(&format!("async {def_prefix}")))
        .unwrap_or(0);
    lines[first..block_end(last_block)].join("\n").trim_end().to_string()
}

/// Greedy completion of the rendered prompt, extracted and run against the
/// held-out tests. A timeout is a failing verdict; an executor crash is an
/// error.
pub fn pass_at_1<B: Backend + ?Sized, E: Executor + ?Sized>(
    task: &CodingTask,
    examples: &[IoExample],
    template: &PromptTemplate,
    backend: &B,
    executor: &E,
    config: &GenerationConfig,
) -> Result<ExecutionVerdict> {
    if task.eval_tests.is_empty() {
        return Err(Error::precondition(format!("task `{}` has no held-out tests", task.task_id)));
    }
    let prompt = render_prompt(template, &task.nl_description, examples);
    let completion = backend.generate(&prompt, config.max_new_tokens)?;
    let code = extract_code(&completion, &task.entry_point);
    let request = ExecutionRequest::new(code, &task.entry_point, &task.eval_tests, config.timeout_ms);
    let start = Instant::now();
    let response = executor.execute(&request)?;
    let duration = start.elapsed();
    if response.per_test.len() != task.eval_tests.len() {
        return Err(Error::Harness(format!(
            "executor returned {} results for {} tests",
            response.per_test.len(),
            task.eval_tests.len()
        )));
    }
    let per_test: Vec<TestVerdict> = task
        .eval_tests
        .iter()
        .zip(response.per_test)
        .map(|(t, r)| TestVerdict {
            example_id: t.id,
            passed: r.passed,
            detail: r.detail,
        })
        .collect();
    Ok(ExecutionVerdict {
        task_id: task.task_id.clone(),
        passed: per_test.iter().all(|t| t.passed),
        per_test,
        duration,
        executor_id: executor.id().to_string(),
    })
}

/// Fraction of passing verdicts.
pub fn pass_rate(verdicts: &[ExecutionVerdict]) -> Option<f64> {
    if verdicts.is_empty() {
        return None;
    }
    Some(verdicts.iter().filter(|v| v.passed).count() as f64 / verdicts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::evalharness::executor::MockExecutor;

    fn task() -> CodingTask {
        CodingTask {
            task_id: "inc".into(),
            nl_description: "Add one.".into(),
            entry_point: "inc".into(),
            ground_truth: "def inc(x):\n    return x + 1".into(),
            pool: vec![IoExample::new(0, "inc(1)", "2")],
            eval_tests: (0..3).map(|i| IoExample::new(10 + i, format!("inc({i})"), (i + 1).to_string())).collect(),
        }
    }

    #[test]
    fn extraction_rules() {
        let c = "def inc(x):\n    return x + 1\n\nprint(inc(2))\n";
        assert_eq!(extract_code(c, "inc"), "def inc(x):\n    return x + 1");
        let c = "import math\n\ndef helper(x):\n    return x\n\ndef inc(x):\n    return helper(x) + 1\nassert inc(1) == 2";
        assert_eq!(
            extract_code(c, "inc"),
            "import math\n\ndef helper(x):\n    return x\n\ndef inc(x):\n    return helper(x) + 1"
        );
        assert_eq!(extract_code("```python\ndef inc(x):\n    return x+1\n```\nDone.", "inc"), "def inc(x):\n    return x+1");
        assert_eq!(extract_code("    return x + 1\ndef other(): pass", "inc"), "    return x + 1");
        assert_eq!(extract_code("def g():\n    pass\nx = 1", "inc"), "def g():\n    pass");
        assert_eq!(extract_code("\n\n", "inc"), "");
    }

    #[test]
    fn verdicts() {
        let t = task();
        let template = PromptTemplate::default();
        let prompt = render_prompt(&template, &t.nl_description, &t.pool);
        let backend = MockBackend::new().with_completion(&prompt, "def inc(x):\n    return x + 1\n");
        let code = "def inc(x):\n    return x + 1";

        let all = MockExecutor::new().with_verdict(code, vec![true]);
        let v = pass_at_1(&t, &t.pool, &template, &backend, &all, &GenerationConfig::default()).unwrap();
        assert!(v.passed);
        assert_eq!(v.per_test.iter().map(|p| p.example_id).collect::<Vec<_>>(), vec![10, 11, 12]);
        assert_eq!(v.executor_id, "mock");

        let one_bad = MockExecutor::new().with_verdict(code, vec![true, false, true]);
        let v = pass_at_1(&t, &t.pool, &template, &backend, &one_bad, &GenerationConfig::default()).unwrap();
        assert!(!v.passed);
        assert_eq!(v.per_test.iter().filter(|p| p.passed).count(), 2);

        let slow = MockExecutor::new().with_timeout(code);
        let v = pass_at_1(&t, &t.pool, &template, &backend, &slow, &GenerationConfig::default()).unwrap();
        assert!(!v.passed && v.per_test[0].detail == "timeout");

        let crash = MockExecutor::new().with_crash(code);
        assert!(matches!(
            pass_at_1(&t, &t.pool, &template, &backend, &crash, &GenerationConfig::default()),
            Err(Error::Harness(_))
        ));

        assert_eq!(pass_rate(&[]), None);
    }

    #[test]
    fn requires_tests() {
        let mut t = task();
        t.eval_tests.clear();
        let r = pass_at_1(&t, &[], &PromptTemplate::default(), &MockBackend::new(), &MockExecutor::new(), &GenerationConfig::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }
}
