use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::IoExample;
use crate::error::{Error, Result};

/// One held-out test on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolTest {
    pub input_expr: String,
    pub expected_expr: String,
}

/// Request document written to an executor's standard input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub solution_code: String,
    pub entry_point: String,
    pub tests: Vec<ProtocolTest>,
    pub timeout_ms: u64,
}

impl ExecutionRequest {
    pub fn new(solution_code: impl Into<String>, entry_point: impl Into<String>, tests: &[IoExample], timeout_ms: u64) -> Self {
        Self {
            solution_code: solution_code.into(),
            entry_point: entry_point.into(),
            tests: tests
                .iter()
                .map(|t| ProtocolTest {
                    input_expr: t.input_expr.clone(),
                    expected_expr: t.expected_expr.clone(),
                })
                .collect(),
            timeout_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tests.is_empty() {
            return Err(Error::precondition("execution request has no tests"));
        }
        if self.timeout_ms == 0 {
            return Err(Error::precondition("execution timeout must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolTestResult {
    pub passed: bool,
    #[serde(default)]
    pub detail: String,
}

/// Response document read from an executor's standard output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResponse {
    pub passed: bool,
    pub per_test: Vec<ProtocolTestResult>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ExecutionResponse {
    /// Every test failed with the same detail.
    pub fn all_failed(n: usize, detail: &str) -> Self {
        Self {
            passed: false,
            per_test: vec![
                ProtocolTestResult {
                    passed: false,
                    detail: detail.to_string(),
                };
                n
            ],
            error: Some(detail.to_string()),
        }
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        Self {
            passed: flags.iter().all(|p| *p),
            per_test: flags
                .iter()
                .map(|&passed| ProtocolTestResult {
                    passed,
                    detail: if passed { "ok" } else { "assertion_failed" }.into(),
                })
                .collect(),
            error: None,
        }
    }
}

/// Runs a candidate solution against held-out tests.
pub trait Executor: Send + Sync {
    fn id(&self) -> &str;
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResponse>;
}

type Judge = Arc<dyn Fn(&ExecutionRequest) -> ExecutionResponse + Send + Sync>;

/// Verdict lookup keyed by solution code. Unknown code fails every test
/// with detail `unknown_solution`, or goes to the judge closure when one
/// is set.
#[derive(Clone, Default)]
pub struct MockExecutor {
    table: HashMap<String, Vec<bool>>,
    timeouts: Vec<String>,
    crashes: Vec<String>,
    judge: Option<Judge>,
}

impl MockExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Per-test outcomes for `code`; a single flag applies to every test.
    pub fn with_verdict(mut self, code: &str, per_test: Vec<bool>) -> Self {
        self.table.insert(code.to_string(), per_test);
        self
    }

    pub fn with_timeout(mut self, code: &str) -> Self {
        self.timeouts.push(code.to_string());
        self
    }

    pub fn with_crash(mut self, code: &str) -> Self {
        self.crashes.push(code.to_string());
        self
    }

    pub fn with_judge(mut self, f: impl Fn(&ExecutionRequest) -> ExecutionResponse + Send + Sync + 'static) -> Self {
        self.judge = Some(Arc::new(f));
        self
    }
}

impl Executor for MockExecutor {
    fn id(&self) -> &str {
        "mock"
    }

    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResponse> {
        request.validate()?;
        let n = request.tests.len();
        if self.crashes.contains(&request.solution_code) {
            return Err(Error::Harness("mock executor crashed".into()));
        }
        if self.timeouts.contains(&request.solution_code) {
            return Ok(ExecutionResponse::all_failed(n, "timeout"));
        }
        match self.table.get(&request.solution_code) {
            Some(flags) if flags.len() == 1 => Ok(ExecutionResponse::from_flags(&vec![flags[0]; n])),
            Some(flags) if flags.len() == n => Ok(ExecutionResponse::from_flags(flags)),
            Some(flags) => Err(Error::Harness(format!(
                "mock verdict has {} entries for {n} tests",
                flags.len()
            ))),
            None => match &self.judge {
                Some(judge) => Ok(judge(request)),
                None => Ok(ExecutionResponse::all_failed(n, "unknown_solution")),
            },
        }
    }
}

/// Spawns an external runner per request: the request JSON goes to its
/// standard input, the response JSON is read from its standard output. A
/// nonzero exit or unreadable output is a harness error. A runner that
/// outlives the per-test timeout budget is killed and every test is
/// reported as `timeout`.
#[derive(Debug, Clone)]
pub struct SubprocessExecutor {
    program: PathBuf,
    args: Vec<String>,
    /// Slack on top of `tests × timeout_ms` before the runner is killed.
    pub grace: Duration,
    id: String,
}

impl SubprocessExecutor {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        let program = program.into();
        Self {
            id: format!("subprocess:{}", program.display()),
            program,
            args,
            grace: Duration::from_secs(2),
        }
    }
}

impl Executor for SubprocessExecutor {
    fn id(&self) -> &str {
        &self.id
    }

    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionResponse> {
        request.validate()?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Harness(format!("cannot start {}: {e}", self.program.display())))?;

        let body = serde_json::to_vec(request).expect("requests serialize");
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(&body);
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let limit = Duration::from_millis(request.timeout_ms.saturating_mul(request.tests.len() as u64)) + self.grace;
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if start.elapsed() >= limit => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Harness(format!("waiting on runner: {e}"))),
            }
        };
        let _ = writer.join();
        let out = reader.join().unwrap_or_default();
        let err_text = err_reader.join().unwrap_or_default();

        let Some(status) = status else {
            return Ok(ExecutionResponse::all_failed(request.tests.len(), "timeout"));
        };
        if !status.success() {
            return Err(Error::Harness(format!(
                "runner exited with {status}: {}",
                err_text.trim()
            )));
        }
        let response: ExecutionResponse = serde_json::from_slice(&out)
            .map_err(|e| Error::Harness(format!("runner produced unreadable output: {e}")))?;
        if response.per_test.len() != request.tests.len() {
            return Err(Error::Harness(format!(
                "runner reported {} results for {} tests",
                response.per_test.len(),
                request.tests.len()
            )));
        }
        Ok(response)
    }
}
