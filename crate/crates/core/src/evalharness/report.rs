use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::MeanStderr;

/// One point of a per-ranker curve, in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ranker: String,
    pub metric: String,
    pub n: usize,
    /// Number of prompts aggregated.
    pub count: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl SeriesPoint {
    pub fn new(ranker: &str, metric: &str, n: usize, stats: MeanStderr) -> Self {
        Self {
            ranker: ranker.to_string(),
            metric: metric.to_string(),
            n,
            count: stats.n,
            mean: stats.mean,
            stderr: stats.stderr,
        }
    }
}

/// Request latency grouped by number of examples in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPoint {
    pub n: usize,
    pub count: usize,
    pub mean_tokens: f64,
    pub mean_seconds: f64,
    pub stderr_seconds: f64,
    /// `simulated` (mock backend clock) or `wall`.
    pub clock: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub series: Vec<SeriesPoint>,
    pub timing: Vec<TimingPoint>,
    /// Seeds, splits, template and backend id: enough to re-run.
    pub config: Value,
}

impl ExperimentReport {
    pub fn new(experiment_id: &str, config: Value) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            series: Vec::new(),
            timing: Vec::new(),
            config,
        }
    }

    pub fn point(&self, ranker: &str, metric: &str, n: usize) -> Option<&SeriesPoint> {
        self.series
            .iter()
            .find(|p| p.ranker == ranker && p.metric == metric && p.n == n)
    }

    /// Points for one ranker and metric, ordered by `n`.
    pub fn curve(&self, ranker: &str, metric: &str) -> Vec<&SeriesPoint> {
        let mut pts: Vec<&SeriesPoint> = self.series.iter().filter(|p| p.ranker == ranker && p.metric == metric).collect();
        pts.sort_by_key(|p| p.n);
        pts
    }
}

pub const SERIES_COLUMNS: [&str; 6] = ["ranker", "metric", "n", "count", "mean", "stderr"];
pub const TIMING_COLUMNS: [&str; 6] = ["n", "count", "mean_tokens", "mean_seconds", "stderr_seconds", "clock"];

/// Files written by [`export_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedFiles {
    pub report_json: PathBuf,
    pub series_csv: PathBuf,
    pub series_jsonl: PathBuf,
    pub timing_csv: PathBuf,
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Harness(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Harness(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Harness(e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `series.csv`, `series.jsonl` and `timing.csv`
/// into `dir`. Identical reports give byte-identical files; an empty
/// series gives a header-only CSV.
pub fn export_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<ExportedFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ExportedFiles {
        report_json: dir.join("report.json"),
        series_csv: dir.join("series.csv"),
        series_jsonl: dir.join("series.jsonl"),
        timing_csv: dir.join("timing.csv"),
    };
    let mut json = serde_json::to_vec_pretty(report).expect("reports serialize");
    json.push(b'\n');
    write(&files.report_json, &json)?;
    write(&files.series_csv, &csv_bytes(&SERIES_COLUMNS, &report.series)?)?;
    let mut jsonl = String::new();
    for p in &report.series {
        jsonl.push_str(&serde_json::to_string(p).expect("points serialize"));
        jsonl.push('\n');
    }
    write(&files.series_jsonl, jsonl.as_bytes())?;
    write(&files.timing_csv, &csv_bytes(&TIMING_COLUMNS, &report.timing)?)?;
    Ok(files)
}

pub fn import_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        field: "report".into(),
        message: e.to_string(),
    })
}
