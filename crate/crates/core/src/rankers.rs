//! Ranking functions over a task's example pool, and top-N / budget
//! selection from a ranking.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Backend;
use crate::dataset::{CodingTask, IoExample};
use crate::error::{Error, Result};
use crate::metrics::{source_perplexity, target_perplexity};
use crate::mlpranker::MlpModel;
use crate::prompting::{fit_to_budget, render_prompt, BudgetSpec, PromptTemplate, TokenCounter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascending,
    Descending,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::Ascending => Direction::Descending,
            Direction::Descending => Direction::Ascending,
        }
    }
}

/// Which ranking function to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankerSpec {
    /// Source perplexity, descending.
    ModelFree,
    /// Source perplexity, ascending.
    ModelFreeAsc,
    /// Predicted log target perplexity in the given direction.
    ModelBased(Direction),
    Random(u64),
    HumanOrder,
    /// True single-example target perplexity, ascending. Needs the ground
    /// truth, so it is only a reference point for evaluation.
    Oracle,
}

impl RankerSpec {
    pub fn needs_model(&self) -> bool {
        matches!(self, RankerSpec::ModelBased(_))
    }
}

impl fmt::Display for RankerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankerSpec::ModelFree => write!(f, "model_free"),
            RankerSpec::ModelFreeAsc => write!(f, "model_free_asc"),
            RankerSpec::ModelBased(Direction::Ascending) => write!(f, "model_based"),
            RankerSpec::ModelBased(Direction::Descending) => write!(f, "model_based_desc"),
            RankerSpec::Random(seed) => write!(f, "random({seed})"),
            RankerSpec::HumanOrder => write!(f, "human_order"),
            RankerSpec::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for RankerSpec {
    type Err = Error;

    /// Accepts the display forms; `random` alone means seed 0, and
    /// `random:7` is accepted alongside `random(7)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_seed = |v: &str| {
            v.parse::<u64>()
                .map_err(|e| Error::Config(format!("bad random seed in `{s}`: {e}")))
        };
        match s {
            "model_free" => Ok(RankerSpec::ModelFree),
            "model_free_asc" => Ok(RankerSpec::ModelFreeAsc),
            "model_based" => Ok(RankerSpec::ModelBased(Direction::Ascending)),
            "model_based_desc" => Ok(RankerSpec::ModelBased(Direction::Descending)),
            "human_order" => Ok(RankerSpec::HumanOrder),
            "oracle" => Ok(RankerSpec::Oracle),
            "random" => Ok(RankerSpec::Random(0)),
            _ => {
                if let Some(rest) = s.strip_prefix("random:") {
                    Ok(RankerSpec::Random(parse_seed(rest)?))
                } else if let Some(rest) = s.strip_prefix("random(").and_then(|r| r.strip_suffix(')')) {
                    Ok(RankerSpec::Random(parse_seed(rest)?))
                } else {
                    Err(Error::Config(format!(
                        "unknown ranker `{s}` (expected model_free, model_free_asc, model_based, model_based_desc, random[:seed], human_order or oracle)"
                    )))
                }
            }
        }
    }
}

/// A permutation of a task's pool ids, best first, with the score that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub task_id: String,
    pub ranker_id: String,
    pub direction: Direction,
    pub order: Vec<usize>,
    pub scores: BTreeMap<usize, f64>,
}

/// Sorts ids by score in `direction`, ties by ascending id.
pub fn order_by_scores(scores: &BTreeMap<usize, f64>, direction: Direction) -> Vec<usize> {
    let mut ids: Vec<usize> = scores.keys().copied().collect();
    ids.sort_by(|a, b| {
        let by_score = scores[a].total_cmp(&scores[b]);
        let by_score = match direction {
            Direction::Ascending => by_score,
            Direction::Descending => by_score.reverse(),
        };
        by_score.then(a.cmp(b))
    });
    ids
}

impl Ranking {
    pub fn from_scores(
        task_id: &str,
        ranker_id: impl Into<String>,
        scores: BTreeMap<usize, f64>,
        direction: Direction,
    ) -> Result<Self> {
        if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::domain(format!("task `{task_id}`: example {id} has non-finite score {s}")));
        }
        Ok(Self {
            task_id: task_id.to_string(),
            ranker_id: ranker_id.into(),
            direction,
            order: order_by_scores(&scores, direction),
            scores,
        })
    }

    /// Checks that the order is a permutation of the task's pool ids and
    /// agrees with the scores.
    pub fn validate(&self, task: &CodingTask) -> Result<()> {
        let fail = |m: String| Error::Validation {
            task_id: self.task_id.clone(),
            message: m,
        };
        let mut pool_ids: Vec<usize> = task.pool.iter().map(|e| e.id).collect();
        let mut order = self.order.clone();
        pool_ids.sort_unstable();
        order.sort_unstable();
        if pool_ids != order {
            return Err(fail(format!("order {:?} is not a permutation of the pool ids", self.order)));
        }
        if self.scores.keys().copied().collect::<Vec<_>>() != pool_ids {
            return Err(fail("scores do not cover exactly the pool ids".into()));
        }
        if order_by_scores(&self.scores, self.direction) != self.order {
            return Err(fail("order disagrees with scores".into()));
        }
        Ok(())
    }

    /// Pool examples in rank order.
    pub fn ranked_examples(&self, task: &CodingTask) -> Result<Vec<IoExample>> {
        self.order
            .iter()
            .map(|id| {
                task.pool_example(*id).cloned().ok_or_else(|| Error::Validation {
                    task_id: task.task_id.clone(),
                    message: format!("ranking refers to unknown example {id}"),
                })
            })
            .collect()
    }
}

fn require_pool(task: &CodingTask) -> Result<()> {
    if task.pool.is_empty() {
        return Err(Error::precondition(format!("task `{}` has an empty pool", task.task_id)));
    }
    Ok(())
}

fn score_pool<F>(task: &CodingTask, f: F) -> Result<BTreeMap<usize, f64>>
where
    F: Fn(&IoExample) -> Result<f64> + Sync,
{
    require_pool(task)?;
    let scores = task
        .pool
        .par_iter()
        .map(|ex| f(ex).map(|s| (ex.id, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.into_iter().collect())
}

/// Descending source perplexity of each one-example prompt. Needs neither
/// the ground truth nor training.
pub fn rank_model_free<B: Backend + ?Sized>(task: &CodingTask, template: &PromptTemplate, backend: &B) -> Result<Ranking> {
    rank_by_source(task, template, backend, Direction::Descending)
}

/// Source perplexity in either direction.
pub fn rank_by_source<B: Backend + ?Sized>(
    task: &CodingTask,
    template: &PromptTemplate,
    backend: &B,
    direction: Direction,
) -> Result<Ranking> {
    let scores = score_pool(task, |ex| Ok(source_perplexity(task, ex, template, backend)?.value))?;
    let id = match direction {
        Direction::Descending => RankerSpec::ModelFree,
        Direction::Ascending => RankerSpec::ModelFreeAsc,
    };
    Ranking::from_scores(&task.task_id, id.to_string(), scores, direction)
}

/// Orders by the regressor's predicted log target perplexity of each
/// one-example prompt.
pub fn rank_model_based<B: Backend + ?Sized>(
    task: &CodingTask,
    template: &PromptTemplate,
    backend: &B,
    model: &MlpModel,
    direction: Direction,
) -> Result<Ranking> {
    let scores = score_pool(task, |ex| {
        let prompt = render_prompt(template, &task.nl_description, std::slice::from_ref(ex));
        model.forward(&backend.embed(&prompt)?)
    })?;
    Ranking::from_scores(&task.task_id, RankerSpec::ModelBased(direction).to_string(), scores, direction)
}

fn random_stream_seed(task_id: &str, seed: u64) -> u64 {
    let digest = Sha256::new().chain_update(task_id.as_bytes()).chain_update(seed.to_le_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform shuffle, deterministic per `(task_id, seed)`. Scores are rank
/// positions.
pub fn rank_random(task: &CodingTask, seed: u64) -> Result<Ranking> {
    require_pool(task)?;
    let mut ids: Vec<usize> = task.pool.iter().map(|e| e.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(random_stream_seed(&task.task_id, seed)));
    let scores = ids.iter().enumerate().map(|(pos, id)| (*id, pos as f64)).collect();
    Ranking::from_scores(&task.task_id, RankerSpec::Random(seed).to_string(), scores, Direction::Ascending)
}

/// The pool in its stored order.
pub fn rank_human_order(task: &CodingTask) -> Result<Ranking> {
    require_pool(task)?;
    let scores = task.pool.iter().enumerate().map(|(pos, e)| (e.id, pos as f64)).collect();
    Ranking::from_scores(&task.task_id, RankerSpec::HumanOrder.to_string(), scores, Direction::Ascending)
}

/// Ascending true single-example target perplexity.
pub fn rank_oracle<B: Backend + ?Sized>(task: &CodingTask, template: &PromptTemplate, backend: &B) -> Result<Ranking> {
    let scores = score_pool(task, |ex| {
        Ok(target_perplexity(task, std::slice::from_ref(ex), template, backend)?.value)
    })?;
    Ranking::from_scores(&task.task_id, RankerSpec::Oracle.to_string(), scores, Direction::Ascending)
}

/// Applies `spec` to one task. `model` is required for model-based specs.
pub fn rank<B: Backend + ?Sized>(
    spec: RankerSpec,
    task: &CodingTask,
    template: &PromptTemplate,
    backend: &B,
    model: Option<&MlpModel>,
) -> Result<Ranking> {
    match spec {
        RankerSpec::ModelFree => rank_model_free(task, template, backend),
        RankerSpec::ModelFreeAsc => rank_by_source(task, template, backend, Direction::Ascending),
        RankerSpec::ModelBased(direction) => {
            let model = model.ok_or_else(|| Error::Config("the model-based ranker needs a trained model".into()))?;
            rank_model_based(task, template, backend, model, direction)
        }
        RankerSpec::Random(seed) => rank_random(task, seed),
        RankerSpec::HumanOrder => rank_human_order(task),
        RankerSpec::Oracle => rank_oracle(task, template, backend),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TopN(usize),
    Budget(BudgetSpec),
}

/// Top-N prefix of the ranking, or the longest prefix that fits the token
/// budget. Each example is chosen independently of the ones after it.
pub fn select<C: TokenCounter + ?Sized>(
    ranking: &Ranking,
    task: &CodingTask,
    selection: &Selection,
    template: &PromptTemplate,
    counter: &C,
) -> Result<Vec<IoExample>> {
    let ranked = ranking.ranked_examples(task)?;
    match selection {
        Selection::TopN(n) => {
            if *n > ranked.len() {
                return Err(Error::domain(format!(
                    "cannot select {n} examples from a pool of {} for task `{}`",
                    ranked.len(),
                    task.task_id
                )));
            }
            Ok(ranked[..*n].to_vec())
        }
        Selection::Budget(budget) => fit_to_budget(&ranked, &task.nl_description, template, budget, counter),
    }
}

pub fn write_rankings(path: impl AsRef<Path>, rankings: &[Ranking]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in rankings {
        out.push_str(&serde_json::to_string(r).expect("rankings serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_rankings(path: impl AsRef<Path>) -> Result<Vec<Ranking>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            field: "ranking".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::mlpranker::{BatchNorm, MlpModel};
    use crate::prompting::{whitespace_token_count, CountScope};

    struct Whitespace;
    impl TokenCounter for Whitespace {
        fn count_tokens(&self, text: &str) -> Result<usize> {
            Ok(whitespace_token_count(text))
        }
    }

    fn task(n: usize) -> CodingTask {
        CodingTask {
            task_id: "t".into(),
            nl_description: "Return the input.".into(),
            entry_point: "f".into(),
            ground_truth: "def f(x): return x".into(),
            pool: (0..n).map(|i| IoExample::new(i, format!("f({i})"), i.to_string())).collect(),
            eval_tests: vec![IoExample::new(100, "f(100)", "100")],
        }
    }

    /// Mock whose source perplexity for example `i` is `pp[i]`: every
    /// continuation token gets log-probability `-ln pp`.
    fn source_world(t: &CodingTask, pp: &[f64]) -> MockBackend {
        let template = PromptTemplate::default();
        let mut mock = MockBackend::new();
        for (ex, p) in t.pool.iter().zip(pp) {
            let prompt = render_prompt(&template, &t.nl_description, std::slice::from_ref(ex));
            let n = whitespace_token_count(&prompt);
            mock = mock.with_score("", &prompt, vec![-p.ln(); n]);
        }
        mock
    }

    #[test]
    fn model_free_examples() {
        let t = task(3);
        let r = rank_model_free(&t, &PromptTemplate::default(), &source_world(&t, &[2.0, 8.0, 4.0])).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        r.validate(&t).unwrap();

        let one = task(1);
        assert_eq!(rank_model_free(&one, &PromptTemplate::default(), &source_world(&one, &[3.0])).unwrap().order, vec![0]);

        let t = task(3);
        let r = rank_model_free(&t, &PromptTemplate::default(), &source_world(&t, &[5.0, 5.0, 1.0])).unwrap();
        assert_eq!(r.order, vec![0, 1, 2]);
    }

    /// A 1-input network that outputs its input unchanged for inputs > 0.
    fn passthrough_model() -> MlpModel {
        let mut m = MlpModel::with_widths(&[1, 1, 1, 1, 1], 0);
        for l in &mut m.layers {
            l.weight.fill(1.0);
            l.bias.fill(0.0);
        }
        let eps = m.bn_eps;
        m.norms = (0..3)
            .map(|_| BatchNorm {
                running_var: ndarray::Array1::from_elem(1, 1.0 - eps),
                ..BatchNorm::new(1)
            })
            .collect();
        m
    }

    #[test]
    fn model_based_examples() {
        let t = task(3);
        let template = PromptTemplate::default();
        let predicted = [1.5, 0.2, 0.9];
        let mut mock = MockBackend::new();
        for (ex, p) in t.pool.iter().zip(predicted) {
            mock = mock.with_embedding(&render_prompt(&template, &t.nl_description, std::slice::from_ref(ex)), vec![p]);
        }
        let model = passthrough_model();
        let asc = rank_model_based(&t, &template, &mock, &model, Direction::Ascending).unwrap();
        assert_eq!(asc.order, vec![1, 2, 0]);
        let desc = rank_model_based(&t, &template, &mock, &model, Direction::Descending).unwrap();
        assert_eq!(desc.order, vec![0, 2, 1]);
        assert!(matches!(
            rank_model_based(&t, &template, &MockBackend::new(), &model, Direction::Ascending),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            rank(RankerSpec::ModelBased(Direction::Ascending), &t, &template, &mock, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_is_seeded() {
        let t = task(5);
        assert_eq!(rank_random(&t, 3).unwrap(), rank_random(&t, 3).unwrap());
        let distinct: std::collections::HashSet<Vec<usize>> = (0..20).map(|s| rank_random(&t, s).unwrap().order).collect();
        assert!(distinct.len() >= 2);
        assert_eq!(rank_random(&task(1), 9).unwrap().order, vec![0]);
        rank_random(&t, 4).unwrap().validate(&t).unwrap();
    }

    #[test]
    fn human_order_is_identity() {
        let mut t = task(4);
        t.pool.reverse();
        let r = rank_human_order(&t).unwrap();
        assert_eq!(r.order, vec![3, 2, 1, 0]);
        r.validate(&t).unwrap();
        assert!(matches!(rank_human_order(&task(0)), Err(Error::Precondition(_))));
    }

    #[test]
    fn selection() {
        let t = task(3);
        let r = Ranking::from_scores("t", "x", [(0, 3.0), (1, 1.0), (2, 2.0)].into_iter().collect(), Direction::Ascending).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        let template = PromptTemplate::default();
        let pick = |n| select(&r, &t, &Selection::TopN(n), &template, &Whitespace);
        assert!(pick(0).unwrap().is_empty());
        assert_eq!(pick(2).unwrap().iter().map(|e| e.id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(pick(3).unwrap().len(), 3);
        assert!(matches!(pick(4), Err(Error::Domain(_))));
        // each rendered example line is three whitespace tokens
        let budget = Selection::Budget(BudgetSpec::tokens(7, CountScope::ExamplesOnly));
        assert_eq!(select(&r, &t, &budget, &template, &Whitespace).unwrap().len(), 2);
    }

    #[test]
    fn spec_strings_round_trip() {
        for spec in [
            RankerSpec::ModelFree,
            RankerSpec::ModelFreeAsc,
            RankerSpec::ModelBased(Direction::Ascending),
            RankerSpec::ModelBased(Direction::Descending),
            RankerSpec::Random(17),
            RankerSpec::HumanOrder,
            RankerSpec::Oracle,
        ] {
            assert_eq!(spec.to_string().parse::<RankerSpec>().unwrap(), spec);
        }
        assert_eq!("random:5".parse::<RankerSpec>().unwrap(), RankerSpec::Random(5));
        assert!("best".parse::<RankerSpec>().is_err());
    }

    #[test]
    fn rankings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rs = vec![rank_random(&task(4), 1).unwrap(), rank_human_order(&task(2)).unwrap()];
        write_rankings(&path, &rs).unwrap();
        assert_eq!(read_rankings(&path).unwrap(), rs);
        let line = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["task_id", "ranker_id", "order", "scores"] {
            assert!(v.get(key).is_some());
        }
    }
}
