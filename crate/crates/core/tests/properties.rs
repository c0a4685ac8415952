use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use exemplar_core::backend::{Backend, CachedBackend, LogProbSequence, MockBackend};
use exemplar_core::dataset::{load_tasks, split_examples, split_tasks, write_tasks, CodingTask, IoExample, SplitMode, SplitRatios, SplitSpec};
use exemplar_core::metrics::{perplexity, spearman, MeanStderr, PerplexityKind, TaskSingleExampleStats};
use exemplar_core::prompting::{
    fit_to_budget, rendered_cost, whitespace_token_count, BudgetSpec, CountScope, PromptTemplate, TokenCounter,
};
use exemplar_core::rankers::{order_by_scores, rank_human_order, rank_random, select, Direction, Ranking, Selection};
use exemplar_core::Result;
use proptest::prelude::*;

struct Whitespace;

impl TokenCounter for Whitespace {
    fn count_tokens(&self, text: &str) -> Result<usize> {
        Ok(whitespace_token_count(text))
    }
}

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,6}"
}

fn expr() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..5).prop_map(|w| w.join(" "))
}

fn make_task(id: String, pool: Vec<(String, String)>) -> CodingTask {
    CodingTask {
        task_id: id,
        nl_description: "Do the thing.".into(),
        entry_point: "f".into(),
        ground_truth: "def f(x): return x".into(),
        pool: pool.into_iter().enumerate().map(|(i, (a, b))| IoExample::new(i, a, b)).collect(),
        eval_tests: vec![IoExample::new(1000, "held out", "value")],
    }
}

fn tasks(n: usize) -> Vec<CodingTask> {
    (0..n).map(|i| make_task(format!("t{i}"), vec![("x".into(), "y".into())])).collect()
}

fn ratios() -> impl Strategy<Value = SplitRatios> {
    (0u32..=10, 0u32..=10).prop_filter_map("ratios within one", |(a, b)| {
        (a + b <= 10).then(|| SplitRatios::new(a as f64 / 10.0, b as f64 / 10.0, (10 - a - b) as f64 / 10.0).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn task_split_is_a_partition(n in 1usize..100, r in ratios(), seed in any::<u64>()) {
        let input = tasks(n);
        let split = split_tasks(&input, &SplitSpec { mode: SplitMode::ByPrompt, ratios: r, seed }).unwrap();
        let ids = |v: &[CodingTask]| v.iter().map(|t| t.task_id.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (ids(&split.train), ids(&split.val), ids(&split.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        prop_assert_eq!(&(&(&a | &b) | &c), &ids(&input));
        prop_assert_eq!(split.sizes(), r.sizes(n));
    }

    #[test]
    fn example_split_is_a_partition(m in 1usize..60, r in ratios(), seed in any::<u64>()) {
        let task = make_task("t".into(), (0..m).map(|i| (format!("f({i})"), i.to_string())).collect());
        let split = split_examples(&task, &SplitSpec { mode: SplitMode::ByExample, ratios: r, seed }).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).map(|e| e.id).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
    }

    #[test]
    fn seeds_change_partitions(n in 5usize..40) {
        let input = tasks(n);
        let r = SplitRatios::default();
        let distinct: HashSet<Vec<String>> = (0..20u64)
            .map(|seed| {
                split_tasks(&input, &SplitSpec { mode: SplitMode::ByPrompt, ratios: r, seed })
                    .unwrap()
                    .train
                    .iter()
                    .map(|t| t.task_id.clone())
                    .collect()
            })
            .collect();
        prop_assert!(distinct.len() >= 2);
    }

    #[test]
    fn task_files_round_trip(pools in prop::collection::vec(prop::collection::vec((expr(), expr()), 1..5), 1..6)) {
        let ts: Vec<CodingTask> = pools.into_iter().enumerate().map(|(i, p)| make_task(format!("task/{i}"), p)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        write_tasks(&path, &ts).unwrap();
        prop_assert_eq!(load_tasks(&path).unwrap(), ts);
    }

    #[test]
    fn budget_fitting_is_safe_prefix_and_monotone(
        pool in prop::collection::vec((expr(), expr()), 0..10),
        budget in 0usize..60,
        whole in any::<bool>(),
    ) {
        let task = make_task("t".into(), pool);
        let template = PromptTemplate::default();
        let scope = if whole { CountScope::WholePrompt } else { CountScope::ExamplesOnly };
        let fit = |b: usize| fit_to_budget(&task.pool, &task.nl_description, &template, &BudgetSpec::tokens(b, scope), &Whitespace);
        match fit(budget) {
            Ok(chosen) => {
                let cost = rendered_cost(&chosen, &task.nl_description, &template, scope, &Whitespace).unwrap();
                prop_assert!(cost <= budget);
                prop_assert_eq!(&chosen[..], &task.pool[..chosen.len()]);
                let bigger = fit(budget + 1).unwrap();
                prop_assert!(bigger.len() >= chosen.len());
            }
            Err(_) => {
                // only when the bare prompt is already over budget
                prop_assert!(whole);
                prop_assert!(rendered_cost(&[], &task.nl_description, &template, scope, &Whitespace).unwrap() > budget);
            }
        }
    }

    #[test]
    fn cache_is_transparent(ctx in expr(), cont in expr(), text in expr()) {
        let dir = tempfile::tempdir().unwrap();
        let plain = MockBackend::new().with_hashed_scores();
        let cached = CachedBackend::open(MockBackend::new().with_hashed_scores(), dir.path().join("c.jsonl")).unwrap();
        prop_assert_eq!(cached.score(&ctx, &cont).unwrap(), plain.score(&ctx, &cont).unwrap());
        prop_assert_eq!(cached.embed(&text).unwrap(), plain.embed(&text).unwrap());
        let before = cached.inner().stats().total();
        cached.score(&ctx, &cont).unwrap();
        cached.embed(&text).unwrap();
        prop_assert_eq!(cached.inner().stats().total(), before);
    }

    #[test]
    fn positive_logprobs_are_rejected(lps in prop::collection::vec(-5.0f64..0.0, 1..10), idx in any::<prop::sample::Index>(), bump in 1e-9f64..3.0) {
        let mut lps = lps;
        let i = idx.index(lps.len());
        lps[i] = bump;
        let toks = (0..lps.len()).map(|k| k.to_string()).collect();
        prop_assert!(LogProbSequence::continuation_only(toks, lps).is_err());
    }

    #[test]
    fn perplexity_is_length_normalized(l in -20.0f64..0.0, n in 1usize..200) {
        let seq = LogProbSequence::continuation_only(vec!["t".into(); n], vec![l; n]).unwrap();
        let pp = perplexity(&seq, PerplexityKind::Target).unwrap();
        prop_assert!((pp.value - (-l).exp()).abs() <= 1e-12 * (-l).exp());
    }

    #[test]
    fn value_and_log_value_order_alike(lps in prop::collection::vec(prop::collection::vec(-8.0f64..0.0, 1..8), 1..10)) {
        let scores: Vec<_> = lps
            .into_iter()
            .map(|l| perplexity(&LogProbSequence::continuation_only(vec!["t".into(); l.len()], l).unwrap(), PerplexityKind::Source).unwrap())
            .collect();
        let raw: BTreeMap<usize, f64> = scores.iter().enumerate().map(|(i, s)| (i, s.value)).collect();
        let logs: BTreeMap<usize, f64> = scores.iter().enumerate().map(|(i, s)| (i, s.log_value)).collect();
        for d in [Direction::Ascending, Direction::Descending] {
            prop_assert_eq!(order_by_scores(&raw, d), order_by_scores(&logs, d));
        }
    }

    #[test]
    fn single_example_row_is_ordered(no in 1.0f64..50.0, per in prop::collection::vec(1.0f64..50.0, 1..12)) {
        let s = TaskSingleExampleStats::from_values(no, &per).unwrap();
        prop_assert!(s.best_example <= s.median_example);
        prop_assert!(s.best_example <= s.average_example + 1e-12);
        prop_assert!(MeanStderr::of(&per).unwrap().stderr >= 0.0);
    }

    #[test]
    fn spearman_symmetric_and_relabel_invariant(
        (a, b, p) in (2usize..20).prop_flat_map(|n| {
            let perm = Just((0..n).collect::<Vec<_>>()).prop_shuffle();
            (perm.clone(), perm.clone(), perm)
        })
    ) {
        let ab = spearman(&a, &b).unwrap();
        prop_assert_eq!(ab, spearman(&b, &a).unwrap());
        let relabel = |v: &[usize]| p.iter().map(|&i| v[i]).collect::<Vec<_>>();
        prop_assert!((ab - spearman(&relabel(&a), &relabel(&b)).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn rankings_are_coherent_permutations(
        scores in prop::collection::vec(prop::sample::select(vec![0.5f64, 1.0, 2.0, 3.5, 7.0, 11.0]), 1..12),
        desc in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let task = make_task("t".into(), (0..scores.len()).map(|i| (format!("f({i})"), i.to_string())).collect());
        let direction = if desc { Direction::Descending } else { Direction::Ascending };
        let map: BTreeMap<usize, f64> = scores.iter().copied().enumerate().collect();
        let r = Ranking::from_scores("t", "prop", map.clone(), direction).unwrap();
        r.validate(&task).unwrap();
        // ties resolve by ascending id
        for w in r.order.windows(2) {
            if map[&w[0]] == map[&w[1]] {
                prop_assert!(w[0] < w[1]);
            }
        }
        // strictly increasing transforms preserve the order
        for f in [|x: f64| x.ln(), |x: f64| x * x * x + x, |x: f64| (x / 3.0).exp()] {
            let t: BTreeMap<usize, f64> = map.iter().map(|(k, v)| (*k, f(*v))).collect();
            prop_assert_eq!(&Ranking::from_scores("t", "prop", t, direction).unwrap().order, &r.order);
        }
        rank_random(&task, seed).unwrap().validate(&task).unwrap();
        rank_human_order(&task).unwrap().validate(&task).unwrap();
        // selection prefixes nest
        let template = PromptTemplate::default();
        for k in 0..scores.len() {
            let a = select(&r, &task, &Selection::TopN(k), &template, &Whitespace).unwrap();
            let b = select(&r, &task, &Selection::TopN(k + 1), &template, &Whitespace).unwrap();
            prop_assert_eq!(&a[..], &b[..k]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn concurrency_stays_bounded(max in 1usize..5, calls in 4usize..16) {
        use rayon::prelude::*;
        let m = MockBackend::new().with_max_in_flight(max).with_call_delay(Duration::from_millis(2));
        (0..calls).into_par_iter().for_each(|i| {
            m.score("c", &format!("x{i}")).unwrap();
        });
        prop_assert!(m.peak_in_flight() <= max);
    }
}
