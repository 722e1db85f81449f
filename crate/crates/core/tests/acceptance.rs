//! Acceptance suite. Prints one line per criterion and fails if any
//! criterion fails. Criterion 11 talks to a live model and is skipped unless
//! `OPENAI_API_KEY` and `FAQMAP_LCQMC_SAMPLE` (path to an LCQMC TSV) are set.
//!
//! Run with `cargo test -p faqmap-core --test acceptance -- --nocapture`.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use faqmap_core::agents::{select_few_shots, AgentError, AgentSpec, FewShotMode, FewShotPlan, STANDARD_AGENTS};
use faqmap_core::evalkit::{
    adapt_fiqa, adapt_lcqmc, evaluate_run, few_shots_from_labeled, mrr, ndcg_at_k, read_jsonl, read_lcqmc_tsv,
    split_holdout, top_k_accuracy, EvalError, EvalOptions, FiqaLink, FiqaText, FiqaVariation, GainMode, Run,
};
use faqmap_core::judge::VerdictMode;
use faqmap_core::llm_gateway::{BackendConfig, Gateway, OpenAiCompatibleBackend, ScriptRule, ScriptedFailure};
use faqmap_core::model::{normalize_utterance, Candidate, FaqCorpus, FaqEntry};
use faqmap_core::orchestrator::{dedup_max_score, Indexes, Pipeline, PipelineConfig, ResultCache};
use faqmap_core::prompting::{parse_judge_response, parse_ranker_response};
use faqmap_core::retrieval::{build_embedding_index, Bm25Index, EmbeddingIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

enum Outcome {
    Pass,
    Skip(String),
}

type Check = fn() -> Outcome;

// ---------------------------------------------------------------- 1

fn oracle_top_k(ranking: &[String], gold: &[String], k: usize) -> f64 {
    for id in ranking.iter().take(k) {
        if gold.contains(id) {
            return 1.0;
        }
    }
    0.0
}

fn oracle_rr(ranking: &[String], gold: &[String]) -> f64 {
    for (i, id) in ranking.iter().enumerate() {
        if gold.contains(id) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

fn oracle_ndcg(ranking: &[String], gold: &[String], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if gold.contains(id) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for i in 0..gold.len().min(k) {
        idcg += 1.0 / ((i + 2) as f64).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let ids: Vec<String> = (0..15).map(|i| format!("f{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut runs = Vec::new();
    for _ in 0..500 {
        let n = rng.gen_range(0..=10);
        let ranking: Vec<String> = ids.choose_multiple(&mut rng, n).cloned().collect();
        let g = rng.gen_range(0..=3);
        let gold: Vec<String> = ids.choose_multiple(&mut rng, g).cloned().collect();
        let run = [Run::new(ranking.clone(), gold.clone())];
        for k in 1..=10 {
            assert_eq!(top_k_accuracy(&run, k).unwrap(), oracle_top_k(&ranking, &gold, k));
            let got = ndcg_at_k(&run, k, GainMode::Binary).unwrap();
            assert!((got - oracle_ndcg(&ranking, &gold, k)).abs() < 1e-9, "ndcg@{k} {ranking:?} {gold:?}");
        }
        assert_eq!(mrr(&run).unwrap(), oracle_rr(&ranking, &gold));
        runs.push((ranking, gold));
    }
    let batch: Vec<Run> = runs.iter().map(|(r, g)| Run::new(r.clone(), g.clone())).collect();
    let mean = |f: &dyn Fn(&[String], &[String]) -> f64| runs.iter().map(|(r, g)| f(r, g)).sum::<f64>() / runs.len() as f64;
    assert!((mrr(&batch).unwrap() - mean(&|r, g| oracle_rr(r, g))).abs() < 1e-12);
    assert!((top_k_accuracy(&batch, 3).unwrap() - mean(&|r, g| oracle_top_k(r, g, 3))).abs() < 1e-12);
    assert!((ndcg_at_k(&batch, 5, GainMode::Binary).unwrap() - mean(&|r, g| oracle_ndcg(r, g, 5))).abs() < 1e-9);

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    // Single gold at rank 2: 1/log2(3).
    let one = ndcg_at_k(&[Run::new(s(&["x", "g"]), s(&["g"]))], 5, GainMode::Binary).unwrap();
    assert!((one - 0.6309).abs() < 1e-4, "{one}");
    // Golds at ranks 1 and 3: (1 + 1/2) / (1 + 1/log2(3)).
    let two = ndcg_at_k(&[Run::new(s(&["a", "x", "b"]), s(&["a", "b"]))], 5, GainMode::Binary).unwrap();
    assert!((two - 0.9197).abs() < 1e-4, "{two}");
    assert!(start.elapsed() < Duration::from_secs(5));
    Outcome::Pass
}

// ---------------------------------------------------------------- 2

fn fixture_determinism() -> Outcome {
    let start = Instant::now();
    let corpus = demo_corpus();
    let rules = vec![
        agent_rule("direct", ranker_reply(&corpus, &[("card-lost", 95.0), ("card-lock", 80.0), ("pin-reset", 20.0)])),
        agent_rule("embed", ranker_reply(&corpus, &[("card-replace", 70.0), ("card-lost", 88.0)])),
        agent_rule("direct_ans", ranker_reply(&corpus, &[("card-lock", 91.0), ("zelle", 10.0)])),
        agent_rule("embed_ans", ranker_reply(&corpus, &[("card-lost", 60.0), ("wire-fee", 5.0)])),
        judge_rule(judge_reply(
            &corpus,
            &[("card-lock", 96.0), ("card-lost", 96.0), ("card-replace", 72.5), ("pin-reset", 30.0), ("zelle", 4.0)],
        )),
    ];
    // Equal judge scores fall back to id order.
    let expected = [("card-lock", 96.0), ("card-lost", 96.0), ("card-replace", 72.5), ("pin-reset", 30.0), ("zelle", 4.0)];
    let (par, _) = scripted_pipeline(&corpus, rules.clone(), base_config(&corpus));
    let (seq, _) = scripted_pipeline(&corpus, rules, PipelineConfig { parallel: false, ..base_config(&corpus) });
    let q = normalize_utterance("lost deb").unwrap();
    for _ in 0..100 {
        let a = par.map_utterance(&q).unwrap();
        let b = seq.map_utterance(&q).unwrap();
        assert_eq!(a.verdict.mode, VerdictMode::Judged);
        let got: Vec<(&str, f64)> = a.verdict.ranked.items().iter().map(|c| (c.faq_id.as_str(), c.score)).collect();
        assert_eq!(got, expected);
        assert_eq!(a.verdict, b.verdict);
        assert_eq!(a.agent_preds, b.agent_preds);
    }
    assert!(start.elapsed() < Duration::from_secs(10));
    Outcome::Pass
}

// ---------------------------------------------------------------- 3

fn dedup_law() -> Outcome {
    let ids = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.gen_range(0..30);
        let all: Vec<Candidate> = (0..n)
            .map(|i| {
                let id = ids[rng.gen_range(0..ids.len())];
                let agent = STANDARD_AGENTS[rng.gen_range(0..4)].0;
                Candidate::new(id, rng.gen_range(0..=20) as f64 * 5.0, format!("r{i}"), agent).unwrap()
            })
            .collect();
        let mut oracle: Vec<Candidate> = Vec::new();
        let distinct: HashSet<&str> = all.iter().map(|c| c.faq_id.as_str()).collect();
        for id in distinct {
            let group: Vec<&Candidate> = all.iter().filter(|c| c.faq_id == id).collect();
            let best = group.iter().map(|c| c.score).fold(f64::MIN, f64::max);
            oracle.push((*group.iter().find(|c| c.score == best).unwrap()).clone());
        }
        oracle.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap().then_with(|| x.faq_id.cmp(&y.faq_id)));
        assert_eq!(dedup_max_score(&all), oracle);
    }
    Outcome::Pass
}

// ---------------------------------------------------------------- 4

fn fallback_law() -> Outcome {
    let corpus = demo_corpus();
    let ids: Vec<&str> = corpus.entries().iter().map(|f| f.id.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = normalize_utterance("q").unwrap();
    for _ in 0..200 {
        let mut rules = Vec::new();
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (name, _, _) in STANDARD_AGENTS {
            let n = rng.gen_range(1..=5);
            let picks: Vec<(&str, f64)> =
                ids.choose_multiple(&mut rng, n).map(|id| (*id, rng.gen_range(0..=100) as f64)).collect();
            for (id, s) in &picks {
                groups.entry(id).or_default().push(*s);
            }
            rules.push(agent_rule(name, ranker_reply(&corpus, &picks)));
        }
        rules.push(ScriptRule::new("judge").contains("expert judge").always_fail(ScriptedFailure::Rejected));
        let mut oracle: Vec<(&str, f64)> =
            groups.iter().map(|(id, s)| (*id, s.iter().sum::<f64>() / s.len() as f64)).collect();
        oracle.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(y.0)));
        oracle.truncate(5);
        let (p, _) = scripted_pipeline(&corpus, rules, base_config(&corpus));
        let r = p.map_utterance(&q).unwrap();
        assert_eq!(r.verdict.mode, VerdictMode::Fallback);
        assert!(r.judge_error.is_some());
        let got: Vec<(&str, f64)> = r.verdict.ranked.items().iter().map(|c| (c.faq_id.as_str(), c.score)).collect();
        assert_eq!(got, oracle);
    }
    Outcome::Pass
}

// ---------------------------------------------------------------- 5

fn few_shot_plan() -> Outcome {
    let corpus = demo_corpus();
    let training: Vec<_> = (0..20)
        .map(|i| faqmap_core::prompting::FewShot::new(format!("utterance {i}"), corpus.entries()[i % corpus.len()].question.clone()))
        .collect();
    let mut distinct_plans = HashSet::new();
    for seed in 0..100 {
        let plan: FewShotPlan = select_few_shots(&training, 4, 5, seed, FewShotMode::Partition).unwrap();
        assert_eq!(plan.per_agent.len(), 4);
        let mut seen = HashSet::new();
        for set in &plan.per_agent {
            assert_eq!(set.len(), 5);
            for shot in set {
                assert!(seen.insert(shot.clone()), "seed {seed}: {shot:?} given to two agents");
            }
        }
        assert_eq!(select_few_shots(&training, 4, 5, seed, FewShotMode::Partition).unwrap().per_agent, plan.per_agent);
        distinct_plans.insert(format!("{:?}", plan.per_agent));
    }
    assert!(distinct_plans.len() > 1);
    match select_few_shots(&training[..19], 4, 5, 0, FewShotMode::Partition) {
        Err(AgentError::InsufficientTraining { needed: 20, available: 19 }) => {}
        other => panic!("expected InsufficientTraining, got {other:?}"),
    }
    Outcome::Pass
}

// ---------------------------------------------------------------- 6

fn prompt_golden_files() -> Outcome {
    check_golden().unwrap();
    let prompts = golden_prompts();
    let get = |n: &str| &prompts.iter().find(|(name, _)| *name == n).unwrap().1;
    for name in ["ranker_questions.txt", "ranker_with_answers.txt"] {
        for key in [
            "\"user_utterance\"",
            "\"intent_analysis\"",
            "\"primary_banking_category\"",
            "\"relevant_faqs\"",
            "\"relevance_score\"",
            "\"reasoning\"",
            "\"confidence_in_mapping\"",
            "\"explanation_of_confidence\"",
            "\"recommended_clarification_question\"",
            "Return exactly 5 FAQs",
        ] {
            assert!(get(name).contains(key), "{name} lacks {key}");
        }
    }
    for key in ["\"reranked_faqs\"", "assign a new relevance score from 0-100", "Return exactly 5 FAQs"] {
        assert!(get("judge.txt").contains(key), "judge prompt lacks {key}");
    }
    let corpus = demo_corpus();
    let read = |n: &str| std::fs::read_to_string(fixture("responses").join(n)).unwrap();
    for name in ["ranker_plain.json", "ranker_fenced.txt", "ranker_prose.txt"] {
        let parsed = parse_ranker_response(&read(name), &corpus).unwrap();
        let again = parse_ranker_response(&serde_json::to_string(&parsed.response).unwrap(), &corpus).unwrap();
        assert_eq!((again.response, again.resolved), (parsed.response, parsed.resolved), "{name}");
    }
    for (name, n) in [("judge_plain.json", 5), ("judge_fenced.txt", 3)] {
        let parsed = parse_judge_response(&read(name), &corpus, n).unwrap();
        let again = parse_judge_response(&serde_json::to_string(&parsed.response).unwrap(), &corpus, n).unwrap();
        assert_eq!((again.response, again.resolved), (parsed.response, parsed.resolved), "{name}");
    }
    Outcome::Pass
}

// ---------------------------------------------------------------- 7

fn latency_shape() -> Outcome {
    let corpus = demo_corpus();
    let five = [("card-lost", 90.0), ("card-lock", 80.0), ("card-replace", 70.0), ("pin-reset", 60.0), ("zelle", 50.0)];
    let mut rules: Vec<ScriptRule> =
        STANDARD_AGENTS.iter().map(|(n, _, _)| agent_rule(n, ranker_reply(&corpus, &five)).delay_ms(150)).collect();
    rules.push(judge_rule(judge_reply(&corpus, &five)).delay_ms(100));
    let q = normalize_utterance("lost deb").unwrap();
    let (seq, _) = scripted_pipeline(&corpus, rules.clone(), PipelineConfig { parallel: false, ..base_config(&corpus) });
    let (par, _) = scripted_pipeline(&corpus, rules, base_config(&corpus));
    let s = seq.map_utterance(&q).unwrap().total_latency_ms;
    let p = par.map_utterance(&q).unwrap().total_latency_ms;
    println!("    sequential {s:.0} ms, parallel {p:.0} ms");
    assert!(s >= 700.0, "sequential total {s} ms");
    assert!(p <= 150.0 + 100.0 + 100.0, "parallel total {p} ms");
    Outcome::Pass
}

// ---------------------------------------------------------------- 8

fn cache_contract() -> Outcome {
    let corpus = demo_corpus();
    let five = [("sba-loan", 90.0), ("sba-ppp", 80.0), ("biz-loan", 70.0), ("wire-fee", 60.0), ("zelle", 50.0)];
    let mut rules: Vec<ScriptRule> = STANDARD_AGENTS.iter().map(|(n, _, _)| agent_rule(n, ranker_reply(&corpus, &five))).collect();
    rules.push(judge_rule(judge_reply(&corpus, &five)));
    let (p, backend) = scripted_pipeline(&corpus, rules, base_config(&corpus));
    let first = p.annotate("SBA").unwrap();
    let before = backend.total_calls();
    assert!(before > 0 && !first.cache_hit);
    let second = p.annotate("  sba ").unwrap();
    assert_eq!(backend.total_calls(), before);
    assert!(second.cache_hit);
    assert_eq!(second.verdict, first.verdict);
    Outcome::Pass
}

// ---------------------------------------------------------------- 9

fn retrieval_oracles() -> Outcome {
    // N = 3, avgdl = 7/3, k1 = 1.2, b = 0.75.
    // IDF(card) = ln(1 + 1.5/2.5), IDF(fees) = ln(1 + 2.5/1.5).
    // d1 (len 2, card 1) = 0.499176268..., d2 (len 3, card 1, fees 2) = 1.669145343..., d3 = 0.
    let corpus = FaqCorpus::validate(vec![
        FaqEntry::new("d1", "lock card", "x"),
        FaqEntry::new("d2", "card fees fees", "x"),
        FaqEntry::new("d3", "wire transfer", "x"),
    ])
    .unwrap();
    let bm25 = Bm25Index::build(&corpus, false);
    for (doc, want) in [(0, 0.4991762683023676), (1, 1.6691453431260639), (2, 0.0)] {
        let got = bm25.score_doc(doc, "card fees");
        assert!((got - want).abs() < 1e-6, "doc {doc}: {got} vs {want}");
    }
    let top: Vec<String> = bm25.top_k_text("card fees", 3).unwrap().into_iter().map(|h| h.faq_id).collect();
    assert_eq!(top, vec!["d2", "d1", "d3"]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.gen_range(1..=200);
        let mut names: Vec<usize> = (0..n).collect();
        names.shuffle(&mut rng);
        let ids: Vec<String> = names.iter().map(|i| format!("faq-{i:03}")).collect();
        // Coarse components make exact ties common.
        let coarse = |rng: &mut ChaCha8Rng| loop {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1..=1) as f64).collect();
            if v.iter().any(|x| *x != 0.0) {
                break v;
            }
        };
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| coarse(&mut rng)).collect();
        let index = EmbeddingIndex::from_parts(ids.clone(), vectors, false).unwrap();
        let mut query = coarse(&mut rng);
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        query.iter_mut().for_each(|x| *x /= norm);
        let mut oracle: Vec<(String, f64)> = ids
            .iter()
            .zip(index.vectors())
            .map(|(id, v)| (id.clone(), v.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)))
            .collect();
        oracle.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
        let k = rng.gen_range(1..=n);
        oracle.truncate(k);
        let got: Vec<(String, f64)> = index.cosine_top_k(&query, k).unwrap().into_iter().map(|h| (h.faq_id, h.score)).collect();
        assert_eq!(got, oracle);
    }
    Outcome::Pass
}

// ---------------------------------------------------------------- 10

fn dataset_adapters() -> Outcome {
    // 20 pairs: 15 distinct q2 become FAQs; 10 distinct q1 have a positive pair.
    let rows = read_lcqmc_tsv(&fixture("lcqmc_20.tsv")).unwrap();
    assert_eq!(rows.len(), 20);
    let (corpus, labeled) = adapt_lcqmc(&rows).unwrap();
    assert_eq!((corpus.len(), labeled.len()), (15, 10));

    let qs: Vec<FiqaText> = read_jsonl(&fixture("fiqa/questions.jsonl")).unwrap();
    let ans: Vec<FiqaText> = read_jsonl(&fixture("fiqa/answers.jsonl")).unwrap();
    let vars: Vec<FiqaVariation> = read_jsonl(&fixture("fiqa/variations.jsonl")).unwrap();
    let good: Vec<FiqaLink> = read_jsonl(&fixture("fiqa/links.jsonl")).unwrap();
    let bad: Vec<FiqaLink> = read_jsonl(&fixture("fiqa/links_corrupted.jsonl")).unwrap();
    let (fcorpus, futts) = adapt_fiqa(&qs, &ans, &good, Some(&vars), None).unwrap();
    assert_eq!((fcorpus.len(), futts.len()), (3, 3));
    match adapt_fiqa(&qs, &ans, &bad, Some(&vars), None) {
        Err(EvalError::DanglingLink(s)) => assert!(s.contains("a99"), "{s}"),
        other => panic!("expected DanglingLink, got {other:?}"),
    }
    Outcome::Pass
}

// ---------------------------------------------------------------- 11

fn live_direction() -> Outcome {
    let cfg = BackendConfig::default();
    let Ok(_) = std::env::var(&cfg.api_key_env_name) else {
        return Outcome::Skip(format!("{} not set", cfg.api_key_env_name));
    };
    let Ok(sample) = std::env::var("FAQMAP_LCQMC_SAMPLE") else {
        return Outcome::Skip("FAQMAP_LCQMC_SAMPLE not set".into());
    };
    let rows = read_lcqmc_tsv(std::path::Path::new(&sample)).unwrap();
    let (corpus, labeled) = adapt_lcqmc(&rows).unwrap();
    let (held, rest) = split_holdout(&labeled, 20, 7);
    let test: Vec<_> = rest.into_iter().take(50).collect();
    let plan = select_few_shots(&few_shots_from_labeled(&held, &corpus), 4, 5, 7, FewShotMode::Partition).unwrap();
    let gw = Gateway::new(Arc::new(OpenAiCompatibleBackend::from_config(&cfg).unwrap()), cfg);
    let indexes = Indexes {
        questions: Some(Arc::new(build_embedding_index(&corpus, false, &gw).unwrap())),
        with_answers: Some(Arc::new(build_embedding_index(&corpus, true, &gw).unwrap())),
    };
    // Planner off: 4 agents + 1 judge per utterance keeps the run at 250 chat calls.
    let pcfg = PipelineConfig {
        agents: AgentSpec::standard_roster(&plan, faqmap_core::agents::DEFAULT_POOL_SIZE),
        use_planner: false,
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(Arc::new(corpus), indexes, gw, pcfg, Arc::new(ResultCache::in_memory())).unwrap();
    let report = evaluate_run(&pipeline, &test, &EvalOptions::default()).unwrap();
    let embedding = report.baselines.iter().find(|r| r.method == "embedding").unwrap();
    println!("    multi-agent top1 {:.3}, embedding top1 {:.3} (n = {})", report.scores.top1, embedding.top1, test.len());
    assert!(report.scores.top1 >= embedding.top1);
    Outcome::Pass
}

#[test]
fn acceptance() {
    let criteria: [(&str, Check); 11] = [
        ("metric oracles", metric_oracles),
        ("fixture determinism", fixture_determinism),
        ("dedup law", dedup_law),
        ("fallback law", fallback_law),
        ("few-shot plan", few_shot_plan),
        ("prompt golden files", prompt_golden_files),
        ("latency shape", latency_shape),
        ("cache contract", cache_contract),
        ("retrieval oracles", retrieval_oracles),
        ("dataset adapters", dataset_adapters),
        ("live direction", live_direction),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(Outcome::Pass) => println!("criterion {n}: PASS {name} ({ms} ms)"),
            Ok(Outcome::Skip(why)) => println!("criterion {n}: SKIP {name} ({why})"),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                println!("criterion {n}: FAIL {name}: {}", msg.unwrap_or_default());
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
