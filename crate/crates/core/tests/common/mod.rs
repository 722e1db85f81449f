#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use faqmap_core::agents::{AgentSpec, STANDARD_AGENTS};
use faqmap_core::llm_gateway::{BackendConfig, Gateway, ScriptRule, ScriptedBackend};
use faqmap_core::model::FaqCorpus;
use faqmap_core::orchestrator::{Indexes, Pipeline, PipelineConfig, ResultCache};
use faqmap_core::prompting::FewShot;
use faqmap_core::retrieval::build_embedding_index;
use serde_json::json;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn demo_corpus() -> FaqCorpus {
    FaqCorpus::load_jsonl(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo/corpus.jsonl")).unwrap()
}

pub fn title(corpus: &FaqCorpus, id: &str) -> String {
    corpus.get(id).unwrap().question.clone()
}

pub fn ranker_reply(corpus: &FaqCorpus, items: &[(&str, f64)]) -> String {
    let faqs: Vec<_> = items
        .iter()
        .map(|(id, s)| json!({"faq": title(corpus, id), "relevance_score": s, "reasoning": format!("reason for {id}")}))
        .collect();
    json!({
        "user_utterance": "u", "intent_analysis": "i", "primary_banking_category": "c",
        "relevant_faqs": faqs, "confidence_in_mapping": "HIGH", "explanation_of_confidence": "e"
    })
    .to_string()
}

pub fn judge_reply(corpus: &FaqCorpus, items: &[(&str, f64)]) -> String {
    let faqs: Vec<_> = items
        .iter()
        .map(|(id, s)| json!({"faq": title(corpus, id), "relevance_score": s, "reasoning": "judged"}))
        .collect();
    json!({ "reranked_faqs": faqs }).to_string()
}

/// Standard roster where each agent carries a unique marker example, so a
/// script can address agents individually.
pub fn marked_roster(corpus: &FaqCorpus) -> Vec<AgentSpec> {
    let any_title = corpus.entries()[0].question.clone();
    STANDARD_AGENTS
        .iter()
        .map(|(name, emb, ans)| AgentSpec {
            few_shots: vec![FewShot::new(format!("marker-{name}"), any_title.clone())],
            ..AgentSpec::new(*name, *emb, *ans)
        })
        .collect()
}

pub fn agent_rule(agent: &str, reply: String) -> ScriptRule {
    ScriptRule::new(agent).contains(format!("\"marker-{agent}\"")).excludes("expert judge").reply(reply)
}

pub fn judge_rule(reply: String) -> ScriptRule {
    ScriptRule::new("judge").contains("expert judge").reply(reply)
}

pub fn gateway(backend: Arc<ScriptedBackend>) -> Gateway {
    Gateway::new(backend, BackendConfig { max_retries: 0, ..Default::default() })
}

/// Pipeline over `corpus` with both embedding indexes built from the
/// scripted backend's hashing embedder. The planner is off.
pub fn scripted_pipeline(corpus: &FaqCorpus, rules: Vec<ScriptRule>, cfg: PipelineConfig) -> (Pipeline, Arc<ScriptedBackend>) {
    let backend = Arc::new(ScriptedBackend::new(rules));
    let gw = gateway(backend.clone());
    let indexes = Indexes {
        questions: Some(Arc::new(build_embedding_index(corpus, false, &gw).unwrap())),
        with_answers: Some(Arc::new(build_embedding_index(corpus, true, &gw).unwrap())),
    };
    let pipeline = Pipeline::new(Arc::new(corpus.clone()), indexes, gw, cfg, Arc::new(ResultCache::in_memory())).unwrap();
    (pipeline, backend)
}

pub fn base_config(corpus: &FaqCorpus) -> PipelineConfig {
    PipelineConfig { agents: marked_roster(corpus), use_planner: false, ..PipelineConfig::default() }
}

use faqmap_core::model::{normalize_utterance, Candidate};
use faqmap_core::prompting::{build_judge_prompt, build_planner_prompt, build_ranker_prompt, PromptBundle, PromptConfig};
use indexmap::IndexMap;

fn render(bundle: &PromptBundle) -> String {
    format!(
        "temperature: {}\nforce_json: {}\n\n[system]\n{}\n\n[user]\n{}\n",
        bundle.temperature, bundle.force_json, bundle.system, bundle.user
    )
}

/// Every prompt kind built from fixed inputs over the demo corpus, as
/// (golden file name, rendered text).
pub fn golden_prompts() -> Vec<(&'static str, String)> {
    let corpus = demo_corpus();
    let cfg = PromptConfig::default();
    let query = faqmap_core::model::UserQuery {
        intent_analysis: Some("report a lost debit card (category: Security)".into()),
        ..normalize_utterance("Lost  DEB").unwrap()
    }
    .with_expansion_terms(["lost", "debit", "card"]);
    let shots = vec![
        FewShot::new("stolen card", title(&corpus, "card-lost")),
        FewShot::new("freeze card", title(&corpus, "card-lock")),
        FewShot::new("change pin", title(&corpus, "pin-reset")),
    ];
    let faqs: Vec<_> = corpus.entries().iter().collect();
    let direct = build_ranker_prompt(false, &query, &faqs, &shots, &cfg).unwrap();
    let answers = build_ranker_prompt(true, &query, &faqs, &shots, &cfg).unwrap();

    let c = |id: &str, s: f64, agent: &str| Candidate::new(id, s, format!("{agent} thinks {id} fits"), agent).unwrap();
    let mut preds: IndexMap<String, Vec<Candidate>> = IndexMap::new();
    preds.insert("direct".into(), vec![c("card-lost", 90.0, "direct"), c("card-lock", 70.0, "direct")]);
    preds.insert("embed".into(), vec![c("card-lost", 85.0, "embed"), c("card-replace", 60.0, "embed")]);
    preds.insert("direct_ans".into(), vec![]);
    preds.insert("embed_ans".into(), vec![c("pin-reset", 35.5, "embed_ans")]);
    let candidates = vec![c("card-lost", 90.0, "direct"), c("card-lock", 70.0, "direct"), c("card-replace", 60.0, "embed"), c("pin-reset", 35.5, "embed_ans")];
    let judge = build_judge_prompt(&query, &candidates, &preds, &shots, &corpus, &cfg).unwrap();
    let planner = build_planner_prompt(&normalize_utterance("Lost  DEB").unwrap(), &cfg);
    vec![
        ("ranker_questions.txt", render(&direct)),
        ("ranker_with_answers.txt", render(&answers)),
        ("judge.txt", render(&judge)),
        ("planner.txt", render(&planner)),
    ]
}

/// Compares against the golden files; `UPDATE_GOLDEN=1` rewrites them.
pub fn check_golden() -> Result<(), String> {
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    for (name, text) in golden_prompts() {
        let path = fixture("golden").join(name);
        if update {
            std::fs::write(&path, &text).map_err(|e| e.to_string())?;
            continue;
        }
        let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if expected != text {
            return Err(format!("{name} differs from its golden file (rerun with UPDATE_GOLDEN=1 to accept)"));
        }
    }
    Ok(())
}
