//! End-to-end mapping of one utterance: plan, fan out to the ranker agents,
//! merge their candidates, judge, and cache the final result.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::agents::{plan_query, ranker_predict, AgentError, AgentSpec, FewShotPlan};
use crate::judge::{fallback_average, meta_judge, FallbackMode, JudgeError, JudgeInput, JudgeVerdict};
use crate::llm_gateway::Gateway;
use crate::model::{normalize_utterance, rank_order, Candidate, FaqCorpus, ModelError, UserQuery};
use crate::prompting::{FewShot, PromptConfig};
use crate::retrieval::{EmbeddingIndex, RetrievalError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    InvalidUtterance(#[from] ModelError),
    #[error("no candidates: {0}")]
    NoCandidates(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub agents: Vec<AgentSpec>,
    pub judge_samples: u32,
    pub parallel: bool,
    pub cache_enabled: bool,
    pub top_k_out: usize,
    pub use_planner: bool,
    pub use_judge: bool,
    pub fallback_mode: FallbackMode,
    pub prompt: PromptConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            agents: AgentSpec::standard_roster(&FewShotPlan::empty(4), crate::agents::DEFAULT_POOL_SIZE),
            judge_samples: 1,
            parallel: true,
            cache_enabled: true,
            top_k_out: 5,
            use_planner: true,
            use_judge: true,
            fallback_mode: FallbackMode::ProposingAgents,
            prompt: PromptConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_k_out == 0 {
            return Err(PipelineError::Config("top_k_out must be at least 1".into()));
        }
        if self.judge_samples == 0 {
            return Err(PipelineError::Config("judge_samples must be at least 1".into()));
        }
        if self.agents.is_empty() {
            return Err(PipelineError::Config("no agents configured".into()));
        }
        let mut names = std::collections::HashSet::new();
        for a in &self.agents {
            if !names.insert(a.name.as_str()) {
                return Err(PipelineError::Config(format!("duplicate agent name `{}`", a.name)));
            }
        }
        Ok(())
    }

    /// Every agent's few-shot examples, shown to the judge as training examples.
    pub fn judge_few_shots(&self) -> Vec<FewShot> {
        let mut seen = std::collections::HashSet::new();
        self.agents.iter().flat_map(|a| a.few_shots.iter()).filter(|s| seen.insert((*s).clone())).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub planner_ms: f64,
    pub agents_ms: f64,
    pub judge_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub query: UserQuery,
    pub verdict: JudgeVerdict,
    pub agent_preds: IndexMap<String, Vec<Candidate>>,
    pub agent_errors: IndexMap<String, String>,
    pub judge_error: Option<String>,
    pub per_agent_latency_ms: IndexMap<String, f64>,
    pub stage_latency_ms: StageLatency,
    pub total_latency_ms: f64,
    pub cache_hit: bool,
}

/// One candidate per FAQ, the highest-scoring instance winning; among equal
/// scores the earliest in `all` wins. Sorted by score, then id.
pub fn dedup_max_score(all: &[Candidate]) -> Vec<Candidate> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<Candidate> = Vec::new();
    for c in all {
        match slot.get(c.faq_id.as_str()) {
            Some(&i) if c.score > out[i].score => out[i] = c.clone(),
            Some(_) => {}
            None => {
                slot.insert(c.faq_id.as_str(), out.len());
                out.push(c.clone());
            }
        }
    }
    out.sort_by(|a, b| rank_order(a.score, &a.faq_id, b.score, &b.faq_id));
    out
}

/// Final results keyed by normalized utterance, optionally persisted as
/// JSON lines `{normalized_utterance, result}`.
#[derive(Debug, Default)]
pub struct ResultCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, String>>,
}

#[derive(Deserialize)]
struct CacheLine {
    normalized_utterance: String,
    result: Box<RawValue>,
}

impl ResultCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads entries from `path` if it exists. Later lines override earlier ones;
    /// unreadable lines are skipped with a warning.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, std::io::Error> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(l) => {
                        entries.insert(l.normalized_utterance, l.result.get().to_string());
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), n + 1),
                }
            }
        }
        Ok(Self { path: Some(path), entries: Mutex::new(entries) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.lock().get(key).cloned()
    }

    /// Stores `serialized` under `key`. When the file write fails nothing is
    /// stored, so memory and disk never disagree.
    pub fn insert(&self, key: &str, serialized: &str) -> Result<(), std::io::Error> {
        let mut entries = self.lock();
        if let Some(path) = &self.path {
            let key_json = serde_json::to_string(key).map_err(std::io::Error::other)?;
            let line = format!("{{\"normalized_utterance\":{key_json},\"result\":{serialized}}}\n");
            OpenOptions::new().create(true).append(true).open(path)?.write_all(line.as_bytes())?;
        }
        entries.insert(key.to_string(), serialized.to_string());
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, String>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Embedding indexes for the embedding agents, one per answer mode.
#[derive(Debug, Clone, Default)]
pub struct Indexes {
    pub questions: Option<Arc<EmbeddingIndex>>,
    pub with_answers: Option<Arc<EmbeddingIndex>>,
}

impl Indexes {
    pub fn for_agent(&self, spec: &AgentSpec) -> Option<&EmbeddingIndex> {
        if !spec.use_embeddings {
            return None;
        }
        if spec.use_answers { self.with_answers.as_deref() } else { self.questions.as_deref() }
    }
}

#[derive(Clone)]
pub struct Pipeline {
    corpus: Arc<FaqCorpus>,
    indexes: Indexes,
    gateway: Gateway,
    cfg: PipelineConfig,
    cache: Arc<ResultCache>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

impl Pipeline {
    pub fn new(
        corpus: Arc<FaqCorpus>,
        indexes: Indexes,
        gateway: Gateway,
        cfg: PipelineConfig,
        cache: Arc<ResultCache>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        for spec in cfg.agents.iter().filter(|a| a.use_embeddings) {
            let index = indexes
                .for_agent(spec)
                .ok_or_else(|| PipelineError::Config(format!("agent `{}` needs an embedding index", spec.name)))?;
            index.check_corpus(&corpus).map_err(|e: RetrievalError| PipelineError::Config(e.to_string()))?;
        }
        Ok(Self { corpus, indexes, gateway, cfg, cache })
    }

    pub fn corpus(&self) -> &FaqCorpus {
        &self.corpus
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn indexes(&self) -> &Indexes {
        &self.indexes
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn cache(&self) -> &ResultCache {
        &self.cache
    }

    fn run_agent(&self, spec: &AgentSpec, query: &UserQuery) -> (Result<Vec<Candidate>, AgentError>, f64) {
        let t = Instant::now();
        let r = ranker_predict(spec, query, &self.corpus, self.indexes.for_agent(spec), &self.gateway, &self.cfg.prompt);
        (r, ms_since(t))
    }

    pub fn map_utterance(&self, query: &UserQuery) -> Result<AnnotationResult, PipelineError> {
        let start = Instant::now();
        let planned = if self.cfg.use_planner { plan_query(query, &self.gateway, &self.cfg.prompt) } else { query.clone() };
        let planner_ms = ms_since(start);

        let t_agents = Instant::now();
        let outcomes: Vec<(Result<Vec<Candidate>, AgentError>, f64)> = if self.cfg.parallel {
            thread::scope(|s| {
                let handles: Vec<_> = self.cfg.agents.iter().map(|spec| s.spawn(|| self.run_agent(spec, &planned))).collect();
                handles
                    .into_iter()
                    .zip(&self.cfg.agents)
                    .map(|(h, spec)| {
                        h.join().unwrap_or_else(|_| {
                            (
                                Err(AgentError::AgentFailed { agent: spec.name.clone(), cause: "panicked".into(), unavailable: false }),
                                0.0,
                            )
                        })
                    })
                    .collect()
            })
        } else {
            self.cfg.agents.iter().map(|spec| self.run_agent(spec, &planned)).collect()
        };
        let agents_ms = ms_since(t_agents);

        let mut agent_preds = IndexMap::new();
        let mut agent_errors = IndexMap::new();
        let mut per_agent_latency_ms = IndexMap::new();
        let mut all_unavailable = true;
        for (spec, (result, ms)) in self.cfg.agents.iter().zip(outcomes) {
            per_agent_latency_ms.insert(spec.name.clone(), ms);
            match result {
                Ok(c) => {
                    all_unavailable = false;
                    agent_preds.insert(spec.name.clone(), c);
                }
                Err(e) => {
                    all_unavailable &= matches!(e, AgentError::AgentFailed { unavailable: true, .. });
                    log::warn!("{e}");
                    agent_preds.insert(spec.name.clone(), Vec::new());
                    agent_errors.insert(spec.name.clone(), e.to_string());
                }
            }
        }
        let all: Vec<Candidate> = agent_preds.values().flatten().cloned().collect();
        if all.is_empty() {
            let detail = if agent_errors.is_empty() {
                "no agent proposed an FAQ".to_string()
            } else {
                agent_errors.values().cloned().collect::<Vec<_>>().join("; ")
            };
            return Err(if all_unavailable { PipelineError::BackendUnavailable(detail) } else { PipelineError::NoCandidates(detail) });
        }
        let candidates = dedup_max_score(&all);

        let t_judge = Instant::now();
        let few_shots = self.cfg.judge_few_shots();
        let judged = if self.cfg.use_judge {
            let input = JudgeInput {
                query: &planned,
                candidates: &candidates,
                agent_preds: &agent_preds,
                few_shots: &few_shots,
                corpus: &self.corpus,
            };
            meta_judge(input, self.cfg.judge_samples, &self.gateway, &self.cfg.prompt)
        } else {
            Err(JudgeError::JudgeFailed("judge disabled".into()))
        };
        let (verdict, judge_error) = match judged {
            Ok(v) => (v, None),
            Err(e) => {
                if self.cfg.use_judge {
                    log::warn!("{e}; using average agent scores");
                }
                let v = fallback_average(&agent_preds, self.cfg.fallback_mode, self.cfg.top_k_out)
                    .map_err(|e| PipelineError::NoCandidates(e.to_string()))?;
                (v, Some(e.to_string()))
            }
        };
        let verdict = JudgeVerdict { ranked: verdict.ranked.truncated(self.cfg.top_k_out), mode: verdict.mode };
        let judge_ms = ms_since(t_judge);

        Ok(AnnotationResult {
            query: planned,
            verdict,
            agent_preds,
            agent_errors,
            judge_error,
            per_agent_latency_ms,
            stage_latency_ms: StageLatency { planner_ms, agents_ms, judge_ms },
            total_latency_ms: ms_since(start),
            cache_hit: false,
        })
    }

    /// Normalizes, serves repeated utterances from the cache, otherwise maps
    /// and stores the result. Cache write failures are logged and ignored.
    pub fn annotate(&self, raw: &str) -> Result<AnnotationResult, PipelineError> {
        let query = normalize_utterance(raw)?;
        if self.cfg.cache_enabled {
            if let Some(stored) = self.cache.get(&query.normalized) {
                match serde_json::from_str::<AnnotationResult>(&stored) {
                    Ok(mut r) => {
                        r.cache_hit = true;
                        return Ok(r);
                    }
                    Err(e) => log::warn!("ignoring unreadable cache entry for `{}`: {e}", query.normalized),
                }
            }
        }
        let result = self.map_utterance(&query)?;
        if self.cfg.cache_enabled {
            match serde_json::to_string(&result) {
                Ok(s) => {
                    if let Err(e) = self.cache.insert(&query.normalized, &s) {
                        log::warn!("result cache write failed, continuing uncached: {e}");
                    }
                }
                Err(e) => log::warn!("could not serialize result for caching: {e}"),
            }
        }
        Ok(result)
    }
}

impl AnnotationResult {
    /// Audit record: inputs, per-agent outputs, verdict and latencies.
    pub fn audit_json(&self, corpus: &FaqCorpus) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        v["verdict_json"] = self.verdict.to_json(corpus);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::VerdictMode;
    use crate::llm_gateway::{BackendConfig, ScriptRule, ScriptedBackend, ScriptedFailure};
    use crate::model::FaqEntry;
    use serde_json::json;

    fn cand(id: &str, score: f64, agent: &str) -> Candidate {
        Candidate::new(id, score, format!("from {agent}"), agent).unwrap()
    }

    #[test]
    fn dedup_examples() {
        let out = dedup_max_score(&[cand("X", 80.0, "a"), cand("X", 90.0, "b"), cand("Y", 70.0, "a")]);
        assert_eq!(out, vec![cand("X", 90.0, "b"), cand("Y", 70.0, "a")]);
        assert!(dedup_max_score(&[]).is_empty());
        assert_eq!(dedup_max_score(&[cand("X", 90.0, "a"), cand("X", 90.0, "b")])[0].source_agent, "a");
    }

    fn corpus() -> Arc<FaqCorpus> {
        Arc::new(
            FaqCorpus::validate(
                (0..8).map(|i| FaqEntry::new(format!("f{i}"), format!("Title {i}"), format!("Answer {i}"))).collect(),
            )
            .unwrap(),
        )
    }

    fn ranker_reply(items: &[(&str, f64)]) -> String {
        let faqs: Vec<_> = items.iter().map(|(t, s)| json!({"faq": t, "relevance_score": s, "reasoning": "r"})).collect();
        json!({
            "user_utterance": "u", "intent_analysis": "i", "primary_banking_category": "c",
            "relevant_faqs": faqs, "confidence_in_mapping": "HIGH", "explanation_of_confidence": "e"
        })
        .to_string()
    }

    fn direct_cfg(names: &[&str]) -> PipelineConfig {
        PipelineConfig {
            agents: names.iter().map(|n| AgentSpec::new(*n, false, false)).collect(),
            use_planner: false,
            ..PipelineConfig::default()
        }
    }

    /// Agents are told apart by a marker placed in their few-shot block.
    fn marked_cfg(names: &[&str]) -> PipelineConfig {
        let mut cfg = direct_cfg(names);
        for a in &mut cfg.agents {
            a.few_shots = vec![FewShot::new(format!("marker-{}", a.name), "Title 0")];
        }
        cfg
    }

    fn agent_rule(name: &str, items: &[(&str, f64)]) -> ScriptRule {
        ScriptRule::new(name).contains(format!("\"marker-{name}\"")).excludes("expert judge").reply(ranker_reply(items))
    }

    fn pipeline(cfg: PipelineConfig, rules: Vec<ScriptRule>) -> (Pipeline, Arc<ScriptedBackend>) {
        let backend = Arc::new(ScriptedBackend::new(rules));
        let gw = Gateway::new(backend.clone(), BackendConfig { max_retries: 0, ..Default::default() });
        (Pipeline::new(corpus(), Indexes::default(), gw, cfg, Arc::new(ResultCache::in_memory())).unwrap(), backend)
    }

    #[test]
    fn judge_failure_falls_back() {
        let rules = vec![
            agent_rule("a", &[("Title 1", 80.0), ("Title 2", 60.0)]),
            agent_rule("b", &[("Title 1", 40.0), ("Title 3", 70.0)]),
            ScriptRule::new("judge").contains("expert judge").always_fail(ScriptedFailure::Rejected),
        ];
        let (p, _) = pipeline(marked_cfg(&["a", "b"]), rules);
        let r = p.annotate("where is my card").unwrap();
        assert_eq!(r.verdict.mode, VerdictMode::Fallback);
        assert_eq!(r.verdict.ids(), vec!["f3", "f1", "f2"]);
        assert!(r.judge_error.is_some());
    }

    #[test]
    fn all_agents_failing() {
        let rules = vec![ScriptRule::new("any").always_fail(ScriptedFailure::Rejected)];
        let (p, _) = pipeline(marked_cfg(&["a", "b"]), rules);
        assert!(matches!(p.annotate("x"), Err(PipelineError::NoCandidates(_))));
        let rules = vec![ScriptRule::new("any").always_fail(ScriptedFailure::Unavailable)];
        let (p, _) = pipeline(marked_cfg(&["a", "b"]), rules);
        assert!(matches!(p.annotate("x"), Err(PipelineError::BackendUnavailable(_))));
    }

    #[test]
    fn cache_skips_backend_and_normalizes_key() {
        let rules = vec![
            agent_rule("a", &[("Title 1", 80.0)]),
            ScriptRule::new("judge").contains("expert judge").reply(json!({"reranked_faqs": [
                {"faq": "Title 1", "relevance_score": 88, "reasoning": "ok"}]}).to_string()),
        ];
        let (p, backend) = pipeline(marked_cfg(&["a"]), rules);
        let first = p.annotate("Lost DEB").unwrap();
        let calls = backend.total_calls();
        assert!(!first.cache_hit);
        let second = p.annotate("lost deb").unwrap();
        assert_eq!(backend.total_calls(), calls);
        assert!(second.cache_hit);
        assert_eq!(second.verdict, first.verdict);
        assert_eq!(p.cache().len(), 1);
        assert_eq!(p.cache().get("lost deb").unwrap(), serde_json::to_string(&first).unwrap());
    }

    #[test]
    fn cache_persists_and_reloads_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResultCache::open(&path).unwrap();
        let stored = r#"{"b":1.50,"a":[ 1, 2 ]}"#;
        cache.insert("k", stored).unwrap();
        assert_eq!(ResultCache::open(&path).unwrap().get("k").unwrap(), stored);
    }

    #[test]
    fn unwritable_cache_degrades() {
        let dir = tempfile::tempdir().unwrap();
        let rules = vec![
            agent_rule("a", &[("Title 1", 80.0)]),
            ScriptRule::new("judge").contains("expert judge").always_fail(ScriptedFailure::Rejected),
        ];
        let backend = Arc::new(ScriptedBackend::new(rules));
        let gw = Gateway::new(backend, BackendConfig { max_retries: 0, ..Default::default() });
        let cache = Arc::new(ResultCache::open(dir.path().join("missing").join("cache.jsonl")).unwrap());
        let p = Pipeline::new(corpus(), Indexes::default(), gw, marked_cfg(&["a"]), cache).unwrap();
        assert!(!p.annotate("q").unwrap().cache_hit);
        assert!(!p.annotate("q").unwrap().cache_hit);
    }

    #[test]
    fn config_validation() {
        let mut cfg = direct_cfg(&["a"]);
        cfg.top_k_out = 0;
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig { judge_samples: 0, ..direct_cfg(&["a"]) };
        assert!(cfg.validate().is_err());
        assert!(direct_cfg(&["a", "a"]).validate().is_err());
        let gw = Gateway::new(Arc::new(ScriptedBackend::new(vec![])), BackendConfig::default());
        let cfg = PipelineConfig { agents: vec![AgentSpec::new("e", true, false)], ..PipelineConfig::default() };
        assert!(Pipeline::new(corpus(), Indexes::default(), gw, cfg, Arc::new(ResultCache::in_memory())).is_err());
    }
}
