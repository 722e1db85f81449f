//! Query planning, the four ranker agents and few-shot example selection.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::llm_gateway::Gateway;
use crate::model::{Candidate, FaqCorpus, FaqEntry, UserQuery};
use crate::prompting::{
    build_planner_prompt, build_ranker_prompt, parse_planner_response, parse_ranker_response, request_structured,
    FewShot, PromptConfig, StructuredCallError,
};
use crate::retrieval::EmbeddingIndex;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum AgentError {
    #[error("need {needed} distinct training examples, have {available}")]
    InsufficientTraining { needed: usize, available: usize },
    #[error("agent `{agent}` failed: {cause}")]
    AgentFailed {
        agent: String,
        cause: String,
        /// The model backend could not be reached.
        unavailable: bool,
    },
}

impl AgentError {
    fn failed(agent: &str, cause: impl ToString) -> Self {
        AgentError::AgentFailed { agent: agent.to_string(), cause: cause.to_string(), unavailable: false }
    }
}

/// The four standard agents: (name, use_embeddings, use_answers).
pub const STANDARD_AGENTS: [(&str, bool, bool); 4] = [
    ("direct", false, false),
    ("embed", true, false),
    ("direct_ans", false, true),
    ("embed_ans", true, true),
];

pub const DEFAULT_POOL_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub use_embeddings: bool,
    pub use_answers: bool,
    pub few_shots: Vec<FewShot>,
    /// FAQs retrieved by embedding before the LLM ranks them. Ignored by
    /// direct agents.
    pub candidate_pool_size: usize,
    /// Append planner expansion terms to the text embedded for retrieval.
    #[serde(default = "default_true")]
    pub expand_embedding_query: bool,
}

fn default_true() -> bool {
    true
}

impl AgentSpec {
    pub fn new(name: impl Into<String>, use_embeddings: bool, use_answers: bool) -> Self {
        Self {
            name: name.into(),
            use_embeddings,
            use_answers,
            few_shots: Vec::new(),
            candidate_pool_size: DEFAULT_POOL_SIZE,
            expand_embedding_query: true,
        }
    }

    /// The four standard agents, each given its slot of `plan`.
    pub fn standard_roster(plan: &FewShotPlan, pool_size: usize) -> Vec<AgentSpec> {
        STANDARD_AGENTS
            .iter()
            .enumerate()
            .map(|(i, (name, emb, ans))| AgentSpec {
                few_shots: plan.per_agent.get(i).cloned().unwrap_or_default(),
                candidate_pool_size: pool_size,
                ..AgentSpec::new(*name, *emb, *ans)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FewShotMode {
    /// One draw without replacement, split into disjoint per-agent sets.
    #[default]
    Partition,
    /// Each agent draws its own set; sets may overlap across agents.
    Independent,
    /// All agents receive the same set.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPlan {
    pub per_agent: Vec<Vec<FewShot>>,
    pub seed: u64,
    pub mode: FewShotMode,
}

impl FewShotPlan {
    pub fn empty(n_agents: usize) -> Self {
        Self { per_agent: vec![Vec::new(); n_agents], seed: 0, mode: FewShotMode::Partition }
    }

    /// Every example across all agents, first occurrence order.
    pub fn union(&self) -> Vec<FewShot> {
        let mut seen = HashSet::new();
        self.per_agent.iter().flatten().filter(|s| seen.insert((*s).clone())).cloned().collect()
    }
}

/// Samples few-shot examples per agent with a seeded generator. Repeated
/// (utterance, title) pairs in `training` count once.
pub fn select_few_shots(
    training: &[FewShot],
    n_agents: usize,
    per_agent: usize,
    seed: u64,
    mode: FewShotMode,
) -> Result<FewShotPlan, AgentError> {
    let mut seen = HashSet::new();
    let distinct: Vec<&FewShot> = training.iter().filter(|s| seen.insert(*s)).collect();
    let needed = match mode {
        FewShotMode::Partition => n_agents * per_agent,
        FewShotMode::Independent | FewShotMode::Shared => per_agent,
    };
    if distinct.len() < needed {
        return Err(AgentError::InsufficientTraining { needed, available: distinct.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_agent_sets = match mode {
        FewShotMode::Partition => {
            let drawn: Vec<FewShot> = distinct.choose_multiple(&mut rng, needed).map(|s| (*s).clone()).collect();
            drawn.chunks(per_agent.max(1)).take(n_agents).map(<[FewShot]>::to_vec).collect::<Vec<_>>()
        }
        FewShotMode::Independent => (0..n_agents)
            .map(|_| distinct.choose_multiple(&mut rng, per_agent).map(|s| (*s).clone()).collect())
            .collect(),
        FewShotMode::Shared => {
            let shared: Vec<FewShot> = distinct.choose_multiple(&mut rng, per_agent).map(|s| (*s).clone()).collect();
            vec![shared; n_agents]
        }
    };
    let mut per_agent_sets = per_agent_sets;
    per_agent_sets.resize(n_agents, Vec::new());
    Ok(FewShotPlan { per_agent: per_agent_sets, seed, mode })
}

/// Fills intent analysis and expansion terms. Any failure leaves the query as is.
pub fn plan_query(query: &UserQuery, gateway: &Gateway, cfg: &PromptConfig) -> UserQuery {
    let bundle = build_planner_prompt(query, cfg);
    match request_structured(gateway, &bundle, 0, parse_planner_response) {
        Ok(record) => {
            let intent = record.intent.trim();
            let category = record.category.trim();
            let analysis = match (intent.is_empty(), category.is_empty()) {
                (true, true) => None,
                (false, true) => Some(intent.to_string()),
                (true, false) => Some(format!("category: {category}")),
                (false, false) => Some(format!("{intent} (category: {category})")),
            };
            UserQuery { intent_analysis: analysis, ..query.clone() }.with_expansion_terms(record.expansion_terms)
        }
        Err(e) => {
            log::warn!("query planning failed, continuing with the raw utterance: {e}");
            query.clone()
        }
    }
}

/// Candidate FAQs from one ranker agent. Embedding agents first narrow the
/// corpus to the `candidate_pool_size` nearest FAQs.
pub fn ranker_predict(
    spec: &AgentSpec,
    query: &UserQuery,
    corpus: &FaqCorpus,
    emb_index: Option<&EmbeddingIndex>,
    gateway: &Gateway,
    cfg: &PromptConfig,
) -> Result<Vec<Candidate>, AgentError> {
    let pool: Vec<&FaqEntry> = match (spec.use_embeddings, emb_index) {
        (false, None) => corpus.entries().iter().collect(),
        (true, Some(index)) => {
            if index.with_answers() != spec.use_answers {
                return Err(AgentError::failed(&spec.name, "embedding index answer mode does not match agent"));
            }
            let text = if spec.expand_embedding_query { query.expanded_text() } else { query.normalized.clone() };
            let vectors = gateway.embed_batch(&[text]).map_err(|e| AgentError::AgentFailed {
                agent: spec.name.clone(),
                unavailable: e.is_unavailability(),
                cause: e.to_string(),
            })?;
            let k = spec.candidate_pool_size.max(1).min(index.len().max(1));
            let hits = index.cosine_top_k(&vectors[0], k).map_err(|e| AgentError::failed(&spec.name, e))?;
            hits.iter()
                .map(|h| corpus.get(&h.faq_id).ok_or_else(|| AgentError::failed(&spec.name, format!("index id `{}` not in corpus", h.faq_id))))
                .collect::<Result<_, _>>()?
        }
        (true, None) => return Err(AgentError::failed(&spec.name, "embedding agent has no index")),
        (false, Some(_)) => return Err(AgentError::failed(&spec.name, "direct agent given an embedding index")),
    };
    let bundle = build_ranker_prompt(spec.use_answers, query, &pool, &spec.few_shots, cfg)
        .map_err(|e| AgentError::failed(&spec.name, e))?;
    let parsed = request_structured(gateway, &bundle, 0, |raw| parse_ranker_response(raw, corpus)).map_err(|e| {
        AgentError::AgentFailed {
            agent: spec.name.clone(),
            unavailable: matches!(&e, StructuredCallError::Gateway(g) if g.is_unavailability()),
            cause: e.to_string(),
        }
    })?;
    parsed
        .resolved
        .into_iter()
        .map(|r| Candidate::new(r.faq_id, r.score, r.reasoning, spec.name.clone()).map_err(|e| AgentError::failed(&spec.name, e)))
        .collect()
}
