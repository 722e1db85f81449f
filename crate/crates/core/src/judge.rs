//! Final reranking: a single judge call, meta-judging over several judge
//! samples, and the score-averaging fallback used when no judge verdict is
//! available.

use std::collections::{HashMap, HashSet};
use std::thread;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::llm_gateway::Gateway;
use crate::model::{Candidate, FaqCorpus, RankedList, UserQuery};
use crate::prompting::{
    build_judge_prompt, expected_judge_len, parse_judge_response, request_structured, FewShot, PromptConfig,
};

pub const JUDGE_AGENT: &str = "judge";
pub const FALLBACK_AGENT: &str = "fallback";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum JudgeError {
    #[error("judge failed: {0}")]
    JudgeFailed(String),
    #[error("no candidates to rank")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictMode {
    Judged,
    MetaJudged,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub ranked: RankedList,
    pub mode: VerdictMode,
}

impl JudgeVerdict {
    pub fn ids(&self) -> Vec<String> {
        self.ranked.ids()
    }

    /// Judge output shape extended with `faq_id` per item and the verdict mode.
    pub fn to_json(&self, corpus: &FaqCorpus) -> Value {
        let items: Vec<Value> = self
            .ranked
            .items()
            .iter()
            .map(|c| {
                json!({
                    "faq": corpus.get(&c.faq_id).map_or(c.faq_id.as_str(), |f| f.question.trim()),
                    "faq_id": c.faq_id,
                    "relevance_score": c.score,
                    "reasoning": c.reasoning,
                })
            })
            .collect();
        json!({ "reranked_faqs": items, "mode": self.mode })
    }
}

/// Everything the judge sees for one utterance.
#[derive(Clone, Copy)]
pub struct JudgeInput<'a> {
    pub query: &'a UserQuery,
    pub candidates: &'a [Candidate],
    pub agent_preds: &'a IndexMap<String, Vec<Candidate>>,
    pub few_shots: &'a [FewShot],
    pub corpus: &'a FaqCorpus,
}

/// One judge call. Titles outside the candidate set are dropped and the list
/// is backfilled from the candidates' own scores up to `min(5, n)` entries.
pub fn judge_rerank(
    input: JudgeInput<'_>,
    gateway: &Gateway,
    cfg: &PromptConfig,
    variant: u32,
) -> Result<JudgeVerdict, JudgeError> {
    if input.candidates.is_empty() {
        return Err(JudgeError::NoCandidates);
    }
    let expected = expected_judge_len(input.candidates.len());
    let bundle = build_judge_prompt(input.query, input.candidates, input.agent_preds, input.few_shots, input.corpus, cfg)
        .map_err(|e| JudgeError::JudgeFailed(e.to_string()))?;
    let parsed = request_structured(gateway, &bundle, variant, |raw| parse_judge_response(raw, input.corpus, expected))
        .map_err(|e| JudgeError::JudgeFailed(e.to_string()))?;

    let by_id: HashMap<&str, &Candidate> = input.candidates.iter().map(|c| (c.faq_id.as_str(), c)).collect();
    let mut items: Vec<Candidate> = Vec::with_capacity(expected);
    for r in parsed.resolved {
        if by_id.contains_key(r.faq_id.as_str()) {
            items.push(Candidate { faq_id: r.faq_id, score: r.score, reasoning: r.reasoning, source_agent: JUDGE_AGENT.into() });
        } else {
            log::warn!("judge returned `{}`, which is not a candidate; dropped", r.faq_id);
        }
    }
    if items.is_empty() {
        return Err(JudgeError::JudgeFailed("no judged FAQ is among the candidates".into()));
    }
    if items.len() < expected {
        let present: HashSet<String> = items.iter().map(|c| c.faq_id.clone()).collect();
        let backfill: Vec<Candidate> =
            input.candidates.iter().filter(|c| !present.contains(&c.faq_id)).take(expected - items.len()).cloned().collect();
        log::warn!("judge verdict short by {}; backfilled from candidate scores", backfill.len());
        items.extend(backfill);
    }
    Ok(JudgeVerdict { ranked: RankedList::from_candidates(items, expected), mode: VerdictMode::Judged })
}

/// Kendall-tau style agreement over the items two rankings share:
/// (concordant − discordant) / pairs. Zero when fewer than two items are shared.
pub fn rank_agreement(a: &[String], b: &[String]) -> f64 {
    let pos_b: HashMap<&str, usize> = b.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let shared: Vec<usize> = a.iter().filter_map(|id| pos_b.get(id.as_str()).copied()).collect();
    if shared.len() < 2 {
        return 0.0;
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..shared.len() {
        for j in i + 1..shared.len() {
            if shared[i] < shared[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (shared.len() * (shared.len() - 1) / 2) as f64;
    (concordant - discordant) as f64 / pairs
}

/// Index of the ranking with the highest mean agreement with the others.
/// Ties go to the lowest index.
pub fn select_most_consistent(rankings: &[Vec<String>]) -> Option<usize> {
    if rankings.len() <= 1 {
        return if rankings.is_empty() { None } else { Some(0) };
    }
    let mean_agreement = |i: usize| {
        let total: f64 = (0..rankings.len()).filter(|&j| j != i).map(|j| rank_agreement(&rankings[i], &rankings[j])).sum();
        total / (rankings.len() - 1) as f64
    };
    let mut best = 0;
    let mut best_score = mean_agreement(0);
    for i in 1..rankings.len() {
        let s = mean_agreement(i);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Some(best)
}

/// Runs `n_samples` judge calls concurrently and keeps the most consistent
/// verdict. With one sample this is exactly [`judge_rerank`].
pub fn meta_judge(
    input: JudgeInput<'_>,
    n_samples: u32,
    gateway: &Gateway,
    cfg: &PromptConfig,
) -> Result<JudgeVerdict, JudgeError> {
    if n_samples <= 1 {
        return judge_rerank(input, gateway, cfg, 0);
    }
    let results: Vec<Result<JudgeVerdict, JudgeError>> = thread::scope(|s| {
        let handles: Vec<_> =
            (0..n_samples).map(|v| s.spawn(move || judge_rerank(input, gateway, cfg, v))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(JudgeError::JudgeFailed("judge sample panicked".into()))))
            .collect()
    });
    let mut errors = Vec::new();
    let mut verdicts = Vec::new();
    for r in results {
        match r {
            Ok(v) => verdicts.push(v),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let rankings: Vec<Vec<String>> = verdicts.iter().map(JudgeVerdict::ids).collect();
    match select_most_consistent(&rankings) {
        Some(i) => {
            if !errors.is_empty() {
                log::warn!("{} of {n_samples} judge samples failed", errors.len());
            }
            let mut chosen = verdicts.swap_remove(i);
            chosen.mode = VerdictMode::MetaJudged;
            Ok(chosen)
        }
        None => Err(JudgeError::JudgeFailed(errors.join("; "))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMode {
    /// Mean over the agents that proposed the FAQ.
    #[default]
    ProposingAgents,
    /// Mean over every agent; agents that did not propose the FAQ count as 0.
    AllAgents,
}

/// Ranks FAQs by their average agent score. An agent that lists an FAQ more
/// than once contributes its first score only.
pub fn fallback_average(
    agent_preds: &IndexMap<String, Vec<Candidate>>,
    mode: FallbackMode,
    k: usize,
) -> Result<JudgeVerdict, JudgeError> {
    let mut sums: IndexMap<&str, (f64, usize)> = IndexMap::new();
    for preds in agent_preds.values() {
        let mut seen = HashSet::new();
        for c in preds.iter().filter(|c| seen.insert(c.faq_id.as_str())) {
            let entry = sums.entry(c.faq_id.as_str()).or_insert((0.0, 0));
            entry.0 += c.score;
            entry.1 += 1;
        }
    }
    if sums.is_empty() {
        return Err(JudgeError::NoCandidates);
    }
    let items = sums
        .into_iter()
        .map(|(id, (sum, count))| {
            let divisor = match mode {
                FallbackMode::ProposingAgents => count,
                FallbackMode::AllAgents => agent_preds.len(),
            };
            Candidate {
                faq_id: id.to_string(),
                score: sum / divisor as f64,
                reasoning: format!("average score across {count} proposing agent(s)"),
                source_agent: FALLBACK_AGENT.into(),
            }
        })
        .collect();
    Ok(JudgeVerdict { ranked: RankedList::from_candidates(items, k), mode: VerdictMode::Fallback })
}
