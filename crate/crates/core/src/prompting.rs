//! Structured prompts for the planner, ranker and judge agents, and the
//! parser that turns their JSON replies back into typed values.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::llm_gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::{dedup_terms, Candidate, FaqCorpus, FaqEntry, UserQuery};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("rendered prompt has {size} characters, budget is {budget}")]
    PromptTooLarge { size: usize, budget: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("response is not parseable JSON: {0}")]
    Unparseable(String),
    #[error("response violates schema at `{0}`")]
    SchemaViolation(String),
    #[error("no FAQ in the corpus has the title `{0}`")]
    UnknownFaqTitle(String),
}

/// Failure of a gateway call followed by structured parsing.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum StructuredCallError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub budget_chars: usize,
    pub answer_word_limit: usize,
    pub ranker_temperature: f64,
    pub judge_temperature: f64,
    pub planner_temperature: f64,
    pub paraphrase_temperature: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            budget_chars: 100_000,
            answer_word_limit: 60,
            ranker_temperature: 0.1,
            judge_temperature: 0.3,
            planner_temperature: 0.1,
            paraphrase_temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub force_json: bool,
}

impl PromptBundle {
    pub fn len_chars(&self) -> usize {
        self.system.chars().count() + self.user.chars().count()
    }

    pub fn to_request(&self, variant: u32) -> Result<ChatRequest, GatewayError> {
        Ok(ChatRequest::new(self.system.clone(), self.user.clone(), self.temperature, self.force_json)?
            .with_variant(variant))
    }
}

/// A worked example: an utterance and the title of its gold FAQ.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FewShot {
    pub utterance: String,
    pub gold_title: String,
}

impl FewShot {
    pub fn new(utterance: impl Into<String>, gold_title: impl Into<String>) -> Self {
        Self { utterance: utterance.into(), gold_title: gold_title.into() }
    }
}

// ---------------------------------------------------------------------------
// Prompt text

const RANKER_SYSTEM: &str = "You are an expert FAQ annotation system for our banking application. Your role is to accurately map user utterances to the most relevant FAQs from the bank's knowledge base.
IMPORTANT GUIDELINES:
1. Analyze the user's intent thoroughly
2. Match the intent to the most relevant FAQs
3. Rank FAQs by relevance (0-100 scale)
4. Provide clear reasoning for each match
5. Return exactly 5 FAQs unless there are fewer relevant ones
6. Be precise - banking customers need accurate information";

const RANKER_SYSTEM_WITH_ANSWERS: &str = "You are an expert FAQ annotation system for our banking application. Your role is to accurately map user utterances to the most relevant FAQs from the bank's knowledge base.
IMPORTANT GUIDELINES:
1. Analyze the user's intent thoroughly
2. Match the intent to the most relevant FAQs based on both the FAQ question and its answer content
3. Rank FAQs by relevance (0-100 scale)
4. Provide clear reasoning for each match, considering the full context of the FAQ including its answer
5. Return exactly 5 FAQs unless there are fewer relevant ones
6. Be precise - banking customers need accurate information";

const RANKER_TASK: &str = "You will be given a user utterance and a list of available FAQs. Your task is to:
1. Analyze what the user is truly asking about (identify the core intent)
2. Search through the available FAQs for relevant matches
3. Rank the top 5 most relevant FAQs based on:
    - Semantic similarity to the user's intent
    - Specificity to the question
    - Likelihood of containing the information the user needs
4. Provide a confidence score (0-100) for each match
5. Explain your reasoning process";

const RANKER_TASK_WITH_ANSWERS: &str = "You will be given a user utterance and a list of available FAQs with their answers. Your task is to:
1. Analyze what the user is truly asking about (identify the core intent)
2. Search through the available FAQs for relevant matches
3. Rank the top 5 most relevant FAQs based on:
    - Semantic similarity to the user's intent
    - Specificity to the question
    - Whether the answer content directly addresses the user's needs
    - Likelihood of containing the information the user needs
4. Provide a confidence score (0-100) for each match
5. Explain your reasoning process";

const BANKING_CONSIDERATIONS: &str = "For banking-related queries, consider:
- Security concerns take priority
- Account access questions require specific authentication-related FAQs
- Transaction questions should match to relevant transaction FAQs
- General inquiries should match to general information FAQs";

fn ranker_schema(with_answers: bool) -> String {
    let reasoning = if with_answers {
        "Detailed explanation of why this FAQ is relevant to the user's query, including how the answer content addresses the query"
    } else {
        "Detailed explanation of why this FAQ is relevant to the user's query"
    };
    format!(
        r#"You must produce your analysis as a JSON object according to the following schema:
{{
"user_utterance": "The original user utterance",
"intent_analysis": "A thorough analysis of what the user is asking for, including likely underlying needs",
"primary_banking_category": "The main banking category this query falls under (Account Management, Security, Transactions, etc.)",
"relevant_faqs": [
{{
"faq": "The title of the FAQ",
"relevance_score": 95,
"reasoning": "{reasoning}"
}},
...
],
"confidence_in_mapping": "HIGH/MEDIUM/LOW",
"explanation_of_confidence": "Brief explanation of why you're confident or uncertain about these mappings",
"recommended_clarification_question": "If confidence is MEDIUM or LOW, provide a question that would help clarify the user's intent"
}}"#
    )
}

const FEWER_RELEVANT_NOTE: &str =
    "If there are fewer than 5 relevant FAQs, only include those that are actually relevant.";

const JUDGE_SYSTEM: &str = "You are an expert judge of FAQ relevance for our bank.
Your task is to carefully analyze user utterances and determine which FAQs best address their needs.
Be precise and thorough in your analysis, as banking customers depend on accurate information.
Always consider both the semantic similarity and the practical relevance of each FAQ to the user's query.
When a user is asking about financial products, security features, or account management, prioritize exact matches.
You must return your rankings in proper JSON format with detailed reasoning for each decision.";

const JUDGE_INSTRUCTIONS: &str = r#"You are tasked with reranking candidate FAQs based on their relevance to a user utterance for our bank.

Given a user utterance and a list of candidate FAQs (with their original relevance scores), please rerank them based on your expert judgment. Consider:
1. Semantic similarity to the user's query
2. Intent matching (what the user is trying to accomplish)
3. Specificity (how directly the FAQ addresses the user's needs)
4. Banking domain knowledge (what would be most helpful for a banking customer)

Provide your reasoning for each FAQ and assign a new relevance score from 0-100 for each.

Your response must be in JSON format:
{
    "reranked_faqs": [
        {
            "faq": "FAQ Title",
            "relevance_score": 95,
            "reasoning": "Your reasoning for this ranking"
        },
        ...
    ]
}

Return exactly 5 FAQs, ranked by relevance to the user's query."#;

const PLANNER_SYSTEM: &str = "You are a query planning agent for our bank's FAQ assistant. You analyze short, often abbreviated user utterances before they are matched against the bank's FAQ knowledge base.
You must return your analysis in proper JSON format.";

const PLANNER_TASK: &str = r#"Analyze the user utterance below.
1. Identify the core intent behind the utterance (what the user is trying to accomplish).
2. Classify it into the main banking category (Account Management, Security, Transactions, etc.).
3. Expand the query with terms that improve retrieval recall while keeping precision. Add only terms related to the inferred intent, such as spelled-out abbreviations, synonyms and closely related banking vocabulary. Do not add terms for other intents.

You must produce your analysis as a JSON object according to the following schema:
{
"intent": "A short description of what the user is asking for",
"category": "The main banking category of the query",
"expansion_terms": ["term", "..."]
}
expansion_terms may be an empty list [] when the utterance needs no expansion."#;

const PARAPHRASE_SYSTEM: &str = "You rewrite financial questions the way real customers type them into a support chat.";

/// Follow-up sent once when a reply could not be parsed as JSON.
pub const REPAIR_INSTRUCTION: &str = "Your previous output was not valid JSON; return only the JSON object.";

// ---------------------------------------------------------------------------
// Builders

fn truncate_words(text: &str, limit: Option<usize>) -> String {
    match limit {
        Some(n) => {
            let words: Vec<&str> = text.split_whitespace().collect();
            if words.len() <= n {
                text.trim().to_string()
            } else {
                format!("{} ...", words[..n].join(" "))
            }
        }
        None => text.trim().to_string(),
    }
}

/// Renders with full answers first, then with progressively shorter answer
/// excerpts until the prompt fits the budget.
fn fit_budget(
    cfg: &PromptConfig,
    has_answers: bool,
    render: impl Fn(Option<usize>) -> PromptBundle,
) -> Result<PromptBundle, PromptError> {
    let full = render(None);
    if full.len_chars() <= cfg.budget_chars {
        return Ok(full);
    }
    let mut size = full.len_chars();
    if has_answers {
        let mut limit = cfg.answer_word_limit.max(1);
        loop {
            let bundle = render(Some(limit));
            size = bundle.len_chars();
            if size <= cfg.budget_chars {
                log::warn!("prompt over budget; FAQ answers truncated to {limit} words");
                return Ok(bundle);
            }
            if limit <= 10 {
                break;
            }
            limit = (limit / 2).max(10);
        }
    }
    Err(PromptError::PromptTooLarge { size, budget: cfg.budget_chars })
}

fn few_shot_block(few_shots: &[FewShot]) -> String {
    if few_shots.is_empty() {
        return String::new();
    }
    let mut out = String::from("Examples of correct mappings:\n");
    for shot in few_shots {
        out.push_str(&format!("Example: \"{}\" -> {}\n", shot.utterance, shot.gold_title));
    }
    out
}

fn planner_block(query: &UserQuery) -> String {
    let mut out = String::new();
    if let Some(intent) = query.intent_analysis.as_deref().filter(|s| !s.trim().is_empty()) {
        out.push_str(&format!("Query analysis: {}\n", intent.trim()));
    }
    if !query.expansion_terms.is_empty() {
        out.push_str(&format!("Related terms: {}\n", query.expansion_terms.join(", ")));
    }
    out
}

/// Ranker prompt over `faqs`. `with_answers` selects the answer-aware variant.
pub fn build_ranker_prompt(
    with_answers: bool,
    query: &UserQuery,
    faqs: &[&FaqEntry],
    few_shots: &[FewShot],
    cfg: &PromptConfig,
) -> Result<PromptBundle, PromptError> {
    if faqs.is_empty() {
        return Err(PromptError::Precondition("ranker prompt needs at least one FAQ".into()));
    }
    let render = |answer_limit: Option<usize>| {
        let mut user = String::new();
        user.push_str(if with_answers { RANKER_TASK_WITH_ANSWERS } else { RANKER_TASK });
        user.push('\n');
        user.push_str(BANKING_CONSIDERATIONS);
        user.push('\n');
        user.push_str(&ranker_schema(with_answers));
        user.push('\n');
        if !with_answers {
            user.push_str(FEWER_RELEVANT_NOTE);
            user.push('\n');
        }
        user.push_str(&planner_block(query));
        user.push_str(&few_shot_block(few_shots));
        user.push_str(if with_answers { "Available FAQs with their Answers:\n" } else { "Available FAQs:\n" });
        for faq in faqs {
            if with_answers {
                user.push_str(&format!("- {} ||| {}\n", faq.question.trim(), truncate_words(&faq.answer, answer_limit)));
            } else {
                user.push_str(&format!("- {}\n", faq.question.trim()));
            }
        }
        user.push_str(&format!("User Utterance: \"{}\"", query.normalized));
        PromptBundle {
            system: if with_answers { RANKER_SYSTEM_WITH_ANSWERS } else { RANKER_SYSTEM }.to_string(),
            user,
            temperature: cfg.ranker_temperature,
            force_json: true,
        }
    };
    fit_budget(cfg, with_answers, render)
}

fn fmt_score(score: f64) -> String {
    if score.fract() == 0.0 {
        format!("{score:.0}")
    } else {
        format!("{}", (score * 100.0).round() / 100.0)
    }
}

/// Judge prompt: candidates with scores and reasoning, every agent's list,
/// training examples and FAQ answer excerpts.
pub fn build_judge_prompt(
    query: &UserQuery,
    candidates: &[Candidate],
    agent_preds: &IndexMap<String, Vec<Candidate>>,
    few_shots: &[FewShot],
    corpus: &FaqCorpus,
    cfg: &PromptConfig,
) -> Result<PromptBundle, PromptError> {
    if candidates.is_empty() {
        return Err(PromptError::Precondition("judge prompt needs at least one candidate".into()));
    }
    let mut seen = HashSet::new();
    for c in candidates {
        if !seen.insert(c.faq_id.as_str()) {
            return Err(PromptError::Precondition(format!("candidate `{}` listed twice", c.faq_id)));
        }
        if !corpus.contains(&c.faq_id) {
            return Err(PromptError::Precondition(format!("candidate `{}` not in corpus", c.faq_id)));
        }
    }
    let title = |id: &str| corpus.get(id).map_or(id.to_string(), |f| f.question.trim().to_string());
    let expected = expected_judge_len(candidates.len());
    let render = |answer_limit: Option<usize>| {
        let mut user = String::from(JUDGE_INSTRUCTIONS);
        user.push('\n');
        if expected < 5 {
            user.push_str(&format!(
                "Only {expected} candidate FAQs are available, so return all {expected} of them.\n"
            ));
        }
        user.push_str(&format!("\nUser Utterance: \"{}\"\n", query.normalized));
        let planner = planner_block(query);
        if !planner.is_empty() {
            user.push('\n');
            user.push_str(&planner);
        }
        user.push_str("\nCandidate FAQs (with their original relevance scores):\n");
        for c in candidates {
            user.push_str(&format!(
                "- {} (score: {}, proposed by {})\n  Reasoning: {}\n",
                title(&c.faq_id),
                fmt_score(c.score),
                c.source_agent,
                c.reasoning.trim()
            ));
        }
        user.push_str("\nAgent Recommendations:\n");
        for (agent, preds) in agent_preds {
            user.push_str(&format!("[{agent}]\n"));
            if preds.is_empty() {
                user.push_str("(no recommendations)\n");
            }
            for (i, c) in preds.iter().enumerate() {
                user.push_str(&format!("{}. {} (score: {})\n", i + 1, title(&c.faq_id), fmt_score(c.score)));
            }
        }
        if !few_shots.is_empty() {
            user.push_str("\nTraining Examples:\n");
            for shot in few_shots {
                user.push_str(&format!("Example: \"{}\" -> {}\n", shot.utterance, shot.gold_title));
            }
        }
        user.push_str("\nFAQ Descriptions:\n");
        let limit = Some(answer_limit.unwrap_or(cfg.answer_word_limit));
        for c in candidates {
            let faq = corpus.get(&c.faq_id).expect("checked above");
            user.push_str(&format!("- {} ||| {}\n", faq.question.trim(), truncate_words(&faq.answer, limit)));
        }
        PromptBundle {
            system: JUDGE_SYSTEM.to_string(),
            user: user.trim_end().to_string(),
            temperature: cfg.judge_temperature,
            force_json: true,
        }
    };
    fit_budget(cfg, true, render)
}

/// Number of entries the judge must return for `n` candidates.
pub fn expected_judge_len(n_candidates: usize) -> usize {
    n_candidates.min(5)
}

pub fn build_planner_prompt(query: &UserQuery, cfg: &PromptConfig) -> PromptBundle {
    PromptBundle {
        system: PLANNER_SYSTEM.to_string(),
        user: format!("{PLANNER_TASK}\nUser Utterance: \"{}\"", query.normalized),
        temperature: cfg.planner_temperature,
        force_json: true,
    }
}

/// Asks for one customer-style rewording of a dataset question.
pub fn build_paraphrase_prompt(question: &str, cfg: &PromptConfig) -> PromptBundle {
    PromptBundle {
        system: PARAPHRASE_SYSTEM.to_string(),
        user: format!(
            "Rewrite the following question as a short, informal message a customer might send. Keep the same intent. Return only the rewritten question.\nQuestion: \"{}\"",
            question.trim()
        ),
        temperature: cfg.paraphrase_temperature,
        force_json: false,
    }
}

// ---------------------------------------------------------------------------
// Response types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaqScore {
    pub faq: String,
    pub relevance_score: f64,
    pub reasoning: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerResponse {
    pub user_utterance: String,
    pub intent_analysis: String,
    pub primary_banking_category: String,
    pub relevant_faqs: Vec<FaqScore>,
    pub confidence_in_mapping: Confidence,
    pub explanation_of_confidence: String,
    #[serde(default)]
    pub recommended_clarification_question: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub reranked_faqs: Vec<FaqScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub intent: String,
    pub category: String,
    pub expansion_terms: Vec<String>,
}

/// A parsed entry whose title was resolved to a corpus id.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedScore {
    pub faq_id: String,
    pub score: f64,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub response: T,
    pub resolved: Vec<ResolvedScore>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Ranker,
    /// Judge reply; must carry at least `expected` entries.
    Judge { expected: usize },
    Planner,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructuredResponse {
    Ranker(Parsed<RankerResponse>),
    Judge(Parsed<JudgeResponse>),
    Planner(PlannerRecord),
}

// ---------------------------------------------------------------------------
// Parsing

/// Locates the first balanced JSON object in `raw`, skipping prose and code fences.
pub fn extract_json_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = raw[search_from..].find('{') {
        let start = search_from + offset;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &raw[start..=i];
                        if serde_json::from_str::<Value>(candidate).is_ok() {
                            return Some(candidate);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        search_from = start + 1;
    }
    None
}

fn parse_object(raw: &str) -> Result<serde_json::Map<String, Value>, PromptError> {
    let snippet = || raw.chars().take(200).collect::<String>();
    let json = extract_json_object(raw).ok_or_else(|| PromptError::Unparseable(snippet()))?;
    match serde_json::from_str::<Value>(json) {
        Ok(Value::Object(map)) => Ok(map),
        _ => Err(PromptError::Unparseable(snippet())),
    }
}

fn text_field(map: &serde_json::Map<String, Value>, key: &str, required: bool) -> Result<String, PromptError> {
    match map.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None if !required => Ok(String::new()),
        _ => Err(PromptError::SchemaViolation(key.to_string())),
    }
}

fn score_entries(
    map: &serde_json::Map<String, Value>,
    key: &str,
    warnings: &mut Vec<String>,
) -> Result<Vec<FaqScore>, PromptError> {
    let items = map
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| PromptError::SchemaViolation(key.to_string()))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let obj = item.as_object().ok_or_else(|| PromptError::SchemaViolation(format!("{key}[{i}]")))?;
        let faq = match obj.get("faq") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            _ => return Err(PromptError::SchemaViolation(format!("{key}[{i}].faq"))),
        };
        let raw_score = match obj.get("relevance_score") {
            Some(Value::Number(n)) => n.as_f64(),
            Some(Value::String(s)) => s.trim().parse::<f64>().ok(),
            _ => None,
        }
        .filter(|s| s.is_finite())
        .ok_or_else(|| PromptError::SchemaViolation(format!("{key}[{i}].relevance_score")))?;
        let relevance_score = raw_score.clamp(0.0, 100.0);
        if relevance_score != raw_score {
            let msg = format!("relevance_score {raw_score} for `{faq}` clamped to {relevance_score}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let reasoning = match obj.get("reasoning") {
            Some(Value::String(s)) => s.clone(),
            None | Some(Value::Null) => String::new(),
            _ => return Err(PromptError::SchemaViolation(format!("{key}[{i}].reasoning"))),
        };
        out.push(FaqScore { faq, relevance_score, reasoning });
    }
    Ok(out)
}

/// Resolves titles to ids. Unknown titles and repeated ids are dropped with a
/// warning; fails only when entries were given and none resolved.
fn resolve_entries(
    entries: Vec<FaqScore>,
    corpus: &FaqCorpus,
    warnings: &mut Vec<String>,
) -> Result<(Vec<FaqScore>, Vec<ResolvedScore>), PromptError> {
    let first_title = entries.first().map(|e| e.faq.clone());
    let mut kept = Vec::new();
    let mut resolved = Vec::new();
    let mut seen = HashSet::new();
    for entry in entries {
        match corpus.resolve_title(&entry.faq) {
            Some(faq) if seen.insert(faq.id.clone()) => {
                resolved.push(ResolvedScore {
                    faq_id: faq.id.clone(),
                    score: entry.relevance_score,
                    reasoning: entry.reasoning.clone(),
                });
                kept.push(entry);
            }
            Some(faq) => {
                let msg = format!("FAQ `{}` listed more than once; keeping the first", faq.question);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            None => {
                let msg = format!("unknown FAQ title `{}` dropped", entry.faq);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if resolved.is_empty() {
        if let Some(title) = first_title {
            return Err(PromptError::UnknownFaqTitle(title));
        }
    }
    Ok((kept, resolved))
}

pub fn parse_ranker_response(raw: &str, corpus: &FaqCorpus) -> Result<Parsed<RankerResponse>, PromptError> {
    let map = parse_object(raw)?;
    let mut warnings = Vec::new();
    let entries = score_entries(&map, "relevant_faqs", &mut warnings)?;
    let confidence = match map.get("confidence_in_mapping").and_then(Value::as_str).map(|s| s.trim().to_uppercase()) {
        Some(s) if s == "HIGH" => Confidence::High,
        Some(s) if s == "MEDIUM" => Confidence::Medium,
        Some(s) if s == "LOW" => Confidence::Low,
        _ => return Err(PromptError::SchemaViolation("confidence_in_mapping".into())),
    };
    let (mut kept, mut resolved) = resolve_entries(entries, corpus, &mut warnings)?;
    if resolved.len() > 5 {
        warnings.push(format!("{} FAQs returned; keeping the first 5", resolved.len()));
        kept.truncate(5);
        resolved.truncate(5);
    }
    let clarification = match map.get("recommended_clarification_question") {
        Some(Value::String(s)) => Some(s.clone()),
        None | Some(Value::Null) => None,
        _ => return Err(PromptError::SchemaViolation("recommended_clarification_question".into())),
    };
    let response = RankerResponse {
        user_utterance: text_field(&map, "user_utterance", false)?,
        intent_analysis: text_field(&map, "intent_analysis", false)?,
        primary_banking_category: text_field(&map, "primary_banking_category", false)?,
        relevant_faqs: kept,
        confidence_in_mapping: confidence,
        explanation_of_confidence: text_field(&map, "explanation_of_confidence", false)?,
        recommended_clarification_question: clarification,
    };
    Ok(Parsed { response, resolved, warnings })
}

pub fn parse_judge_response(raw: &str, corpus: &FaqCorpus, expected: usize) -> Result<Parsed<JudgeResponse>, PromptError> {
    let map = parse_object(raw)?;
    let mut warnings = Vec::new();
    let entries = score_entries(&map, "reranked_faqs", &mut warnings)?;
    if entries.len() < expected {
        return Err(PromptError::SchemaViolation("reranked_faqs length".into()));
    }
    let (kept, resolved) = resolve_entries(entries, corpus, &mut warnings)?;
    Ok(Parsed { response: JudgeResponse { reranked_faqs: kept }, resolved, warnings })
}

pub fn parse_planner_response(raw: &str) -> Result<PlannerRecord, PromptError> {
    let map = parse_object(raw)?;
    let terms = match map.get("expansion_terms") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<Vec<String>>>()
            .ok_or_else(|| PromptError::SchemaViolation("expansion_terms".into()))?,
        None | Some(Value::Null) => Vec::new(),
        _ => return Err(PromptError::SchemaViolation("expansion_terms".into())),
    };
    Ok(PlannerRecord {
        intent: text_field(&map, "intent", true)?,
        category: text_field(&map, "category", false)?,
        expansion_terms: dedup_terms(terms),
    })
}

pub fn parse_structured_response(
    raw: &str,
    kind: ResponseKind,
    corpus: &FaqCorpus,
) -> Result<StructuredResponse, PromptError> {
    match kind {
        ResponseKind::Ranker => parse_ranker_response(raw, corpus).map(StructuredResponse::Ranker),
        ResponseKind::Judge { expected } => parse_judge_response(raw, corpus, expected).map(StructuredResponse::Judge),
        ResponseKind::Planner => parse_planner_response(raw).map(StructuredResponse::Planner),
    }
}

/// Sends the prompt and parses the reply. An unparseable reply gets one
/// repair round trip before the error is returned.
pub fn request_structured<T>(
    gateway: &Gateway,
    bundle: &PromptBundle,
    variant: u32,
    parse: impl Fn(&str) -> Result<T, PromptError>,
) -> Result<T, StructuredCallError> {
    let req = bundle.to_request(variant)?;
    let raw = gateway.chat_complete(&req)?;
    match parse(&raw) {
        Err(PromptError::Unparseable(_)) => {
            log::warn!("unparseable structured reply; asking once for a repaired JSON object");
            let mut repair = req.clone();
            repair.user = format!("{}\n\nYour previous output:\n{}\n\n{REPAIR_INSTRUCTION}", req.user, raw.trim());
            let again = gateway.chat_complete(&repair)?;
            Ok(parse(&again)?)
        }
        other => Ok(other?),
    }
}
