//! Domain types shared across the pipeline: FAQ corpus, user queries,
//! scored candidates and ranked lists.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("duplicate FAQ id `{0}`")]
    DuplicateId(String),
    #[error("FAQ at index {0} has an empty question")]
    EmptyQuestion(usize),
    #[error("FAQ corpus is empty")]
    EmptyCorpus,
    #[error("utterance is empty after normalization")]
    EmptyUtterance,
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("corpus line {line}: {message}")]
    CorpusParse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

/// One FAQ: an opaque id, the question text and its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaqEntry {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl FaqEntry {
    pub fn new(id: impl Into<String>, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            answer: answer.into(),
            category: None,
        }
    }
}

/// A validated FAQ collection. Entries keep their input order.
#[derive(Debug, Clone)]
pub struct FaqCorpus {
    entries: Vec<FaqEntry>,
    by_id: HashMap<String, usize>,
    by_title: HashMap<String, usize>,
    by_title_folded: HashMap<String, usize>,
}

impl FaqCorpus {
    pub fn validate(entries: Vec<FaqEntry>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(entries.len());
        let mut by_title = HashMap::with_capacity(entries.len());
        let mut by_title_folded = HashMap::with_capacity(entries.len());
        for (idx, entry) in entries.iter().enumerate() {
            if entry.question.trim().is_empty() {
                return Err(ModelError::EmptyQuestion(idx));
            }
            if by_id.insert(entry.id.clone(), idx).is_some() {
                return Err(ModelError::DuplicateId(entry.id.clone()));
            }
            // First occurrence wins on title collisions.
            by_title.entry(entry.question.trim().to_string()).or_insert(idx);
            by_title_folded
                .entry(fold_title(&entry.question))
                .or_insert(idx);
        }
        Ok(Self {
            entries,
            by_id,
            by_title,
            by_title_folded,
        })
    }

    /// Reads the JSON-lines corpus format: one `{"id","question","answer","category"?}` per line.
    pub fn load_jsonl(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, ModelError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FaqEntry = serde_json::from_str(line).map_err(|e| ModelError::CorpusParse {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        Self::validate(entries)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("FaqEntry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn entries(&self) -> &[FaqEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FaqEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Resolves an FAQ title as written by a model: exact match first, then
    /// case-insensitive with collapsed whitespace.
    pub fn resolve_title(&self, title: &str) -> Option<&FaqEntry> {
        let trimmed = title.trim();
        self.by_title
            .get(trimmed)
            .or_else(|| self.by_title_folded.get(&fold_title(trimmed)))
            .map(|&i| &self.entries[i])
    }
}

fn fold_title(title: &str) -> String {
    collapse_whitespace(title).to_lowercase()
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A user utterance plus whatever the query planner added to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserQuery {
    pub raw: String,
    pub normalized: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_analysis: Option<String>,
    #[serde(default)]
    pub expansion_terms: Vec<String>,
}

impl UserQuery {
    /// Replaces the expansion terms, dropping blanks and repeated terms (first wins).
    pub fn with_expansion_terms<I, S>(mut self, terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.expansion_terms = dedup_terms(terms);
        self
    }

    /// Normalized utterance followed by the expansion terms, space separated.
    pub fn expanded_text(&self) -> String {
        let mut text = self.normalized.clone();
        for term in &self.expansion_terms {
            text.push(' ');
            text.push_str(term);
        }
        text
    }
}

pub(crate) fn dedup_terms<I, S>(terms: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for term in terms {
        let term = collapse_whitespace(term.as_ref());
        if term.is_empty() {
            continue;
        }
        let folded = term.to_lowercase();
        if !out.iter().any(|t| t.to_lowercase() == folded) {
            out.push(term);
        }
    }
    out
}

/// Trims, collapses internal whitespace and case-folds. `raw` is kept verbatim.
pub fn normalize_utterance(raw: &str) -> Result<UserQuery, ModelError> {
    let normalized = collapse_whitespace(raw).to_lowercase();
    if normalized.is_empty() {
        return Err(ModelError::EmptyUtterance);
    }
    Ok(UserQuery {
        raw: raw.to_string(),
        normalized,
        intent_analysis: None,
        expansion_terms: Vec::new(),
    })
}

/// A scored FAQ proposal on the 0–100 relevance scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub faq_id: String,
    pub score: f64,
    pub reasoning: String,
    pub source_agent: String,
}

impl Candidate {
    pub fn new(
        faq_id: impl Into<String>,
        score: f64,
        reasoning: impl Into<String>,
        source_agent: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if !(0.0..=100.0).contains(&score) {
            return Err(ModelError::ScoreOutOfRange(score));
        }
        Ok(Self {
            faq_id: faq_id.into(),
            score,
            reasoning: reasoning.into(),
            source_agent: source_agent.into(),
        })
    }
}

/// Score descending, then id ascending. Used for every ranking in the crate.
pub fn rank_order(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

/// Candidates sorted by [`rank_order`], unique by `faq_id`, at most `k` long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    items: Vec<Candidate>,
    k: usize,
}

impl RankedList {
    /// Sorts, keeps the first occurrence of each faq id and truncates to `k`.
    pub fn from_candidates(mut items: Vec<Candidate>, k: usize) -> Self {
        items.sort_by(|a, b| rank_order(a.score, &a.faq_id, b.score, &b.faq_id));
        let mut seen = std::collections::HashSet::new();
        items.retain(|c| seen.insert(c.faq_id.clone()));
        items.truncate(k);
        let list = Self { items, k };
        list.assert_invariants();
        list
    }

    fn assert_invariants(&self) {
        debug_assert!(self.items.len() <= self.k);
        debug_assert!(self
            .items
            .windows(2)
            .all(|w| rank_order(w[0].score, &w[0].faq_id, w[1].score, &w[1].faq_id) == Ordering::Less));
    }

    pub fn items(&self) -> &[Candidate] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Candidate> {
        self.items
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|c| c.faq_id.clone()).collect()
    }

    pub fn truncated(mut self, k: usize) -> Self {
        self.items.truncate(k);
        self.k = self.k.min(k);
        self
    }
}
