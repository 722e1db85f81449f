//! Ranking metrics, dataset adapters and the benchmark runner.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::llm_gateway::Gateway;
use crate::model::{normalize_utterance, FaqCorpus, FaqEntry, ModelError, RankedList};
use crate::orchestrator::Pipeline;
use crate::prompting::{build_paraphrase_prompt, FewShot, PromptConfig};
use crate::retrieval::{bm25_top_k, build_bm25_index, EmbeddingIndex, Hit};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no runs to score")]
    EmptyRuns,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("empty input")]
    EmptyInput,
    #[error("dangling link: `{0}` does not exist")]
    DanglingLink(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("every utterance failed: {0}")]
    AllFailed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// An utterance with its gold FAQ ids, best first when the order is meaningful.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub utterance: String,
    pub gold_ids: Vec<String>,
}

/// One system ranking against the gold ids of its utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub ranking: Vec<String>,
    pub gold: Vec<String>,
}

impl Run {
    pub fn new(ranking: Vec<String>, gold: Vec<String>) -> Self {
        Self { ranking, gold }
    }

    pub fn from_ranked(list: &RankedList, gold: &[String]) -> Self {
        Self { ranking: list.ids(), gold: gold.to_vec() }
    }

    fn first_gold_rank(&self) -> Option<usize> {
        self.ranking.iter().position(|id| self.gold.contains(id)).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    #[default]
    Binary,
    /// Gold id at position p (0-based) of a gold list of length g gains g − p.
    Graded,
}

/// Fraction of runs with a gold id among the first `k` items.
pub fn top_k_accuracy(runs: &[Run], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let hits = runs.iter().filter(|r| r.first_gold_rank().is_some_and(|p| p <= k)).count();
    Ok(hits as f64 / runs.len() as f64)
}

/// Mean reciprocal rank of the first gold id; runs without one count 0.
pub fn mrr(runs: &[Run]) -> Result<f64, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let total: f64 = runs.iter().map(|r| r.first_gold_rank().map_or(0.0, |p| 1.0 / p as f64)).sum();
    Ok(total / runs.len() as f64)
}

fn gain_of(run: &Run, id: &str, mode: GainMode) -> f64 {
    match (run.gold.iter().position(|g| g == id), mode) {
        (None, _) => 0.0,
        (Some(_), GainMode::Binary) => 1.0,
        (Some(p), GainMode::Graded) => (run.gold.len() - p) as f64,
    }
}

/// Mean NDCG@k. Runs with an empty gold list contribute 0.
pub fn ndcg_at_k(runs: &[Run], k: usize, mode: GainMode) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let total: f64 = runs
        .iter()
        .map(|run| {
            let dcg: f64 = run.ranking.iter().take(k).enumerate().map(|(i, id)| gain_of(run, id, mode) * discount(i)).sum();
            let mut ideal: Vec<f64> = run.gold.iter().map(|g| gain_of(run, g, mode)).collect();
            ideal.sort_by(|a, b| b.total_cmp(a));
            let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g * discount(i)).sum();
            if idcg > 0.0 { dcg / idcg } else { 0.0 }
        })
        .sum();
    Ok(total / runs.len() as f64)
}

/// Scores for one system over a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub n: usize,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub mrr: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
}

impl MetricRow {
    pub fn compute(method: impl Into<String>, runs: &[Run], mode: GainMode) -> Result<Self, EvalError> {
        Ok(Self {
            method: method.into(),
            n: runs.len(),
            top1: top_k_accuracy(runs, 1)?,
            top3: top_k_accuracy(runs, 3)?,
            top5: top_k_accuracy(runs, 5)?,
            mrr: mrr(runs)?,
            ndcg3: ndcg_at_k(runs, 3, mode)?,
            ndcg5: ndcg_at_k(runs, 5, mode)?,
        })
    }
}

/// Evaluation of the full pipeline plus retrieval baselines. Latency is kept
/// out of the serialized report so identical runs give identical JSON; see
/// [`EvalReport::timing_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub scores: MetricRow,
    pub errors: usize,
    pub gain_mode: GainMode,
    pub baselines: Vec<MetricRow>,
    #[serde(skip)]
    pub latency_mean_ms: f64,
    #[serde(skip)]
    pub latency_p95_ms: f64,
}

impl EvalReport {
    pub fn timing_json(&self) -> serde_json::Value {
        serde_json::json!({ "n": self.scores.n, "latency_mean_ms": self.latency_mean_ms, "latency_p95_ms": self.latency_p95_ms })
    }

    /// Aligned text table, system row first.
    pub fn to_table(&self) -> String {
        let rows: Vec<&MetricRow> = std::iter::once(&self.scores).chain(&self.baselines).collect();
        let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
        let mut out = format!(
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
            "Method", "Top-1", "Top-3", "Top-5", "MRR", "NDCG@3", "NDCG@5"
        );
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
                r.method, r.top1, r.top3, r.top5, r.mrr, r.ndcg3, r.ndcg5
            );
        }
        let _ = writeln!(
            out,
            "n={} errors={} latency mean={:.0} ms p95={:.0} ms",
            self.scores.n, self.errors, self.latency_mean_ms, self.latency_p95_ms
        );
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub workers: usize,
    pub gain_mode: GainMode,
    pub baselines: bool,
    pub method_name: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { workers: 4, gain_mode: GainMode::Binary, baselines: true, method_name: "multi-agent".into() }
    }
}

/// Nearest-rank percentile over `values`; 0 when empty.
fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Ranked ids or an error message, with the latency in milliseconds.
type Outcome = (Result<Vec<String>, String>, f64);

/// Runs the pipeline over every labeled utterance with at most
/// `opts.workers` concurrent annotations. Failed utterances count as misses.
pub fn evaluate_run(pipeline: &Pipeline, labeled: &[LabeledUtterance], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Outcome>>> = Mutex::new(vec![None; labeled.len()]);
    std::thread::scope(|s| {
        for _ in 0..opts.workers.clamp(1, labeled.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = labeled.get(i) else { break };
                let t = Instant::now();
                let outcome = pipeline.annotate(&item.utterance).map(|r| r.verdict.ids()).map_err(|e| e.to_string());
                let ms = t.elapsed().as_secs_f64() * 1000.0;
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some((outcome, ms));
            });
        }
    });
    let slots = slots.into_inner().unwrap_or_else(|p| p.into_inner());
    let mut runs = Vec::with_capacity(labeled.len());
    let mut latencies = Vec::with_capacity(labeled.len());
    let mut errors = Vec::new();
    for (item, slot) in labeled.iter().zip(slots) {
        let (outcome, ms) = slot.unwrap_or_else(|| (Err("not evaluated".into()), 0.0));
        latencies.push(ms);
        let ranking = outcome.unwrap_or_else(|e| {
            log::warn!("`{}`: {e}", item.utterance);
            errors.push(e);
            Vec::new()
        });
        runs.push(Run::new(ranking, item.gold_ids.clone()));
    }
    if errors.len() == labeled.len() {
        return Err(EvalError::AllFailed(errors.join("; ")));
    }
    let baselines = if opts.baselines { baseline_rows(pipeline, labeled, opts.gain_mode)? } else { Vec::new() };
    Ok(EvalReport {
        scores: MetricRow::compute(opts.method_name.clone(), &runs, opts.gain_mode)?,
        errors: errors.len(),
        gain_mode: opts.gain_mode,
        baselines,
        latency_mean_ms: latencies.iter().sum::<f64>() / latencies.len() as f64,
        latency_p95_ms: percentile(&latencies, 0.95),
    })
}

const BASELINE_K: usize = 5;

fn hits_to_ids(hits: Vec<Hit>) -> Vec<String> {
    hits.into_iter().map(|h| h.faq_id).collect()
}

/// BM25 and embedding-only rankings, each with and without answers. Embedding
/// rows are skipped when the index is missing or query embedding fails.
pub fn baseline_rows(pipeline: &Pipeline, labeled: &[LabeledUtterance], mode: GainMode) -> Result<Vec<MetricRow>, EvalError> {
    let corpus = pipeline.corpus();
    let queries: Vec<_> = labeled.iter().map(|l| normalize_utterance(&l.utterance).ok()).collect();
    let mut rows = Vec::new();
    for (name, with_answers) in [("bm25", false), ("bm25+answers", true)] {
        let index = build_bm25_index(corpus, with_answers);
        let runs: Vec<Run> = labeled
            .iter()
            .zip(&queries)
            .map(|(l, q)| {
                let ranking = q.as_ref().and_then(|q| bm25_top_k(&index, q, BASELINE_K).ok()).map(hits_to_ids).unwrap_or_default();
                Run::new(ranking, l.gold_ids.clone())
            })
            .collect();
        rows.push(MetricRow::compute(name, &runs, mode)?);
    }
    let indexes = pipeline.indexes();
    let embedding: [(&str, Option<&EmbeddingIndex>); 2] =
        [("embedding", indexes.questions.as_deref()), ("embedding+answers", indexes.with_answers.as_deref())];
    if embedding.iter().any(|(_, i)| i.is_some()) {
        let texts: Vec<String> = queries.iter().map(|q| q.as_ref().map_or_else(|| " ".to_string(), |q| q.normalized.clone())).collect();
        match pipeline.gateway().embed_batch(&texts) {
            Ok(vectors) => {
                for (name, index) in embedding {
                    let Some(index) = index else { continue };
                    let runs: Vec<Run> = labeled
                        .iter()
                        .zip(&vectors)
                        .map(|(l, v)| Run::new(index.cosine_top_k(v, BASELINE_K).map(hits_to_ids).unwrap_or_default(), l.gold_ids.clone()))
                        .collect();
                    rows.push(MetricRow::compute(name, &runs, mode)?);
                }
            }
            Err(e) => log::warn!("skipping embedding baselines: {e}"),
        }
    }
    Ok(rows)
}

/// Stable content-derived id for a question text.
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.trim().as_bytes());
    format!("q{}", &hex::encode(digest)[..16])
}

/// Sentence pairs become a corpus of the distinct second sentences. Each
/// first sentence with at least one positive pair becomes one labeled
/// utterance whose gold set is every second sentence it is paired with
/// positively.
pub fn adapt_lcqmc(rows: &[(String, String, u8)]) -> Result<(FaqCorpus, Vec<LabeledUtterance>), EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut faqs: IndexMap<String, FaqEntry> = IndexMap::new();
    let mut gold: IndexMap<String, Vec<String>> = IndexMap::new();
    for (i, (q1, q2, label)) in rows.iter().enumerate() {
        if *label > 1 {
            return Err(EvalError::Parse { line: i + 1, message: format!("label must be 0 or 1, got {label}") });
        }
        let q2 = q2.trim();
        if q2.is_empty() {
            return Err(EvalError::Parse { line: i + 1, message: "empty second sentence".into() });
        }
        let id = content_id(q2);
        faqs.entry(id.clone()).or_insert_with(|| FaqEntry::new(id.clone(), q2, ""));
        let q1 = q1.trim();
        if *label == 1 && !q1.is_empty() {
            let g = gold.entry(q1.to_string()).or_default();
            if !g.contains(&id) {
                g.push(id);
            }
        }
    }
    let corpus = FaqCorpus::validate(faqs.into_values().collect())?;
    let labeled = gold.into_iter().map(|(utterance, gold_ids)| LabeledUtterance { utterance, gold_ids }).collect();
    Ok((corpus, labeled))
}

/// Reads tab-separated `q1<TAB>q2<TAB>label` lines. A first line whose label
/// column reads `label` is treated as a header.
pub fn read_lcqmc_tsv(path: &Path) -> Result<Vec<(String, String, u8)>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_lcqmc_tsv(&text)
}

pub fn parse_lcqmc_tsv(text: &str) -> Result<Vec<(String, String, u8)>, EvalError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(EvalError::Parse { line: i + 1, message: format!("expected 3 tab-separated fields, got {}", fields.len()) });
        }
        if i == 0 && fields[2].trim().eq_ignore_ascii_case("label") {
            continue;
        }
        let label = fields[2]
            .trim()
            .parse::<u8>()
            .map_err(|_| EvalError::Parse { line: i + 1, message: format!("bad label `{}`", fields[2].trim()) })?;
        rows.push((fields[0].to_string(), fields[1].to_string(), label));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiqaText {
    #[serde(alias = "_id")]
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiqaLink {
    #[serde(alias = "query-id", alias = "qid")]
    pub question_id: String,
    #[serde(alias = "corpus-id", alias = "docid")]
    pub answer_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiqaVariation {
    pub question_id: String,
    pub utterance: String,
}

/// Generates paraphrased utterances for a seeded sample of questions.
pub struct Paraphraser<'a> {
    pub gateway: &'a Gateway,
    pub prompt: &'a PromptConfig,
    pub sample_size: usize,
    pub seed: u64,
}

/// Question and answer records become FAQs (first linked answer as the
/// answer text). Utterances come from `variations`, or else from
/// `paraphraser`; with neither, no utterances are produced.
pub fn adapt_fiqa(
    questions: &[FiqaText],
    answers: &[FiqaText],
    links: &[FiqaLink],
    variations: Option<&[FiqaVariation]>,
    paraphraser: Option<Paraphraser<'_>>,
) -> Result<(FaqCorpus, Vec<LabeledUtterance>), EvalError> {
    if questions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let answer_text: HashMap<&str, &str> = answers.iter().map(|a| (a.id.as_str(), a.text.as_str())).collect();
    let question_ids: HashSet<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    let mut first_answer: HashMap<&str, &str> = HashMap::new();
    for l in links {
        if !question_ids.contains(l.question_id.as_str()) {
            return Err(EvalError::DanglingLink(l.question_id.clone()));
        }
        let text = answer_text.get(l.answer_id.as_str()).ok_or_else(|| EvalError::DanglingLink(l.answer_id.clone()))?;
        first_answer.entry(l.question_id.as_str()).or_insert(text);
    }
    let corpus = FaqCorpus::validate(
        questions
            .iter()
            .map(|q| FaqEntry::new(q.id.clone(), q.text.trim(), first_answer.get(q.id.as_str()).copied().unwrap_or("").trim()))
            .collect(),
    )?;
    let labeled = match (variations, paraphraser) {
        (Some(vars), _) => vars
            .iter()
            .map(|v| {
                if corpus.contains(&v.question_id) {
                    Ok(LabeledUtterance { utterance: v.utterance.clone(), gold_ids: vec![v.question_id.clone()] })
                } else {
                    Err(EvalError::DanglingLink(v.question_id.clone()))
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(p)) => paraphrase_sample(&corpus, &p),
        (None, None) => {
            log::warn!("no variations and no model backend: producing no labeled utterances");
            Vec::new()
        }
    };
    Ok((corpus, labeled))
}

fn paraphrase_sample(corpus: &FaqCorpus, p: &Paraphraser<'_>) -> Vec<LabeledUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut picked: Vec<&FaqEntry> = corpus.entries().choose_multiple(&mut rng, p.sample_size.min(corpus.len())).collect();
    picked.sort_by_key(|f| corpus.index_of(&f.id));
    picked
        .into_iter()
        .filter_map(|faq| {
            let req = build_paraphrase_prompt(&faq.question, p.prompt).to_request(0).ok()?;
            match p.gateway.chat_complete(&req) {
                Ok(text) => {
                    let text = text.trim().trim_matches('"').trim();
                    (!text.is_empty()).then(|| LabeledUtterance { utterance: text.to_string(), gold_ids: vec![faq.id.clone()] })
                }
                Err(e) => {
                    log::warn!("paraphrase of `{}` failed: {e}", faq.id);
                    None
                }
            }
        })
        .collect()
}

/// Reads JSON lines of type `T`, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

/// Parses labels (`{utterance, gold_ids}` per line) against `corpus`.
pub fn parse_labels(text: &str, corpus: &FaqCorpus) -> Result<Vec<LabeledUtterance>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse_err = |message: String| EvalError::Parse { line: i + 1, message };
        let l: LabeledUtterance = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if l.gold_ids.is_empty() {
            return Err(parse_err("gold_ids is empty".into()));
        }
        if let Some(bad) = l.gold_ids.iter().find(|g| !corpus.contains(g)) {
            return Err(parse_err(format!("unknown faq id `{bad}`")));
        }
        out.push(l);
    }
    Ok(out)
}

/// A JSON-lines corpus plus a labels file.
pub fn load_bank_format(corpus_path: &Path, labels_path: &Path) -> Result<(FaqCorpus, Vec<LabeledUtterance>), EvalError> {
    let corpus = FaqCorpus::load_jsonl(corpus_path)?;
    let text = std::fs::read_to_string(labels_path).map_err(|e| io_err(labels_path, e))?;
    let labeled = parse_labels(&text, &corpus)?;
    Ok((corpus, labeled))
}

/// Turns labeled utterances into few-shot examples keyed by the first gold
/// FAQ's title.
pub fn few_shots_from_labeled(labeled: &[LabeledUtterance], corpus: &FaqCorpus) -> Vec<FewShot> {
    labeled
        .iter()
        .filter_map(|l| l.gold_ids.first().and_then(|g| corpus.get(g)).map(|f| FewShot::new(l.utterance.trim(), f.question.trim())))
        .collect()
}

/// Moves a seeded sample of `n` utterances out of `labeled`:
/// returns (held out, remaining), each in original order.
pub fn split_holdout(labeled: &[LabeledUtterance], n: usize, seed: u64) -> (Vec<LabeledUtterance>, Vec<LabeledUtterance>) {
    let mut idx: Vec<usize> = (0..labeled.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: HashSet<usize> = idx.into_iter().take(n).collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, l) in labeled.iter().enumerate() {
        if held.contains(&i) { a.push(l.clone()) } else { b.push(l.clone()) }
    }
    (a, b)
}
