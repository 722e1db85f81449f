//! Lexical (Okapi BM25) and dense (cosine) retrieval over an FAQ corpus.
//!
//! Scores produced here are on their native scales and stay inside this
//! module's [`Hit`] type; they never become 0–100 [`crate::model::Candidate`]s.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::llm_gateway::{Gateway, GatewayError};
use crate::model::{rank_order, FaqCorpus, FaqEntry, UserQuery};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RetrievalError {
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding index does not line up with the corpus: {0}")]
    CorpusMismatch(String),
    #[error("malformed embedding index: {0}")]
    Format(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("i/o error: {0}")]
    Io(String),
}

/// A retrieved FAQ with its raw retrieval score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub faq_id: String,
    pub score: f64,
}

/// Case-folds, splits on anything that is not alphanumeric and drops empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Text embedded for one FAQ.
pub fn faq_embedding_text(faq: &FaqEntry, with_answers: bool) -> String {
    if with_answers {
        format!("Question: {} Answer: {}", faq.question, faq.answer)
    } else {
        faq.question.clone()
    }
}

fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    hits.sort_by(|a, b| rank_order(a.score, &a.faq_id, b.score, &b.faq_id));
    hits.truncate(k);
    hits
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_term_freqs: Vec<HashMap<String, u32>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    doc_freq: HashMap<String, usize>,
    params: Bm25Params,
    with_answers: bool,
}

impl Bm25Index {
    pub fn build(corpus: &FaqCorpus, with_answers: bool) -> Self {
        Self::build_with(corpus, with_answers, Bm25Params::default())
    }

    pub fn build_with(corpus: &FaqCorpus, with_answers: bool, params: Bm25Params) -> Self {
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_term_freqs = Vec::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for faq in corpus.entries() {
            let mut tokens = tokenize(&faq.question);
            if with_answers {
                tokens.extend(tokenize(&faq.answer));
            }
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            doc_ids.push(faq.id.clone());
            doc_lengths.push(tokens.len());
            doc_term_freqs.push(tf);
        }
        let total: usize = doc_lengths.iter().sum();
        // A corpus of token-free documents would otherwise divide by zero.
        let avg_doc_length = if total == 0 { 1.0 } else { total as f64 / doc_lengths.len() as f64 };
        Self {
            doc_ids,
            doc_term_freqs,
            doc_lengths,
            avg_doc_length,
            doc_freq,
            params,
            with_answers,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_lengths(&self) -> &[usize] {
        &self.doc_lengths
    }

    pub fn term_freq(&self, doc: usize, term: &str) -> u32 {
        self.doc_term_freqs[doc].get(term).copied().unwrap_or(0)
    }

    pub fn with_answers(&self) -> bool {
        self.with_answers
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of document `doc` for the distinct terms of `query_text`.
    pub fn score_doc(&self, doc: usize, query_text: &str) -> f64 {
        let terms: HashSet<String> = tokenize(query_text).into_iter().collect();
        self.score_terms(doc, &terms)
    }

    fn score_terms(&self, doc: usize, terms: &HashSet<String>) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = 1.0 - b + b * self.doc_lengths[doc] as f64 / self.avg_doc_length;
        terms
            .iter()
            .map(|t| {
                let tf = self.term_freq(doc, t) as f64;
                if tf == 0.0 {
                    0.0
                } else {
                    self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * len_norm)
                }
            })
            .sum()
    }

    pub fn top_k_text(&self, query_text: &str, k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let terms: HashSet<String> = tokenize(query_text).into_iter().collect();
        let hits = (0..self.n_docs())
            .map(|d| Hit { faq_id: self.doc_ids[d].clone(), score: self.score_terms(d, &terms) })
            .collect();
        Ok(top_k(hits, k))
    }
}

pub fn build_bm25_index(corpus: &FaqCorpus, with_answers: bool) -> Bm25Index {
    Bm25Index::build(corpus, with_answers)
}

/// Ranks the corpus against the normalized utterance.
pub fn bm25_top_k(index: &Bm25Index, query: &UserQuery, k: usize) -> Result<Vec<Hit>, RetrievalError> {
    index.top_k_text(&query.normalized, k)
}

/// Unit vectors for every FAQ, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dimension: usize,
    with_answers: bool,
}

impl EmbeddingIndex {
    /// Normalizes every vector; all must share one dimension.
    pub fn from_parts(ids: Vec<String>, mut vectors: Vec<Vec<f64>>, with_answers: bool) -> Result<Self, RetrievalError> {
        if ids.len() != vectors.len() {
            return Err(RetrievalError::Format(format!("{} ids for {} vectors", ids.len(), vectors.len())));
        }
        let dimension = vectors.first().map_or(0, Vec::len);
        for v in vectors.iter_mut() {
            if v.len() != dimension {
                return Err(RetrievalError::DimensionMismatch { expected: dimension, got: v.len() });
            }
            crate::llm_gateway::l2_normalize(v)?;
        }
        Ok(Self { ids, vectors, dimension, with_answers })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn with_answers(&self) -> bool {
        self.with_answers
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector_of(&self, faq_id: &str) -> Option<&[f64]> {
        self.ids.iter().position(|id| id == faq_id).map(|i| self.vectors[i].as_slice())
    }

    pub fn check_corpus(&self, corpus: &FaqCorpus) -> Result<(), RetrievalError> {
        if self.ids.len() != corpus.len() {
            return Err(RetrievalError::CorpusMismatch(format!(
                "index has {} entries, corpus has {}",
                self.ids.len(),
                corpus.len()
            )));
        }
        for (id, faq) in self.ids.iter().zip(corpus.entries()) {
            if *id != faq.id {
                return Err(RetrievalError::CorpusMismatch(format!("expected id `{}`, found `{id}`", faq.id)));
            }
        }
        Ok(())
    }

    pub fn cosine_top_k(&self, query_vec: &[f64], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if query_vec.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch { expected: self.dimension, got: query_vec.len() });
        }
        let hits = self
            .ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| Hit {
                faq_id: id.clone(),
                score: v.iter().zip(query_vec).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0),
            })
            .collect();
        Ok(top_k(hits, k))
    }

    /// Little-endian layout: `u32 dimension`, `u8 with_answers`, `u32 n`, then
    /// per FAQ `u32 id_len`, the UTF-8 id bytes and `dimension` f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.ids.len() * (4 + 16 + 4 * self.dimension));
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.push(self.with_answers as u8);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let mut r = ByteReader { bytes, pos: 0 };
        let dimension = r.u32()? as usize;
        let with_answers = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(RetrievalError::Format(format!("bad with_answers flag {other}"))),
        };
        let n = r.u32()? as usize;
        let mut ids = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| RetrievalError::Format(e.to_string()))?
                .to_string();
            let mut v = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                let raw: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
                v.push(f32::from_le_bytes(raw) as f64);
            }
            ids.push(id);
            vectors.push(v);
        }
        if r.pos != bytes.len() {
            return Err(RetrievalError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let index = Self::from_parts(ids, vectors, with_answers)?;
        if n > 0 && index.dimension != dimension {
            return Err(RetrievalError::Format("dimension header disagrees with records".into()));
        }
        Ok(Self { dimension, ..index })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_bytes()).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RetrievalError::Format("unexpected end of data".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Embeds every FAQ through the gateway. Either the whole index is built or
/// an error is returned.
pub fn build_embedding_index(
    corpus: &FaqCorpus,
    with_answers: bool,
    gateway: &Gateway,
) -> Result<EmbeddingIndex, RetrievalError> {
    let texts: Vec<String> = corpus.entries().iter().map(|f| faq_embedding_text(f, with_answers)).collect();
    let vectors = gateway.embed_batch(&texts)?;
    let ids = corpus.entries().iter().map(|f| f.id.clone()).collect();
    EmbeddingIndex::from_parts(ids, vectors, with_answers)
}

pub fn cosine_top_k(index: &EmbeddingIndex, query_vec: &[f64], k: usize) -> Result<Vec<Hit>, RetrievalError> {
    index.cosine_top_k(query_vec, k)
}
