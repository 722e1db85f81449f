//! Builds a ready pipeline from a [`RunConfig`]: backend, data, few-shot
//! examples, embedding indexes and the result cache.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use faqmap_core::agents::{select_few_shots, AgentSpec, FewShotPlan, STANDARD_AGENTS};
use faqmap_core::evalkit::{
    adapt_fiqa, adapt_lcqmc, few_shots_from_labeled, load_bank_format, parse_labels, read_jsonl, read_lcqmc_tsv,
    split_holdout, FiqaLink, FiqaText, FiqaVariation, LabeledUtterance, Paraphraser,
};
use faqmap_core::llm_gateway::{
    Gateway, LlmBackend, OpenAiCompatibleBackend, RecordingBackend, ReplayBackend, ReplayStore, ScriptedBackend,
};
use faqmap_core::model::FaqCorpus;
use faqmap_core::orchestrator::{Indexes, Pipeline, PipelineConfig, ResultCache};
use faqmap_core::prompting::FewShot;
use faqmap_core::retrieval::{build_embedding_index, EmbeddingIndex};

use crate::config::{Ablation, BackendKind, DatasetSpec, RunConfig};

/// Command-line adjustments applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub no_cache: bool,
    pub parallel: Option<bool>,
    pub backend: Option<BackendKind>,
    pub ablations: Vec<Ablation>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.no_cache {
            cfg.pipeline.cache_enabled = false;
        }
        if let Some(p) = self.parallel {
            cfg.pipeline.parallel = p;
        }
        if let Some(b) = self.backend {
            cfg.backend = b;
        }
        for a in &self.ablations {
            a.apply(&mut cfg.pipeline);
        }
    }
}

pub struct App {
    pub cfg: RunConfig,
    pub pipeline: Pipeline,
    /// Utterances for evaluation, with any few-shot holdout removed.
    pub labeled: Vec<LabeledUtterance>,
    pub training_size: usize,
    scripted: Option<Arc<ScriptedBackend>>,
}

/// What a command needs loaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Annotate,
    Evaluate,
    Index,
}

pub fn build_gateway(cfg: &RunConfig) -> anyhow::Result<(Gateway, Option<Arc<ScriptedBackend>>)> {
    let mut scripted = None;
    let backend: Arc<dyn LlmBackend> = match cfg.backend {
        BackendKind::Scripted => {
            let path = cfg.script_path.as_deref().context("the scripted backend needs `script_path`")?;
            let b = Arc::new(ScriptedBackend::load(path)?);
            scripted = Some(b.clone());
            b
        }
        BackendKind::Replay => {
            let path = cfg.replay_path.as_deref().context("the replay backend needs `replay_path`")?;
            Arc::new(ReplayBackend::new(ReplayStore::load(path)?))
        }
        BackendKind::Live => {
            let live: Arc<dyn LlmBackend> = Arc::new(OpenAiCompatibleBackend::from_config(&cfg.backend_config)?);
            match &cfg.record_path {
                Some(path) => {
                    let store = if path.exists() { ReplayStore::load(path)? } else { ReplayStore::new() };
                    Arc::new(RecordingBackend::new(live, store, Some(path.clone())))
                }
                None => live,
            }
        }
    };
    Ok((Gateway::new(backend, cfg.backend_config.clone()), scripted))
}

/// Loads the corpus and labeled utterances. Paraphrased utterances cost model
/// calls and are generated only when `allow_paraphrase` is set.
pub fn load_data(
    cfg: &RunConfig,
    gateway: &Gateway,
    allow_paraphrase: bool,
) -> anyhow::Result<(FaqCorpus, Vec<LabeledUtterance>)> {
    let (corpus, labeled) = match &cfg.dataset {
        Some(DatasetSpec::Bank { labels }) => {
            let corpus_path = cfg.corpus_path.as_deref().context("the bank dataset format needs `corpus_path`")?;
            load_bank_format(corpus_path, labels)?
        }
        Some(DatasetSpec::Lcqmc { path, limit }) => {
            let mut rows = read_lcqmc_tsv(path)?;
            if let Some(n) = limit {
                rows.truncate(*n);
            }
            adapt_lcqmc(&rows)?
        }
        Some(DatasetSpec::Fiqa { questions, answers, links, variations, paraphrase_sample }) => {
            let qs: Vec<FiqaText> = read_jsonl(questions)?;
            let ans: Vec<FiqaText> = read_jsonl(answers)?;
            let ls: Vec<FiqaLink> = read_jsonl(links)?;
            let vars: Option<Vec<FiqaVariation>> = variations.as_deref().map(read_jsonl).transpose()?;
            let paraphraser = (allow_paraphrase && vars.is_none()).then_some(Paraphraser {
                gateway,
                prompt: &cfg.pipeline.prompt,
                sample_size: *paraphrase_sample,
                seed: cfg.seed,
            });
            adapt_fiqa(&qs, &ans, &ls, vars.as_deref(), paraphraser)?
        }
        None => (FaqCorpus::load_jsonl(cfg.corpus_path.as_deref().context("config needs `corpus_path`")?)?, Vec::new()),
    };
    // An explicit corpus file overrides the dataset-derived corpus.
    let corpus = match (&cfg.corpus_path, &cfg.dataset) {
        (Some(p), Some(DatasetSpec::Lcqmc { .. } | DatasetSpec::Fiqa { .. })) => FaqCorpus::load_jsonl(p)?,
        _ => corpus,
    };
    if let Some(bad) = labeled.iter().flat_map(|l| &l.gold_ids).find(|g| !corpus.contains(g)) {
        bail!("gold id `{bad}` is not in the corpus");
    }
    Ok((corpus, labeled))
}

pub const QUESTION_INDEX_FILE: &str = "questions.emb";
pub const ANSWER_INDEX_FILE: &str = "with_answers.emb";

pub fn index_dir(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.index_dir.clone()
}

/// Loads a persisted index when it matches the corpus, otherwise builds one
/// (and persists it when an index directory is configured).
pub fn load_or_build_index(
    corpus: &FaqCorpus,
    with_answers: bool,
    dir: Option<&Path>,
    gateway: &Gateway,
    rebuild: bool,
) -> anyhow::Result<EmbeddingIndex> {
    let file = dir.map(|d| d.join(if with_answers { ANSWER_INDEX_FILE } else { QUESTION_INDEX_FILE }));
    if let (Some(path), false) = (&file, rebuild) {
        if path.exists() {
            match EmbeddingIndex::load(path) {
                Ok(index) if index.with_answers() == with_answers && index.check_corpus(corpus).is_ok() => return Ok(index),
                Ok(_) => log::warn!("{} does not match the corpus; rebuilding", path.display()),
                Err(e) => log::warn!("{}: {e}; rebuilding", path.display()),
            }
        }
    }
    let index = build_embedding_index(corpus, with_answers, gateway)?;
    if let Some(path) = &file {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        index.save(path)?;
    }
    Ok(index)
}

fn few_shot_plan(cfg: &RunConfig, training: &[FewShot], n_agents: usize) -> anyhow::Result<FewShotPlan> {
    let per_agent = cfg.pipeline.few_shots_per_agent;
    if per_agent == 0 {
        return Ok(FewShotPlan::empty(n_agents));
    }
    if training.is_empty() {
        log::warn!("no training examples available; agents run without few-shot examples");
        return Ok(FewShotPlan::empty(n_agents));
    }
    Ok(select_few_shots(training, n_agents, per_agent, cfg.seed, cfg.pipeline.few_shot_mode)?)
}

impl App {
    pub fn load(config_path: &Path, overrides: &Overrides, purpose: Purpose) -> anyhow::Result<Self> {
        let mut cfg = RunConfig::load(config_path)?;
        overrides.apply(&mut cfg);
        Self::from_config(cfg, purpose)
    }

    pub fn from_config(cfg: RunConfig, purpose: Purpose) -> anyhow::Result<Self> {
        cfg.validate()?;
        let (gateway, scripted) = build_gateway(&cfg)?;

        let p = &cfg.pipeline;
        let n_agents = p.agents.len();
        let needs_holdout = cfg.training_path.is_none() && p.few_shots_per_agent > 0 && purpose != Purpose::Index;
        let (corpus, mut labeled) = load_data(&cfg, &gateway, purpose == Purpose::Evaluate || needs_holdout)?;

        let training: Vec<FewShot> = match &cfg.training_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                few_shots_from_labeled(&parse_labels(&text, &corpus)?, &corpus)
            }
            None if needs_holdout && !labeled.is_empty() => {
                let want = match p.few_shot_mode {
                    faqmap_core::agents::FewShotMode::Partition => n_agents * p.few_shots_per_agent,
                    _ => p.few_shots_per_agent,
                };
                let (held, rest) = split_holdout(&labeled, want, cfg.seed);
                labeled = rest;
                few_shots_from_labeled(&held, &corpus)
            }
            None => Vec::new(),
        };
        let plan = few_shot_plan(&cfg, &training, n_agents)?;

        let agents: Vec<AgentSpec> = STANDARD_AGENTS
            .iter()
            .filter(|(n, _, _)| p.agents.iter().any(|a| a == n))
            .zip(plan.per_agent)
            .map(|((name, emb, ans), shots)| AgentSpec {
                few_shots: shots,
                candidate_pool_size: p.candidate_pool_size,
                expand_embedding_query: p.expand_embedding_query,
                ..AgentSpec::new(*name, *emb, *ans)
            })
            .collect();

        let dir = index_dir(&cfg);
        let rebuild = purpose == Purpose::Index;
        let wants_index = |with_answers: bool| {
            purpose != Purpose::Annotate || agents.iter().any(|a| a.use_embeddings && a.use_answers == with_answers)
        };
        let mut indexes = Indexes::default();
        if wants_index(false) {
            indexes.questions = Some(Arc::new(load_or_build_index(&corpus, false, dir.as_deref(), &gateway, rebuild)?));
        }
        if wants_index(true) {
            indexes.with_answers = Some(Arc::new(load_or_build_index(&corpus, true, dir.as_deref(), &gateway, rebuild)?));
        }

        let cache = match (&cfg.cache_path, p.cache_enabled) {
            (Some(path), true) => {
                if let Some(parent) = path.parent() {
                    let _ = std::fs::create_dir_all(parent);
                }
                ResultCache::open(path.clone()).with_context(|| format!("opening cache {}", path.display()))?
            }
            _ => ResultCache::in_memory(),
        };
        let pipeline_cfg = PipelineConfig {
            agents,
            judge_samples: p.judge_samples,
            parallel: p.parallel,
            cache_enabled: p.cache_enabled,
            top_k_out: p.top_k_out,
            use_planner: p.use_planner,
            use_judge: p.use_judge,
            fallback_mode: p.fallback_mode,
            prompt: p.prompt.clone(),
        };
        let pipeline = Pipeline::new(Arc::new(corpus), indexes, gateway, pipeline_cfg, Arc::new(cache))?;
        Ok(Self { cfg, pipeline, labeled, training_size: training.len(), scripted })
    }

    /// Invocations seen by the scripted backend, if that backend is in use.
    pub fn backend_calls(&self) -> Option<usize> {
        self.scripted.as_ref().map(|b| b.total_calls())
    }
}
