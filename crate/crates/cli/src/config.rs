//! Run configuration: a single JSON document. Relative paths resolve against
//! the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use faqmap_core::agents::{FewShotMode, DEFAULT_POOL_SIZE, STANDARD_AGENTS};
use faqmap_core::evalkit::EvalOptions;
use faqmap_core::judge::FallbackMode;
use faqmap_core::llm_gateway::BackendConfig;
use faqmap_core::prompting::PromptConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Live,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// JSON-lines corpus (`corpus_path`) plus `{utterance, gold_ids}` labels.
    Bank { labels: PathBuf },
    /// Tab-separated sentence pairs; the corpus is built from them.
    Lcqmc {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// Question, answer and link JSON-lines files, with optional variations.
    Fiqa {
        questions: PathBuf,
        answers: PathBuf,
        links: PathBuf,
        #[serde(default)]
        variations: Option<PathBuf>,
        #[serde(default = "default_paraphrase_sample")]
        paraphrase_sample: usize,
    },
}

fn default_paraphrase_sample() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Agent names from the standard roster, in roster order.
    pub agents: Vec<String>,
    pub judge_samples: u32,
    pub parallel: bool,
    pub cache_enabled: bool,
    pub top_k_out: usize,
    pub use_planner: bool,
    pub use_judge: bool,
    pub fallback_mode: FallbackMode,
    pub few_shot_mode: FewShotMode,
    pub few_shots_per_agent: usize,
    pub candidate_pool_size: usize,
    pub expand_embedding_query: bool,
    pub prompt: PromptConfig,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            agents: STANDARD_AGENTS.iter().map(|(n, _, _)| n.to_string()).collect(),
            judge_samples: 1,
            parallel: true,
            cache_enabled: true,
            top_k_out: 5,
            use_planner: true,
            use_judge: true,
            fallback_mode: FallbackMode::ProposingAgents,
            few_shot_mode: FewShotMode::Partition,
            few_shots_per_agent: 5,
            candidate_pool_size: DEFAULT_POOL_SIZE,
            expand_embedding_query: true,
            prompt: PromptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub report_json: Option<PathBuf>,
    pub report_table: Option<PathBuf>,
    pub timing_json: Option<PathBuf>,
    pub audit_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub bind: String,
    pub max_concurrent: usize,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), max_concurrent: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_path: Option<PathBuf>,
    pub dataset: Option<DatasetSpec>,
    /// Labeled utterances (labels format) used only as few-shot examples.
    pub training_path: Option<PathBuf>,
    pub backend: BackendKind,
    pub backend_config: BackendConfig,
    pub script_path: Option<PathBuf>,
    pub replay_path: Option<PathBuf>,
    /// With the live backend, record every response here and reuse it.
    pub record_path: Option<PathBuf>,
    pub pipeline: PipelineSettings,
    pub cache_path: Option<PathBuf>,
    pub index_dir: Option<PathBuf>,
    pub seed: u64,
    pub output: OutputPaths,
    pub eval: EvalOptions,
    pub server: ServerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_path: None,
            dataset: None,
            training_path: None,
            backend: BackendKind::Live,
            backend_config: BackendConfig::default(),
            script_path: None,
            replay_path: None,
            record_path: None,
            pipeline: PipelineSettings::default(),
            cache_path: None,
            index_dir: None,
            seed: 42,
            output: OutputPaths::default(),
            eval: EvalOptions::default(),
            server: ServerSettings::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn resolve_req(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.corpus_path,
            &mut self.training_path,
            &mut self.script_path,
            &mut self.replay_path,
            &mut self.record_path,
            &mut self.cache_path,
            &mut self.index_dir,
            &mut self.output.report_json,
            &mut self.output.report_table,
            &mut self.output.timing_json,
            &mut self.output.audit_dir,
        ] {
            resolve(base, p);
        }
        match &mut self.dataset {
            Some(DatasetSpec::Bank { labels }) => resolve_req(base, labels),
            Some(DatasetSpec::Lcqmc { path, .. }) => resolve_req(base, path),
            Some(DatasetSpec::Fiqa { questions, answers, links, variations, .. }) => {
                resolve_req(base, questions);
                resolve_req(base, answers);
                resolve_req(base, links);
                resolve(base, variations);
            }
            None => {}
        }
    }

    /// Checks that every input file exists and the backend has what it needs.
    pub fn validate(&self) -> anyhow::Result<()> {
        let must_exist = |label: &str, p: &Path| -> anyhow::Result<()> {
            if !p.exists() {
                bail!("{label} {} does not exist", p.display());
            }
            Ok(())
        };
        match (&self.corpus_path, &self.dataset) {
            (None, None) => bail!("config needs `corpus_path` or `dataset`"),
            (None, Some(DatasetSpec::Bank { .. })) => bail!("the bank dataset format needs `corpus_path`"),
            (Some(p), _) => must_exist("corpus", p)?,
            _ => {}
        }
        match &self.dataset {
            Some(DatasetSpec::Bank { labels }) => must_exist("labels file", labels)?,
            Some(DatasetSpec::Lcqmc { path, .. }) => must_exist("pair file", path)?,
            Some(DatasetSpec::Fiqa { questions, answers, links, variations, .. }) => {
                must_exist("questions file", questions)?;
                must_exist("answers file", answers)?;
                must_exist("links file", links)?;
                if let Some(v) = variations {
                    must_exist("variations file", v)?;
                }
            }
            None => {}
        }
        if let Some(t) = &self.training_path {
            must_exist("training file", t)?;
        }
        match self.backend {
            BackendKind::Scripted => must_exist(
                "script",
                self.script_path.as_deref().context("the scripted backend needs `script_path`")?,
            )?,
            BackendKind::Replay => must_exist(
                "replay store",
                self.replay_path.as_deref().context("the replay backend needs `replay_path`")?,
            )?,
            BackendKind::Live => {}
        }
        for name in &self.pipeline.agents {
            if !STANDARD_AGENTS.iter().any(|(n, _, _)| n == name) {
                bail!("unknown agent `{name}`");
            }
        }
        Ok(())
    }
}

/// Named configuration changes for ablation runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Ablation {
    NoJudge,
    SharedFewShots,
    NoFewShots,
    NoPlanner,
    Agents(Vec<String>),
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-judge" => Ok(Ablation::NoJudge),
            "shared-fewshots" => Ok(Ablation::SharedFewShots),
            "no-fewshots" => Ok(Ablation::NoFewShots),
            "no-planner" => Ok(Ablation::NoPlanner),
            _ => match s.strip_prefix("agents=") {
                Some(list) if !list.trim().is_empty() => {
                    let names: Vec<String> = list.split(',').map(|n| n.trim().to_string()).collect();
                    match names.iter().find(|n| !STANDARD_AGENTS.iter().any(|(a, _, _)| a == n)) {
                        Some(bad) => Err(format!("unknown agent `{bad}`")),
                        None => Ok(Ablation::Agents(names)),
                    }
                }
                _ => Err(format!(
                    "unknown ablation `{s}` (expected no-judge, shared-fewshots, no-fewshots, no-planner or agents=a,b)"
                )),
            },
        }
    }
}

impl Ablation {
    pub fn apply(&self, p: &mut PipelineSettings) {
        match self {
            Ablation::NoJudge => p.use_judge = false,
            Ablation::SharedFewShots => p.few_shot_mode = FewShotMode::Shared,
            Ablation::NoFewShots => p.few_shots_per_agent = 0,
            Ablation::NoPlanner => p.use_planner = false,
            Ablation::Agents(names) => {
                p.agents = STANDARD_AGENTS.iter().map(|(n, _, _)| n.to_string()).filter(|n| names.contains(n)).collect()
            }
        }
    }
}
