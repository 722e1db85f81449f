//! `faqmap` command-line tool: build indexes, annotate utterances, run
//! evaluations and serve annotations over HTTP.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 no candidates,
//! 4 model backend unavailable.

pub mod app;
pub mod config;
pub mod server;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use faqmap_core::evalkit::{content_id, evaluate_run, EvalError};
use faqmap_core::llm_gateway::GatewayError;
use faqmap_core::model::{normalize_utterance, FaqCorpus};
use faqmap_core::orchestrator::PipelineError;
use faqmap_core::retrieval::RetrievalError;

use crate::app::{App, Overrides, Purpose, ANSWER_INDEX_FILE, QUESTION_INDEX_FILE};
use crate::config::{Ablation, BackendKind};

#[derive(Debug, Parser)]
#[command(name = "faqmap", version, about = "Map user utterances to ranked FAQs with an ensemble of LLM agents")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "faqmap.json")]
    pub config: PathBuf,
    /// Seed for few-shot sampling and dataset sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bypass the result cache.
    #[arg(long, global = true)]
    pub no_cache: bool,
    /// Run ranker agents concurrently.
    #[arg(long, global = true, conflicts_with = "sequential")]
    pub parallel: bool,
    /// Run ranker agents one after another.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// no-judge, shared-fewshots, no-fewshots, no-planner or agents=a,b (repeatable).
    #[arg(long, global = true)]
    pub ablation: Vec<Ablation>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the embedding indexes and print corpus statistics.
    Index,
    /// Rank FAQs for one utterance and print the verdict JSON.
    Annotate {
        utterance: String,
        /// Write the full audit record to this file.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Evaluate on the configured dataset and print the metrics table.
    Evaluate {
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the text table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Serve POST /annotate and GET /health.
    Serve {
        /// Address to bind, e.g. 127.0.0.1:8080.
        #[arg(long)]
        bind: Option<String>,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            no_cache: self.no_cache,
            parallel: if self.sequential { Some(false) } else if self.parallel { Some(true) } else { None },
            backend: self.backend,
            ablations: self.ablation.clone(),
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::NoCandidates(_) => 3,
                PipelineError::BackendUnavailable(_) => 4,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<GatewayError>() {
            return if e.is_unavailability() { 4 } else { 2 };
        }
        if let Some(RetrievalError::Gateway(e)) = cause.downcast_ref::<RetrievalError>() {
            return if e.is_unavailability() { 4 } else { 2 };
        }
        if let Some(EvalError::AllFailed(_)) = cause.downcast_ref::<EvalError>() {
            return 3;
        }
    }
    2
}

fn words(text: &str) -> usize {
    text.split_whitespace().count()
}

fn mean(values: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = values.fold((0usize, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn corpus_stats(corpus: &FaqCorpus, training: usize, utterances: &[String]) -> String {
    let rows = [
        ("Number of FAQs", corpus.len().to_string()),
        ("Number of Training Utterances", training.to_string()),
        ("Number of Test Utterances", utterances.len().to_string()),
        ("Average FAQ Question Length (words)", format!("{:.1}", mean(corpus.entries().iter().map(|f| words(&f.question))))),
        ("Average FAQ Answer Length (words)", format!("{:.1}", mean(corpus.entries().iter().map(|f| words(&f.answer))))),
        ("Average User Utterance Length (words)", format!("{:.1}", mean(utterances.iter().map(|u| words(u))))),
    ];
    rows.iter().map(|(k, v)| format!("{k:<40}{v:>10}\n")).collect()
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let overrides = cli.overrides();
    match &cli.command {
        Command::Index => {
            let app = App::load(&cli.config, &overrides, Purpose::Index)?;
            let utterances: Vec<String> = app.labeled.iter().map(|l| l.utterance.clone()).collect();
            write!(out, "{}", corpus_stats(app.pipeline.corpus(), app.training_size, &utterances))?;
            match &app.cfg.index_dir {
                Some(dir) => {
                    writeln!(out, "Wrote {}", dir.join(QUESTION_INDEX_FILE).display())?;
                    writeln!(out, "Wrote {}", dir.join(ANSWER_INDEX_FILE).display())?;
                }
                None => writeln!(out, "No `index_dir` configured; indexes were built but not saved")?,
            }
        }
        Command::Annotate { utterance, audit } => {
            normalize_utterance(utterance).map_err(PipelineError::from)?;
            let app = App::load(&cli.config, &overrides, Purpose::Annotate)?;
            let result = app.pipeline.annotate(utterance)?;
            let corpus = app.pipeline.corpus();
            writeln!(out, "{}", serde_json::to_string_pretty(&result.verdict.to_json(corpus))?)?;
            let audit_path = audit.clone().or_else(|| {
                app.cfg.output.audit_dir.as_ref().map(|d| d.join(format!("{}.json", content_id(&result.query.normalized))))
            });
            if let Some(path) = audit_path {
                write_file(&path, &serde_json::to_string_pretty(&result.audit_json(corpus))?)?;
            }
            if let Some(n) = app.backend_calls() {
                log::info!("scripted backend calls: {n}");
            }
        }
        Command::Evaluate { report, table } => {
            let app = App::load(&cli.config, &overrides, Purpose::Evaluate)?;
            let result = evaluate_run(&app.pipeline, &app.labeled, &app.cfg.eval)?;
            let text = result.to_table();
            write!(out, "{text}")?;
            if let Some(path) = report.as_ref().or(app.cfg.output.report_json.as_ref()) {
                write_file(path, &(serde_json::to_string_pretty(&result)? + "\n"))?;
            }
            if let Some(path) = table.as_ref().or(app.cfg.output.report_table.as_ref()) {
                write_file(path, &text)?;
            }
            if let Some(path) = &app.cfg.output.timing_json {
                write_file(path, &(serde_json::to_string_pretty(&result.timing_json())? + "\n"))?;
            }
        }
        Command::Serve { bind } => {
            let app = App::load(&cli.config, &overrides, Purpose::Annotate)?;
            let bind = bind.clone().unwrap_or_else(|| app.cfg.server.bind.clone());
            let state = server::ServiceState::new(app.pipeline, app.cfg.server.max_concurrent);
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(server::serve(state, &bind))?;
        }
    }
    Ok(())
}
