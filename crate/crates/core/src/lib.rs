//! Multi-agent FAQ ranking.
//!
//! An utterance is planned, handed to an ensemble of LLM ranker agents,
//! their candidates are merged and a judge agent produces the final top-5.
//! Retrieval baselines and an evaluation harness live alongside.

pub mod agents;
pub mod evalkit;
pub mod judge;
pub mod llm_gateway;
pub mod model;
pub mod orchestrator;
pub mod prompting;
pub mod retrieval;
