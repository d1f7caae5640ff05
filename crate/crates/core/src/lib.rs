//! Evolutionary architecture search engine: record store, fitness, candidate
//! pool, LLM roles and the campaign orchestrator.

pub mod analyst;
pub mod analytics;
pub mod cognition;
pub mod config;
pub mod embedding;
pub mod engineer;
pub mod fitness;
pub mod gateway;
pub mod orchestrator;
pub mod pool;
pub mod prompts;
pub mod reference;
pub mod researcher;
pub mod sim;
pub mod store;
