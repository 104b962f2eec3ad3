//! Local financial search agent: tiered retrieval over preferred sources,
//! local files, web search and a persistent vector store, with pluggable
//! generation, a fine-tuning loop and an evaluation harness.

pub mod agent;
pub mod embed;
pub mod eval;
pub mod generate;
pub mod ingest;
pub mod prompt;
pub mod retrieve;
pub mod tune;
pub mod vecstore;
