//! Paraphrase-rank sensitivity probing for NL2SQL benchmarks.

pub mod cache;
pub mod clients;
pub mod config;
pub mod conllu;
pub mod evaluate;
pub mod ingest;
pub mod paragen;
pub mod pipeline;
pub mod rank;
pub mod semantic;
pub mod sqlexec;
pub mod stats;
pub mod ted;
pub mod tree;
