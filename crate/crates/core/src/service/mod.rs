//! Pipeline wiring, on-disk artifacts and the pattern API.
//!
//! A store directory holds:
//!
//! - `records.jsonl`: ingested query-log records
//! - `embeddings.bin`: the embedding cache
//! - `feature_stats.json`, `model.json`: the trained classifier
//! - `state.json`: the full pipeline state, served by the API
//! - `patterns.json`: the pattern output of the last run
//! - `run_status.json`: progress marker of the last run
//!
//! The JSON artifacts share a versioned, checksummed envelope.

pub mod api;
pub mod artifact;
pub mod config;
pub mod pipeline;

pub use api::{Api, Request, Response};
pub use config::{GroupBy, PipelineConfig};
pub use pipeline::{
    embed_records, load_feature_stats, load_model, load_patterns, load_state, load_status,
    persist_state, run_pipeline, train_classifier, EmbedReport, GroupSummary, PatternEntry,
    PipelineState, RunPhase, RunStatus, TrainReport,
};
