//! Cost-aware adaptive routing for table understanding.
//!
//! Each table-query instance is embedded by three frozen encoders (question,
//! table-as-text, table-as-image), and a small gating MLP picks one of three
//! processing paths: text-only, image-only, or fusion, where an LLM agent
//! reconciles the two single-modality answers. The gate is trained to match
//! per-path correctness while paying an expected-cost penalty.

pub mod analysis;
pub mod answer;
pub mod config;
pub mod corpus;
pub mod engine;
pub mod experts;
pub mod fusion;
pub mod gate;
pub mod hashing;
pub mod ingest;
pub mod numerics;
pub mod synth;
pub mod table;
pub mod trainer;
pub mod types;

pub use types::{DatasetTag, PathScores, RoutePath};
