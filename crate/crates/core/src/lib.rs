//! Hierarchical classification of free-text items against an assessment
//! blueprint, with pluggable classifier backends and scoring utilities.
//!
//! An assessment blueprint is a tree of named categories; classification
//! walks an item top-down through the tree, asking a backend to pick one
//! child at each level until a leaf is reached. The crate provides:
//!
//! - [`blueprint`]: the taxonomy data model, its file format, and queries.
//! - [`classify`]: the backend-agnostic classification contract — prompt
//!   construction, output normalization, and a deterministic mock backend.
//! - [`llm`]: a chat-completions backend with retries and an in-flight limiter.
//! - [`pipeline`]: sequential top-down classification of item batches.
//! - [`metrics`]: weighted F1, accuracy, and conditional agreement scoring.
//! - [`sim`]: a seeded repeated-subsampling simulation harness and fixtures.

pub mod blueprint;
pub mod classify;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod sim;

pub use blueprint::{Blueprint, BlueprintNode, CategoryPath};
pub use classify::{
    CandidateLabel, ClassifierBackend, ClassifyRequest, Decision, Exemplar, MockBackend, Mode,
    MultiLabelDecision,
};
pub use metrics::{MetricsReport, ReferenceEntry};
pub use pipeline::{ClassificationRecord, Item, LevelConfig};
