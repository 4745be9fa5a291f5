//! Orchestration toolkit for long-form speech translation: VAD-driven
//! segmentation, multi-system hypothesis fusion, document assembly,
//! context-windowed post-editing, corpus curation and evaluation, all
//! around pluggable model backends with deterministic mock substitutes.

pub mod corpus;
pub mod segmentation;
pub mod document;
pub mod metrics;
pub mod backends;
pub mod refinement;
pub mod curation;
pub mod pipeline;
