//! Build a directed disease → entity knowledge graph from clinical notes by
//! asking language models templated questions about each note, then
//! aggregating and cleaning their answers.
//!
//! Stages: [`corpus`] (ingest, near-duplicate removal) → [`terminology`]
//! (disease note selection) → [`prompting`] + [`gateway`] (queries) →
//! [`extraction`] (aggregation) → [`postprocess`] → [`kgraph`], with
//! [`evaluation`] scoring the result. [`pipeline`] drives them from a
//! [`config::PipelineConfig`].
//!
//! Similarity code is generic over the float type; the aliases below fix it
//! to `f64` or `f32`.

pub mod artifact;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod gateway;
pub mod kgraph;
pub mod pipeline;
pub mod postprocess;
pub mod prompting;
pub mod remote;
pub mod scalar;
pub mod similarity;
pub mod terminology;
pub mod text;

pub use config::PipelineConfig;
pub use corpus::{ClinicalNote, Corpus};
pub use error::{Error, Result};
pub use extraction::{RawPrediction, Relation, RelationCandidate};
pub use gateway::{Gateway, ModelBackend, Parsed, QueryRecord};
pub use kgraph::KnowledgeGraph;
pub use prompting::{EntityCategory, Prompt, PromptStyle};
pub use scalar::Scalar;
pub use similarity::{ClusterProvider, EmbeddingVector, SimilarityProvider, TrigramEmbedder};

pub type Embedding = EmbeddingVector<f64>;
pub type Embedding32 = EmbeddingVector<f32>;
pub type Trigram = TrigramEmbedder<f64>;
pub type Trigram32 = TrigramEmbedder<f32>;
