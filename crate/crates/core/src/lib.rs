//! Generative track retrieval: ID strategies, a small seq2seq model,
//! diverse beam search, baselines and evaluation.

pub mod baselines;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod id_registry;
pub mod lm;
pub mod numeric;
pub mod pipeline;
pub mod semantic_ids;
pub mod util;

pub use corpus::{Artist, Corpus, LabeledQuery, Playlist, Track, TrainingPair};
pub use embeddings::{EmbeddingTable, Provenance};
pub use error::{Error, Result};
pub use id_registry::{IdRegistry, Strategy};
pub use semantic_ids::{Dictionary, SemanticId};
