//! Federated next-word prediction at desk scale.
//!
//! The crate simulates Federated Averaging over client-partitioned text with a
//! single-layer LSTM language model, and provides the transfer-learning tools
//! around it: central pretraining with weight transfer, pretrained word
//! embeddings, and embedding post-processing / PCA reduction.
//!
//! Module map:
//!
//! - [`corpus`]: vocabulary, tokenization, client datasets.
//! - [`embeddings`]: embedding text files, PCA, post-processing, reduction.
//! - [`model`]: the four-layer network, forward/backward, checkpoints.
//! - [`optim`]: the Adam optimizer.
//! - [`federation`]: client sampling, local updates, weighted averaging.
//! - [`warmstart`]: central pretraining and vocabulary-aware weight transfer.
//! - [`metrics`]: top-1 accuracy with special-token masking.
//! - [`config`] and [`cli`]: the experiment driver.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod training;
pub mod warmstart;

pub use corpus::{ClientDataset, TokenSequence, Vocabulary};
pub use embeddings::{EmbeddingMatrix, EmbeddingTable, PcaBasis};
pub use federation::{FederatedConfig, RoundReport};
pub use metrics::{EvalResult, MaskMode};
pub use model::{ModelConfig, ModelParameters};
pub use optim::{AdamHyper, AdamState};

/// Crate-level error, wrapping the per-module errors.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Embedding(#[from] embeddings::EmbeddingError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] model::CheckpointError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Federation(#[from] federation::FederationError),
    #[error(transparent)]
    Warmstart(#[from] warmstart::WarmstartError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
