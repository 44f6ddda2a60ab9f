//! Embedding-based recommender training with stochastically shared embeddings.
//!
//! The crate trains matrix factorization (explicit feedback, squared loss) and
//! Bayesian personalized ranking (implicit feedback, pairwise logistic loss)
//! models whose user/item embedding tables are regularized by stochastic
//! embedding replacement: during each SGD step the looked-up embedding index
//! may transition to another index drawn from a per-table transition model.
//! Two transition families are provided, one driven by a knowledge graph over
//! the table's indices and one assuming a complete graph (uniform
//! off-diagonal mass), alongside the classical baselines they are compared
//! against (dropout, weight decay, graph Laplacian regularization).
//!
//! Modules:
//! - [`dataset`]: TSV ingestion, id remapping, deterministic splits, and a
//!   clustered synthetic generator with a matching item graph.
//! - [`graph`]: knowledge graphs, transition models, and exact-probability
//!   replacement sampling.
//! - [`embedding`]: trainable tables, seeded init, inverted dropout.
//! - [`models`]: losses with analytic gradients, the SGD trainer, and an
//!   exact enumeration of the replacement-averaged objective.
//! - [`eval`]: RMSE, precision@k, and PCA projection of tables.
//! - [`theory`]: Rademacher-style sample simulation and the label-smoothing
//!   equivalence check.
//! - [`cli`]: the `sse` experiment runner (gen/train/sweep/eval/pca/radsim).

pub mod cli;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod graph;
pub mod models;
pub mod theory;

pub use dataset::{IdMap, Interaction, InteractionDataset, Split};
pub use embedding::{EmbeddingTable, ModelParams};
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use graph::{KnowledgeGraph, TransitionModel};
pub use models::{ModelKind, TrainConfig, TrainReport};
