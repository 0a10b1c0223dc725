//! Task extraction from query logs with Bayesian rose trees.
//!
//! The pipeline: [`query_log`] parses and sessionizes a log, [`affinity`]
//! scores query pairs, [`rose_tree`] greedily builds a forest of tasks
//! under the [`likelihood`] model, [`pruning`] cuts incoherent subtrees and
//! [`evaluation`] scores the result.

pub mod affinity;
pub mod artifact;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod likelihood;
pub mod pruning;
pub mod query_log;
pub mod rose_tree;
pub mod synthetic;

pub use affinity::{AffinityModel, AffinityStats, EmbeddingTable, PairAffinity};
pub use artifact::ArtifactHeader;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use evaluation::{pairwise_prf, PairwiseScores, TaskIndex, TaskLabeling};
pub use hierarchy::{Hierarchy, HierarchyNode};
pub use likelihood::{GammaPoissonParams, ModelConfig};
pub use pruning::{CoherenceNormalization, CooccurrenceStats, PruneOptions};
pub use query_log::{LogCorpus, Query, QueryId, SessionId, TermId};
pub use rose_tree::{build_hierarchy, EngineOptions, Forest, MergeKind, NodeId, TaskTree};
