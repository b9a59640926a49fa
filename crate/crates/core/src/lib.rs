//! Variational graph generative-contrastive collaborative filtering.
//!
//! Node embeddings are smoothed over the normalized user–item graph into
//! per-node Gaussians. Sampled views of those Gaussians feed node-level and
//! prototype-level contrastive losses next to a pairwise reconstruction term.

pub mod checkpoint;
pub mod clustering;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use clustering::{AssignMode, ClusterModel, KMeansConfig};
pub use dataset::{
    build_graph, split_holdout, InteractionTable, LoadOptions, NormalizedAdjacency, SplitDataset, SplitManifest,
    TrainingTriple,
};
pub use encoder::{GaussianParams, GraphEncoder, ModelParams};
pub use error::{Error, Result};
pub use evaluator::{evaluate, group_analysis, MetricsReport};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use linalg::DenseMatrix;
pub use losses::{LossConfig, Reduction};
pub use trainer::{train, TrainConfig, TrainOutcome, TrainStatus, Variant};
