//! Collaborative filtering with graph neural ODEs.
//!
//! User and item embeddings are evolved by a linear ODE whose derivative is a
//! stack of normalized-adjacency propagation hops, integrated with explicit
//! Euler or RK4. The initial embeddings are trained with BPR through exact
//! reverse passes of the solver and evaluated with leave-one-out top-N
//! ranking.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod solver;
pub mod train;

pub use data::{
    k_core_filter, leave_one_out_split, parse_interactions, read_interactions, CoreMode, FieldSpec,
    InteractionLog, ParseStats, RawInteraction, SplitDataset,
};
pub use embedding::{init_embeddings, EmbeddingMatrix};
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_with, ndcg_at_n, rank_heldout, recall_at_n, EvalMode, EvalOptions, MetricsReport, RankResult};
pub use graph::{build_adjacency, build_adjacency_with, spmm, AdjacencyOptions, SparseAdjacency};
pub use model::{
    derivative, integrate, lightgcn_forward, predict_scores, FinalEmbeddings, LightGcnState, ModelState,
    SolverConfig, TrainableModel,
};
pub use solver::{SolverMethod, SolverTape};
pub use train::{adam_step, bpr_loss, fit, write_training_log, EpochRecord, StopReason, sample_triplets, FitOutcome, GradientSet, OptimizerState, TrainConfig, TripletBatch};
