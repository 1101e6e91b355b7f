//! Iterative block-wise combinatorial pruning for small feedforward
//! classifiers.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod pruner;
pub mod rng;
pub mod runlog;
pub mod scoring;
pub mod solver;
pub mod state;

pub use error::{Error, Result};

pub use block::{build_qcbo, estimate_hessian, select_block, Block, QcboProblem};
pub use config::{parse_config, parse_config_str, RunConfig};
pub use data::{load_idx, sample_batch, synthetic_blobs, Dataset, Split};
pub use linalg::Matrix;
pub use nn::{Batch, Dense, Mlp, TrainOptions, TrainReport};
pub use pruner::{baseline_prune, fraction_optimized, pick_layer, run_icbs, EpochRecord, Pruner};
pub use scoring::{score, Method, Scope, ScoreVector, ScoringSpec};
pub use solver::{brute_force, solve_csa, to_qubo, SaSchedule, Solution};
pub use state::PruneState;
