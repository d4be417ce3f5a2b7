//! Cooperative agents that learn to cover landmarks and mislead a heuristic
//! adversary, trained with a graph-attention communication policy and a
//! two-stage reward curriculum.

// Validation deliberately uses `!(x > 0.0)` so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod diffgraph;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod policy;
pub mod ppo;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{EvalConfig, RunConfig};
pub use curriculum::CurriculumPlan;
pub use env::{EnvConfig, Observation, RewardWeights, TeamReward, Vec2, WorldState};
pub use error::{CheckpointError, Error, Result};
pub use eval::matching::{min_cost_matching, Matching};
pub use policy::{ActionDistribution, NetworkConfig, PolicyParams};
pub use ppo::TrainConfig;
pub use train::{train_run, StageOutcome, TrainSummary};
