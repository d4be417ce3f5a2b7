//! Assignment-based coverage distance and episode metrics.

pub mod matching;
pub mod metrics;

pub use matching::{min_cost_matching, Matching};
pub use metrics::{
    evaluate, evaluate_policy, read_episode_csv, target_select_count, write_episode_csv, EpisodeMetrics, MeanStd,
    MetricsReport,
};
