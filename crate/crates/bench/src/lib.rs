//! Fixtures shared by the benchmarks in `benches/`.

use decoy_core::policy::TeamBatch;
use decoy_core::{EnvConfig, NetworkConfig, PolicyParams, WorldState};

/// A freshly initialized network of width `hidden`.
pub fn network(hidden: usize) -> PolicyParams {
    PolicyParams::new(&NetworkConfig { hidden, init_seed: 3 }).expect("valid width")
}

/// Observations of `teams` independent episodes at their first step.
pub fn batch(teams: usize, env: &EnvConfig) -> TeamBatch {
    let first = WorldState::reset(0, env).expect("valid config").observe_all();
    let mut b = TeamBatch::new(env.n_good, first[0].entity_relpos.len(), first[0].opponent_relpos.len());
    for t in 0..teams {
        let s = WorldState::reset(t as u64, env).expect("valid config");
        b.push_team(&s.observe_all()).expect("consistent team size");
    }
    b
}

/// Deterministic pseudo-random cost matrix with entries in `[0, 3)`.
pub fn cost_matrix(n: usize, salt: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let h = decoy_core::ppo::mix_seed(salt, (i * n + j) as u64);
                    (h >> 11) as f64 / (1u64 << 53) as f64 * 3.0
                })
                .collect()
        })
        .collect()
}
