//! Episode-level evaluation statistics for the good team and the adversary.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, RewardWeights, WorldState};
use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams, TeamBatch};
use crate::ppo::mix_seed;

/// Chooses actions for a batch of teams stepping in lockstep.
pub trait TeamPolicy {
    fn act(&mut self, states: &[WorldState]) -> Result<Vec<Vec<usize>>>;
}

/// Argmax actions of a trained policy.
pub struct GreedyPolicy<'a>(pub &'a PolicyParams);

impl TeamPolicy for GreedyPolicy<'_> {
    fn act(&mut self, states: &[WorldState]) -> Result<Vec<Vec<usize>>> {
        let first = states
            .first()
            .ok_or_else(|| Error::argument("no states to act on"))?
            .observe(0);
        let n = states[0].n_good();
        let mut batch = TeamBatch::new(n, first.entity_relpos.len(), first.opponent_relpos.len());
        for s in states {
            batch.push_team(&s.observe_all())?;
        }
        let out = policy::infer(self.0, &batch)?;
        Ok(out
            .distributions
            .chunks(n)
            .map(|team| team.iter().map(|d| d.argmax()).collect())
            .collect())
    }
}

/// Uniformly random actions.
pub struct RandomPolicy(pub ChaCha8Rng);

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl TeamPolicy for RandomPolicy {
    fn act(&mut self, states: &[WorldState]) -> Result<Vec<Vec<usize>>> {
        use rand::Rng;
        Ok(states
            .iter()
            .map(|s| (0..s.n_good()).map(|_| self.0.random_range(0..Action::COUNT)).collect())
            .collect())
    }
}

/// Raw per-episode statistics; one CSV row each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub episode_seed: u64,
    pub bipartite_distance: f64,
    pub good_threshold_steps: usize,
    pub target_distance: f64,
    pub adversary_threshold_steps: usize,
    pub target_select: usize,
}

/// Number of steps at which the adversary steered toward the target.
pub fn target_select_count(choices: &[usize], target: usize) -> usize {
    choices.iter().filter(|&&c| c == target).count()
}

/// Per-step record kept while an episode runs.
#[derive(Clone, Debug, Default)]
pub struct EpisodeTrace {
    pub bipartite: Vec<f64>,
    pub target_distance: Vec<f64>,
    pub adversary_choices: Vec<usize>,
    pub target_index: usize,
}

impl EpisodeTrace {
    pub fn summarize(&self, episode: usize, episode_seed: u64, threshold: f64) -> EpisodeMetrics {
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        EpisodeMetrics {
            episode,
            episode_seed,
            bipartite_distance: mean(&self.bipartite),
            good_threshold_steps: self.bipartite.iter().filter(|d| **d <= threshold).count(),
            target_distance: mean(&self.target_distance),
            adversary_threshold_steps: self.target_distance.iter().filter(|d| **d <= threshold).count(),
            target_select: target_select_count(&self.adversary_choices, self.target_index),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// The five evaluation statistics aggregated over episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub seed: u64,
    pub n_good: usize,
    pub bipartite_distance: MeanStd,
    pub good_threshold_steps: MeanStd,
    pub target_distance: MeanStd,
    pub adversary_threshold_steps: MeanStd,
    pub target_select: MeanStd,
}

impl MetricsReport {
    pub fn from_episodes(rows: &[EpisodeMetrics], seed: u64, n_good: usize) -> Self {
        Self {
            episodes: rows.len(),
            seed,
            n_good,
            bipartite_distance: MeanStd::of(rows.iter().map(|r| r.bipartite_distance)),
            good_threshold_steps: MeanStd::of(rows.iter().map(|r| r.good_threshold_steps as f64)),
            target_distance: MeanStd::of(rows.iter().map(|r| r.target_distance)),
            adversary_threshold_steps: MeanStd::of(rows.iter().map(|r| r.adversary_threshold_steps as f64)),
            target_select: MeanStd::of(rows.iter().map(|r| r.target_select as f64)),
        }
    }
}

/// Runs already-initialized episodes to completion in lockstep.
pub fn run_episodes(
    mut states: Vec<WorldState>,
    policy: &mut dyn TeamPolicy,
    env_cfg: &EnvConfig,
) -> Result<Vec<EpisodeTrace>> {
    let mut traces: Vec<EpisodeTrace> = states
        .iter()
        .map(|s| EpisodeTrace {
            target_index: s.target_index,
            ..Default::default()
        })
        .collect();
    if states.is_empty() {
        return Ok(traces);
    }
    while states[0].step < env_cfg.episode_length {
        let actions = policy.act(&states)?;
        for ((s, a), tr) in states.iter_mut().zip(&actions).zip(traces.iter_mut()) {
            let out = s.step(a, RewardWeights::COVERAGE_ONLY, env_cfg)?;
            tr.adversary_choices.push(out.adversary_choice);
            tr.bipartite.push(s.bipartite_distance());
            tr.target_distance.push(s.adversary_target_distance());
        }
    }
    Ok(traces)
}

pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    mix_seed(seed ^ 0xe7a1, episode as u64)
}

/// Seeded evaluation over `n_episodes` fresh episodes.
pub fn evaluate_policy(
    policy: &mut dyn TeamPolicy,
    env_cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<(MetricsReport, Vec<EpisodeMetrics>)> {
    if n_episodes == 0 {
        return Err(Error::argument("evaluation needs at least one episode"));
    }
    let seeds: Vec<u64> = (0..n_episodes).map(|k| episode_seed(seed, k)).collect();
    let states = seeds
        .iter()
        .map(|&s| WorldState::reset(s, env_cfg))
        .collect::<Result<Vec<_>>>()?;
    let traces = run_episodes(states, policy, env_cfg)?;
    let rows: Vec<EpisodeMetrics> = traces
        .iter()
        .enumerate()
        .map(|(k, tr)| tr.summarize(k, seeds[k], env_cfg.threshold))
        .collect();
    Ok((MetricsReport::from_episodes(&rows, seed, env_cfg.n_good), rows))
}

/// Greedy-action evaluation of `params`.
pub fn evaluate(
    params: &PolicyParams,
    env_cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<(MetricsReport, Vec<EpisodeMetrics>)> {
    evaluate_policy(&mut GreedyPolicy(params), env_cfg, n_episodes, seed)
}

/// Column order of the per-episode CSV; stable within a format version.
pub const EPISODE_CSV_HEADER: [&str; 9] = [
    "episode",
    "episode_seed",
    "bipartite_distance",
    "good_threshold_steps",
    "target_distance",
    "adversary_threshold_steps",
    "target_select",
    "master_seed",
    "config_hash",
];

pub fn write_episode_csv<W: Write>(out: W, rows: &[EpisodeMetrics], master_seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPISODE_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.episode_seed.to_string(),
            format!("{:?}", r.bipartite_distance),
            r.good_threshold_steps.to_string(),
            format!("{:?}", r.target_distance),
            r.adversary_threshold_steps.to_string(),
            r.target_select.to_string(),
            master_seed.to_string(),
            config_hash.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<episode csv>", e))?;
    Ok(())
}

pub fn read_episode_csv<R: std::io::Read>(input: R) -> Result<Vec<EpisodeMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let parse_err = |i: usize| Error::argument(format!("bad value `{}` in column {}", field(i), EPISODE_CSV_HEADER[i]));
        rows.push(EpisodeMetrics {
            episode: field(0).parse().map_err(|_| parse_err(0))?,
            episode_seed: field(1).parse().map_err(|_| parse_err(1))?,
            bipartite_distance: field(2).parse().map_err(|_| parse_err(2))?,
            good_threshold_steps: field(3).parse().map_err(|_| parse_err(3))?,
            target_distance: field(4).parse().map_err(|_| parse_err(4))?,
            adversary_threshold_steps: field(5).parse().map_err(|_| parse_err(5))?,
            target_select: field(6).parse().map_err(|_| parse_err(6))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Vec2;

    struct Still;
    impl TeamPolicy for Still {
        fn act(&mut self, states: &[WorldState]) -> Result<Vec<Vec<usize>>> {
            Ok(states.iter().map(|s| vec![0; s.n_good()]).collect())
        }
    }

    fn covered_state(n: usize, seed: u64) -> WorldState {
        let cfg = EnvConfig::default().with_agents(n);
        let mut s = WorldState::reset(seed, &cfg).unwrap();
        s.good_positions = s.landmark_positions.clone();
        s
    }

    #[test]
    fn target_select_counts() {
        assert_eq!(target_select_count(&[1, 2, 1, 2], 0), 0);
        assert_eq!(target_select_count(&[0; 50], 0), 50);
    }

    #[test]
    fn perfect_cover_episode() {
        let cfg = EnvConfig::default();
        let traces = run_episodes(vec![covered_state(2, 1), covered_state(2, 2)], &mut Still, &cfg).unwrap();
        for tr in &traces {
            let m = tr.summarize(0, 0, cfg.threshold);
            assert_eq!(m.bipartite_distance, 0.0);
            assert_eq!(m.good_threshold_steps, cfg.episode_length);
        }
    }

    #[test]
    fn pinned_adversary_counts_every_step() {
        let cfg = EnvConfig::default().with_agents(3);
        let mut s = WorldState::reset(4, &cfg).unwrap();
        let target = s.target_position();
        s.adversary_position = target;
        s.good_positions = vec![target, Vec2::new(9.0, 9.0), Vec2::new(-9.0, 9.0)];
        let traces = run_episodes(vec![s], &mut Still, &cfg).unwrap();
        let m = traces[0].summarize(0, 0, cfg.threshold);
        assert_eq!(m.adversary_threshold_steps, cfg.episode_length);
        assert_eq!(m.target_select, cfg.episode_length);
    }

    #[test]
    fn report_statistics() {
        let ms = MeanStd::of([1.0, 3.0]);
        assert_eq!(ms.mean, 2.0);
        assert_eq!(ms.std, 1.0);
    }

    #[test]
    fn evaluation_reproducible_and_records_episode_count() {
        let cfg = EnvConfig::default();
        let params = PolicyParams::new(&crate::policy::NetworkConfig {
            hidden: 8,
            init_seed: 0,
        })
        .unwrap();
        let (a, rows) = evaluate(&params, &cfg, 5, 42).unwrap();
        let (b, _) = evaluate(&params, &cfg, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes, 5);
        assert_eq!(rows.len(), 5);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![EpisodeMetrics {
            episode: 0,
            episode_seed: 99,
            bipartite_distance: 0.1234567890123,
            good_threshold_steps: 12,
            target_distance: 0.75,
            adversary_threshold_steps: 3,
            target_select: 20,
        }];
        let mut buf = Vec::new();
        write_episode_csv(&mut buf, &rows, 7, "abc").unwrap();
        assert_eq!(read_episode_csv(&buf[..]).unwrap(), rows);
    }
}
