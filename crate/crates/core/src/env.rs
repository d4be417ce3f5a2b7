//! 2D deception environment.
//!
//! `N` good agents and one heuristic adversary move under double-integrator
//! dynamics among `N` landmarks, one of which is the target. Good agents
//! know the target; the adversary greedily heads for whichever landmark
//! currently has a good agent closest to it.

use std::ops::{Add, Mul, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::matching::min_cost_matching;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Physical and episode parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_good: usize,
    pub episode_length: usize,
    pub dt: f64,
    pub damping: f64,
    pub force_scale: f64,
    pub max_speed: f64,
    pub landmark_separation: f64,
    /// Upper clip of the deception reward.
    pub deception_clip: f64,
    /// Distance threshold shared by both threshold metrics.
    pub threshold: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_good: 2,
            episode_length: 50,
            dt: 0.1,
            damping: 0.25,
            force_scale: 5.0,
            max_speed: 1.3,
            landmark_separation: 0.3,
            deception_clip: 4.0,
            threshold: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("env.{field}: {why}")));
        if self.n_good < 2 {
            return bad("n_good", "must be at least 2");
        }
        if self.episode_length == 0 {
            return bad("episode_length", "must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt", "must be positive");
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad("damping", "must lie in [0, 1)");
        }
        if !(self.force_scale > 0.0) {
            return bad("force_scale", "must be positive");
        }
        if !(self.max_speed > 0.0) {
            return bad("max_speed", "must be positive");
        }
        if !(self.landmark_separation >= 0.0) || self.landmark_separation > 1.0 {
            return bad("landmark_separation", "must lie in [0, 1]");
        }
        if !(self.deception_clip > 0.0) {
            return bad("deception_clip", "must be positive");
        }
        if !(self.threshold > 0.0) {
            return bad("threshold", "must be positive");
        }
        Ok(())
    }

    pub fn with_agents(&self, n_good: usize) -> Self {
        Self {
            n_good,
            ..self.clone()
        }
    }
}

/// Coverage/deception mixing weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub coverage: f64,
    pub deception: f64,
}

impl RewardWeights {
    pub const COVERAGE_ONLY: RewardWeights = RewardWeights {
        coverage: 1.0,
        deception: 0.0,
    };

    /// Weights with `w_dec = deception` and `w_cov = 1 - deception`.
    pub fn from_deception(deception: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&deception) {
            return Err(Error::argument(format!(
                "deception weight {deception} outside [0, 1]"
            )));
        }
        Ok(Self {
            coverage: 1.0 - deception,
            deception,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeamReward {
    pub coverage: f64,
    pub deception: f64,
    pub weighted_total: f64,
}

impl TeamReward {
    pub fn combine(coverage: f64, deception: f64, w: RewardWeights) -> Self {
        Self {
            coverage,
            deception,
            weighted_total: w.coverage * coverage + w.deception * deception,
        }
    }
}

/// Discrete good-agent action: no-op or unit acceleration along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Noop,
    PosX,
    NegX,
    PosY,
    NegY,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Noop, Action::PosX, Action::NegX, Action::PosY, Action::NegY];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::argument(format!("action index {i} outside 0..{}", Self::COUNT)))
    }

    pub fn acceleration(self) -> Vec2 {
        match self {
            Action::Noop => Vec2::ZERO,
            Action::PosX => Vec2::new(1.0, 0.0),
            Action::NegX => Vec2::new(-1.0, 0.0),
            Action::PosY => Vec2::new(0.0, 1.0),
            Action::NegY => Vec2::new(0.0, -1.0),
        }
    }
}

/// One double-integrator step. Acceleration components are clipped to
/// `[-1, 1]` and speed to `max_speed`.
pub fn integrate(pos: Vec2, vel: Vec2, accel: Vec2, cfg: &EnvConfig) -> (Vec2, Vec2) {
    let a = Vec2::new(accel.x.clamp(-1.0, 1.0), accel.y.clamp(-1.0, 1.0));
    let mut v = vel * (1.0 - cfg.damping) + a * (cfg.force_scale * cfg.dt);
    let speed = v.norm();
    if speed > cfg.max_speed {
        v = v * (cfg.max_speed / speed);
    }
    (pos + v * cfg.dt, v)
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub good_positions: Vec<Vec2>,
    pub good_velocities: Vec<Vec2>,
    pub adversary_position: Vec2,
    pub adversary_velocity: Vec2,
    pub landmark_positions: Vec<Vec2>,
    pub target_index: usize,
    pub step: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl PartialEq for WorldState {
    fn eq(&self, o: &Self) -> bool {
        self.good_positions == o.good_positions
            && self.good_velocities == o.good_velocities
            && self.adversary_position == o.adversary_position
            && self.adversary_velocity == o.adversary_velocity
            && self.landmark_positions == o.landmark_positions
            && self.target_index == o.target_index
            && self.step == o.step
            && self.seed == o.seed
            && self.rng == o.rng
    }
}

/// One agent's egocentric view.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Own position followed by own velocity.
    pub self_state: [f64; 4],
    pub entity_relpos: Vec<Vec2>,
    pub target_flags: Vec<bool>,
    pub opponent_relpos: Vec<Vec2>,
}

/// Result of [`WorldState::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: TeamReward,
    pub done: bool,
    /// Landmark the adversary steered toward during this step.
    pub adversary_choice: usize,
}

const ADVERSARY_DEADBAND: f64 = 1e-6;

fn uniform_point(rng: &mut ChaCha8Rng) -> Vec2 {
    Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

impl WorldState {
    /// Fresh episode fully determined by `seed`.
    pub fn reset(seed: u64, cfg: &EnvConfig) -> Result<Self> {
        if cfg.n_good < 2 {
            return Err(Error::argument(format!(
                "need at least 2 good agents, got {}",
                cfg.n_good
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.n_good;
        let mut landmarks: Vec<Vec2> = Vec::with_capacity(n);
        while landmarks.len() < n {
            let p = uniform_point(&mut rng);
            if landmarks.iter().all(|q| q.dist(p) >= cfg.landmark_separation) {
                landmarks.push(p);
            }
        }
        let good_positions = (0..n).map(|_| uniform_point(&mut rng)).collect();
        let adversary_position = uniform_point(&mut rng);
        let target_index = rng.random_range(0..n);
        Ok(Self {
            good_positions,
            good_velocities: vec![Vec2::ZERO; n],
            adversary_position,
            adversary_velocity: Vec2::ZERO,
            landmark_positions: landmarks,
            target_index,
            step: 0,
            seed,
            rng,
        })
    }

    pub fn n_good(&self) -> usize {
        self.good_positions.len()
    }

    pub fn target_position(&self) -> Vec2 {
        self.landmark_positions[self.target_index]
    }

    /// Landmark whose nearest good agent is closest; ties go to the lowest index.
    pub fn adversary_choice(&self) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, l) in self.landmark_positions.iter().enumerate() {
            let d = self
                .good_positions
                .iter()
                .map(|g| g.dist(*l))
                .fold(f64::INFINITY, f64::min);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Heuristic adversary acceleration: toward the chosen landmark, with
    /// magnitude clipped to 1 and a small deadband at the landmark.
    pub fn heuristic_adversary(&self) -> Vec2 {
        let goal = self.landmark_positions[self.adversary_choice()];
        let d = goal - self.adversary_position;
        let len = d.norm();
        if len < ADVERSARY_DEADBAND {
            Vec2::ZERO
        } else if len > 1.0 {
            d * (1.0 / len)
        } else {
            d
        }
    }

    pub fn observe(&self, agent: usize) -> Observation {
        let p = self.good_positions[agent];
        let v = self.good_velocities[agent];
        Observation {
            self_state: [p.x, p.y, v.x, v.y],
            entity_relpos: self.landmark_positions.iter().map(|l| *l - p).collect(),
            target_flags: (0..self.landmark_positions.len())
                .map(|k| k == self.target_index)
                .collect(),
            opponent_relpos: vec![self.adversary_position - p],
        }
    }

    pub fn observe_all(&self) -> Vec<Observation> {
        (0..self.n_good()).map(|i| self.observe(i)).collect()
    }

    /// Mean agent–landmark distance under the optimal one-to-one matching.
    pub fn bipartite_distance(&self) -> f64 {
        let cost: Vec<Vec<f64>> = self
            .good_positions
            .iter()
            .map(|g| self.landmark_positions.iter().map(|l| g.dist(*l)).collect())
            .collect();
        min_cost_matching(&cost)
            .expect("agent and landmark counts are equal by construction")
            .mean_cost
    }

    pub fn coverage_reward(&self) -> f64 {
        -self.bipartite_distance()
    }

    pub fn adversary_target_distance(&self) -> f64 {
        self.adversary_position.dist(self.target_position())
    }

    pub fn deception_reward(&self, cfg: &EnvConfig) -> f64 {
        self.adversary_target_distance().clamp(0.0, cfg.deception_clip)
    }

    pub fn team_reward(&self, cfg: &EnvConfig, weights: RewardWeights) -> TeamReward {
        TeamReward::combine(self.coverage_reward(), self.deception_reward(cfg), weights)
    }

    /// Advances every entity by one tick; rewards are computed on the new state.
    pub fn step(&mut self, actions: &[usize], weights: RewardWeights, cfg: &EnvConfig) -> Result<StepOutcome> {
        if self.step >= cfg.episode_length {
            return Err(Error::argument(format!(
                "episode already finished after {} steps",
                self.step
            )));
        }
        if actions.len() != self.n_good() {
            return Err(Error::argument(format!(
                "expected {} actions, got {}",
                self.n_good(),
                actions.len()
            )));
        }
        let accels = actions
            .iter()
            .map(|&a| Action::from_index(a).map(Action::acceleration))
            .collect::<Result<Vec<_>>>()?;

        let choice = self.adversary_choice();
        let adv_accel = self.heuristic_adversary();
        for (i, a) in accels.into_iter().enumerate() {
            let (p, v) = integrate(self.good_positions[i], self.good_velocities[i], a, cfg);
            self.good_positions[i] = p;
            self.good_velocities[i] = v;
        }
        let (p, v) = integrate(self.adversary_position, self.adversary_velocity, adv_accel, cfg);
        self.adversary_position = p;
        self.adversary_velocity = v;
        self.step += 1;

        Ok(StepOutcome {
            reward: self.team_reward(cfg, weights),
            done: self.step == cfg.episode_length,
            adversary_choice: choice,
        })
    }
}
