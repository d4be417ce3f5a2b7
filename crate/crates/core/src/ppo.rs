//! Clipped-surrogate PPO over team rollouts.
//!
//! Every agent in a team shares the same parameters and receives the same
//! team reward. The critic value of a team step is the mean of the agents'
//! value estimates; advantages are computed per environment trajectory and
//! broadcast to every agent of the step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{clip_global_norm, Adam, Graph, Tensor, Var};
use crate::env::{EnvConfig, RewardWeights, TeamReward, WorldState};
use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams, TeamBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Minibatch size in agent-steps; rounded down to whole team steps.
    pub minibatch: usize,
    /// Environment steps per update, summed over all parallel instances.
    pub horizon: usize,
    pub n_envs: usize,
    pub total_steps: u64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Decay the learning rate linearly to zero over each stage's updates.
    pub lr_anneal: bool,
    pub max_grad_norm: f64,
    /// Multiplies team rewards before advantage estimation.
    pub reward_scale: f64,
    /// Evaluate every this many updates.
    pub eval_every: usize,
    /// Persist a checkpoint every this many updates.
    pub checkpoint_every: usize,
    /// Approximate-KL level above which an update is logged as a violation.
    pub kl_guard: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            lam: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            horizon: 2000,
            n_envs: 8,
            total_steps: 2_000_000,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 1e-3,
            lr_anneal: true,
            max_grad_norm: 0.5,
            reward_scale: 0.1,
            eval_every: 10,
            checkpoint_every: 50,
            kl_guard: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]".into());
        }
        if !(self.lam > 0.0 && self.lam <= 1.0) {
            return bad("lam", "must lie in (0, 1]".into());
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip", "must lie in (0, 1)".into());
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("horizon", self.horizon),
            ("n_envs", self.n_envs),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be positive".into());
        }
        if !self.horizon.is_multiple_of(self.n_envs) || !(self.horizon / self.n_envs).is_multiple_of(env.episode_length) {
            return bad(
                "horizon",
                format!(
                    "{} steps over {} environments must give a whole number of {}-step episodes each",
                    self.horizon, self.n_envs, env.episode_length
                ),
            );
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale", "must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive".into());
        }
        Ok(())
    }

    /// Learning rate for an update after `progress` (fraction of the stage
    /// already done).
    pub fn lr_at(&self, progress: f64) -> f64 {
        if self.lr_anneal {
            self.lr * (1.0 - progress.clamp(0.0, 1.0))
        } else {
            self.lr
        }
    }

    pub fn steps_per_env(&self) -> usize {
        self.horizon / self.n_envs
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from a master seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trajectories of `n_envs` environments for `steps_per_env` steps each.
/// Team step `k` of environment `e` lives at index `e * steps_per_env + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps_per_env: usize,
    pub agents: usize,
    pub inputs: TeamBatch,
    /// Per (step, agent).
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Per team step.
    pub team_values: Vec<f64>,
    pub rewards: Vec<TeamReward>,
    pub dones: Vec<bool>,
    pub weights: RewardWeights,
    /// Per (step, agent); filled by [`RolloutBatch::compute_advantages`].
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn team_steps(&self) -> usize {
        self.rewards.len()
    }

    /// Mean per-episode sum of weighted team reward.
    pub fn mean_episode_return(&self) -> f64 {
        let total: f64 = self.rewards.iter().map(|r| r.weighted_total).sum();
        let episodes = self.dones.iter().filter(|d| **d).count().max(1);
        total / episodes as f64
    }

    /// GAE over every environment trajectory, then per-batch advantage
    /// normalization. Returns are `advantage + value` before normalization.
    pub fn compute_advantages(&mut self, gamma: f64, lam: f64, reward_scale: f64) {
        let n = self.agents;
        let t = self.steps_per_env;
        let mut team_adv = vec![0.0; self.team_steps()];
        let mut team_ret = vec![0.0; self.team_steps()];
        for e in 0..self.n_envs {
            let range = e * t..(e + 1) * t;
            let rewards: Vec<f64> = self.rewards[range.clone()].iter().map(|r| r.weighted_total * reward_scale).collect();
            let (adv, ret) = compute_gae(&rewards, &self.team_values[range.clone()], &self.dones[range.clone()], 0.0, gamma, lam);
            team_adv[range.clone()].copy_from_slice(&adv);
            team_ret[range].copy_from_slice(&ret);
        }
        let mut advantages: Vec<f64> = team_adv.iter().flat_map(|a| std::iter::repeat_n(*a, n)).collect();
        normalize(&mut advantages);
        self.advantages = advantages;
        self.returns = team_ret.iter().flat_map(|r| std::iter::repeat_n(*r, n)).collect();
    }
}

/// Generalized advantage estimation along one trajectory.
///
/// `dones[t]` marks the last step of an episode: the value after it is
/// taken as 0. `bootstrap` is the value after the final step when that step
/// is not terminal.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, cont) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (bootstrap, 1.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lam * cont * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0, standard deviation 1 (population).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
    // remove the residual mean left by rounding
    let resid = xs.iter().sum::<f64>() / n;
    for x in xs.iter_mut() {
        *x -= resid;
    }
}

/// Runs `cfg.n_envs` seeded environments for one update's horizon with
/// actions sampled from the current policy.
pub fn collect_rollouts(
    env_cfg: &EnvConfig,
    params: &PolicyParams,
    cfg: &TrainConfig,
    weights: RewardWeights,
    seed: u64,
) -> Result<RolloutBatch> {
    let n = env_cfg.n_good;
    let t_env = cfg.steps_per_env();
    let team_steps = cfg.n_envs * t_env;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xac7));
    let episode_seed = |env: usize, episode: usize| mix_seed(mix_seed(seed, env as u64 + 1), episode as u64 + 1);

    let mut envs = (0..cfg.n_envs)
        .map(|e| WorldState::reset(episode_seed(e, 0), env_cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut episode_index = vec![0usize; cfg.n_envs];

    // per-environment step records, stitched env-major at the end
    struct Step {
        inputs: TeamBatch,
        actions: Vec<usize>,
        log_probs: Vec<f64>,
        values: Vec<f64>,
        reward: TeamReward,
        done: bool,
    }
    let mut records: Vec<Vec<Step>> = (0..cfg.n_envs).map(|_| Vec::with_capacity(t_env)).collect();

    let first = envs[0].observe(0);
    let (m, o) = (first.entity_relpos.len(), first.opponent_relpos.len());
    for _ in 0..t_env {
        let mut batch = TeamBatch::new(n, m, o);
        for env in &envs {
            batch.push_team(&env.observe_all())?;
        }
        let out = policy::infer(params, &batch)?;
        for (e, env) in envs.iter_mut().enumerate() {
            let dists = &out.distributions[e * n..(e + 1) * n];
            let actions: Vec<usize> = dists.iter().map(|d| d.sample(&mut rng)).collect();
            let log_probs = dists.iter().zip(&actions).map(|(d, &a)| d.log_prob(a)).collect();
            let values = out.values[e * n..(e + 1) * n].to_vec();
            let mut inputs = TeamBatch::new(n, m, o);
            inputs.push_from(&batch, e);
            let outcome = env.step(&actions, weights, env_cfg)?;
            records[e].push(Step {
                inputs,
                actions,
                log_probs,
                values,
                reward: outcome.reward,
                done: outcome.done,
            });
            if outcome.done {
                episode_index[e] += 1;
                *env = WorldState::reset(episode_seed(e, episode_index[e]), env_cfg)?;
            }
        }
    }

    let mut batch = RolloutBatch {
        n_envs: cfg.n_envs,
        steps_per_env: t_env,
        agents: n,
        inputs: TeamBatch::new(n, m, o),
        actions: Vec::with_capacity(team_steps * n),
        log_probs: Vec::with_capacity(team_steps * n),
        values: Vec::with_capacity(team_steps * n),
        team_values: Vec::with_capacity(team_steps),
        rewards: Vec::with_capacity(team_steps),
        dones: Vec::with_capacity(team_steps),
        weights,
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    for steps in records {
        for s in steps {
            batch.inputs.push_from(&s.inputs, 0);
            batch.team_values.push(s.values.iter().sum::<f64>() / n as f64);
            batch.actions.extend(s.actions);
            batch.log_probs.extend(s.log_probs);
            batch.values.extend(s.values);
            batch.rewards.push(s.reward);
            batch.dones.push(s.done);
        }
    }
    Ok(batch)
}

/// Rows of a rollout selected for one optimizer step.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub inputs: TeamBatch,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn from_rollout(batch: &RolloutBatch, team_steps: &[usize]) -> Self {
        let n = batch.agents;
        let mut inputs = TeamBatch::new(n, batch.inputs.entities, batch.inputs.opponents);
        let mut mb = Minibatch {
            inputs: TeamBatch::new(0, 0, 0),
            actions: Vec::with_capacity(team_steps.len() * n),
            old_log_probs: Vec::with_capacity(team_steps.len() * n),
            advantages: Vec::with_capacity(team_steps.len() * n),
            returns: Vec::with_capacity(team_steps.len() * n),
        };
        for &t in team_steps {
            inputs.push_from(&batch.inputs, t);
            let rows = t * n..(t + 1) * n;
            mb.actions.extend_from_slice(&batch.actions[rows.clone()]);
            mb.old_log_probs.extend_from_slice(&batch.log_probs[rows.clone()]);
            mb.advantages.extend_from_slice(&batch.advantages[rows.clone()]);
            mb.returns.extend_from_slice(&batch.returns[rows]);
        }
        mb.inputs = inputs;
        mb
    }
}

/// Scalar diagnostics of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Builds `-mean(min(ρA, clip(ρ, 1-ε, 1+ε)A)) + c_v·MSE(V, R) - c_e·H` on `g`.
pub fn ppo_loss(
    g: &mut Graph<'_>,
    params: &PolicyParams,
    mb: &Minibatch,
    clip: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<(Var, LossParts)> {
    let rows = mb.inputs.rows();
    let fwd = policy::forward(g, params, &mb.inputs)?;
    let logp_all = g.log_softmax(fwd.logits)?;
    let logp = g.gather(logp_all, mb.actions.clone())?;
    let old = g.constant(Tensor::vector(mb.old_log_probs.clone()));
    let adv = g.constant(Tensor::vector(mb.advantages.clone()));
    let log_ratio = g.sub(logp, old)?;
    let ratio = g.exp(log_ratio);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr_mean = g.mean(surr);
    let policy_loss = g.scale(surr_mean, -1.0);

    let ret = g.constant(Tensor::vector(mb.returns.clone()));
    let err = g.sub(fwd.values, ret)?;
    let sq = g.mul(err, err)?;
    let value_loss = g.mean(sq);

    let probs = g.softmax(fwd.logits)?;
    let plogp = g.mul(probs, logp_all)?;
    let neg_ent = g.sum_last(plogp);
    let neg_ent_mean = g.mean(neg_ent);

    let v_term = g.scale(value_loss, value_coef);
    let e_term = g.scale(neg_ent_mean, entropy_coef);
    let partial = g.add(policy_loss, v_term)?;
    let total = g.add(partial, e_term)?;

    let ratios = g.value(ratio).data();
    let lr = g.value(log_ratio).data();
    let approx_kl = ratios.iter().zip(lr).map(|(r, l)| (r - 1.0) - l).sum::<f64>() / rows as f64;
    let clip_fraction = ratios.iter().filter(|r| (**r - 1.0).abs() > clip).count() as f64 / rows as f64;
    let parts = LossParts {
        total: g.value(total).item(),
        surrogate: g.value(policy_loss).item(),
        value: g.value(value_loss).item(),
        entropy: -g.value(neg_ent_mean).item(),
        approx_kl,
        clip_fraction,
    };
    Ok((total, parts))
}

/// Averages over every minibatch step of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Epochs of shuffled minibatch optimization on one rollout batch.
pub fn ppo_update(
    params: &mut PolicyParams,
    opt: &mut Adam,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<UpdateStats> {
    if batch.advantages.len() != batch.actions.len() {
        return Err(Error::argument("rollout batch has no advantages; run compute_advantages first"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5bd));
    let per_mb = (cfg.minibatch / batch.agents).max(1);
    let mut order: Vec<usize> = (0..batch.team_steps()).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(per_mb) {
            let mb = Minibatch::from_rollout(batch, chunk);
            let (mut grads, parts) = {
                let mut g = Graph::with_params(&params.set);
                let (loss, parts) = ppo_loss(&mut g, params, &mb, cfg.clip, cfg.value_coef, cfg.entropy_coef)?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        update: opt.step,
                        last_checkpoint: String::new(),
                    });
                }
                (g.backward(loss)?.into_param_grads(), parts)
            };
            let norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
            opt.step(&mut params.set, &grads)?;
            stats.policy_loss += parts.surrogate;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.approx_kl += parts.approx_kl;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    Ok(stats)
}
