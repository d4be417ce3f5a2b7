//! Shared-parameter graph-attention policy.
//!
//! Per agent: a self encoder, attention pooling over landmark embeddings and
//! over opponent embeddings, concatenation into a latent `h`, one round of
//! key/value/query message passing restricted to the agent's own team, and
//! categorical-action and value heads on the updated latent.
//!
//! Every function here works on batches: `R = T·N` agent rows for `T` teams
//! of `N` agents, each seeing `M` entities and `O` opponents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};

pub const SELF_DIM: usize = 4;
pub const ENTITY_DIM: usize = 3;
pub const OPPONENT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp2 {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnProj {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    self_enc: Mlp2,
    entity_enc: Mlp2,
    opponent_enc: Mlp2,
    entity_attn: AttnProj,
    opponent_attn: AttnProj,
    msg_key: ParamId,
    msg_value: ParamId,
    msg_query: ParamId,
    update_w: ParamId,
    update_b: ParamId,
    policy_w: ParamId,
    policy_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
}

/// All learnable weights. One instance drives every good agent.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub set: ParamSet,
    hidden: usize,
    layout: Layout,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.hidden == other.hidden && self.set == other.set
    }
}

struct Init {
    rng: ChaCha8Rng,
    set: ParamSet,
}

impl Init {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.set.push(name, Tensor::matrix(rows, cols, data).unwrap())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.set.push(name, Tensor::zeros(shape))
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize) -> Mlp2 {
        Mlp2 {
            w1: self.matrix(&format!("{name}.w1"), hidden, input),
            b1: self.zeros(&format!("{name}.b1"), &[hidden]),
            w2: self.matrix(&format!("{name}.w2"), hidden, hidden),
            b2: self.zeros(&format!("{name}.b2"), &[hidden]),
        }
    }

    fn attn(&mut self, name: &str, hidden: usize) -> AttnProj {
        AttnProj {
            query: self.matrix(&format!("{name}.query"), hidden, hidden),
            key: self.matrix(&format!("{name}.key"), hidden, hidden),
            value: self.matrix(&format!("{name}.value"), hidden, hidden),
        }
    }
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases, zero policy and value heads.
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        let h = cfg.hidden;
        if h == 0 {
            return Err(Error::Config("network.hidden: must be positive".into()));
        }
        let latent = 3 * h;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
            set: ParamSet::new(),
        };
        let layout = Layout {
            self_enc: init.mlp("self_enc", SELF_DIM, h),
            entity_enc: init.mlp("entity_enc", ENTITY_DIM, h),
            opponent_enc: init.mlp("opponent_enc", OPPONENT_DIM, h),
            entity_attn: init.attn("entity_attn", h),
            opponent_attn: init.attn("opponent_attn", h),
            msg_key: init.matrix("msg.key", latent, latent),
            msg_value: init.matrix("msg.value", latent, latent),
            msg_query: init.matrix("msg.query", latent, latent),
            update_w: init.matrix("update.w", latent, 2 * latent),
            update_b: init.zeros("update.b", &[latent]),
            policy_w: init.zeros("policy_head.w", &[Action::COUNT, latent]),
            policy_b: init.zeros("policy_head.b", &[Action::COUNT]),
            value_w: init.zeros("value_head.w", &[1, latent]),
            value_b: init.zeros("value_head.b", &[1]),
        };
        Ok(Self {
            set: init.set,
            hidden: h,
            layout,
        })
    }

    /// Rebuilds parameters of width `hidden` from named tensors.
    pub fn from_named(hidden: usize, named: &[(String, Tensor)]) -> Result<Self> {
        let mut params = Self::new(&NetworkConfig {
            hidden,
            init_seed: 0,
        })?;
        if named.len() != params.set.len() {
            return Err(Error::argument(format!(
                "expected {} parameter tensors, found {}",
                params.set.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = params
                .set
                .find(name)
                .ok_or_else(|| Error::argument(format!("unknown parameter tensor `{name}`")))?;
            let slot = params.set.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn latent(&self) -> usize {
        3 * self.hidden
    }

    pub fn policy_head(&self) -> (ParamId, ParamId) {
        (self.layout.policy_w, self.layout.policy_b)
    }

    pub fn value_head(&self) -> (ParamId, ParamId) {
        (self.layout.value_w, self.layout.value_b)
    }

    pub fn self_encoder_output_layer(&self) -> (ParamId, ParamId) {
        (self.layout.self_enc.w2, self.layout.self_enc.b2)
    }
}

fn mlp(g: &mut Graph<'_>, m: &Mlp2, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(m.w1), g.param(m.b1), g.param(m.w2), g.param(m.b2));
    let z = g.affine(x, w1, Some(b1))?;
    let z = g.tanh(z);
    let z = g.affine(z, w2, Some(b2))?;
    Ok(g.tanh(z))
}

/// Softmax-weighted sum of value projections of `items` (`count` per row of
/// `query_src`), with scores from scaled dot products against a query
/// projection of `query_src`.
fn attention_pool(g: &mut Graph<'_>, proj: &AttnProj, query_src: Var, items: Var, count: usize, hidden: usize) -> Result<Var> {
    let (wq, wk, wv) = (g.param(proj.query), g.param(proj.key), g.param(proj.value));
    let q = g.affine(query_src, wq, None)?;
    let k = g.affine(items, wk, None)?;
    let v = g.affine(items, wv, None)?;
    let scores = g.pair_scores(q, k, 1, count, 1.0 / (hidden as f64).sqrt())?;
    let alpha = g.softmax(scores)?;
    g.pair_weighted_sum(alpha, v, 1, count)
}

/// `U = f_a(X)` for rows of own position and velocity.
pub fn encode_self(g: &mut Graph<'_>, p: &PolicyParams, x: Var) -> Result<Var> {
    mlp(g, &p.layout.self_enc, x)
}

/// Attention-pooled landmark embedding `E`. `entities` holds `count` rows of
/// (relative position, target flag) per agent row of `u`.
pub fn encode_environment(g: &mut Graph<'_>, p: &PolicyParams, u: Var, entities: Var, count: usize) -> Result<Var> {
    if count == 0 {
        return Err(Error::argument("environment encoder needs at least one entity"));
    }
    let e = mlp(g, &p.layout.entity_enc, entities)?;
    attention_pool(g, &p.layout.entity_attn, u, e, count, p.hidden)
}

/// Attention-pooled opponent embedding `O`; zeros when there are no opponents.
pub fn encode_opponents(g: &mut Graph<'_>, p: &PolicyParams, u: Var, opponents: Option<Var>, count: usize) -> Result<Var> {
    match opponents {
        Some(opps) if count > 0 => {
            let e = mlp(g, &p.layout.opponent_enc, opps)?;
            attention_pool(g, &p.layout.opponent_attn, u, e, count, p.hidden)
        }
        _ => {
            let rows = g.value(u).rows();
            Ok(g.constant(Tensor::zeros(&[rows, p.hidden])))
        }
    }
}

/// One round of in-team message passing over `h` (`team_size` consecutive
/// rows per team). Agent `i` weighs peer `j` by `softmax_j(K_i · Q_j / √d)`
/// over `j ≠ i`, aggregates `m_i = Σ_j α_ij V_j`, then updates
/// `h_i ← tanh(W_u [h_i; m_i] + b_u)`.
pub fn communicate(g: &mut Graph<'_>, p: &PolicyParams, h: Var, team_size: usize) -> Result<Var> {
    if team_size == 0 {
        return Err(Error::argument("communication needs a non-empty team"));
    }
    let rows = g.value(h).rows();
    if !rows.is_multiple_of(team_size) {
        return Err(Error::argument(format!(
            "{rows} latent rows do not split into teams of {team_size}"
        )));
    }
    let l = &p.layout;
    let (wk, wv, wq) = (g.param(l.msg_key), g.param(l.msg_value), g.param(l.msg_query));
    let key = g.affine(h, wk, None)?;
    let value = g.affine(h, wv, None)?;
    let query = g.affine(h, wq, None)?;
    let scores = g.pair_scores(key, query, team_size, team_size, 1.0 / (p.latent() as f64).sqrt())?;
    let mask: Vec<bool> = (0..rows * team_size)
        .map(|k| (k / team_size) % team_size != k % team_size)
        .collect();
    let alpha = g.masked_softmax(scores, mask)?;
    let message = g.pair_weighted_sum(alpha, value, team_size, team_size)?;
    let joined = g.concat(&[h, message])?;
    let (uw, ub) = (g.param(l.update_w), g.param(l.update_b));
    let z = g.affine(joined, uw, Some(ub))?;
    Ok(g.tanh(z))
}

pub fn action_logits(g: &mut Graph<'_>, p: &PolicyParams, h: Var) -> Result<Var> {
    let (w, b) = (g.param(p.layout.policy_w), g.param(p.layout.policy_b));
    g.affine(h, w, Some(b))
}

/// Per-row state-value estimate, shape `[R]`.
pub fn value_estimate(g: &mut Graph<'_>, p: &PolicyParams, h: Var) -> Result<Var> {
    let (w, b) = (g.param(p.layout.value_w), g.param(p.layout.value_b));
    let v = g.affine(h, w, Some(b))?;
    let rows = g.value(v).rows();
    g.reshape(v, &[rows])
}

/// Flattened network inputs for `teams` teams of `agents` agents.
#[derive(Clone, Debug, PartialEq)]
pub struct TeamBatch {
    pub teams: usize,
    pub agents: usize,
    pub entities: usize,
    pub opponents: usize,
    pub self_feats: Vec<f64>,
    pub entity_feats: Vec<f64>,
    pub opponent_feats: Vec<f64>,
}

impl TeamBatch {
    pub fn new(agents: usize, entities: usize, opponents: usize) -> Self {
        Self {
            teams: 0,
            agents,
            entities,
            opponents,
            self_feats: Vec::new(),
            entity_feats: Vec::new(),
            opponent_feats: Vec::new(),
        }
    }

    pub fn from_team(obs: &[Observation]) -> Result<Self> {
        let first = obs
            .first()
            .ok_or_else(|| Error::argument("empty team observation"))?;
        let mut b = Self::new(obs.len(), first.entity_relpos.len(), first.opponent_relpos.len());
        b.push_team(obs)?;
        Ok(b)
    }

    pub fn push_team(&mut self, obs: &[Observation]) -> Result<()> {
        if obs.len() != self.agents {
            return Err(Error::argument(format!(
                "team of {} observations in a batch of {}-agent teams",
                obs.len(),
                self.agents
            )));
        }
        for o in obs {
            if o.entity_relpos.len() != self.entities
                || o.target_flags.len() != self.entities
                || o.opponent_relpos.len() != self.opponents
            {
                return Err(Error::argument("observation entity/opponent counts differ within batch"));
            }
            self.self_feats.extend_from_slice(&o.self_state);
            for (rel, flag) in o.entity_relpos.iter().zip(&o.target_flags) {
                self.entity_feats.extend_from_slice(&[rel.x, rel.y, if *flag { 1.0 } else { 0.0 }]);
            }
            for rel in &o.opponent_relpos {
                self.opponent_feats.extend_from_slice(&[rel.x, rel.y]);
            }
        }
        self.teams += 1;
        Ok(())
    }

    /// Appends team `t` of `other` (same dimensions).
    pub fn push_from(&mut self, other: &TeamBatch, t: usize) {
        let n = self.agents;
        let (s, e, o) = (n * SELF_DIM, n * self.entities * ENTITY_DIM, n * self.opponents * OPPONENT_DIM);
        self.self_feats.extend_from_slice(&other.self_feats[t * s..(t + 1) * s]);
        self.entity_feats.extend_from_slice(&other.entity_feats[t * e..(t + 1) * e]);
        self.opponent_feats.extend_from_slice(&other.opponent_feats[t * o..(t + 1) * o]);
        self.teams += 1;
    }

    pub fn rows(&self) -> usize {
        self.teams * self.agents
    }
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub self_input: Var,
    pub u: Var,
    pub e: Var,
    pub o: Var,
    pub h0: Var,
    pub h: Var,
    pub logits: Var,
    pub values: Var,
}

/// Full team pipeline on a batch: encoders, one communication round, heads.
pub fn forward<'p>(g: &mut Graph<'p>, p: &PolicyParams, batch: &TeamBatch) -> Result<ForwardVars> {
    let rows = batch.rows();
    if rows == 0 {
        return Err(Error::argument("empty batch"));
    }
    let self_input = g.constant(Tensor::matrix(rows, SELF_DIM, batch.self_feats.clone())?);
    let ents = g.constant(Tensor::matrix(rows * batch.entities, ENTITY_DIM, batch.entity_feats.clone())?);
    let opps = if batch.opponents > 0 {
        Some(g.constant(Tensor::matrix(rows * batch.opponents, OPPONENT_DIM, batch.opponent_feats.clone())?))
    } else {
        None
    };
    let u = encode_self(g, p, self_input)?;
    let e = encode_environment(g, p, u, ents, batch.entities)?;
    let o = encode_opponents(g, p, u, opps, batch.opponents)?;
    let h0 = g.concat(&[u, e, o])?;
    let h = communicate(g, p, h0, batch.agents)?;
    let logits = action_logits(g, p, h)?;
    let values = value_estimate(g, p, h)?;
    Ok(ForwardVars {
        self_input,
        u,
        e,
        o,
        h0,
        h,
        logits,
        values,
    })
}

/// Categorical distribution over the five actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub logits: [f64; Action::COUNT],
    pub probs: [f64; Action::COUNT],
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut l = [0.0; Action::COUNT];
        l.copy_from_slice(&logits[..Action::COUNT]);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = l.map(|x| (x - max).exp());
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Self { logits: l, probs }
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        self.logits[action] - lse
    }

    /// Lowest index among the most probable actions.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.logits.iter().enumerate() {
            if *l > self.logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    pub fn entropy(&self) -> f64 {
        -(0..Action::COUNT)
            .filter(|&a| self.probs[a] > 0.0)
            .map(|a| self.probs[a] * self.log_prob(a))
            .sum::<f64>()
    }
}

/// Per-agent outputs of a gradient-free forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TeamOutput {
    pub distributions: Vec<ActionDistribution>,
    pub values: Vec<f64>,
}

/// Inference over a batch of teams; rows are agent-major within each team.
pub fn infer(p: &PolicyParams, batch: &TeamBatch) -> Result<TeamOutput> {
    let mut g = Graph::with_params(&p.set);
    let vars = forward(&mut g, p, batch)?;
    let logits = g.value(vars.logits);
    let distributions = (0..logits.rows())
        .map(|r| ActionDistribution::from_logits(logits.row(r)))
        .collect();
    Ok(TeamOutput {
        distributions,
        values: g.value(vars.values).data().to_vec(),
    })
}

/// One team's observations from a single world step.
pub fn forward_team(p: &PolicyParams, observations: &[Observation]) -> Result<TeamOutput> {
    infer(p, &TeamBatch::from_team(observations)?)
}
