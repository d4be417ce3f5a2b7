//! Central finite-difference checks of every differentiable graph operation,
//! the policy components, and the end-to-end PPO loss.
//!
//! Each check reduces an output to a scalar through a random linear
//! functional, perturbs inputs (or sampled parameter coordinates) by `±h`,
//! and compares against the reverse-mode gradient. The error of one
//! coordinate is `|a - n| / max(|a|, |n|, FLOOR)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffgraph::{Graph, ParamId, Tensor, Var};
use crate::error::Result;
use crate::policy::{self, NetworkConfig, PolicyParams, TeamBatch, ENTITY_DIM, OPPONENT_DIM, SELF_DIM};
use crate::ppo::{mix_seed, ppo_loss, Minibatch};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
/// Inputs closer than this to a non-differentiable point are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances_per_op: usize,
    pub instances_per_model_block: usize,
    /// Parameter coordinates sampled per tensor in model-level blocks.
    pub coords_per_tensor: usize,
    pub tolerance: f64,
    /// Test hook: perturbs the analytic gradient of the named block.
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances_per_op: 6,
            instances_per_model_block: 4,
            coords_per_tensor: 3,
            tolerance: DEFAULT_TOLERANCE,
            corrupt_block: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub block: String,
    pub instances: usize,
    pub coordinates: usize,
    pub worst_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn instances(&self) -> usize {
        self.blocks.iter().map(|b| b.instances).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockResult> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.blocks.iter().map(|b| b.block.len()).max().unwrap_or(5).max(5);
        writeln!(f, "gradient check, seed {}, tolerance {:e}", self.seed, self.tolerance)?;
        writeln!(f, "{:<width$}  {:>9}  {:>6}  {:>11}  result", "block", "instances", "coords", "worst error")?;
        for b in &self.blocks {
            writeln!(
                f,
                "{:<width$}  {:>9}  {:>6}  {:>11.3e}  {}",
                b.block,
                b.instances,
                b.coordinates,
                b.worst_error,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} instances, {}",
            self.instances(),
            if self.passed() { "all blocks passed" } else { "FAILED" }
        )
    }
}

fn coord_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

struct Tally {
    block: String,
    instances: usize,
    coordinates: usize,
    worst: f64,
    corrupt: bool,
}

impl Tally {
    fn new(block: &str, opts: &GradcheckOptions) -> Self {
        Self {
            block: block.to_string(),
            instances: 0,
            coordinates: 0,
            worst: 0.0,
            corrupt: opts.corrupt_block.as_deref() == Some(block),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let a = if self.corrupt { analytic + 1e-2 * (1.0 + analytic.abs()) } else { analytic };
        let e = coord_error(a, numeric);
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
        self.coordinates += 1;
    }

    fn finish(self, tol: f64) -> BlockResult {
        BlockResult {
            passed: self.worst <= tol && self.coordinates > 0,
            block: self.block,
            instances: self.instances,
            coordinates: self.coordinates,
            worst_error: self.worst,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

type OpBuilder = fn(&mut Graph<'_>, &[Var]) -> Result<Var>;

/// Checks an op over graph inputs; `inputs` returns fresh inputs per instance.
fn check_op(
    name: &str,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    inputs: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: OpBuilder,
) -> Result<BlockResult> {
    let mut tally = Tally::new(name, opts);
    for _ in 0..opts.instances_per_op {
        let xs = inputs(rng);
        // output shape and the random functional applied to it
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            g.value(out).shape().to_vec()
        };
        let weights = random_tensor(rng, &out_shape, -1.0, 1.0);
        let eval = |xs: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            let w = g.constant(weights.clone());
            let prod = g.mul(out, w)?;
            let loss = g.sum(prod);
            let grads = g.backward(loss)?;
            let value = g.value(loss).item();
            Ok((value, vars.iter().zip(xs).map(|(v, t)| grads.wrt(*v, t.shape())).collect()))
        };
        let (_, analytic) = eval(&xs)?;
        for (i, x) in xs.iter().enumerate() {
            for k in 0..x.len() {
                let mut plus = xs.clone();
                plus[i].data_mut()[k] += STEP;
                let mut minus = xs.clone();
                minus[i].data_mut()[k] -= STEP;
                let numeric = (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * STEP);
                tally.record(analytic[i].data()[k], numeric);
            }
        }
        tally.instances += 1;
    }
    Ok(tally.finish(opts.tolerance))
}

/// Redraws entries of `t` until none lies within the kink margin of `kinks`.
fn away_from(rng: &mut ChaCha8Rng, mut t: Tensor, kinks: &[f64], lo: f64, hi: f64) -> Tensor {
    for x in t.data_mut() {
        while kinks.iter().any(|k| (*x - k).abs() < KINK_MARGIN) {
            *x = rng.random_range(lo..hi);
        }
    }
    t
}

fn op_blocks(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<BlockResult>> {
    let mut out = Vec::new();
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| random_tensor(rng, &[r, c], -1.5, 1.5);

    out.push(check_op(
        "op.affine",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4), mat(r, 5, 4), random_tensor(r, &[5], -1.0, 1.0)],
        |g, v| g.affine(v[0], v[1], Some(v[2])),
    )?);
    out.push(check_op(
        "op.tanh",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4)],
        |g, v| Ok(g.tanh(v[0])),
    )?);
    out.push(check_op(
        "op.relu",
        opts,
        rng,
        &|r| {
            let t = mat(r, 3, 4);
            vec![away_from(r, t, &[0.0], -1.5, 1.5)]
        },
        |g, v| Ok(g.relu(v[0])),
    )?);
    out.push(check_op(
        "op.exp",
        opts,
        rng,
        &|r| vec![mat(r, 2, 5)],
        |g, v| Ok(g.exp(v[0])),
    )?);
    out.push(check_op(
        "op.add",
        opts,
        rng,
        &|r| vec![mat(r, 3, 3), mat(r, 3, 3)],
        |g, v| g.add(v[0], v[1]),
    )?);
    out.push(check_op(
        "op.sub",
        opts,
        rng,
        &|r| vec![mat(r, 3, 3), mat(r, 3, 3)],
        |g, v| g.sub(v[0], v[1]),
    )?);
    out.push(check_op(
        "op.mul",
        opts,
        rng,
        &|r| vec![mat(r, 3, 3), mat(r, 3, 3)],
        |g, v| g.mul(v[0], v[1]),
    )?);
    out.push(check_op(
        "op.minimum",
        opts,
        rng,
        &|r| {
            let a = mat(r, 3, 3);
            let mut b = mat(r, 3, 3);
            for (x, y) in a.data().iter().zip(b.data_mut()) {
                while (*x - *y).abs() < KINK_MARGIN {
                    *y = r.random_range(-1.5..1.5);
                }
            }
            vec![a, b]
        },
        |g, v| g.minimum(v[0], v[1]),
    )?);
    out.push(check_op(
        "op.scale",
        opts,
        rng,
        &|r| vec![mat(r, 2, 3)],
        |g, v| Ok(g.scale(v[0], -2.5)),
    )?);
    out.push(check_op(
        "op.clamp",
        opts,
        rng,
        &|r| {
            let t = mat(r, 3, 4);
            vec![away_from(r, t, &[-0.5, 0.7], -1.5, 1.5)]
        },
        |g, v| Ok(g.clamp(v[0], -0.5, 0.7)),
    )?);
    out.push(check_op(
        "op.concat",
        opts,
        rng,
        &|r| vec![mat(r, 3, 2), mat(r, 3, 4)],
        |g, v| g.concat(&[v[0], v[1]]),
    )?);
    out.push(check_op(
        "op.reshape",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4)],
        |g, v| g.reshape(v[0], &[2, 6]),
    )?);
    out.push(check_op(
        "op.softmax",
        opts,
        rng,
        &|r| vec![mat(r, 3, 5)],
        |g, v| g.softmax(v[0]),
    )?);
    out.push(check_op(
        "op.masked_softmax",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4)],
        |g, v| g.masked_softmax(v[0], vec![true, false, true, true, false, false, false, false, true, true, true, true]),
    )?);
    out.push(check_op(
        "op.log_softmax",
        opts,
        rng,
        &|r| vec![mat(r, 3, 5)],
        |g, v| g.log_softmax(v[0]),
    )?);
    out.push(check_op(
        "op.pair_scores",
        opts,
        rng,
        &|r| vec![mat(r, 4, 3), mat(r, 6, 3)],
        |g, v| g.pair_scores(v[0], v[1], 2, 3, 0.7),
    )?);
    out.push(check_op(
        "op.pair_weighted_sum",
        opts,
        rng,
        &|r| vec![mat(r, 4, 3), mat(r, 6, 2)],
        |g, v| g.pair_weighted_sum(v[0], v[1], 2, 3),
    )?);
    out.push(check_op(
        "op.gather",
        opts,
        rng,
        &|r| vec![mat(r, 4, 5)],
        |g, v| g.gather(v[0], vec![1, 4, 0, 1]),
    )?);
    out.push(check_op(
        "op.sum",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4)],
        |g, v| Ok(g.sum(v[0])),
    )?);
    out.push(check_op(
        "op.mean",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4)],
        |g, v| Ok(g.mean(v[0])),
    )?);
    out.push(check_op(
        "op.sum_last",
        opts,
        rng,
        &|r| vec![mat(r, 3, 4)],
        |g, v| Ok(g.sum_last(v[0])),
    )?);
    Ok(out)
}

fn random_batch(rng: &mut ChaCha8Rng, teams: usize, agents: usize, entities: usize, opponents: usize) -> TeamBatch {
    let rows = teams * agents;
    let mut b = TeamBatch::new(agents, entities, opponents);
    b.teams = teams;
    b.self_feats = (0..rows * SELF_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..rows * entities {
        b.entity_feats.extend([
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            if rng.random_bool(0.5) { 1.0 } else { 0.0 },
        ]);
    }
    b.opponent_feats = (0..rows * opponents * OPPONENT_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
    b
}

/// Random non-zero parameters: the zero-initialized heads would otherwise
/// hide every gradient upstream of them.
fn random_params(rng: &mut ChaCha8Rng) -> Result<PolicyParams> {
    let mut p = PolicyParams::new(&NetworkConfig {
        hidden: 6,
        init_seed: rng.random(),
    })?;
    for t in p.set.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    Ok(p)
}

/// Scalar objective over a policy network; `Ok(None)` asks for a redraw.
type ModelObjective<'a> = dyn Fn(&mut Graph<'_>, &PolicyParams) -> Result<Option<Var>> + 'a;

/// Checks parameter gradients of `objective` at sampled coordinates of the
/// tensors named in `blocks` (all tensors when empty).
fn check_model(
    name: &str,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    blocks: &[&str],
    make: &dyn Fn(&mut ChaCha8Rng) -> Result<Box<ModelObjective<'static>>>,
) -> Result<BlockResult> {
    let mut tally = Tally::new(name, opts);
    let mut attempts = 0;
    while tally.instances < opts.instances_per_model_block {
        attempts += 1;
        if attempts > 50 * opts.instances_per_model_block {
            break;
        }
        let params = random_params(rng)?;
        let objective = make(rng)?;
        let value = |p: &PolicyParams| -> Result<Option<f64>> {
            let mut g = Graph::with_params(&p.set);
            Ok(objective(&mut g, p)?.map(|v| g.value(v).item()))
        };
        let analytic = {
            let mut g = Graph::with_params(&params.set);
            let Some(loss) = objective(&mut g, &params)? else { continue };
            g.backward(loss)?.into_param_grads()
        };
        let ids: Vec<ParamId> = params
            .set
            .iter()
            .filter(|(_, n, _)| blocks.is_empty() || blocks.iter().any(|b| n.starts_with(b)))
            .map(|(id, _, _)| id)
            .collect();
        let mut redraw = false;
        let mut pending = Vec::new();
        for id in ids {
            let len = params.set.get(id).len();
            for _ in 0..opts.coords_per_tensor.min(len) {
                let k = rng.random_range(0..len);
                let mut plus = params.clone();
                plus.set.get_mut(id).data_mut()[k] += STEP;
                let mut minus = params.clone();
                minus.set.get_mut(id).data_mut()[k] -= STEP;
                match (value(&plus)?, value(&minus)?) {
                    (Some(a), Some(b)) => pending.push((analytic[id.0].data()[k], (a - b) / (2.0 * STEP))),
                    _ => redraw = true,
                }
            }
        }
        if redraw {
            continue;
        }
        for (a, n) in pending {
            tally.record(a, n);
        }
        tally.instances += 1;
    }
    Ok(tally.finish(opts.tolerance))
}

fn weighted_sum(g: &mut Graph<'_>, rng_seed: u64, out: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn model_blocks(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<BlockResult>> {
    let mut out = Vec::new();

    // gradient with respect to the self-state input as well as f_a
    {
        let mut tally = Tally::new("policy.encode_self_input", opts);
        for _ in 0..opts.instances_per_model_block {
            let params = random_params(rng)?;
            let x = random_tensor(rng, &[3, SELF_DIM], -1.0, 1.0);
            let w_seed: u64 = rng.random();
            let eval = |x: &Tensor| -> Result<(f64, Tensor)> {
                let mut g = Graph::with_params(&params.set);
                let xv = g.input(x.clone());
                let u = policy::encode_self(&mut g, &params, xv)?;
                let loss = weighted_sum(&mut g, w_seed, u)?;
                let grads = g.backward(loss)?;
                Ok((g.value(loss).item(), grads.wrt(xv, x.shape())))
            };
            let (_, analytic) = eval(&x)?;
            for k in 0..x.len() {
                let mut plus = x.clone();
                plus.data_mut()[k] += STEP;
                let mut minus = x.clone();
                minus.data_mut()[k] -= STEP;
                tally.record(analytic.data()[k], (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * STEP));
            }
            tally.instances += 1;
        }
        out.push(tally.finish(opts.tolerance));
    }

    out.push(check_model("policy.encode_self", opts, rng, &["self_enc"], &|r| {
        let x = random_tensor(r, &[3, SELF_DIM], -1.0, 1.0);
        let w: u64 = r.random();
        Ok(Box::new(move |g, p| {
            let xv = g.constant(x.clone());
            let u = policy::encode_self(g, p, xv)?;
            weighted_sum(g, w, u).map(Some)
        }))
    })?);
    out.push(check_model(
        "policy.encode_environment",
        opts,
        rng,
        &["self_enc", "entity_enc", "entity_attn"],
        &|r| {
            let x = random_tensor(r, &[2, SELF_DIM], -1.0, 1.0);
            let ents = random_batch(r, 1, 2, 3, 0).entity_feats;
            let w: u64 = r.random();
            Ok(Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let u = policy::encode_self(g, p, xv)?;
                let ev = g.constant(Tensor::matrix(6, ENTITY_DIM, ents.clone())?);
                let e = policy::encode_environment(g, p, u, ev, 3)?;
                weighted_sum(g, w, e).map(Some)
            }))
        },
    )?);
    out.push(check_model(
        "policy.encode_opponents",
        opts,
        rng,
        &["self_enc", "opponent_enc", "opponent_attn"],
        &|r| {
            let x = random_tensor(r, &[2, SELF_DIM], -1.0, 1.0);
            let opps = random_tensor(r, &[4, OPPONENT_DIM], -2.0, 2.0);
            let w: u64 = r.random();
            Ok(Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let u = policy::encode_self(g, p, xv)?;
                let ov = g.constant(opps.clone());
                let o = policy::encode_opponents(g, p, u, Some(ov), 2)?;
                weighted_sum(g, w, o).map(Some)
            }))
        },
    )?);
    out.push(check_model("policy.communicate", opts, rng, &["msg", "update"], &|r| {
        let h = random_tensor(r, &[6, 18], -1.0, 1.0);
        let w: u64 = r.random();
        Ok(Box::new(move |g, p| {
            let hv = g.constant(h.clone());
            let m = policy::communicate(g, p, hv, 3)?;
            weighted_sum(g, w, m).map(Some)
        }))
    })?);
    out.push(check_model("policy.action_log_prob", opts, rng, &[], &|r| {
        let batch = random_batch(r, 2, 3, 3, 1);
        let actions: Vec<usize> = (0..batch.rows()).map(|_| r.random_range(0..5)).collect();
        Ok(Box::new(move |g, p| {
            let f = policy::forward(g, p, &batch)?;
            let lp = g.log_softmax(f.logits)?;
            let picked = g.gather(lp, actions.clone())?;
            Ok(Some(g.sum(picked)))
        }))
    })?);
    out.push(check_model("policy.value", opts, rng, &[], &|r| {
        let batch = random_batch(r, 2, 2, 2, 1);
        let w: u64 = r.random();
        Ok(Box::new(move |g, p| {
            let f = policy::forward(g, p, &batch)?;
            weighted_sum(g, w, f.values).map(Some)
        }))
    })?);
    out.push(check_model("ppo.loss", opts, rng, &[], &|r| {
        let batch = random_batch(r, 3, 2, 2, 1);
        let rows = batch.rows();
        let mb = Minibatch {
            actions: (0..rows).map(|_| r.random_range(0..5)).collect(),
            old_log_probs: (0..rows).map(|_| r.random_range(-2.5..-0.8)).collect(),
            advantages: (0..rows).map(|_| r.random_range(-1.5..1.5)).collect(),
            returns: (0..rows).map(|_| r.random_range(-2.0..2.0)).collect(),
            inputs: batch,
        };
        let clip = 0.2;
        Ok(Box::new(move |g, p| {
            let (loss, _) = ppo_loss(g, p, &mb, clip, 0.5, 0.01)?;
            // redraw instances whose ratio sits on a clip boundary
            let near = ratios(p, &mb)?.iter().any(|rho| {
                (rho - (1.0 - clip)).abs() < KINK_MARGIN || (rho - (1.0 + clip)).abs() < KINK_MARGIN
            });
            Ok((!near).then_some(loss))
        }))
    })?);
    Ok(out)
}

fn ratios(p: &PolicyParams, mb: &Minibatch) -> Result<Vec<f64>> {
    let out = policy::infer(p, &mb.inputs)?;
    Ok(out
        .distributions
        .iter()
        .zip(&mb.actions)
        .zip(&mb.old_log_probs)
        .map(|((d, &a), old)| (d.log_prob(a) - old).exp())
        .collect())
}

/// Runs every block. Blocks over tolerance are reported, not returned as
/// errors.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0x9c4));
    let mut blocks = op_blocks(opts, &mut rng)?;
    blocks.extend(model_blocks(opts, &mut rng)?);
    Ok(GradcheckReport {
        seed: opts.seed,
        tolerance: opts.tolerance,
        blocks,
    })
}
