//! The training loop: collect, estimate advantages, update, with periodic
//! evaluation, checkpoints and a per-update statistics log.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::curriculum::{stage1_converged, weights_for_update};
use crate::env::RewardWeights;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_episode_csv, EpisodeMetrics, MetricsReport};
use crate::ppo::{collect_rollouts, mix_seed, ppo_update, UpdateStats};

/// Column order of the per-update statistics CSV.
pub const STATS_CSV_HEADER: [&str; 19] = [
    "update",
    "stage_update",
    "global_step",
    "stage",
    "n_good",
    "w_cov",
    "w_dec",
    "mean_episode_return",
    "mean_coverage",
    "mean_deception",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "grad_norm",
    "eval_bipartite_distance",
    "master_seed",
    "config_hash",
];

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    /// Prefix of every file the stage writes.
    pub label: String,
    pub budget_steps: u64,
    pub stop_when_converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
    pub hash: String,
    /// Environment steps trained in this call.
    pub steps: u64,
    /// Statistics of the first update trained in this call.
    pub first_update: Option<UpdateStats>,
    pub converged: bool,
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeMetrics>,
    /// Every checkpoint written, in order; the last is `path`.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    master_seed: u64,
    config_hash: &'a str,
    checkpoint: String,
    checkpoint_hash: &'a str,
    parent_hash: &'a str,
    stage: u32,
    global_step: u64,
    report: &'a MetricsReport,
}

/// Writes `<label>_report.toml` and `<label>_episodes.csv` into `dir`.
pub fn write_report_files(
    dir: &Path,
    label: &str,
    ckpt: &Checkpoint,
    ckpt_path: &Path,
    ckpt_hash: &str,
    report: &MetricsReport,
    episodes: &[EpisodeMetrics],
) -> Result<()> {
    let config_hash = ckpt.config.hash();
    let file = ReportFile {
        master_seed: ckpt.config.seed,
        config_hash: &config_hash,
        checkpoint: ckpt_path.display().to_string(),
        checkpoint_hash: ckpt_hash,
        parent_hash: ckpt.parent_hash.as_deref().unwrap_or(""),
        stage: ckpt.stage,
        global_step: ckpt.global_step,
        report,
    };
    let text = toml::to_string(&file).map_err(|e| Error::argument(format!("report serialization: {e}")))?;
    let path = dir.join(format!("{label}_report.toml"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(format!("{label}_episodes.csv"));
    let out = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_episode_csv(out, episodes, ckpt.config.seed, &config_hash)
}

impl Checkpoint {
    /// Moves to `stage`, resetting the per-stage counters and recording
    /// `parent_hash`. Stages never go backwards.
    pub fn begin_stage(&mut self, stage: u32, parent_hash: &str) -> Result<()> {
        if stage < self.stage {
            return Err(Error::argument(format!("cannot return from stage {} to stage {stage}", self.stage)));
        }
        weights_for_update(stage, 0.0, 0.0, 0.0)?;
        self.stage = stage;
        self.stage_updates = 0;
        self.eval_history.clear();
        self.parent_hash = Some(parent_hash.to_string());
        Ok(())
    }
}

struct StatsLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl StatsLog {
    fn open(path: PathBuf) -> Result<Self> {
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(STATS_CSV_HEADER)?;
        }
        Ok(Self { writer, path })
    }

    fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.writer.write_record(&fields)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains `ckpt` in its current stage until the stage has consumed
/// `plan.budget_steps` environment steps (counting updates done before a
/// resume) or, if requested, until stage 1 converges.
pub fn run_stage(mut ckpt: Checkpoint, plan: &StagePlan, out_dir: &Path) -> Result<StageOutcome> {
    let cfg: RunConfig = ckpt.config.clone();
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_hash = cfg.hash();
    let env = &cfg.env;
    let tc = &cfg.train;
    let cp = &cfg.curriculum;
    let horizon = tc.horizon as u64;
    let total_updates = plan.budget_steps.div_ceil(horizon).max(1);
    let target = if ckpt.stage == 2 { cp.stage2_target } else { 0.0 };
    let mut log = StatsLog::open(out_dir.join(format!("{}_stats.csv", plan.label)))?;

    let mut checkpoints = Vec::new();
    let mut last_saved = String::from("none");
    let mut first_update = None;
    let mut converged = stage1_converged(&ckpt.eval_history, cp.stage1_threshold, cp.stage1_patience);
    let mut steps = 0;
    info!(
        "{}: stage {} with {} agents, {} updates of {} steps",
        plan.label, ckpt.stage, env.n_good, total_updates, horizon
    );
    while ckpt.stage_updates < total_updates && !(converged && plan.stop_when_converged) {
        let progress = ckpt.stage_updates as f64 / total_updates as f64;
        let weights: RewardWeights = weights_for_update(ckpt.stage, progress, target, cp.ramp_fraction)?;
        let seed = mix_seed(cfg.seed, ckpt.updates);
        ckpt.optimizer.lr = tc.lr_at(progress);
        let mut batch = collect_rollouts(env, &ckpt.params, tc, weights, seed)?;
        batch.compute_advantages(tc.gamma, tc.lam, tc.reward_scale);
        let stats = match ppo_update(&mut ckpt.params, &mut ckpt.optimizer, &batch, tc, seed) {
            Err(Error::NonFiniteLoss { .. }) => {
                return Err(Error::NonFiniteLoss {
                    update: ckpt.updates + 1,
                    last_checkpoint: last_saved,
                })
            }
            other => other?,
        };
        first_update.get_or_insert(stats);
        ckpt.updates += 1;
        ckpt.stage_updates += 1;
        ckpt.global_step += horizon;
        steps += horizon;
        if stats.approx_kl > tc.kl_guard {
            warn!(
                "{}: update {} approximate KL {:.4} exceeds guard {}",
                plan.label, ckpt.updates, stats.approx_kl, tc.kl_guard
            );
        }

        let last = ckpt.stage_updates == total_updates;
        let mut eval_cell = String::new();
        if ckpt.stage_updates.is_multiple_of(tc.eval_every as u64) || last {
            let (report, _) = evaluate(&ckpt.params, env, cfg.eval.episodes, cfg.eval.seed)?;
            let d = report.bipartite_distance.mean;
            ckpt.eval_history.push(d);
            converged = stage1_converged(&ckpt.eval_history, cp.stage1_threshold, cp.stage1_patience);
            eval_cell = format!("{d:?}");
            info!(
                "{}: update {} step {} bipartite {} target select {}",
                plan.label, ckpt.updates, ckpt.global_step, report.bipartite_distance, report.target_select
            );
        }

        let steps_per_episode = env.episode_length as f64;
        let team_steps = batch.team_steps() as f64;
        let mean_cov = batch.rewards.iter().map(|r| r.coverage).sum::<f64>() / team_steps * steps_per_episode;
        let mean_dec = batch.rewards.iter().map(|r| r.deception).sum::<f64>() / team_steps * steps_per_episode;
        log.row(vec![
            ckpt.updates.to_string(),
            ckpt.stage_updates.to_string(),
            ckpt.global_step.to_string(),
            ckpt.stage.to_string(),
            env.n_good.to_string(),
            format!("{:?}", weights.coverage),
            format!("{:?}", weights.deception),
            format!("{:?}", batch.mean_episode_return()),
            format!("{mean_cov:?}"),
            format!("{mean_dec:?}"),
            format!("{:?}", stats.policy_loss),
            format!("{:?}", stats.value_loss),
            format!("{:?}", stats.entropy),
            format!("{:?}", stats.approx_kl),
            format!("{:?}", stats.clip_fraction),
            format!("{:?}", stats.grad_norm),
            eval_cell,
            cfg.seed.to_string(),
            config_hash.clone(),
        ])?;

        let stopping = last || (converged && plan.stop_when_converged);
        if !stopping && ckpt.stage_updates.is_multiple_of(tc.checkpoint_every as u64) {
            let path = out_dir.join(format!("{}_u{:06}.ckpt", plan.label, ckpt.updates));
            ckpt.save(&path)?;
            last_saved = path.display().to_string();
            checkpoints.push(path);
        }
    }
    if converged && ckpt.stage == 1 {
        info!("{}: stage 1 converged after {} updates", plan.label, ckpt.stage_updates);
    }

    let path = out_dir.join(format!("{}_final.ckpt", plan.label));
    let hash = ckpt.save(&path)?;
    checkpoints.push(path.clone());
    let (report, episodes) = evaluate(&ckpt.params, env, cfg.eval.episodes, cfg.eval.seed)?;
    write_report_files(out_dir, &plan.label, &ckpt, &path, &hash, &report, &episodes)?;
    Ok(StageOutcome {
        checkpoint: ckpt,
        path,
        hash,
        steps,
        first_update,
        converged,
        report,
        episodes,
        checkpoints,
    })
}

/// Everything a `train` invocation produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub stages: Vec<StageOutcome>,
}

impl TrainSummary {
    pub fn last(&self) -> &StageOutcome {
        self.stages.last().expect("a training run has at least one stage")
    }
}

/// Runs the configured curriculum from scratch, or from `resume`.
///
/// Stage 1 trains coverage only for `train.total_steps` (stopping early on
/// convergence); stage 2, if configured, fine-tunes towards
/// `curriculum.stage2_target`; each further entry of the agent schedule
/// fine-tunes the previous result at the new team size.
pub fn train_run(cfg: &RunConfig, resume: Option<(Checkpoint, String)>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = cfg.resolved_output_dir();
    let cp = &cfg.curriculum;
    let first_agents = cp.agent_schedule[0];
    let mut stages = Vec::new();

    let mut current = match resume {
        Some((ckpt, _)) => ckpt,
        None => {
            let mut c = cfg.clone();
            c.env = cfg.env.with_agents(first_agents);
            Checkpoint::fresh(c)?
        }
    };
    let schedule_pos = cp
        .agent_schedule
        .iter()
        .position(|n| *n == current.config.env.n_good)
        .unwrap_or(0);

    if schedule_pos == 0 && current.stage == 1 {
        let plan = StagePlan {
            label: "stage1".into(),
            budget_steps: current.config.train.total_steps,
            stop_when_converged: true,
        };
        let out = run_stage(current, &plan, &out_dir)?;
        current = out.checkpoint.clone();
        stages.push(out);
    }
    if schedule_pos == 0 && cp.stages == 2 {
        if current.stage == 1 {
            let parent = match stages.last() {
                Some(s) => s.hash.clone(),
                None => current.content_hash(),
            };
            current.begin_stage(2, &parent)?;
        }
        let plan = StagePlan {
            label: "stage2".into(),
            budget_steps: current.config.curriculum.stage2_steps,
            stop_when_converged: false,
        };
        let out = run_stage(current, &plan, &out_dir)?;
        current = out.checkpoint.clone();
        stages.push(out);
    }
    for &n in &cp.agent_schedule[schedule_pos + 1..] {
        let parent = current.content_hash();
        let mut next = current.clone();
        next.config.env = current.config.env.with_agents(n);
        let stage = next.stage;
        next.begin_stage(stage, &parent)?;
        let plan = StagePlan {
            label: format!("agents{n}"),
            budget_steps: cp.transfer_steps,
            stop_when_converged: false,
        };
        let out = run_stage(next, &plan, &out_dir)?;
        current = out.checkpoint.clone();
        stages.push(out);
    }
    if stages.is_empty() {
        return Err(Error::Config("nothing left to train: the checkpoint already completed every configured stage".into()));
    }
    Ok(TrainSummary { stages })
}
