//! Two-stage reward curriculum: coverage-only pretraining, then a ramp into
//! weighted coverage + deception, plus the deception-weight sensitivity grid
//! and agent-count transfer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::env::RewardWeights;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EpisodeMetrics, MeanStd, MetricsReport};
use crate::ppo::mix_seed;
use crate::train::{run_stage, StageOutcome, StagePlan};

/// Deception weights of the standard grid, in row order.
pub const GRID_DECEPTION_WEIGHTS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
/// Extra grid row known to keep the good agents from converging.
pub const UNSTABLE_DECEPTION_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumPlan {
    /// 1 trains coverage only; 2 continues into the deception stage.
    pub stages: u32,
    /// Stage 1 stops early once this many consecutive evaluations have mean
    /// bipartite distance at or below `stage1_threshold`.
    pub stage1_threshold: f64,
    pub stage1_patience: usize,
    /// Environment steps per stage-2 run.
    pub stage2_steps: u64,
    /// Deception weight trained towards by `train` in stage 2.
    pub stage2_target: f64,
    /// Fraction of stage-2 updates spent ramping the deception weight up.
    pub ramp_fraction: f64,
    pub grid_weights: Vec<f64>,
    /// Adds the 0.5 row to the grid.
    pub include_unstable: bool,
    /// Independent stage-2 seeds per grid row.
    pub grid_replicates: usize,
    /// Stage-1 parent of the grid.
    pub stage1_checkpoint: Option<PathBuf>,
    /// Team sizes trained in order; later entries fine-tune the previous one.
    pub agent_schedule: Vec<usize>,
    /// Environment steps per agent-count fine-tune.
    pub transfer_steps: u64,
}

impl Default for CurriculumPlan {
    fn default() -> Self {
        Self {
            stages: 2,
            stage1_threshold: 0.15,
            stage1_patience: 3,
            stage2_steps: 500_000,
            stage2_target: 0.4,
            ramp_fraction: 0.1,
            grid_weights: GRID_DECEPTION_WEIGHTS.to_vec(),
            include_unstable: false,
            grid_replicates: 1,
            stage1_checkpoint: None,
            agent_schedule: vec![2],
            transfer_steps: 100_000,
        }
    }
}

impl CurriculumPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("curriculum.{field}: {why}")));
        if !(1..=2).contains(&self.stages) {
            return bad("stages", "must be 1 or 2");
        }
        if !(self.stage1_threshold > 0.0) {
            return bad("stage1_threshold", "must be positive");
        }
        if self.stage1_patience == 0 {
            return bad("stage1_patience", "must be positive");
        }
        if self.stage2_steps == 0 || self.transfer_steps == 0 {
            return bad("stage2_steps", "step budgets must be positive");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return bad("ramp_fraction", "must lie in [0, 1]");
        }
        for w in self.grid_weights.iter().chain([&self.stage2_target]) {
            if RewardWeights::from_deception(*w).is_err() {
                return bad("grid_weights", "deception weights must lie in [0, 1]");
            }
        }
        if self.grid_replicates == 0 {
            return bad("grid_replicates", "must be positive");
        }
        if self.agent_schedule.is_empty() || self.agent_schedule.contains(&0) {
            return bad("agent_schedule", "needs at least one positive team size");
        }
        Ok(())
    }
}

/// True once the last `patience` evaluations all sit at or below `threshold`.
pub fn stage1_converged(history: &[f64], threshold: f64, patience: usize) -> bool {
    patience > 0 && history.len() >= patience && history[history.len() - patience..].iter().all(|d| *d <= threshold)
}

/// Reward weights for an update at `progress` (fraction of the stage's
/// updates already done) of `stage`.
pub fn weights_for_update(stage: u32, progress: f64, target_deception: f64, ramp_fraction: f64) -> Result<RewardWeights> {
    match stage {
        1 => Ok(RewardWeights::COVERAGE_ONLY),
        2 => {
            let scale = if ramp_fraction > 0.0 {
                (progress / ramp_fraction).clamp(0.0, 1.0)
            } else {
                1.0
            };
            RewardWeights::from_deception(target_deception * scale)
        }
        other => Err(Error::argument(format!("unknown curriculum stage {other}"))),
    }
}

/// Stage-2 fine-tune of `parent` towards `target_deception`.
pub fn run_stage2(
    parent: &Checkpoint,
    parent_hash: &str,
    target_deception: f64,
    seed: u64,
    out_dir: &Path,
    label: &str,
) -> Result<StageOutcome> {
    let mut ckpt = parent.clone();
    ckpt.config.seed = seed;
    ckpt.config.curriculum.stage2_target = target_deception;
    ckpt.begin_stage(2, parent_hash)?;
    let plan = StagePlan {
        label: label.to_string(),
        budget_steps: ckpt.config.curriculum.stage2_steps,
        stop_when_converged: false,
    };
    run_stage(ckpt, &plan, out_dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub weights: RewardWeights,
    pub expected_unstable: bool,
    /// One entry per replicate.
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<PathBuf>,
    pub checkpoint_hashes: Vec<String>,
    pub replicate_reports: Vec<MetricsReport>,
    /// Pooled over every replicate's evaluation episodes.
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub parent_hash: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub rows: Vec<GridRow>,
}

pub const GRID_CSV_HEADER: [&str; 19] = [
    "w_cov",
    "w_dec",
    "expected_unstable",
    "replicates",
    "episodes",
    "bipartite_distance_mean",
    "bipartite_distance_std",
    "good_threshold_steps_mean",
    "good_threshold_steps_std",
    "target_distance_mean",
    "target_distance_std",
    "adversary_threshold_steps_mean",
    "adversary_threshold_steps_std",
    "target_select_mean",
    "target_select_std",
    "parent_hash",
    "checkpoint_hashes",
    "master_seed",
    "config_hash",
];

impl GridReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(GRID_CSV_HEADER)?;
        for row in &self.rows {
            let r = &row.report;
            let mut rec = vec![
                format!("{:?}", row.weights.coverage),
                format!("{:?}", row.weights.deception),
                row.expected_unstable.to_string(),
                row.seeds.len().to_string(),
                r.episodes.to_string(),
            ];
            for m in [
                r.bipartite_distance,
                r.good_threshold_steps,
                r.target_distance,
                r.adversary_threshold_steps,
                r.target_select,
            ] {
                rec.push(format!("{:?}", m.mean));
                rec.push(format!("{:?}", m.std));
            }
            rec.push(self.parent_hash.clone());
            rec.push(row.checkpoint_hashes.join(";"));
            rec.push(self.master_seed.to_string());
            rec.push(self.config_hash.clone());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<grid csv>", e))?;
        Ok(())
    }

    /// Aligned plain-text table, one row per weight setting.
    pub fn render_table(&self) -> String {
        let headers = [
            "Weights (cov, dec)",
            "Bipartite distance",
            "Good steps < thr",
            "Adv. target distance",
            "Adv. steps < thr",
            "Target select",
        ];
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
        for row in &self.rows {
            let r = &row.report;
            let mut label = format!("({:.1}, {:.1})", row.weights.coverage, row.weights.deception);
            if row.expected_unstable {
                label.push_str(" *");
            }
            let fmt = |m: MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
            cells.push(vec![
                label,
                fmt(r.bipartite_distance),
                fmt(r.good_threshold_steps),
                fmt(r.target_distance),
                fmt(r.adversary_threshold_steps),
                fmt(r.target_select),
            ]);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "stage-1 parent: {}", self.parent_hash);
        let _ = writeln!(out, "master seed: {}  config: {}", self.master_seed, self.config_hash);
        if self.rows.iter().any(|r| r.expected_unstable) {
            let _ = writeln!(out, "* expected unstable: the good agents are not expected to converge");
        }
        out
    }
}

/// Fine-tunes one stage-2 run per grid row (times `grid_replicates`) from the
/// stage-1 checkpoint named in the configuration.
pub fn run_sensitivity_grid(run: &RunConfig, out_dir: &Path) -> Result<GridReport> {
    let parent_path = run
        .curriculum
        .stage1_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("curriculum.stage1_checkpoint: the grid needs a stage-1 checkpoint".into()))?;
    if !parent_path.exists() {
        return Err(Error::Config(format!(
            "curriculum.stage1_checkpoint: {} does not exist",
            parent_path.display()
        )));
    }
    let (mut parent, parent_hash) = Checkpoint::load(parent_path)?;
    if parent.stage != 1 {
        return Err(Error::Config(format!(
            "curriculum.stage1_checkpoint: {} is a stage-{} checkpoint",
            parent_path.display(),
            parent.stage
        )));
    }
    // the grid's own settings govern the fine-tunes
    let n_good = parent.config.env.n_good;
    parent.config.train = run.train.clone();
    parent.config.curriculum = run.curriculum.clone();
    parent.config.eval = run.eval.clone();
    parent.config.env = run.env.with_agents(n_good);
    parent.optimizer.lr = run.train.lr;

    let mut weights: Vec<(f64, bool)> = run.curriculum.grid_weights.iter().map(|w| (*w, false)).collect();
    if run.curriculum.include_unstable {
        weights.push((UNSTABLE_DECEPTION_WEIGHT, true));
    }
    let mut rows = Vec::with_capacity(weights.len());
    for (w_dec, unstable) in weights {
        let mut row = GridRow {
            weights: RewardWeights::from_deception(w_dec)?,
            expected_unstable: unstable,
            seeds: Vec::new(),
            checkpoints: Vec::new(),
            checkpoint_hashes: Vec::new(),
            replicate_reports: Vec::new(),
            report: MetricsReport::from_episodes(&[], run.eval.seed, n_good),
        };
        let mut pooled: Vec<EpisodeMetrics> = Vec::new();
        for rep in 0..run.curriculum.grid_replicates {
            let seed = mix_seed(run.seed, rep as u64);
            let label = format!("grid_w{:02}_r{rep}", (w_dec * 100.0).round() as u32);
            let outcome = run_stage2(&parent, &parent_hash, w_dec, seed, out_dir, &label)?;
            row.seeds.push(seed);
            row.checkpoints.push(outcome.path.clone());
            row.checkpoint_hashes.push(outcome.hash.clone());
            row.replicate_reports.push(outcome.report.clone());
            pooled.extend(outcome.episodes);
        }
        row.report = MetricsReport::from_episodes(&pooled, run.eval.seed, n_good);
        rows.push(row);
    }
    let report = GridReport {
        parent_hash,
        master_seed: run.seed,
        config_hash: run.hash(),
        rows,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("grid.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report.write_csv(file)?;
    let txt_path = out_dir.join("grid.txt");
    std::fs::write(&txt_path, report.render_table()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub source_agents: usize,
    pub target_agents: usize,
    pub source_hash: String,
    /// The loaded parameters evaluated unchanged at the new team size.
    pub zero_shot: MetricsReport,
    /// Present when a fine-tune ran.
    pub fine_tuned: Option<StageOutcome>,
}

impl TransferReport {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "transfer {} -> {} agents (source {})\nzero-shot: bipartite {}  target select {}\n",
            self.source_agents, self.target_agents, self.source_hash, self.zero_shot.bipartite_distance, self.zero_shot.target_select
        );
        match &self.fine_tuned {
            Some(f) => {
                let _ = writeln!(
                    out,
                    "fine-tuned ({} steps): bipartite {}  target select {}\ncheckpoint: {}",
                    f.steps, f.report.bipartite_distance, f.report.target_select, f.path.display()
                );
            }
            None => out.push_str("fine-tune: skipped\n"),
        }
        out
    }
}

/// Evaluates `source` at `target_agents` and, when `fine_tune_steps > 0`,
/// fine-tunes it there. The reward weights are those of the source stage.
pub fn transfer_agents(
    source: &Checkpoint,
    source_hash: &str,
    target_agents: usize,
    fine_tune_steps: u64,
    out_dir: &Path,
) -> Result<TransferReport> {
    let env = source.config.env.with_agents(target_agents);
    env.validate()?;
    let eval = &source.config.eval;
    let (zero_shot, _) = evaluate(&source.params, &env, eval.episodes, eval.seed)?;
    let fine_tuned = if fine_tune_steps > 0 {
        let mut ckpt = source.clone();
        ckpt.config.env = env;
        ckpt.config.curriculum.agent_schedule = vec![source.config.env.n_good, target_agents];
        let stage = ckpt.stage;
        ckpt.begin_stage(stage, source_hash)?;
        let plan = StagePlan {
            label: format!("transfer_n{target_agents}"),
            budget_steps: fine_tune_steps,
            stop_when_converged: false,
        };
        Some(run_stage(ckpt, &plan, out_dir)?)
    } else {
        None
    };
    Ok(TransferReport {
        source_agents: source.config.env.n_good,
        target_agents,
        source_hash: source_hash.to_string(),
        zero_shot,
        fine_tuned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_rule() {
        assert!(!stage1_converged(&[0.5, 0.4, 0.3], 0.15, 3));
        assert!(stage1_converged(&[0.14, 0.13, 0.12], 0.15, 3));
        assert!(stage1_converged(&[0.15, 0.15, 0.15], 0.15, 3));
        assert!(!stage1_converged(&[0.1, 0.1], 0.15, 3));
        assert!(!stage1_converged(&[0.1, 0.1, 0.2, 0.1], 0.15, 3));
    }

    #[test]
    fn stage_weights() {
        assert_eq!(weights_for_update(1, 0.7, 0.4, 0.1).unwrap(), RewardWeights::COVERAGE_ONLY);
        let post = weights_for_update(2, 0.5, 0.4, 0.1).unwrap();
        assert_eq!((post.coverage, post.deception), (0.6, 0.4));
        let mid = weights_for_update(2, 0.05, 0.4, 0.1).unwrap();
        assert!((mid.deception - 0.2).abs() < 1e-15);
        assert_eq!(mid.coverage + mid.deception, 1.0);
        assert!(weights_for_update(3, 0.0, 0.4, 0.1).is_err());
    }

    #[test]
    fn grid_without_parent_is_config_error() {
        let run = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_sensitivity_grid(&run, dir.path()), Err(Error::Config(_))));
        let mut run = run;
        run.curriculum.stage1_checkpoint = Some(dir.path().join("missing.ckpt"));
        let err = run_sensitivity_grid(&run, dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing.ckpt"));
    }
}
