use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use decoy_core::curriculum::{run_sensitivity_grid, transfer_agents};
use decoy_core::eval::{evaluate, MetricsReport};
use decoy_core::gradcheck::{run_gradcheck, GradcheckOptions};
use decoy_core::train::write_report_files;
use decoy_core::{train_run, Checkpoint, Error, RunConfig};

#[derive(Parser)]
#[command(name = "decoy", version, about = "Train and evaluate cooperative agents that mislead an adversary")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured curriculum.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate at a different team size.
        #[arg(long)]
        agents: Option<usize>,
        /// Append a row of metric means against the deception weight.
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one block's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Deception-weight sensitivity grid from a stage-1 checkpoint.
    Grid { config: PathBuf },
    /// Move a checkpoint to a different number of agents.
    Transfer {
        checkpoint: PathBuf,
        #[arg(long)]
        agents: usize,
        /// Environment steps of fine-tuning at the new size; 0 only evaluates.
        #[arg(long, default_value_t = 0)]
        fine_tune_steps: u64,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(Failure {
            code: 2,
            message: format!("config file not found: {}", path.display()),
        });
    }
    RunConfig::load(path).map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), Failure> {
    if !path.is_file() {
        return Err(Failure {
            code: 2,
            message: format!("checkpoint not found: {}", path.display()),
        });
    }
    Ok(Checkpoint::load(path)?)
}

fn print_report(report: &MetricsReport) {
    println!("episodes: {}  agents: {}  seed: {}", report.episodes, report.n_good, report.seed);
    println!("bipartite distance:        {}", report.bipartite_distance);
    println!("good steps under threshold: {}", report.good_threshold_steps);
    println!("adversary target distance: {}", report.target_distance);
    println!("adversary steps under thr: {}", report.adversary_threshold_steps);
    println!("adversary target select:   {}", report.target_select);
}

fn append_plot_row(path: &Path, w_dec: f64, report: &MetricsReport, seed: u64, config_hash: &str) -> Result<(), Failure> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    };
    if fresh {
        w.write_record([
            "w_dec",
            "n_good",
            "bipartite_distance",
            "good_threshold_steps",
            "target_distance",
            "adversary_threshold_steps",
            "target_select",
            "master_seed",
            "config_hash",
        ])
        .map_err(csv_err)?;
    }
    w.write_record([
        w_dec.to_string(),
        report.n_good.to_string(),
        report.bipartite_distance.mean.to_string(),
        report.good_threshold_steps.mean.to_string(),
        report.target_distance.mean.to_string(),
        report.adversary_threshold_steps.mean.to_string(),
        report.target_select.mean.to_string(),
        seed.to_string(),
        config_hash.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = load_config(&config)?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let summary = train_run(&cfg, resume)?;
            for stage in &summary.stages {
                println!(
                    "{}: {} steps, checkpoint {} ({})",
                    stage.checkpoint.stage,
                    stage.steps,
                    stage.path.display(),
                    &stage.hash[..16]
                );
            }
            print_report(&summary.last().report);
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            agents,
            plot_data,
        } => {
            let (mut ckpt, hash) = load_checkpoint(&checkpoint)?;
            if let Some(n) = episodes {
                ckpt.config.eval.episodes = n;
            }
            if let Some(s) = seed {
                ckpt.config.eval.seed = s;
            }
            if let Some(n) = agents {
                ckpt.config.env = ckpt.config.env.with_agents(n);
            }
            ckpt.config.validate()?;
            let (report, rows) = evaluate(&ckpt.params, &ckpt.config.env, ckpt.config.eval.episodes, ckpt.config.eval.seed)?;
            let out_dir = ckpt.config.resolved_output_dir();
            std::fs::create_dir_all(&out_dir).map_err(|e| Failure {
                code: 1,
                message: format!("{}: {e}", out_dir.display()),
            })?;
            write_report_files(&out_dir, "eval", &ckpt, &checkpoint, &hash, &report, &rows)?;
            if let Some(path) = plot_data {
                let w_dec = if ckpt.stage == 2 { ckpt.config.curriculum.stage2_target } else { 0.0 };
                append_plot_row(&path, w_dec, &report, ckpt.config.seed, &ckpt.config.hash())?;
            }
            print_report(&report);
            info!("reports written to {}", out_dir.display());
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = run_gradcheck(&GradcheckOptions {
                seed,
                corrupt_block: corrupt,
                ..GradcheckOptions::default()
            })?;
            println!("{report}");
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|b| b.block.as_str()).collect();
                return Err(Failure {
                    code: 1,
                    message: format!("gradient check failed in: {}", failed.join(", ")),
                });
            }
        }
        Command::Grid { config } => {
            let cfg = load_config(&config)?;
            if let Some(p) = &cfg.curriculum.stage1_checkpoint {
                if !p.is_file() {
                    return Err(Failure {
                        code: 2,
                        message: format!("curriculum.stage1_checkpoint not found: {}", p.display()),
                    });
                }
            }
            let out_dir = cfg.resolved_output_dir();
            let report = run_sensitivity_grid(&cfg, &out_dir).map_err(|e| match e {
                Error::Config(m) => Failure { code: 2, message: m },
                other => other.into(),
            })?;
            print!("{}", report.render_table());
            info!("grid written to {}", out_dir.display());
        }
        Command::Transfer {
            checkpoint,
            agents,
            fine_tune_steps,
        } => {
            let (ckpt, hash) = load_checkpoint(&checkpoint)?;
            let out_dir = ckpt.config.resolved_output_dir();
            let report = transfer_agents(&ckpt, &hash, agents, fine_tune_steps, &out_dir)?;
            print!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
