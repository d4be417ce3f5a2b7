//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.
//!
//! The full run trains several policies and takes on the order of an hour on
//! one core. `DECOY_ACCEPTANCE_QUICK=1` skips the training criteria (5-7).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use decoy_core::curriculum::{run_sensitivity_grid, transfer_agents, GridReport, GRID_DECEPTION_WEIGHTS};
use decoy_core::eval::{evaluate_policy, metrics::RandomPolicy};
use decoy_core::gradcheck::{run_gradcheck, GradcheckOptions};
use decoy_core::policy::{forward_team, NetworkConfig, PolicyParams, TeamOutput};
use decoy_core::ppo::collect_rollouts;
use decoy_core::{
    min_cost_matching, train_run, Checkpoint, EnvConfig, Observation, RewardWeights, RunConfig, StageOutcome, Vec2,
    WorldState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id}. {name}: {detail} ({secs:.1}s)");
    }
}

fn out_root() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clear previous acceptance output");
    }
    std::fs::create_dir_all(&dir).expect("create acceptance output");
    dir
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = match run_gradcheck(&GradcheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let elapsed = start.elapsed();
    let instances: usize = report.blocks.iter().map(|b| b.instances).sum();
    let worst = report.blocks.iter().map(|b| b.worst_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report.failures().map(|b| b.block.as_str()).collect();
    verdict(
        report.passed() && instances >= 100 && elapsed < Duration::from_secs(60) && report.tolerance <= 1e-4,
        format!(
            "{} blocks, {instances} instances, worst relative error {worst:.2e}, failing {failed:?}",
            report.blocks.len()
        ),
    )
}

fn matching_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for n in 2..=6 {
        let perms = permutations(n);
        for _ in 0..1000 {
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..4.0)).collect()).collect();
            let brute = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            match min_cost_matching(&cost) {
                Ok(m) if m.total_cost == brute => {}
                _ => mismatches += 1,
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(60),
        format!("5000 instances, {mismatches} mismatches"),
    )
}

fn random_params(seed: u64) -> PolicyParams {
    let mut p = PolicyParams::new(&NetworkConfig { hidden: 16, init_seed: seed }).expect("valid network");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.set.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    p
}

fn max_diff(a: &TeamOutput, b: &TeamOutput, map: impl Fn(usize) -> usize) -> f64 {
    a.distributions
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            let e = &b.distributions[map(i)];
            d.probs.iter().zip(e.probs).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn invariance_suite(root: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pt = || Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let team: Vec<Observation> = (0..3)
        .map(|_| Observation {
            self_state: [pt().x, pt().y, pt().x, pt().y],
            entity_relpos: (0..4).map(|_| pt()).collect(),
            target_flags: vec![false, true, false, false],
            opponent_relpos: (0..3).map(|_| pt()).collect(),
        })
        .collect();
    let (mut entity, mut opponent, mut peer) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5 {
        let p = random_params(seed);
        let base = forward_team(&p, &team).expect("forward");
        for perm in permutations(4) {
            let t: Vec<Observation> = team
                .iter()
                .map(|o| Observation {
                    entity_relpos: perm.iter().map(|&k| o.entity_relpos[k]).collect(),
                    target_flags: perm.iter().map(|&k| o.target_flags[k]).collect(),
                    ..o.clone()
                })
                .collect();
            entity = entity.max(max_diff(&base, &forward_team(&p, &t).expect("forward"), |i| i));
        }
        for perm in permutations(3) {
            let t: Vec<Observation> = team
                .iter()
                .map(|o| Observation {
                    opponent_relpos: perm.iter().map(|&k| o.opponent_relpos[k]).collect(),
                    ..o.clone()
                })
                .collect();
            opponent = opponent.max(max_diff(&base, &forward_team(&p, &t).expect("forward"), |i| i));
            let t: Vec<Observation> = perm.iter().map(|&k| team[k].clone()).collect();
            let out = forward_team(&p, &t).expect("forward");
            peer = peer.max(max_diff(&base, &out, |i| perm.iter().position(|&k| k == i).unwrap()));
        }
    }

    let mut cfg = RunConfig::default();
    cfg.network.hidden = 8;
    cfg.train.n_envs = 2;
    cfg.train.horizon = 100;
    cfg.eval.episodes = 3;
    let transfer = Checkpoint::fresh(cfg)
        .and_then(|c| {
            let hash = c.content_hash();
            transfer_agents(&c, &hash, 3, 100, &root.join("transfer"))
        })
        .map(|r| r.zero_shot.n_good == 3 && r.fine_tuned.is_some_and(|f| f.checkpoint.config.env.n_good == 3));
    let transfer_ok = matches!(transfer, Ok(true));
    verdict(
        entity < 1e-10 && opponent < 1e-10 && peer < 1e-10 && transfer_ok,
        format!(
            "max deviation entity {entity:.1e}, opponent {opponent:.1e}, peer {peer:.1e}; 2->3 transfer {}",
            match transfer {
                Ok(true) => "ok".to_string(),
                Ok(false) => "wrong team size".to_string(),
                Err(e) => e.to_string(),
            }
        ),
    )
}

fn determinism(root: &Path) -> Verdict {
    let dir = root.join("determinism");
    let run = || {
        let mut cfg = RunConfig {
            seed: 99,
            output_dir: dir.clone(),
            ..RunConfig::default()
        };
        cfg.train.total_steps = 3 * cfg.train.horizon as u64;
        cfg.eval.episodes = 5;
        cfg.curriculum.stages = 1;
        train_run(&cfg, None).map(|s| {
            let last = s.last();
            (last.first_update, last.hash.clone())
        })
    };
    let first = run();
    if let Err(e) = std::fs::rename(&dir, root.join("determinism_first")) {
        return Verdict::Fail(e.to_string());
    }
    match (first, run()) {
        (Ok((sa, ha)), Ok((sb, hb))) => verdict(
            sa.is_some() && sa == sb && ha == hb,
            format!("first-update stats equal: {}, final hashes {} / {}", sa == sb, &ha[..16], &hb[..16]),
        ),
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e.to_string()),
    }
}

fn stage1(root: &Path, n_good: usize, seed: u64) -> decoy_core::Result<StageOutcome> {
    let mut cfg = RunConfig {
        seed,
        output_dir: root.join(format!("stage1_n{n_good}")),
        ..RunConfig::default()
    };
    cfg.env = cfg.env.with_agents(n_good);
    cfg.curriculum.stages = 1;
    cfg.curriculum.agent_schedule = vec![n_good];
    Ok(train_run(&cfg, None)?.last().clone())
}

fn coverage(outcome: &decoy_core::Result<StageOutcome>) -> Verdict {
    match outcome {
        Ok(o) => {
            let d = o.report.bipartite_distance;
            verdict(
                d.mean <= 0.20 && o.checkpoint.global_step <= 2_000_000,
                format!("bipartite distance {d} after {} steps", o.checkpoint.global_step),
            )
        }
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn grid(root: &Path, parent: &StageOutcome, label: &str) -> decoy_core::Result<GridReport> {
    let mut cfg = parent.checkpoint.config.clone();
    cfg.curriculum.grid_weights = vec![GRID_DECEPTION_WEIGHTS[0], GRID_DECEPTION_WEIGHTS[3]];
    cfg.curriculum.grid_replicates = 3;
    cfg.curriculum.stage1_checkpoint = Some(parent.path.clone());
    run_sensitivity_grid(&cfg, &root.join(label))
}

fn relative_drop(from: f64, to: f64) -> f64 {
    if from > 0.0 {
        (from - to) / from
    } else {
        f64::NEG_INFINITY
    }
}

fn deception_trend(parent: &decoy_core::Result<StageOutcome>, root: &Path, label: &str, min_drop: f64) -> Verdict {
    let parent = match parent {
        Ok(p) => p,
        Err(e) => return Verdict::Fail(format!("no stage-1 parent: {e}")),
    };
    let report = match grid(root, parent, label) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let (low, high) = (&report.rows[0].report, &report.rows[1].report);
    let select = relative_drop(low.target_select.mean, high.target_select.mean);
    let thresh = relative_drop(low.good_threshold_steps.mean, high.good_threshold_steps.mean);
    verdict(
        select >= min_drop && thresh >= min_drop,
        format!(
            "target select {:.2} -> {:.2} ({:+.0}%), threshold steps {:.2} -> {:.2} ({:+.0}%), need >= {:.0}% drop",
            low.target_select.mean,
            high.target_select.mean,
            -100.0 * select,
            low.good_threshold_steps.mean,
            high.good_threshold_steps.mean,
            -100.0 * thresh,
            100.0 * min_drop
        ),
    )
}

fn chance_baseline() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [2usize, 3] {
        let env = EnvConfig::default().with_agents(n);
        match evaluate_policy(&mut RandomPolicy::new(n as u64), &env, 1000, 31) {
            Ok((report, _)) => {
                let expected = env.episode_length as f64 / n as f64;
                let sigma = report.target_select.std / (report.episodes as f64).sqrt();
                let z = (report.target_select.mean - expected) / sigma;
                ok &= z.abs() <= 3.0;
                lines.push(format!("N={n}: {:.2} vs {expected:.2} (z {z:+.2})", report.target_select.mean));
            }
            Err(e) => {
                ok = false;
                lines.push(e.to_string());
            }
        }
    }
    verdict(ok, lines.join(", "))
}

fn reward_accounting() -> Verdict {
    let env = EnvConfig::default();
    let params = random_params(5);
    let mut cfg = RunConfig::default().train;
    cfg.n_envs = 4;
    cfg.horizon = 400;
    let mut checked = 0usize;
    let mut bad = 0usize;
    for w in GRID_DECEPTION_WEIGHTS {
        let weights = RewardWeights::from_deception(w).expect("table weight");
        let batch = match collect_rollouts(&env, &params, &cfg, weights, 8) {
            Ok(b) => b,
            Err(e) => return Verdict::Fail(e.to_string()),
        };
        for r in &batch.rewards {
            checked += 1;
            if r.weighted_total != weights.coverage * r.coverage + weights.deception * r.deception {
                bad += 1;
            }
        }
        let mut s = WorldState::reset(3, &env).expect("reset");
        while s.step < env.episode_length {
            let r = s.step(&[1, 3], weights, &env).expect("step").reward;
            checked += 1;
            if r.weighted_total != weights.coverage * r.coverage + weights.deception * r.deception
                || r.coverage != s.coverage_reward()
                || r.deception != s.deception_reward(&env)
            {
                bad += 1;
            }
        }
    }
    verdict(bad == 0, format!("{checked} steps over 4 weight rows, {bad} mismatches"))
}

fn main() -> ExitCode {
    let quick = std::env::var_os("DECOY_ACCEPTANCE_QUICK").is_some();
    let root = out_root();
    let mut suite = Suite { failures: 0 };

    suite.run(1, "gradient suite", gradient_suite);
    suite.run(2, "matching oracle", matching_oracle);
    suite.run(3, "invariance suite", || invariance_suite(&root));
    suite.run(4, "determinism", || determinism(&root));

    if quick {
        for (id, name) in [(5, "stage-1 coverage, 2 agents"), (6, "deception trend, 2 agents"), (7, "deception trend, 3 agents")] {
            suite.run(id, name, || Verdict::Skip("quick mode".into()));
        }
    } else {
        let mut two = None;
        suite.run(5, "stage-1 coverage, 2 agents", || {
            let outcome = stage1(&root, 2, 1);
            let v = coverage(&outcome);
            two = Some(outcome);
            v
        });
        let two = two.expect("criterion 5 ran");
        suite.run(6, "deception trend, 2 agents", || deception_trend(&two, &root, "grid_n2", 0.20));
        let mut three = None;
        suite.run(7, "deception trend, 3 agents", || {
            let outcome = stage1(&root, 3, 1);
            if let Ok(o) = &outcome {
                println!("       stage-1 with 3 agents: bipartite distance {}", o.report.bipartite_distance);
            }
            three = Some(outcome);
            deception_trend(three.as_ref().expect("just set"), &root, "grid_n3", 0.15)
        });
    }
    suite.run(8, "chance baselines", chance_baseline);
    suite.run(9, "reward accounting", reward_accounting);

    println!("artifacts in {}", root.display());
    if suite.failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}
