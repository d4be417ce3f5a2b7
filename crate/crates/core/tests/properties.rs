use decoy_core::diffgraph::{Graph, Tensor};
use decoy_core::env::{Action, EnvConfig, RewardWeights, Vec2, WorldState};
use decoy_core::policy::{self, forward_team, NetworkConfig, PolicyParams, TeamOutput};
use decoy_core::ppo::{collect_rollouts, ppo_loss, Minibatch, TrainConfig};
use decoy_core::{min_cost_matching, Observation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                prefix.push(k);
                rec(prefix, used, out);
                prefix.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Minimum total over every permutation, summed in row order.
fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn random_params(hidden: usize, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::new(&NetworkConfig { hidden, init_seed: seed }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    for t in p.set.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    p
}

fn max_prob_diff(a: &TeamOutput, b: &TeamOutput, map: impl Fn(usize) -> usize) -> f64 {
    let mut worst = 0.0f64;
    for (i, d) in a.distributions.iter().enumerate() {
        let e = &b.distributions[map(i)];
        for k in 0..Action::COUNT {
            worst = worst.max((d.probs[k] - e.probs[k]).abs());
        }
    }
    worst
}

fn point() -> impl Strategy<Value = Vec2> {
    (-1.5f64..1.5, -1.5f64..1.5).prop_map(|(x, y)| Vec2::new(x, y))
}

fn observation(n_entities: usize, n_opponents: usize) -> impl Strategy<Value = Observation> {
    (
        prop::array::uniform4(-1.0f64..1.0),
        prop::collection::vec(point(), n_entities),
        0..n_entities,
        prop::collection::vec(point(), n_opponents),
    )
        .prop_map(|(self_state, entity_relpos, target, opponent_relpos)| Observation {
            self_state,
            target_flags: (0..entity_relpos.len()).map(|k| k == target).collect(),
            entity_relpos,
            opponent_relpos,
        })
}

fn state_with(agents: Vec<Vec2>, landmarks: Vec<Vec2>, cfg: &EnvConfig) -> WorldState {
    let mut s = WorldState::reset(5, &cfg.with_agents(agents.len())).unwrap();
    s.good_positions = agents;
    s.landmark_positions = landmarks;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        logits in prop::collection::vec(-30.0f64..30.0, 1..8),
        shift in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, n, logits.clone()).unwrap());
        let shifted = g.input(Tensor::matrix(1, n, logits.iter().map(|l| l + shift).collect()).unwrap());
        let p = g.softmax(x).unwrap();
        let q = g.softmax(shifted).unwrap();
        let (p, q) = (g.value(p).data(), g.value(q).data());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in p.iter().zip(q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_equals_brute_force(n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let m = min_cost_matching(&cost).unwrap();
        let mut seen = vec![false; n];
        for &j in &m.assignment {
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
        prop_assert_eq!(m.total_cost, brute_force_min(&cost));
    }

    #[test]
    fn bipartite_distance_ignores_agent_and_landmark_order(
        pts in prop::collection::vec((point(), point()), 2..6),
        rot_a in 0usize..6,
        rot_l in 0usize..6,
    ) {
        let cfg = EnvConfig::default();
        let (agents, landmarks): (Vec<Vec2>, Vec<Vec2>) = pts.into_iter().unzip();
        let base = state_with(agents.clone(), landmarks.clone(), &cfg).bipartite_distance();
        let mut a2 = agents;
        let mut l2 = landmarks;
        let n = a2.len();
        a2.rotate_left(rot_a % n);
        l2.reverse();
        l2.rotate_left(rot_l % n);
        let permuted = state_with(a2, l2, &cfg);
        prop_assert!((permuted.bipartite_distance() - base).abs() <= 1e-12);
        prop_assert_eq!(permuted.coverage_reward(), -permuted.bipartite_distance());
    }

    #[test]
    fn approaching_matched_landmarks_never_increases_distance(
        pts in prop::collection::vec((point(), point()), 2..6),
        frac in 0.01f64..1.0,
    ) {
        let cfg = EnvConfig::default();
        let (agents, landmarks): (Vec<Vec2>, Vec<Vec2>) = pts.into_iter().unzip();
        let before = state_with(agents.clone(), landmarks.clone(), &cfg);
        let cost: Vec<Vec<f64>> = agents.iter().map(|a| landmarks.iter().map(|l| a.dist(*l)).collect()).collect();
        let m = min_cost_matching(&cost).unwrap();
        let moved: Vec<Vec2> = agents
            .iter()
            .zip(&m.assignment)
            .map(|(a, &j)| *a + (landmarks[j] - *a) * frac)
            .collect();
        let after = state_with(moved, landmarks, &cfg);
        prop_assert!(after.bipartite_distance() <= before.bipartite_distance() + 1e-12);
    }

    #[test]
    fn deception_reward_monotone_in_adversary_distance(
        target in point(),
        dir in 0.0f64..std::f64::consts::TAU,
        near in 0.0f64..5.0,
        extra in 1e-9f64..5.0,
    ) {
        let cfg = EnvConfig::default();
        let mut s = WorldState::reset(11, &cfg).unwrap();
        s.landmark_positions[s.target_index] = target;
        let unit = Vec2::new(dir.cos(), dir.sin());
        s.adversary_position = target + unit * near;
        let close = s.deception_reward(&cfg);
        s.adversary_position = target + unit * (near + extra);
        prop_assert!(s.deception_reward(&cfg) >= close);
        prop_assert!(s.deception_reward(&cfg) <= cfg.deception_clip);
    }

    #[test]
    fn reward_weights_sum_to_one(w in 0.0f64..=1.0) {
        let rw = RewardWeights::from_deception(w).unwrap();
        prop_assert_eq!(rw.coverage + rw.deception, 1.0);
        prop_assert!(rw.coverage >= 0.0 && rw.deception >= 0.0);
    }

    #[test]
    fn trajectories_replay_and_respect_speed_cap(
        seed in any::<u64>(),
        n in 2usize..5,
        script in prop::collection::vec(0usize..Action::COUNT, 200),
    ) {
        let cfg = EnvConfig::default().with_agents(n);
        let run = || {
            let mut s = WorldState::reset(seed, &cfg).unwrap();
            let mut trace = Vec::new();
            for t in 0..cfg.episode_length {
                let acts: Vec<usize> = (0..n).map(|i| script[(t * n + i) % script.len()]).collect();
                let adv = s.heuristic_adversary();
                prop_assert_eq!(adv, s.clone().heuristic_adversary());
                s.step(&acts, RewardWeights::COVERAGE_ONLY, &cfg).unwrap();
                for (p, v) in s.good_positions.iter().zip(&s.good_velocities) {
                    prop_assert!(p.is_finite());
                    prop_assert!(v.norm() <= cfg.max_speed * (1.0 + 1e-12));
                }
                prop_assert!(s.adversary_velocity.norm() <= cfg.max_speed * (1.0 + 1e-12));
                trace.push(s.clone());
            }
            Ok(trace)
        };
        prop_assert_eq!(run()?, run()?);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn agent_distribution_ignores_opponent_order(
        team in prop::collection::vec(observation(3, 3), 2..4),
        seed in any::<u64>(),
    ) {
        let p = random_params(8, seed);
        let base = forward_team(&p, &team).unwrap();
        for perm in permutations(3) {
            let shuffled: Vec<Observation> = team
                .iter()
                .map(|o| Observation {
                    opponent_relpos: perm.iter().map(|&k| o.opponent_relpos[k]).collect(),
                    ..o.clone()
                })
                .collect();
            let out = forward_team(&p, &shuffled).unwrap();
            prop_assert!(max_prob_diff(&base, &out, |i| i) < 1e-10);
        }
    }

    #[test]
    fn agent_distribution_follows_peer_order(
        team in prop::collection::vec(observation(3, 1), 3..5),
        seed in any::<u64>(),
    ) {
        let p = random_params(8, seed);
        let base = forward_team(&p, &team).unwrap();
        let n = team.len();
        // Reverse every agent but the first.
        let order: Vec<usize> = std::iter::once(0).chain((1..n).rev()).collect();
        let shuffled: Vec<Observation> = order.iter().map(|&i| team[i].clone()).collect();
        let out = forward_team(&p, &shuffled).unwrap();
        prop_assert!(max_prob_diff(&base, &out, |i| order.iter().position(|&k| k == i).unwrap()) < 1e-10);
    }

    #[test]
    fn same_params_run_for_any_team_and_landmark_count(
        agents in 1usize..6,
        entities in 1usize..5,
        seed in any::<u64>(),
    ) {
        let p = random_params(8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let team: Vec<Observation> = (0..agents)
            .map(|_| Observation {
                self_state: [rng.random(), rng.random(), 0.0, 0.0],
                entity_relpos: (0..entities).map(|_| Vec2::new(rng.random(), rng.random())).collect(),
                target_flags: (0..entities).map(|k| k == 0).collect(),
                opponent_relpos: vec![Vec2::new(rng.random(), rng.random())],
            })
            .collect();
        let out = forward_team(&p, &team).unwrap();
        prop_assert_eq!(out.distributions.len(), agents);
        for d in &out.distributions {
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn entity_order_leaves_distribution_unchanged_for_all_orders() {
    let p = random_params(8, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let team: Vec<Observation> = (0..2)
        .map(|_| Observation {
            self_state: [rng.random(), rng.random(), rng.random(), rng.random()],
            entity_relpos: (0..5).map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
            target_flags: (0..5).map(|k| k == 2).collect(),
            opponent_relpos: vec![Vec2::new(0.3, -0.4)],
        })
        .collect();
    let base = forward_team(&p, &team).unwrap();
    let perms = permutations(5);
    assert_eq!(perms.len(), 120);
    for perm in perms {
        let shuffled: Vec<Observation> = team
            .iter()
            .map(|o| Observation {
                self_state: o.self_state,
                entity_relpos: perm.iter().map(|&k| o.entity_relpos[k]).collect(),
                target_flags: perm.iter().map(|&k| o.target_flags[k]).collect(),
                opponent_relpos: o.opponent_relpos.clone(),
            })
            .collect();
        let out = forward_team(&p, &shuffled).unwrap();
        assert!(max_prob_diff(&base, &out, |i| i) < 1e-10, "order {perm:?}");
    }
}

#[test]
fn reset_target_index_is_uniform() {
    let cfg = EnvConfig::default().with_agents(3);
    let trials = 1000usize;
    let mut counts = [0usize; 3];
    for seed in 0..trials as u64 {
        let s = WorldState::reset(seed, &cfg).unwrap();
        assert_eq!(s.target_index, s.target_index.min(2));
        counts[s.target_index] += 1;
    }
    let p = 1.0 / 3.0;
    let expected = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for c in counts {
        assert!((c as f64 - expected).abs() <= 3.0 * sigma, "counts {counts:?}");
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 99.9th percentile of chi-square with 2 degrees of freedom.
    assert!(chi2 < 13.816, "chi2 {chi2}");
}

#[test]
fn reset_places_separated_landmarks_inside_the_box() {
    let cfg = EnvConfig::default().with_agents(4);
    for seed in 0..200 {
        let s = WorldState::reset(seed, &cfg).unwrap();
        let all = s.landmark_positions.iter().chain(&s.good_positions).chain(std::iter::once(&s.adversary_position));
        for p in all {
            assert!(p.x.abs() <= 1.0 && p.y.abs() <= 1.0);
        }
        for (i, a) in s.landmark_positions.iter().enumerate() {
            for b in &s.landmark_positions[i + 1..] {
                assert!(a.dist(*b) >= cfg.landmark_separation);
            }
        }
    }
}

/// At new = old the clipped objective has the same gradient as `-mean(log pi(a) A)`.
#[test]
fn unclipped_surrogate_gradient_matches_vanilla_policy_gradient() {
    let env = EnvConfig::default();
    let cfg = TrainConfig {
        n_envs: 2,
        horizon: 100,
        ..TrainConfig::default()
    };
    let params = random_params(8, 3);
    let mut batch = collect_rollouts(&env, &params, &cfg, RewardWeights::COVERAGE_ONLY, 9).unwrap();
    batch.compute_advantages(cfg.gamma, cfg.lam, cfg.reward_scale);
    let mb = Minibatch::from_rollout(&batch, &[0, 7, 21, 40, 63, 88]);

    let mut g = Graph::with_params(&params.set);
    let (loss, parts) = ppo_loss(&mut g, &params, &mb, cfg.clip, 0.0, 0.0).unwrap();
    assert_eq!(parts.clip_fraction, 0.0);
    let surrogate = g.backward(loss).unwrap().into_param_grads();

    let mut g = Graph::with_params(&params.set);
    let fwd = policy::forward(&mut g, &params, &mb.inputs).unwrap();
    let logp_all = g.log_softmax(fwd.logits).unwrap();
    let logp = g.gather(logp_all, mb.actions.clone()).unwrap();
    let adv = g.constant(Tensor::vector(mb.advantages.clone()));
    let weighted = g.mul(logp, adv).unwrap();
    let mean = g.mean(weighted);
    let vanilla_loss = g.scale(mean, -1.0);
    let vanilla = g.backward(vanilla_loss).unwrap().into_param_grads();

    let scale = vanilla.iter().flat_map(|t| t.data()).fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(scale > 0.0);
    for (a, b) in surrogate.iter().zip(&vanilla) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
        }
    }
}
