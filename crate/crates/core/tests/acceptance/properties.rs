use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use curistack::agent::{critic_loss, Agent, AgentConfig, CriticId, Dims, PolicyId};
use curistack::blockworld::{
    self, Action, BlockState, BlockWorld, EnvConfig, EnvState, Goal, RewardMode, RewardParams, Stage,
};
use curistack::curiosity::dynamics_loss;
use curistack::ndmath::{finite_difference_error, Activation, Matrix, Mlp, MlpSpec};
use curistack::normalize::{PopArtHead, STD_FLOOR};
use curistack::replay::{env_reward, Episode, HerMode, ReplayBuffer, Transition};
use curistack::trainer::{average_parameters, CurriculumSchedule, HerConfig, TrainConfig, Trainer, TrainerSetup};

use crate::Outcome;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// One episode of a scripted controller with uniform jitter on the motion.
pub fn jittered_episode(env: &mut BlockWorld, jitter: f64, id: u64, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let (mut obs, goal) = env.reset();
    let horizon = env.config().horizon;
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut a = blockworld::scripted_action(env.state(), env.goal(), env.config()).to_array();
        for v in &mut a[..3] {
            *v += rng.random_range(-jitter..=jitter);
        }
        let step = env.step(&Action::from_slice(&a).unwrap());
        out.push(Transition {
            obs,
            goal: goal.clone(),
            action: a,
            reward: step.reward,
            next_obs: step.obs.clone(),
            achieved_next: blockworld::achieved_goal(env.state()),
            next_gripper: env.state().gripper_pos,
            t,
            episode_id: id,
        });
        obs = step.obs;
    }
    out
}

// ---------------------------------------------------------------- 1

const POPART_STEPS: usize = 10_000;
const POPART_PROBES: usize = 100;
const POPART_TOL: f64 = 1e-6;

pub fn popart_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut net = Mlp::new(MlpSpec::new(6, &[32, 32], 1, Activation::Identity), &mut rng).unwrap();
    let mut head = PopArtHead::new(1e-3);
    let probes = random_matrix(POPART_PROBES, 6, 2.0, &mut rng);
    let values = |net: &Mlp, head: &PopArtHead| -> Vec<f64> {
        net.predict(&probes).unwrap().as_slice().iter().map(|&n| head.denormalize(n)).collect()
    };
    // the target distribution random-walks over several orders of magnitude
    let (mut center, mut spread) = (0.0_f64, 1.0_f64);
    let mut worst = 0.0_f64;
    for step in 0..POPART_STEPS {
        center = (center + rng.random_range(-1.0..1.0) * spread).clamp(-5e3, 5e3);
        spread = (spread * rng.random_range(0.8..1.25)).clamp(1e-3, 500.0);
        head.step_size = [1e-3, 1e-2, 0.1, 1.0][step % 4];
        let batch: Vec<f64> = (0..rng.random_range(1..64))
            .map(|_| center + spread * rng.random_range(-1.0..1.0))
            .collect();
        let before = values(&net, &head);
        head.update(&mut net, &batch).map_err(|e| e.to_string())?;
        let after = values(&net, &head);
        for (a, b) in before.iter().zip(&after) {
            worst = worst.max((a - b).abs());
        }
        if step % 50 == 0 {
            // ordinary learning between statistics changes
            let x = random_matrix(16, 6, 2.0, &mut rng);
            let y: Vec<f64> = (0..16).map(|_| center + spread * rng.random_range(-1.0..1.0)).collect();
            let (_, g) = critic_loss(&net, &head, &x, &y).unwrap();
            let mut flat = net.flat_params();
            for (p, d) in flat.iter_mut().zip(g.flat()) {
                *p -= 1e-3 * d.clamp(-1.0, 1.0);
            }
            net.set_flat_params(&flat).unwrap();
        }
    }
    check!(worst < POPART_TOL, "max output change {worst:e} >= {POPART_TOL:e}");
    Ok(format!(
        "max change {worst:.2e} over {POPART_STEPS} updates, final mu {:.3e} sigma {:.3e}",
        head.mu, head.sigma
    ))
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn small_agent(seed: u64) -> (Agent, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AgentConfig {
        hidden_layers: vec![6, 5],
        dynamics_hidden_layers: vec![5],
        ..AgentConfig::default()
    };
    let dims = Dims { obs: 4, goal: 3, action: 4 };
    let mut agent = Agent::new(dims, cfg, 0.98, true, &mut rng).unwrap();
    // non-trivial statistics so that normalization matters
    for id in [CriticId::Exploit, CriticId::Explore] {
        let c = agent.critic_mut(id);
        c.head.set_statistics(&mut c.net, -2.5, 9.0).unwrap();
    }
    (agent, rng)
}

fn small_batch(agent: &Agent, rng: &mut ChaCha8Rng) -> curistack::agent::PreparedBatch {
    let trs: Vec<Transition> = (0..7)
        .map(|t| {
            let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let a = v(4);
            Transition {
                obs: v(4),
                goal: Goal(v(3)),
                action: [a[0], a[1], a[2], a[3]],
                reward: -((t % 3) as f64),
                next_obs: v(4),
                achieved_next: Goal(v(3)),
                next_gripper: [0.0; 3],
                t,
                episode_id: 0,
            }
        })
        .collect();
    agent.prepare_batch(&trs).unwrap()
}

/// `-Σ w mean Q(context ‖ actor(x)) + coeff · mean |z_out|²`, by forward passes only.
fn actor_objective(actor: &Mlp, inputs: &Matrix, terms: &[(f64, &Mlp, &Matrix)]) -> f64 {
    let (actions, cache) = actor.forward_batch(inputs).unwrap();
    let n = inputs.rows() as f64;
    let mut value = 0.0;
    for &(w, critic, context) in terms {
        let q = critic.predict(&Matrix::hcat(&[context, &actions]).unwrap()).unwrap();
        value -= w * q.as_slice().iter().sum::<f64>() / n;
    }
    let z2: f64 = cache.output_preactivations().as_slice().iter().map(|z| z * z).sum();
    value + actor.spec().preactivation_penalty * z2 / n
}

pub fn gradient_oracle() -> Outcome {
    let mut report = Vec::new();
    let mut worst_all = 0.0_f64;
    for seed in 0..3 {
        let (agent, mut rng) = small_agent(200 + seed);
        let batch = small_batch(&agent, &mut rng);
        let mut record = |name: &str, err: f64| {
            worst_all = worst_all.max(err);
            if seed == 0 {
                report.push(format!("{name} {err:.1e}"));
            }
            err
        };

        // critics: scale-invariant squared error against PopArt-normalized targets
        for id in [CriticId::Exploit, CriticId::Explore] {
            let c = agent.critic(id);
            let x = agent.critic_inputs(id, &batch).unwrap();
            let y: Vec<f64> = (0..x.rows()).map(|_| rng.random_range(-10.0..3.0)).collect();
            let (_, g) = critic_loss(&c.net, &c.head, &x, &y).unwrap();
            let head = c.head;
            let objective = |probe: &Mlp| {
                let p = probe.predict(&x).unwrap();
                p.as_slice()
                    .iter()
                    .zip(&y)
                    .map(|(n, t)| ((t - head.mu) / head.sigma - n).powi(2))
                    .sum::<f64>()
                    / y.len() as f64
            };
            let err = finite_difference_error::<_, ChaCha8Rng>(&c.net, &g, objective, FD_STEP, None).unwrap();
            let label = if id == CriticId::Exploit { "critic_r" } else { "critic_e" };
            check!(record(label, err) < GRAD_TOL, "seed {seed} {label}: rel err {err:e}");
        }

        // forward dynamics
        let dyn_net = agent.dynamics().net();
        let x = Matrix::hcat(&[&batch.obs, &batch.action]).unwrap();
        let (_, _, g) = dynamics_loss(dyn_net, &x, &batch.next_obs).unwrap();
        let objective = |probe: &Mlp| {
            let p = probe.predict(&x).unwrap();
            p.as_slice()
                .iter()
                .zip(batch.next_obs.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / x.rows() as f64
        };
        let err = finite_difference_error::<_, ChaCha8Rng>(dyn_net, &g, objective, FD_STEP, None).unwrap();
        check!(record("dynamics", err) < GRAD_TOL, "seed {seed} dynamics: rel err {err:e}");

        // the three actors
        let og = Matrix::hcat(&[&batch.obs, &batch.goal]).unwrap();
        let q_r = &agent.critic(CriticId::Exploit).net;
        let q_e = &agent.critic(CriticId::Explore).net;
        let [w_e, w_r] = agent.config().combine_weights;
        for id in [PolicyId::Exploit, PolicyId::Explore, PolicyId::Combined] {
            let actor = &agent.actor(id).net;
            check!(
                actor.spec().preactivation_penalty == 0.001,
                "actor penalty is {}",
                actor.spec().preactivation_penalty
            );
            let (_, g) = agent.actor_gradients(id, &batch).unwrap();
            let (inputs, terms): (&Matrix, Vec<(f64, &Mlp, &Matrix)>) = match id {
                PolicyId::Exploit => (&og, vec![(1.0, q_r, &og)]),
                PolicyId::Explore => (&batch.obs, vec![(1.0, q_e, &batch.obs)]),
                PolicyId::Combined => (&og, vec![(w_e, q_e, &batch.obs), (w_r, q_r, &og)]),
            };
            let objective = |probe: &Mlp| actor_objective(probe, inputs, &terms);
            let err = finite_difference_error::<_, ChaCha8Rng>(actor, &g, objective, FD_STEP, None).unwrap();
            let label = format!("{id:?} actor");
            check!(record(&label, err) < GRAD_TOL, "seed {seed} {label}: rel err {err:e}");
        }
    }
    Ok(format!("worst rel err {worst_all:.2e} over 3 seeds; {}", report.join(", ")))
}

// ---------------------------------------------------------------- 3

const HER_SAMPLES: usize = 10_000;
const HER_Z: f64 = 0.8;
const PER_CRITERION_RANGE: (f64, f64) = (0.78, 0.82);
const JOINT_RANGE: (f64, f64) = (0.49, 0.54);

/// Reward by direct criterion counting, written independently of the library.
fn reward_by_counting(blocks: &[f64], gripper: &[f64], goal: &[f64], n: usize, tol: f64, mode: RewardMode) -> f64 {
    let d = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut placed = 0;
    let mut away = true;
    for i in 0..n {
        let p = &blocks[3 * i..3 * i + 3];
        if d(p, &goal[3 * i..3 * i + 3]) <= tol {
            placed += 1;
        }
        if d(p, gripper) <= 2.0 * tol {
            away = false;
        }
    }
    let base = match mode {
        RewardMode::Binary => {
            if placed == n {
                0.0
            } else {
                -1.0
            }
        }
        RewardMode::Incremental => placed as f64 - n as f64,
    };
    base + if placed == n && away { 1.0 } else { 0.0 }
}

pub fn her_consistency() -> Outcome {
    let n = 3;
    let mut cfg = EnvConfig::new(n);
    cfg.reward_mode = RewardMode::Incremental;
    cfg.seed = 5;
    let mut env = BlockWorld::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut buffer = ReplayBuffer::new(1_000_000);
    let mut episodes = Vec::new();
    for id in 0..30 {
        let ep = jittered_episode(&mut env, 0.6, id, &mut rng);
        episodes.push(ep.clone());
        buffer.store_episode(Episode::new(ep).unwrap()).unwrap();
    }
    let sampled = buffer
        .sample_batch(HER_SAMPLES, HER_Z, HerMode::MultiCriteria, env_reward(cfg.reward_params()), &mut rng)
        .unwrap();
    let mut per = [0usize; 3];
    let mut joint = 0usize;
    let mut relabeled = 0usize;
    for s in &sampled {
        let tr = &s.transition;
        let ep = &episodes[tr.episode_id as usize];
        let original = &ep[tr.t];
        check!(
            tr.obs == original.obs && tr.achieved_next == original.achieved_next,
            "sample does not match its stored transition"
        );
        for i in 0..n {
            let value = tr.goal.criterion(i);
            match s.sources[i] {
                Some(f) => {
                    check!(f > tr.t && f < ep.len(), "criterion {i} sourced from t'={f} for t={}", tr.t);
                    check!(
                        ep[f].achieved_next.criterion(i) == value,
                        "criterion {i} does not equal block {i} at t'={f}"
                    );
                    per[i] += 1;
                }
                None => check!(
                    value == original.goal.criterion(i),
                    "unreplaced criterion {i} changed"
                ),
            }
            // every goal component is either original or block i at some later step
            let provenance = value == original.goal.criterion(i)
                || ep[tr.t + 1..].iter().any(|later| later.achieved_next.criterion(i) == value);
            check!(provenance, "criterion {i} of a t={} sample has no later origin", tr.t);
        }
        if s.sources.iter().all(Option::is_some) {
            joint += 1;
        }
        if s.sources.iter().any(Option::is_some) {
            relabeled += 1;
        }
        let expected = reward_by_counting(
            tr.achieved_next.as_slice(),
            &tr.next_gripper,
            tr.goal.as_slice(),
            n,
            cfg.tolerance,
            cfg.reward_mode,
        );
        check!(tr.reward == expected, "reward {} != recount {expected}", tr.reward);
    }
    let freq: Vec<f64> = per.iter().map(|&c| c as f64 / HER_SAMPLES as f64).collect();
    let joint = joint as f64 / HER_SAMPLES as f64;
    for (i, f) in freq.iter().enumerate() {
        check!(
            (PER_CRITERION_RANGE.0..=PER_CRITERION_RANGE.1).contains(f),
            "criterion {i} replacement frequency {f:.4} outside {PER_CRITERION_RANGE:?}"
        );
    }
    check!(
        (JOINT_RANGE.0..=JOINT_RANGE.1).contains(&joint),
        "joint replacement frequency {joint:.4} outside {JOINT_RANGE:?}"
    );
    Ok(format!(
        "per-criterion {:.4}/{:.4}/{:.4}, joint {joint:.4}, {relabeled} relabeled, all rewards recounted exactly",
        freq[0], freq[1], freq[2]
    ))
}

// ---------------------------------------------------------------- 4

fn closed_form(mode: RewardMode, n: usize, placed: usize, away: bool) -> f64 {
    let all = placed == n;
    let base = match mode {
        RewardMode::Binary => -((!all) as u8 as f64),
        RewardMode::Incremental => placed as f64 - n as f64,
    };
    base + (all && away) as u8 as f64
}

pub fn reward_closed_forms() -> Outcome {
    let mut cases = 0;
    for n in 1..=4 {
        let mut cfg = EnvConfig::new(n);
        for mode in [RewardMode::Binary, RewardMode::Incremental] {
            cfg.reward_mode = mode;
            let tol = cfg.tolerance;
            let params = RewardParams { n_blocks: n, tolerance: tol, mode };
            let targets: Vec<[f64; 3]> = (0..n).map(|i| [-0.12 + 0.08 * i as f64, 0.05, 0.025]).collect();
            let goal = Goal::from_criteria(&targets);
            for pattern in 0u32..(1 << n) {
                let blocks: Vec<[f64; 3]> = targets
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if pattern & (1 << i) != 0 {
                            [t[0] + 0.6 * tol, t[1], t[2]]
                        } else {
                            [t[0], t[1] + 1.5 * tol, t[2]]
                        }
                    })
                    .collect();
                let placed = pattern.count_ones() as usize;
                for away in [true, false] {
                    let gripper = if away {
                        [0.0, -0.12, 0.25]
                    } else {
                        let b = blocks[n - 1];
                        [b[0], b[1], b[2] + 1.5 * tol]
                    };
                    let state = EnvState {
                        gripper_pos: gripper,
                        gripper_vel: [0.0; 3],
                        claw: 1.0,
                        blocks: blocks.iter().map(|&pos| BlockState { pos, vel: [0.0; 3] }).collect(),
                        held_block: None,
                        t: 0,
                    };
                    let expected = closed_form(mode, n, placed, away);
                    let via_state = blockworld::reward_fn(&state, &goal, &cfg);
                    let via_positions =
                        blockworld::reward_from_positions(&state.block_positions(), &gripper, goal.as_slice(), &params);
                    check!(
                        via_state == expected && via_positions == expected,
                        "n={n} {mode:?} pattern {pattern:0n$b} away={away}: got {via_state}/{via_positions}, want {expected}"
                    );
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} cases exact"))
}

// ---------------------------------------------------------------- 5

const STATS_TOL: f64 = 1e-9;

fn tiny_setup(n_workers: usize, n_blocks: usize, curriculum: bool, seed: u64) -> TrainerSetup {
    let mut env = EnvConfig::new(n_blocks);
    env.horizon = 20;
    env.seed = seed;
    TrainerSetup {
        env,
        agent: AgentConfig {
            hidden_layers: vec![16, 16],
            dynamics_hidden_layers: vec![16],
            ..AgentConfig::default()
        },
        train: TrainConfig {
            n_workers,
            epochs: 1,
            cycles_per_epoch: 1,
            episodes_per_cycle: 2,
            batches_per_cycle: 2,
            batch_size: 32,
            test_episodes: 10,
            buffer_capacity: 10_000,
            success_window: 10,
            seed,
            ..TrainConfig::default()
        },
        her: HerConfig::default(),
        curriculum: CurriculumSchedule {
            enabled: curriculum,
            ..CurriculumSchedule::default()
        },
        use_curiosity: true,
    }
}

fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    (mean, std)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn worker_averaging() -> Outcome {
    let mut trainer = Trainer::new(tiny_setup(4, 2, false, 505)).unwrap();
    let her = HerConfig::default();
    let reward = env_reward(trainer.env_config().reward_params());
    for (i, w) in trainer.workers_mut().iter_mut().enumerate() {
        for _ in 0..2 {
            w.rollout(i).unwrap();
        }
        // local pending statistics become usable only at the barrier; train
        // on whatever each worker has, so parameters diverge
        for _ in 0..3 {
            let batch: Vec<Transition> = w
                .buffer
                .sample_batch(32, her.augment_prob, her.mode, reward, &mut w.rng)
                .unwrap()
                .into_iter()
                .map(|s| s.transition)
                .collect();
            w.agent.train_batch(&batch).unwrap();
        }
    }
    let workers = trainer.workers();
    let snapshot: Vec<Vec<Vec<f64>>> = workers
        .iter()
        .map(|w| w.agent.networks().iter().map(|n| n.flat_params()).collect())
        .collect();
    let n_nets = snapshot[0].len();
    let distinct = (1..workers.len()).any(|k| snapshot[k] != snapshot[0]);
    check!(distinct, "local updates did not diverge");

    // independent mean; critic nets first get the PopArt rewrite to the mean statistics
    let critic_slots: Vec<(usize, CriticId, bool)> = {
        let nets = workers[0].agent.networks();
        let mut v = Vec::new();
        for id in [CriticId::Exploit, CriticId::Explore] {
            let c = workers[0].agent.critic(id);
            for (k, n) in nets.iter().enumerate() {
                if std::ptr::eq(*n, &c.net) {
                    v.push((k, id, false));
                }
                if std::ptr::eq(*n, &c.target) {
                    v.push((k, id, true));
                }
            }
        }
        v
    };
    check!(critic_slots.len() == 4, "expected 4 critic networks, found {}", critic_slots.len());
    let wn = workers.len() as f64;
    let mut expected = vec![vec![0.0; 0]; n_nets];
    for k in 0..n_nets {
        let len = snapshot[0][k].len();
        let mut mean = vec![0.0; len];
        for (wi, w) in workers.iter().enumerate() {
            let mut p = snapshot[wi][k].clone();
            if let Some(&(_, id, is_target)) = critic_slots.iter().find(|s| s.0 == k) {
                let heads: Vec<PopArtHead> = workers
                    .iter()
                    .map(|w| {
                        let c = w.agent.critic(id);
                        if is_target {
                            c.target_head
                        } else {
                            c.head
                        }
                    })
                    .collect();
                let mu = heads.iter().map(|h| h.mu).sum::<f64>() / wn;
                let nu = heads.iter().map(|h| h.second_moment).sum::<f64>() / wn;
                let sigma = (nu - mu * mu).max(0.0).sqrt().max(curistack::normalize::SIGMA_FLOOR);
                let own = heads[wi];
                let top = w.agent.networks()[k].layers().last().unwrap();
                let (nw, nb) = (top.weights.as_slice().len(), top.biases.len());
                let off = len - nw - nb;
                for x in &mut p[off..off + nw] {
                    *x *= own.sigma / sigma;
                }
                for b in &mut p[off + nw..] {
                    *b = (own.sigma * *b + own.mu - mu) / sigma;
                }
            }
            for (m, x) in mean.iter_mut().zip(&p) {
                *m += x / wn;
            }
        }
        expected[k] = mean;
    }

    // pooled data each worker has seen
    let mut obs_rows: Vec<Vec<f64>> = Vec::new();
    let mut goal_rows: Vec<Vec<f64>> = Vec::new();
    for w in workers {
        for ep in w.buffer.episodes() {
            let trs = ep.transitions();
            obs_rows.extend(trs.iter().map(|t| t.obs.clone()));
            obs_rows.push(trs.last().unwrap().next_obs.clone());
            for t in trs {
                goal_rows.push(t.goal.0.clone());
                goal_rows.push(t.achieved_next.0.clone());
            }
        }
    }
    let (obs_mean, obs_std) = two_pass(&obs_rows);
    let (goal_mean, goal_std) = two_pass(&goal_rows);

    let workers = trainer.workers_mut();
    average_parameters(workers).unwrap();

    let first: Vec<Vec<f64>> = workers[0].agent.networks().iter().map(|n| n.flat_params()).collect();
    for w in workers.iter() {
        let p: Vec<Vec<f64>> = w.agent.networks().iter().map(|n| n.flat_params()).collect();
        check!(p == first, "workers differ after the barrier");
        check!(
            w.agent.checksum() == workers[0].agent.checksum(),
            "agent checksums differ after the barrier"
        );
    }
    let mut worst_mean = 0.0_f64;
    for k in 0..n_nets {
        worst_mean = worst_mean.max(max_diff(&first[k], &expected[k]));
    }
    check!(worst_mean < 1e-12, "averaged parameters deviate from the mean by {worst_mean:e}");

    let a = &workers[0].agent;
    let d = [
        max_diff(a.obs_normalizer().stats().mean(), &obs_mean),
        max_diff(a.obs_normalizer().stats().std(), &obs_std),
        max_diff(a.goal_normalizer().stats().mean(), &goal_mean),
        max_diff(a.goal_normalizer().stats().std(), &goal_std),
    ];
    let worst_stats = d.iter().copied().fold(0.0, f64::max);
    check!(worst_stats < STATS_TOL, "normalizer stats deviate from pooled data by {worst_stats:e}");
    check!(
        a.obs_normalizer().stats().count() == obs_rows.len() as f64,
        "normalizer count {} != {}",
        a.obs_normalizer().stats().count(),
        obs_rows.len()
    );
    Ok(format!(
        "4 workers bit-identical, mean err {worst_mean:.1e}, stats err {worst_stats:.1e} over {} obs",
        obs_rows.len()
    ))
}

// ---------------------------------------------------------------- 6

pub fn curriculum_transition() -> Outcome {
    let mut trainer = Trainer::new(tiny_setup(2, 2, true, 606)).unwrap();
    check!(trainer.stage() == Stage::One, "curriculum starts at {:?}", trainer.stage());
    trainer.run_cycle().unwrap();
    check!(
        trainer.workers().iter().all(|w| !w.buffer.is_empty()),
        "buffers empty after a cycle"
    );
    check!(
        trainer.workers().iter().all(|w| !w.agent.optimizers_are_reset()),
        "optimizers untouched after a cycle"
    );
    check!(!trainer.maybe_advance_stage(), "advanced with an empty window");
    // the scripted controller fills the window with successes
    let cfg = trainer.env_config().clone();
    let (rate, _) = trainer
        .evaluate_with(|s, g, _| Ok(blockworld::scripted_action(s, g, &cfg)))
        .unwrap();
    check!(rate >= 0.9, "scripted success {rate} below threshold");
    let sigma_before: Vec<f64> = trainer.workers().iter().map(|w| w.agent.param_sigma()).collect();
    let sums: Vec<u64> = trainer.workers().iter().map(|w| w.agent.checksum()).collect();
    check!(trainer.maybe_advance_stage(), "threshold crossing did not advance");
    check!(trainer.stage() == Stage::Two, "stage is {:?}", trainer.stage());
    for (i, w) in trainer.workers().iter().enumerate() {
        check!(w.buffer.is_empty(), "worker {i} buffer has {} transitions", w.buffer.len());
        check!(w.agent.checksum() == sums[i], "worker {i} parameters changed");
        check!(w.agent.optimizers_are_reset(), "worker {i} optimizer moments not reset");
        check!(
            w.agent.param_sigma() == w.agent.config().noise.param_noise_initial_sigma,
            "worker {i} noise sigma {} (was {}) not reset",
            w.agent.param_sigma(),
            sigma_before[i]
        );
        check!(w.env.config().stage == Stage::Two, "worker {i} env still at {:?}", w.env.config().stage);
    }
    check!(!trainer.maybe_advance_stage(), "advanced twice on one crossing");
    check!(trainer.stage() == Stage::Two, "stage moved to {:?}", trainer.stage());
    Ok("buffers emptied, checksums kept, moments and noise reset, stage 1 -> 2 once".into())
}

// ---------------------------------------------------------------- 7

pub fn goal_blindness() -> Outcome {
    let mut trainer = Trainer::new(tiny_setup(1, 3, false, 707)).unwrap();
    let w = &mut trainer.workers_mut()[0];
    for _ in 0..3 {
        w.rollout(0).unwrap();
    }
    w.agent.observe_episode(&[]).unwrap();
    let mut agent = w.agent.clone();
    let transitions: Vec<Transition> = w
        .buffer
        .sample_batch(64, 0.8, HerMode::MultiCriteria, env_reward(EnvConfig::new(3).reward_params()), &mut w.rng)
        .unwrap()
        .into_iter()
        .map(|s| s.transition)
        .collect();
    // a few updates so the networks are not at initialization
    for _ in 0..3 {
        agent.train_batch(&transitions).unwrap();
    }
    let batch = agent.prepare_batch(&transitions).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..batch.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = batch.clone();
        shuffled.permute_goals(&perm);
        check!(shuffled.goal != batch.goal, "permutation left goals in place");

        let (mut a1, mut a2) = (agent.clone(), agent.clone());
        let (r1, _) = a1.exploration_rewards(&batch).unwrap();
        let (r2, _) = a2.exploration_rewards(&shuffled).unwrap();
        check!(r1 == r2, "exploration rewards depend on goals");
        let t1 = a1.compute_targets(&batch, Some(&r1)).unwrap();
        let t2 = a2.compute_targets(&shuffled, Some(&r2)).unwrap();
        check!(t1.explore == t2.explore, "explore critic targets depend on goals");
        check!(t1.exploit != t2.exploit, "exploit targets ignored the goal shuffle");
        let (_, g1) = a1.actor_gradients(PolicyId::Explore, &batch).unwrap();
        let (_, g2) = a2.actor_gradients(PolicyId::Explore, &shuffled).unwrap();
        check!(g1 == g2, "explore actor gradients depend on goals");
        a1.update_critics(&batch, &t1).unwrap();
        a2.update_critics(&shuffled, &t2).unwrap();
        check!(
            a1.critic(CriticId::Explore).net == a2.critic(CriticId::Explore).net,
            "explore critic update depends on goals"
        );
        checked += 1;
    }
    Ok(format!("{checked} permutations, explore targets and gradients bit-identical"))
}
