use std::collections::{HashSet, VecDeque};
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use curistack::agent::{Agent, AgentConfig, Dims, PolicyId};
use curistack::blockworld::{Aabb, Action, BlockWorld, EnvConfig, Goal, RewardMode, Stage};
use curistack::config::{Preset, RunConfig};
use curistack::replay::{Episode, HerMode, ReplayBuffer, Transition};
use curistack::trainer::{average_agents, Trainer};

use crate::Outcome;

// Desk-scale training schedule shared by the blockworld runs.
const HIDDEN: [usize; 3] = [64, 64, 64];
const EXPLOIT_POLYAK: f64 = 0.05;
const WORKERS: usize = 2;
const CYCLES: usize = 10;
const EPISODES: usize = 2;
const BATCHES: usize = 40;
const BATCH_SIZE: usize = 256;
const TEST_EPISODES: usize = 10;
const WINDOW: usize = 100;

const PICK_BUDGET: u64 = 300_000;
const PICK_HER_TARGET: f64 = 0.9;
const PICK_NO_HER_CEILING: f64 = 0.2;
// On the default 0.3 m table a random drop lands within tolerance of the
// target about 13% of the time, which plain replay learns from. 0.5 m brings
// that under 4%.
const PICK_TABLE_HALF: f64 = 0.25;

const STACK_BUDGET: u64 = 1_200_000;
const STACK_LEVEL: f64 = 0.5;

fn desk_scale(preset: Preset, n_blocks: usize, mode: RewardMode, budget: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::preset(preset, n_blocks, mode);
    cfg.seed = seed;
    cfg.agent.hidden_layers = HIDDEN.to_vec();
    cfg.agent.dynamics_hidden_layers = HIDDEN.to_vec();
    cfg.agent.exploit_polyak = EXPLOIT_POLYAK;
    cfg.train.n_workers = WORKERS;
    cfg.train.epochs = usize::MAX;
    cfg.train.cycles_per_epoch = CYCLES;
    cfg.train.episodes_per_cycle = EPISODES;
    cfg.train.batches_per_cycle = BATCHES;
    cfg.train.batch_size = BATCH_SIZE;
    cfg.train.test_episodes = TEST_EPISODES;
    cfg.train.success_window = WINDOW;
    cfg.train.max_env_steps = Some(budget);
    cfg
}

fn curve_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance_{name}.csv"))
}

/// Success on the full task, tracked independently of the curriculum stage.
struct TargetTracker {
    env: BlockWorld,
    rng: ChaCha8Rng,
    window: VecDeque<bool>,
}

impl TargetTracker {
    fn new(env: &EnvConfig, seed: u64) -> Self {
        let mut cfg = env.clone();
        cfg.stage = Stage::Three;
        cfg.seed = seed ^ 0x7a26;
        Self {
            env: BlockWorld::new(cfg).unwrap(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            window: VecDeque::with_capacity(WINDOW),
        }
    }

    fn evaluate(&mut self, agent: &Agent) -> f64 {
        for _ in 0..TEST_EPISODES {
            let (mut obs, goal) = self.env.reset();
            let success = loop {
                let a = agent
                    .select_action(PolicyId::Exploit, &obs, Some(goal.as_slice()), None, &mut self.rng)
                    .unwrap();
                let out = self.env.step(&Action::from_slice(&a).unwrap());
                obs = out.obs;
                if out.done {
                    break out.info.is_success;
                }
            };
            if self.window.len() == WINDOW {
                self.window.pop_front();
            }
            self.window.push_back(success);
        }
        self.rate()
    }

    fn rate(&self) -> f64 {
        self.window.iter().filter(|&&s| s).count() as f64 / self.window.len().max(1) as f64
    }

    fn full(&self) -> bool {
        self.window.len() == WINDOW
    }
}

#[derive(Clone, Debug)]
struct Run {
    /// `(env_steps, training-stage window success, target-task window success, stage)` per epoch.
    curve: Vec<(u64, f64, f64, u8)>,
    final_target: f64,
}

impl Run {
    fn steps_to(&self, level: f64) -> Option<u64> {
        self.curve.iter().find(|c| c.2 >= level).map(|c| c.0)
    }

    fn write_csv(&self, name: &str) {
        let mut f = std::fs::File::create(curve_path(name)).unwrap();
        writeln!(f, "env_steps,stage_success,target_success,stage").unwrap();
        for (s, a, b, st) in &self.curve {
            writeln!(f, "{s},{a},{b},{st}").unwrap();
        }
    }

    fn summary(&self) -> String {
        let (s, _, _, st) = self.curve.last().copied().unwrap_or_default();
        format!("{:.2}@{}k(stage {st})", self.final_target, s / 1000)
    }
}

/// Trains until the budget runs out or `stop` says so; the target tracker
/// only counts once its window is full.
fn train(cfg: &RunConfig, name: &str, stop: impl Fn(&Run, bool) -> bool) -> Run {
    let mut trainer = Trainer::new(cfg.trainer_setup().unwrap()).unwrap();
    let mut tracker = TargetTracker::new(trainer.env_config(), cfg.seed);
    let mut run = Run {
        curve: Vec::new(),
        final_target: 0.0,
    };
    while !trainer.budget_exhausted() {
        let stats = trainer.run_epoch().unwrap();
        // measured on the full task whatever stage is being trained
        let rate = tracker.evaluate(trainer.agent());
        let target = if tracker.full() { rate } else { 0.0 };
        run.curve.push((stats.env_steps, stats.success_rate, target, stats.stage.index()));
        run.final_target = target;
        if stop(&run, tracker.full()) {
            break;
        }
    }
    run.write_csv(name);
    run
}

// ---------------------------------------------------------------- 8

pub fn pick_and_place_her() -> Outcome {
    let mut with = desk_scale(Preset::Vanilla, 1, RewardMode::Binary, PICK_BUDGET, 8);
    with.env.table_bounds = Some(Aabb {
        min: [-PICK_TABLE_HALF, -PICK_TABLE_HALF, 0.0],
        max: [PICK_TABLE_HALF, PICK_TABLE_HALF, 0.3],
    });
    let mut without = with.clone();
    without.ablation.use_her = false;
    let her = train(&with, "pick_her", |r, full| full && r.final_target >= PICK_HER_TARGET);
    let no_her = train(&without, "pick_no_her", |_, _| false);
    let reached = her.steps_to(PICK_HER_TARGET);
    let detail = format!(
        "HER: {} reaching {PICK_HER_TARGET} at {}; no HER: {} after {}k steps",
        her.summary(),
        reached.map_or("never".into(), |s| format!("{}k", s / 1000)),
        no_her.summary(),
        PICK_BUDGET / 1000
    );
    if reached.is_some_and(|s| s <= PICK_BUDGET) && no_her.final_target <= PICK_NO_HER_CEILING {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 9, 10

fn stack_run(preset: Preset) -> &'static Run {
    static ALL3: OnceLock<Run> = OnceLock::new();
    static NO_CURRICULUM: OnceLock<Run> = OnceLock::new();
    static NO_MULTI: OnceLock<Run> = OnceLock::new();
    let cell = match preset {
        Preset::All3 => &ALL3,
        Preset::NoCurriculum => &NO_CURRICULUM,
        Preset::NoMultiCriteria => &NO_MULTI,
        other => panic!("no stack run for {other:?}"),
    };
    cell.get_or_init(|| {
        let cfg = desk_scale(preset, 2, RewardMode::Incremental, STACK_BUDGET, 9);
        train(&cfg, &format!("stack2_{}", preset.name()), |_, _| false)
    })
}

pub fn curriculum_ordering() -> Outcome {
    let all3 = stack_run(Preset::All3);
    let flat = stack_run(Preset::NoCurriculum);
    let detail = format!("All-3 {} vs No-Curriculum {}", all3.summary(), flat.summary());
    if all3.final_target > flat.final_target {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn multi_criteria_ordering() -> Outcome {
    let multi = stack_run(Preset::All3);
    let standard = stack_run(Preset::NoMultiCriteria);
    let (a, b) = (multi.steps_to(STACK_LEVEL), standard.steps_to(STACK_LEVEL));
    let fmt = |s: Option<u64>| s.map_or("never".to_string(), |s| format!("{}k", s / 1000));
    let detail = format!(
        "steps to {STACK_LEVEL}: multi-criteria {} vs standard {} (curves in {})",
        fmt(a),
        fmt(b),
        curve_path("stack2_*").display()
    );
    match (a, b) {
        (Some(a), Some(b)) if a < b => Ok(detail),
        (Some(_), None) => Ok(detail),
        _ => Err(detail),
    }
}

// ---------------------------------------------------------------- 11

const ROOM_STEPS: usize = 50_000;
const ROOM_HORIZON: usize = 100;
const ROOM_SPEED: f64 = 0.02;
const ROOM_CELL: f64 = 0.02;
const ROOM_RATIO: f64 = 3.0;

/// Two unit rooms side by side, joined by a door in the shared wall.
struct TwoRooms {
    pos: [f64; 2],
}

impl TwoRooms {
    const START: [f64; 2] = [0.1, 0.1];
    const DOOR: (f64, f64) = (0.45, 0.55);

    fn step(&mut self, a: &[f64; 4]) {
        let dx = ROOM_SPEED * a[0].clamp(-1.0, 1.0);
        let dy = ROOM_SPEED * a[1].clamp(-1.0, 1.0);
        let y = (self.pos[1] + dy).clamp(0.0, 1.0);
        let mut x = (self.pos[0] + dx).clamp(0.0, 2.0);
        let crosses = (self.pos[0] < 1.0) != (x < 1.0);
        if crosses && !(Self::DOOR.0..=Self::DOOR.1).contains(&y) {
            x = self.pos[0];
        }
        self.pos = [x, y];
    }

    fn cell(&self) -> (i64, i64) {
        ((self.pos[0] / ROOM_CELL).floor() as i64, (self.pos[1] / ROOM_CELL).floor() as i64)
    }
}

fn room_coverage(policy: PolicyId, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = AgentConfig {
        hidden_layers: vec![64, 64],
        dynamics_hidden_layers: vec![64, 64],
        ..AgentConfig::default()
    };
    let dims = Dims { obs: 2, goal: 2, action: 4 };
    let mut agent = Agent::new(dims, config, 0.98, true, &mut rng).unwrap();
    let goal = Goal(vec![1.5, 0.5]);
    let mut buffer = ReplayBuffer::new(ROOM_STEPS);
    let mut visited = HashSet::new();
    for ep in 0..ROOM_STEPS / ROOM_HORIZON {
        let mut env = TwoRooms { pos: TwoRooms::START };
        visited.insert(env.cell());
        let noise = agent.episode_noise(policy, &mut rng);
        let mut trs = Vec::with_capacity(ROOM_HORIZON);
        for t in 0..ROOM_HORIZON {
            let obs = env.pos.to_vec();
            let a = agent
                .select_action(policy, &obs, Some(goal.as_slice()), Some(&noise), &mut rng)
                .unwrap();
            env.step(&a);
            visited.insert(env.cell());
            trs.push(Transition {
                obs,
                goal: goal.clone(),
                action: a,
                reward: 0.0,
                next_obs: env.pos.to_vec(),
                achieved_next: Goal(env.pos.to_vec()),
                next_gripper: [0.0; 3],
                t,
                episode_id: ep as u64,
            });
        }
        agent.observe_episode(&trs).unwrap();
        average_agents(&mut [&mut agent]).unwrap();
        buffer.store_episode(Episode::new(trs).unwrap()).unwrap();
        let mut last = Vec::new();
        for _ in 0..20 {
            last = buffer
                .sample_batch(128, 0.0, HerMode::None, |t: &Transition, _: &Goal| t.reward, &mut rng)
                .unwrap()
                .into_iter()
                .map(|s| s.transition)
                .collect();
            agent.train_batch(&last).unwrap();
        }
        let prepared = agent.prepare_batch(&last).unwrap();
        agent.adapt_noise(policy, &prepared, &mut rng).unwrap();
    }
    visited.len()
}

pub fn curiosity_coverage() -> Outcome {
    let combined = room_coverage(PolicyId::Combined, 11);
    let exploit = room_coverage(PolicyId::Exploit, 11);
    let ratio = combined as f64 / exploit.max(1) as f64;
    let detail = format!("distinct cells over {ROOM_STEPS} steps: pi_c {combined}, pi_r {exploit}, ratio {ratio:.2}");
    if ratio >= ROOM_RATIO {
        Ok(detail)
    } else {
        Err(detail)
    }
}
