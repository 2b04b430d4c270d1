//! Deterministic kinematic block-stacking environment.
//!
//! A point gripper moves in a box above a table and carries at most one of `n`
//! labelled cubes. Grasping attaches the nearest block within half a block
//! width of the grasp point; releasing drops it onto the highest block whose
//! footprint overlaps, or onto the table. There is no contact dynamics, so
//! every trajectory is a pure function of the seed and the action sequence.
//!
//! Observation layout: `gripper_pos(3), gripper_vel(3), claw(1)`, then for each
//! block `pos(3), vel(3)`. A goal is `n` target positions, one criterion per
//! block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const CRITERION_DIM: usize = 3;
pub const ACTION_DIM: usize = 4;
pub const MAX_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// 0 when every block is in place, -1 otherwise.
    Binary,
    /// Number of blocks in place minus number of blocks.
    Incremental,
}

/// Curriculum stage selecting the reset distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Table targets, optionally one in the air.
    One = 1,
    /// Stack targets with a random number of blocks already placed.
    Two = 2,
    /// Stack targets, all blocks on the table.
    Three = 3,
}

impl Stage {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::One => Some(Stage::Two),
            Stage::Two => Some(Stage::Three),
            Stage::Three => None,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(format!("stage must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub n_blocks: usize,
    /// Goal satisfaction radius (closed ball).
    pub tolerance: f64,
    pub horizon: usize,
    pub reward_mode: RewardMode,
    pub stage: Stage,
    /// `min/max` x and y are the table extents; z spans the gripper workspace.
    pub table_bounds: Aabb,
    pub block_size: f64,
    /// Gripper displacement per step at unit action.
    pub max_gripper_speed: f64,
    /// Held blocks hang `claw_depth / 2` below the gripper.
    pub claw_depth: f64,
    /// Stage 1 probability that one target is lifted off the table.
    pub air_target_prob: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            n_blocks,
            tolerance: 0.05,
            horizon: 50 * n_blocks.max(1),
            reward_mode: RewardMode::Incremental,
            stage: Stage::Three,
            table_bounds: Aabb {
                min: [-0.15, -0.15, 0.0],
                max: [0.15, 0.15, 0.3],
            },
            block_size: 0.05,
            max_gripper_speed: 0.05,
            claw_depth: 0.0,
            air_target_prob: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("env.{field}: {msg}")));
        if !(1..=MAX_BLOCKS).contains(&self.n_blocks) {
            return bad("n_blocks", "must be between 1 and 4");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance", "must be positive");
        }
        if self.horizon < 1 {
            return bad("horizon", "must be at least 1");
        }
        if !(self.block_size > 0.0) {
            return bad("block_size", "must be positive");
        }
        if !(self.max_gripper_speed > 0.0) {
            return bad("max_gripper_speed", "must be positive");
        }
        if !(self.claw_depth >= 0.0) {
            return bad("claw_depth", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.air_target_prob) {
            return bad("air_target_prob", "must lie in [0, 1]");
        }
        let b = &self.table_bounds;
        let sep = self.spawn_separation();
        for axis in 0..2 {
            if b.max[axis] - b.min[axis] < self.block_size + 2.0 * sep {
                return bad("table_bounds", "table too small for the block spacing");
            }
        }
        if b.min[2] != 0.0 || b.max[2] < self.level_z(self.n_blocks + 1) {
            return bad(
                "table_bounds",
                "z must start at the table (0) and leave room above a full stack",
            );
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        obs_dim(self.n_blocks)
    }

    pub fn goal_dim(&self) -> usize {
        self.n_blocks * CRITERION_DIM
    }

    pub fn reward_params(&self) -> RewardParams {
        RewardParams {
            n_blocks: self.n_blocks,
            tolerance: self.tolerance,
            mode: self.reward_mode,
        }
    }

    /// Height of a block center at stack level `k` (0 = on the table).
    #[inline]
    pub fn level_z(&self, k: usize) -> f64 {
        self.block_size * (0.5 + k as f64)
    }

    fn level_of(&self, z: f64) -> usize {
        ((z / self.block_size) - 0.5).round().max(0.0) as usize
    }

    fn spawn_separation(&self) -> f64 {
        1.5 * self.block_size.max(self.tolerance)
    }

    fn gripper_z_min(&self) -> f64 {
        self.block_size / 2.0 + self.claw_depth / 2.0
    }
}

pub fn obs_dim(n_blocks: usize) -> usize {
    7 + 6 * n_blocks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub pos: [f64; 3],
    pub vel: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper_pos: [f64; 3],
    pub gripper_vel: [f64; 3],
    /// 0 closed, 1 open.
    pub claw: f64,
    pub blocks: Vec<BlockState>,
    pub held_block: Option<usize>,
    pub t: usize,
}

impl EnvState {
    pub fn block_positions(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.pos).collect()
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(obs_dim(self.blocks.len()));
        obs.extend_from_slice(&self.gripper_pos);
        obs.extend_from_slice(&self.gripper_vel);
        obs.push(self.claw);
        for b in &self.blocks {
            obs.extend_from_slice(&b.pos);
            obs.extend_from_slice(&b.vel);
        }
        obs
    }
}

/// Per-block target positions; criterion `i` is block `i`'s target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Goal(pub Vec<f64>);

impl Goal {
    pub fn from_criteria(criteria: &[[f64; 3]]) -> Self {
        Goal(criteria.iter().flatten().copied().collect())
    }

    pub fn n_criteria(&self) -> usize {
        self.0.len() / CRITERION_DIM
    }

    pub fn criterion(&self, i: usize) -> [f64; 3] {
        let c = &self.0[i * CRITERION_DIM..(i + 1) * CRITERION_DIM];
        [c[0], c[1], c[2]]
    }

    pub fn set_criterion(&mut self, i: usize, value: [f64; 3]) {
        self.0[i * CRITERION_DIM..(i + 1) * CRITERION_DIM].copy_from_slice(&value);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Negative closes the claw, positive opens it, zero keeps it.
    pub claw: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
        claw: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dz: f64, claw: f64) -> Self {
        Self { dx, dy, dz, claw }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        ensure!(v.len() == ACTION_DIM, "action has {} components, expected 4", v.len());
        Ok(Self::new(v[0], v[1], v[2], v[3]))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dz, self.claw]
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self::new(c(self.dx), c(self.dy), c(self.dz), c(self.claw))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub n_blocks: usize,
    pub tolerance: f64,
    pub mode: RewardMode,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Which criteria are within `tolerance` (inclusive) of their targets.
pub fn criteria_satisfied(block_positions: &[f64], goal: &[f64], tolerance: f64) -> Vec<bool> {
    block_positions
        .chunks_exact(CRITERION_DIM)
        .zip(goal.chunks_exact(CRITERION_DIM))
        .map(|(p, g)| dist(p, g) <= tolerance)
        .collect()
}

/// Reward for reaching `block_positions` with the gripper at `gripper`.
///
/// Binary: `0` if all placed else `-1`; incremental: `#placed - n`. Both add
/// `+1` when all blocks are placed and the gripper is farther than
/// `2 * tolerance` from every block.
pub fn reward_from_positions(
    block_positions: &[f64],
    gripper: &[f64],
    goal: &[f64],
    params: &RewardParams,
) -> f64 {
    let sat = criteria_satisfied(block_positions, goal, params.tolerance);
    let placed = sat.iter().filter(|&&s| s).count();
    let all = placed == params.n_blocks;
    let base = match params.mode {
        RewardMode::Binary => {
            if all {
                0.0
            } else {
                -1.0
            }
        }
        RewardMode::Incremental => placed as f64 - params.n_blocks as f64,
    };
    let away = block_positions
        .chunks_exact(CRITERION_DIM)
        .all(|p| dist(p, gripper) > 2.0 * params.tolerance);
    if all && away {
        base + 1.0
    } else {
        base
    }
}

pub fn reward_fn(next_state: &EnvState, goal: &Goal, config: &EnvConfig) -> f64 {
    reward_from_positions(
        &next_state.block_positions(),
        &next_state.gripper_pos,
        goal.as_slice(),
        &config.reward_params(),
    )
}

pub fn achieved_goal(state: &EnvState) -> Goal {
    Goal(state.block_positions())
}

pub fn is_success(state: &EnvState, goal: &Goal, config: &EnvConfig) -> bool {
    criteria_satisfied(&state.block_positions(), goal.as_slice(), config.tolerance)
        .into_iter()
        .all(|s| s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub criteria_satisfied: Vec<bool>,
    pub is_success: bool,
}

pub fn reset(config: &EnvConfig, rng: &mut impl Rng) -> (EnvState, Goal) {
    match config.stage {
        Stage::One => reset_stage1(config, rng),
        Stage::Two => {
            let k = rng.random_range(0..config.n_blocks);
            reset_stage2(config, k, rng)
        }
        Stage::Three => reset_stage2(config, 0, rng),
    }
}

fn table_point(config: &EnvConfig, rng: &mut impl Rng, taken: &[[f64; 2]]) -> [f64; 2] {
    let b = &config.table_bounds;
    let half = config.block_size / 2.0;
    let sep = config.spawn_separation();
    let mut p = [0.0; 2];
    for _ in 0..10_000 {
        p = [
            rng.random_range(b.min[0] + half..=b.max[0] - half),
            rng.random_range(b.min[1] + half..=b.max[1] - half),
        ];
        if taken.iter().all(|q| dist(&p, q) >= sep) {
            return p;
        }
    }
    p
}

fn initial_gripper(config: &EnvConfig, rng: &mut impl Rng) -> [f64; 3] {
    let b = &config.table_bounds;
    let half = config.block_size / 2.0;
    [
        rng.random_range(b.min[0] + half..=b.max[0] - half),
        rng.random_range(b.min[1] + half..=b.max[1] - half),
        config.level_z(1) + config.claw_depth / 2.0,
    ]
}

fn fresh_state(config: &EnvConfig, gripper: [f64; 3], blocks: Vec<[f64; 3]>) -> EnvState {
    let _ = config;
    EnvState {
        gripper_pos: gripper,
        gripper_vel: [0.0; 3],
        claw: 1.0,
        blocks: blocks
            .into_iter()
            .map(|pos| BlockState { pos, vel: [0.0; 3] })
            .collect(),
        held_block: None,
        t: 0,
    }
}

fn reset_stage1(config: &EnvConfig, rng: &mut impl Rng) -> (EnvState, Goal) {
    let n = config.n_blocks;
    let gripper = initial_gripper(config, rng);
    let mut taken: Vec<[f64; 2]> = Vec::with_capacity(2 * n);
    let z0 = config.level_z(0);
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        let p = table_point(config, rng, &taken);
        taken.push(p);
        blocks.push([p[0], p[1], z0]);
    }
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let p = table_point(config, rng, &taken);
        taken.push(p);
        targets.push([p[0], p[1], z0]);
    }
    if rng.random_bool(config.air_target_prob) {
        let i = rng.random_range(0..n);
        targets[i][2] = rng.random_range(config.level_z(1)..=config.level_z(3));
    }
    (fresh_state(config, gripper, blocks), Goal::from_criteria(&targets))
}

/// Stack reset with the bottom `k` blocks already at their targets.
pub fn reset_stage2(config: &EnvConfig, k: usize, rng: &mut impl Rng) -> (EnvState, Goal) {
    let n = config.n_blocks;
    let k = k.min(n);
    let gripper = initial_gripper(config, rng);
    let mut taken: Vec<[f64; 2]> = Vec::with_capacity(n + 1);
    let base = table_point(config, rng, &taken);
    taken.push(base);
    let targets: Vec<[f64; 3]> = (0..n)
        .map(|i| [base[0], base[1], config.level_z(i)])
        .collect();
    let mut blocks = Vec::with_capacity(n);
    for (i, target) in targets.iter().enumerate() {
        if i < k {
            blocks.push(*target);
        } else {
            let p = table_point(config, rng, &taken);
            taken.push(p);
            blocks.push([p[0], p[1], config.level_z(0)]);
        }
    }
    (fresh_state(config, gripper, blocks), Goal::from_criteria(&targets))
}

fn grasp_point(state: &EnvState, config: &EnvConfig) -> [f64; 3] {
    let g = state.gripper_pos;
    [g[0], g[1], g[2] - config.claw_depth / 2.0]
}

fn footprints_overlap(a: &[f64; 3], b: &[f64; 3], size: f64) -> bool {
    (a[0] - b[0]).abs() < size && (a[1] - b[1]).abs() < size
}

/// Drops every unheld block onto its highest overlapping support.
fn settle(blocks: &mut [BlockState], held: Option<usize>, config: &EnvConfig) {
    let mut order: Vec<usize> = (0..blocks.len()).filter(|&i| Some(i) != held).collect();
    order.sort_by(|&a, &b| {
        blocks[a].pos[2]
            .total_cmp(&blocks[b].pos[2])
            .then(a.cmp(&b))
    });
    let mut settled: Vec<(usize, usize)> = Vec::with_capacity(order.len());
    for i in order {
        let pos = blocks[i].pos;
        let level = settled
            .iter()
            .filter(|(j, _)| footprints_overlap(&pos, &blocks[*j].pos, config.block_size))
            .map(|(_, l)| l + 1)
            .max()
            .unwrap_or(0);
        blocks[i].pos[2] = config.level_z(level);
        settled.push((i, level));
    }
}

/// Level a block released at `xy` would come to rest on, ignoring `skip`.
pub fn landing_level(state: &EnvState, xy: [f64; 2], skip: Option<usize>, config: &EnvConfig) -> usize {
    let probe = [xy[0], xy[1], 0.0];
    state
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip && Some(*i) != state.held_block)
        .filter(|(_, b)| footprints_overlap(&probe, &b.pos, config.block_size))
        .map(|(_, b)| config.level_of(b.pos[2]) + 1)
        .max()
        .unwrap_or(0)
}

/// Advances the state by one action. Pure and deterministic.
pub fn step(state: &EnvState, action: &Action, goal: &Goal, config: &EnvConfig) -> (EnvState, f64, StepInfo) {
    let a = action.clamped();
    let mut next = state.clone();
    let old_blocks: Vec<[f64; 3]> = state.blocks.iter().map(|b| b.pos).collect();

    if a.claw < 0.0 {
        next.claw = (1.0 + a.claw) / 2.0;
        if next.held_block.is_none() {
            let gp = grasp_point(&next, config);
            let reach = config.block_size / 2.0;
            next.held_block = next
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| (i, dist(&b.pos, &gp)))
                .filter(|&(_, d)| d <= reach)
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                .map(|(i, _)| i);
        }
    } else if a.claw > 0.0 {
        next.claw = (1.0 + a.claw) / 2.0;
        next.held_block = None;
    }

    let b = &config.table_bounds;
    let z_min = config.gripper_z_min();
    let old = state.gripper_pos;
    let moved = [
        (old[0] + a.dx * config.max_gripper_speed).clamp(b.min[0], b.max[0]),
        (old[1] + a.dy * config.max_gripper_speed).clamp(b.min[1], b.max[1]),
        (old[2] + a.dz * config.max_gripper_speed).clamp(z_min, b.max[2]),
    ];
    next.gripper_pos = moved;
    next.gripper_vel = [moved[0] - old[0], moved[1] - old[1], moved[2] - old[2]];
    if let Some(h) = next.held_block {
        next.blocks[h].pos = grasp_point(&next, config);
    }
    settle(&mut next.blocks, next.held_block, config);
    for (blk, prev) in next.blocks.iter_mut().zip(&old_blocks) {
        blk.vel = [blk.pos[0] - prev[0], blk.pos[1] - prev[1], blk.pos[2] - prev[2]];
    }
    next.t += 1;

    let reward = reward_fn(&next, goal, config);
    let sat = criteria_satisfied(&next.block_positions(), goal.as_slice(), config.tolerance);
    let info = StepInfo {
        is_success: sat.iter().all(|&s| s),
        criteria_satisfied: sat,
    };
    (next, reward, info)
}

/// Hand-written pick-and-place controller, placing blocks in index order.
///
/// Used as an oracle in tests and by the demo page; it reads the full state.
pub fn scripted_action(state: &EnvState, goal: &Goal, config: &EnvConfig) -> Action {
    let speed = config.max_gripper_speed;
    let toward = |from: [f64; 3], to: [f64; 3], claw: f64| {
        Action::new(
            (to[0] - from[0]) / speed,
            (to[1] - from[1]) / speed,
            (to[2] - from[2]) / speed,
            claw,
        )
        .clamped()
    };
    let sat = criteria_satisfied(&state.block_positions(), goal.as_slice(), config.tolerance);
    let gp = grasp_point(state, config);
    let offset = config.claw_depth / 2.0;
    let rests_at_target = |i: usize| {
        let t = goal.criterion(i);
        let level = landing_level(state, [t[0], t[1]], Some(i), config);
        (config.level_z(level) - t[2]).abs() <= config.tolerance
    };

    if let Some(h) = state.held_block {
        let t = goal.criterion(h);
        if dist(&gp, &t) > 1e-9 {
            return toward(state.gripper_pos, [t[0], t[1], t[2] + offset], -1.0);
        }
        if !rests_at_target(h) {
            // an airborne target is placed last and held until the episode ends
            return Action::new(0.0, 0.0, 0.0, -1.0);
        }
        return Action::new(0.0, 0.0, 0.0, 1.0);
    }

    let pending = |supported: bool| {
        (0..sat.len()).find(|&i| !sat[i] && rests_at_target(i) == supported)
    };
    match pending(true).or_else(|| pending(false)) {
        Some(i) => {
            let p = state.blocks[i].pos;
            if dist(&gp, &p) <= 1e-9 {
                Action::new(0.0, 0.0, 0.0, -1.0)
            } else {
                toward(state.gripper_pos, [p[0], p[1], p[2] + offset], 1.0)
            }
        }
        None => {
            let g = state.gripper_pos;
            toward(g, [g[0], g[1], config.table_bounds.max[2]], 1.0)
        }
    }
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub obs: Vec<f64>,
    pub goal: Goal,
    pub action: [f64; 4],
    pub reward: f64,
    pub criteria_satisfied: Vec<bool>,
    pub is_success: bool,
}

/// Stateful wrapper owning a config, an RNG, the current state and goal.
#[derive(Clone, Debug)]
pub struct BlockWorld {
    config: EnvConfig,
    rng: ChaCha8Rng,
    state: EnvState,
    goal: Goal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub info: StepInfo,
    pub done: bool,
}

impl BlockWorld {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (state, goal) = reset(&config, &mut rng);
        Ok(Self {
            config,
            rng,
            state,
            goal,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.config.stage = stage;
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn reset(&mut self) -> (Vec<f64>, Goal) {
        let (state, goal) = reset(&self.config, &mut self.rng);
        self.state = state;
        self.goal = goal;
        (self.state.observation(), self.goal.clone())
    }

    pub fn step(&mut self, action: &Action) -> StepOutcome {
        let (next, reward, info) = step(&self.state, action, &self.goal, &self.config);
        self.state = next;
        StepOutcome {
            obs: self.state.observation(),
            reward,
            info,
            done: self.state.t >= self.config.horizon,
        }
    }
}
