//! Browser bindings: an interactive blockworld, HER relabeling statistics and
//! a PopArt rescaling probe. Each binding returns JSON; the plain-Rust
//! functions underneath are what the tests call.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use curistack::blockworld::{self, Action, BlockWorld, EnvConfig, RewardMode, Stage};
use curistack::ndmath::{Activation, Matrix, Mlp, MlpSpec};
use curistack::normalize::PopArtHead;
use curistack::replay::{env_reward, Episode, HerMode, ReplayBuffer, Transition};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Debug, Serialize)]
pub struct SceneView {
    pub t: usize,
    pub horizon: usize,
    pub gripper: [f64; 3],
    pub claw: f64,
    pub blocks: Vec<[f64; 3]>,
    pub targets: Vec<[f64; 3]>,
    pub held: Option<usize>,
    pub satisfied: Vec<bool>,
    pub reward: f64,
    pub success: bool,
    pub block_size: f64,
    pub tolerance: f64,
    pub bounds: [[f64; 3]; 2],
}

#[wasm_bindgen]
pub struct Sandbox {
    env: BlockWorld,
    last_reward: f64,
}

#[wasm_bindgen]
impl Sandbox {
    #[wasm_bindgen(constructor)]
    pub fn new(n_blocks: usize, stage: u8, seed: u64) -> Result<Sandbox, JsError> {
        Sandbox::create(n_blocks, stage, seed).map_err(js_err)
    }

    pub fn reset(&mut self) -> String {
        self.env.reset();
        self.last_reward = 0.0;
        self.view_json()
    }

    /// Applies a manual action; components are clipped to [-1, 1].
    pub fn step(&mut self, dx: f64, dy: f64, dz: f64, claw: f64) -> String {
        self.apply(Action::new(dx, dy, dz, claw));
        self.view_json()
    }

    /// One step of the hand-written pick-and-place controller.
    pub fn scripted_step(&mut self) -> String {
        let a = blockworld::scripted_action(self.env.state(), self.env.goal(), self.env.config());
        self.apply(a);
        self.view_json()
    }

    pub fn view_json(&self) -> String {
        serde_json::to_string(&self.view()).expect("plain data")
    }
}

impl Sandbox {
    pub fn create(n_blocks: usize, stage: u8, seed: u64) -> curistack::Result<Sandbox> {
        let mut cfg = EnvConfig::new(n_blocks);
        cfg.stage = Stage::try_from(stage).map_err(curistack::Error::Config)?;
        cfg.seed = seed;
        let mut env = BlockWorld::new(cfg)?;
        env.reset();
        Ok(Sandbox { env, last_reward: 0.0 })
    }

    pub fn apply(&mut self, action: Action) -> f64 {
        if self.env.state().t >= self.env.config().horizon {
            self.env.reset();
        }
        self.last_reward = self.env.step(&action.clamped()).reward;
        self.last_reward
    }

    pub fn view(&self) -> SceneView {
        let s = self.env.state();
        let g = self.env.goal();
        let cfg = self.env.config();
        let blocks: Vec<[f64; 3]> = s.blocks.iter().map(|b| b.pos).collect();
        SceneView {
            t: s.t,
            horizon: cfg.horizon,
            gripper: s.gripper_pos,
            claw: s.claw,
            targets: (0..g.n_criteria()).map(|i| g.criterion(i)).collect(),
            held: s.held_block,
            satisfied: blockworld::criteria_satisfied(&s.block_positions(), g.as_slice(), cfg.tolerance),
            reward: self.last_reward,
            success: blockworld::is_success(s, g, cfg),
            block_size: cfg.block_size,
            tolerance: cfg.tolerance,
            bounds: [cfg.table_bounds.min, cfg.table_bounds.max],
            blocks,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RelabelStats {
    pub mode: String,
    pub samples: usize,
    /// Fraction of samples whose goal changed in at least one criterion.
    pub relabeled_fraction: f64,
    /// Per-criterion substitution frequency.
    pub criterion_fraction: Vec<f64>,
    /// Fraction of samples with a positive reward, before and after relabeling.
    pub rewarded_before: f64,
    pub rewarded_after: f64,
}

/// Collects `episodes` noisy scripted rollouts and samples `samples`
/// transitions from them under `mode`.
pub fn relabel_stats(
    mode: HerMode,
    augment_prob: f64,
    n_blocks: usize,
    episodes: usize,
    samples: usize,
    seed: u64,
) -> curistack::Result<RelabelStats> {
    let mut cfg = EnvConfig::new(n_blocks);
    cfg.seed = seed;
    cfg.reward_mode = RewardMode::Incremental;
    let mut env = BlockWorld::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut buffer = ReplayBuffer::new(episodes.max(1) * cfg.horizon);
    for ep in 0..episodes {
        let (mut obs, goal) = env.reset();
        let mut trs = Vec::with_capacity(cfg.horizon);
        for t in 0..cfg.horizon {
            // a noisy expert moves blocks around without solving every task
            let mut a = blockworld::scripted_action(env.state(), env.goal(), &cfg).to_array();
            for v in &mut a[..3] {
                *v += rng.random_range(-0.8..0.8);
            }
            let out = env.step(&Action::from_slice(&a)?);
            trs.push(Transition {
                obs,
                goal: goal.clone(),
                action: a,
                reward: out.reward,
                next_obs: out.obs.clone(),
                achieved_next: blockworld::achieved_goal(env.state()),
                next_gripper: env.state().gripper_pos,
                t,
                episode_id: ep as u64,
            });
            obs = out.obs;
        }
        buffer.store_episode(Episode::new(trs)?)?;
    }
    let sampled = buffer.sample_batch(samples, augment_prob, mode, env_reward(cfg.reward_params()), &mut rng)?;
    let n = sampled.len() as f64;
    let mut per = vec![0.0; n_blocks];
    let (mut relabeled, mut before, mut after) = (0.0, 0.0, 0.0);
    for s in &sampled {
        for (i, src) in s.sources.iter().enumerate() {
            per[i] += src.is_some() as u8 as f64 / n;
        }
        relabeled += s.relabeled() as u8 as f64 / n;
        after += (s.transition.reward > 0.0) as u8 as f64 / n;
    }
    // rewards of the same draws with their original goals
    let params = cfg.reward_params();
    for s in &sampled {
        let tr = &s.transition;
        let blocks = tr.achieved_next.as_slice();
        let original = buffer
            .episodes()
            .find(|e| e.id() == tr.episode_id)
            .map(|e| e.transitions()[tr.t].goal.clone())
            .expect("sampled from this buffer");
        let r = blockworld::reward_from_positions(blocks, &tr.next_gripper, original.as_slice(), &params);
        before += (r > 0.0) as u8 as f64 / n;
    }
    Ok(RelabelStats {
        mode: format!("{mode:?}"),
        samples: sampled.len(),
        relabeled_fraction: relabeled,
        criterion_fraction: per,
        rewarded_before: before,
        rewarded_after: after,
    })
}

#[wasm_bindgen(js_name = relabelStats)]
pub fn relabel_stats_js(
    mode: &str,
    augment_prob: f64,
    n_blocks: usize,
    samples: usize,
    seed: u64,
) -> Result<String, JsError> {
    let mode = match mode {
        "none" => HerMode::None,
        "standard" => HerMode::Standard,
        "multi" | "multi_criteria" => HerMode::MultiCriteria,
        other => return Err(JsError::new(&format!("unknown HER mode {other:?}"))),
    };
    let stats = relabel_stats(mode, augment_prob, n_blocks, 20, samples, seed).map_err(js_err)?;
    serde_json::to_string(&stats).map_err(js_err)
}

#[derive(Debug, Serialize)]
pub struct PopArtProbe {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Value estimates on fixed probe inputs after each update.
    pub values: Vec<Vec<f64>>,
    /// Largest change of any probe value caused by a statistics update.
    pub max_drift: f64,
}

/// Feeds successive target batches drawn around `target_mean` with spread
/// `target_scale` into a PopArt head and tracks the value estimates of a
/// small critic on fixed inputs.
pub fn popart_probe(
    target_mean: f64,
    target_scale: f64,
    updates: usize,
    step_size: f64,
    seed: u64,
) -> curistack::Result<PopArtProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(MlpSpec::new(2, &[8], 1, Activation::Identity), &mut rng)?;
    let mut head = PopArtHead::new(step_size);
    let probes = Matrix::from_rows(&[vec![-1.0, 0.5], vec![0.0, 0.0], vec![0.7, -0.3], vec![1.0, 1.0]])?;
    let values_of = |net: &Mlp, head: &PopArtHead| -> curistack::Result<Vec<f64>> {
        Ok(net.predict(&probes)?.as_slice().iter().map(|&n| head.denormalize(n)).collect())
    };
    let mut out = PopArtProbe {
        mu: vec![head.mu],
        sigma: vec![head.sigma],
        values: vec![values_of(&net, &head)?],
        max_drift: 0.0,
    };
    for _ in 0..updates {
        let targets: Vec<f64> = (0..64)
            .map(|_| target_mean + target_scale * rng.random_range(-1.0..1.0))
            .collect();
        head.update(&mut net, &targets)?;
        let v = values_of(&net, &head)?;
        let prev = out.values.last().expect("seeded above");
        let drift = v.iter().zip(prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        out.max_drift = out.max_drift.max(drift);
        out.mu.push(head.mu);
        out.sigma.push(head.sigma);
        out.values.push(v);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = popartProbe)]
pub fn popart_probe_js(
    target_mean: f64,
    target_scale: f64,
    updates: usize,
    step_size: f64,
    seed: u64,
) -> Result<String, JsError> {
    let probe = popart_probe(target_mean, target_scale, updates, step_size, seed).map_err(js_err)?;
    serde_json::to_string(&probe).map_err(js_err)
}
