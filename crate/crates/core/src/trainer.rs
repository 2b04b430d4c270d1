//! Synchronous multi-worker training loop with curriculum stages.
//!
//! Each cycle: every worker rolls out `episodes_per_cycle` episodes with its
//! assigned policy, then `batches_per_cycle` times samples a relabeled batch,
//! updates its agent, and meets the others at an averaging barrier.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, Dims, PolicyId, TrainStats};
use crate::blockworld::{self, Action, BlockWorld, EnvConfig, EnvState, Goal, Stage, ACTION_DIM};
use crate::error::{ensure, Error, Result};
use crate::ndmath::Checkpoint;
use crate::normalize::Normalizer;
use crate::replay::{env_reward, Episode, HerMode, ReplayBuffer, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_workers: usize,
    /// Rollout policy per worker; empty means half `c`, half `r` with
    /// curiosity and all `r` without.
    pub worker_policies: Vec<PolicyId>,
    pub epochs: usize,
    pub cycles_per_epoch: usize,
    pub episodes_per_cycle: usize,
    pub batches_per_cycle: usize,
    pub batch_size: usize,
    pub test_episodes: usize,
    /// Defaults to `1 - 1/horizon`.
    pub gamma: Option<f64>,
    pub buffer_capacity: usize,
    /// Stop once this many training env steps have been taken.
    pub max_env_steps: Option<u64>,
    pub success_window: usize,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_workers: 2,
            worker_policies: Vec::new(),
            epochs: 50,
            cycles_per_epoch: 50,
            episodes_per_cycle: 8,
            batches_per_cycle: 8,
            batch_size: 1024,
            test_episodes: 50,
            gamma: None,
            buffer_capacity: crate::replay::DEFAULT_CAPACITY,
            max_env_steps: None,
            success_window: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("train.{field}: {msg}")));
        for (field, v) in [
            ("n_workers", self.n_workers),
            ("epochs", self.epochs),
            ("cycles_per_epoch", self.cycles_per_epoch),
            ("episodes_per_cycle", self.episodes_per_cycle),
            ("batches_per_cycle", self.batches_per_cycle),
            ("batch_size", self.batch_size),
            ("test_episodes", self.test_episodes),
            ("buffer_capacity", self.buffer_capacity),
            ("success_window", self.success_window),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1");
            }
        }
        if !self.worker_policies.is_empty() && self.worker_policies.len() != self.n_workers {
            return bad("worker_policies", "needs one entry per worker");
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return bad("gamma", "must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn policies(&self, use_curiosity: bool) -> Vec<PolicyId> {
        if !self.worker_policies.is_empty() {
            return self.worker_policies.clone();
        }
        (0..self.n_workers)
            .map(|w| {
                if use_curiosity && w % 2 == 0 {
                    PolicyId::Combined
                } else {
                    PolicyId::Exploit
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HerConfig {
    pub mode: HerMode,
    pub augment_prob: f64,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self {
            mode: HerMode::MultiCriteria,
            augment_prob: crate::replay::DEFAULT_AUGMENT_PROB,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub enabled: bool,
    /// Window success needed to leave stage 1 and stage 2.
    pub thresholds: [f64; 2],
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            thresholds: [0.9, 0.9],
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("curriculum.thresholds: each must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn initial_stage(&self) -> Stage {
        if self.enabled {
            Stage::One
        } else {
            Stage::Three
        }
    }

    pub fn threshold(&self, stage: Stage) -> Option<f64> {
        match stage {
            Stage::One => Some(self.thresholds[0]),
            Stage::Two => Some(self.thresholds[1]),
            Stage::Three => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub env_steps: u64,
    pub test_steps: u64,
    pub stage: Stage,
    pub success_rate: f64,
    pub mean_episode_reward: f64,
    pub exploit_critic_loss: f64,
    pub explore_critic_loss: f64,
    pub dynamics_loss: f64,
    pub explore_reward_mean: f64,
    pub param_noise_sigma: f64,
}

pub const CSV_HEADER: &str = "epoch,env_steps,test_steps,stage,success_rate,mean_episode_reward,\
exploit_critic_loss,explore_critic_loss,dynamics_loss,explore_reward_mean,param_noise_sigma";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.env_steps,
            self.test_steps,
            self.stage.index(),
            self.success_rate,
            self.mean_episode_reward,
            self.exploit_critic_loss,
            self.explore_critic_loss,
            self.dynamics_loss,
            self.explore_reward_mean,
            self.param_noise_sigma
        )
    }
}

#[derive(Clone, Debug)]
pub struct Worker {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub env: BlockWorld,
    pub rng: ChaCha8Rng,
    pub policy: PolicyId,
    next_episode: u64,
}

impl Worker {
    /// Runs one noisy episode and stores it.
    pub fn rollout(&mut self, worker_index: usize) -> Result<f64> {
        let noise = self.agent.episode_noise(self.policy, &mut self.rng);
        let (mut obs, goal) = self.env.reset();
        let horizon = self.env.config().horizon;
        let id = self.next_episode * 1024 + worker_index as u64;
        self.next_episode += 1;
        let mut trs = Vec::with_capacity(horizon);
        let mut total = 0.0;
        for t in 0..horizon {
            let a = self
                .agent
                .select_action(self.policy, &obs, Some(goal.as_slice()), Some(&noise), &mut self.rng)?;
            let out = self.env.step(&Action::from_slice(&a)?);
            total += out.reward;
            trs.push(Transition {
                obs,
                goal: goal.clone(),
                action: a,
                reward: out.reward,
                next_obs: out.obs.clone(),
                achieved_next: blockworld::achieved_goal(self.env.state()),
                next_gripper: self.env.state().gripper_pos,
                t,
                episode_id: id,
            });
            obs = out.obs;
        }
        self.agent.observe_episode(&trs)?;
        self.buffer.store_episode(Episode::new(trs)?)?;
        Ok(total)
    }

    fn train_batches(&mut self, her: &HerConfig, batch_size: usize, env: &EnvConfig) -> Result<TrainStats> {
        let sampled = self.buffer.sample_batch(
            batch_size,
            her.augment_prob,
            her.mode,
            env_reward(env.reward_params()),
            &mut self.rng,
        )?;
        let batch: Vec<Transition> = sampled.into_iter().map(|s| s.transition).collect();
        self.agent.train_batch(&batch)
    }

    fn adapt_noise(&mut self, batch_size: usize) -> Result<()> {
        if !self.agent.config().noise.use_param_noise {
            return Ok(());
        }
        let sampled = self.buffer.sample_batch(
            batch_size,
            0.0,
            HerMode::None,
            |t: &Transition, _: &Goal| t.reward,
            &mut self.rng,
        )?;
        let batch: Vec<Transition> = sampled.into_iter().map(|s| s.transition).collect();
        let prepared = self.agent.prepare_batch(&batch)?;
        self.agent.adapt_noise(self.policy, &prepared, &mut self.rng)?;
        Ok(())
    }
}

/// Runs `f` on every worker, in parallel when there is more than one.
fn for_each_worker<T, F>(workers: &mut [Worker], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut Worker) -> Result<T> + Sync,
{
    if workers.len() == 1 {
        return Ok(vec![f(0, &mut workers[0])?]);
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = workers
            .iter_mut()
            .enumerate()
            .map(|(i, w)| {
                let f = &f;
                scope.spawn(move || f(i, w))
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| match h.join() {
                Ok(r) => r.map_err(|e| Error::Worker {
                    worker: i,
                    message: e.to_string(),
                }),
                Err(panic) => Err(Error::Worker {
                    worker: i,
                    message: panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "worker panicked".into()),
                }),
            })
            .collect()
    })
}

/// Makes every agent identical: element-wise mean of all networks, PopArt
/// statistics, and noise scale; normalizers absorb all pending data.
/// Optimizer moments stay local.
pub fn average_agents(agents: &mut [&mut Agent]) -> Result<()> {
    {
        let mut obs: Vec<&mut Normalizer> = Vec::with_capacity(agents.len());
        let mut goal: Vec<&mut Normalizer> = Vec::with_capacity(agents.len());
        for a in agents.iter_mut() {
            let (o, g) = a.normalizers_mut();
            obs.push(o);
            goal.push(g);
        }
        Normalizer::synchronize(&mut obs)?;
        Normalizer::synchronize(&mut goal)?;
    }
    if agents.len() <= 1 {
        return Ok(());
    }
    let w = agents.len() as f64;

    use crate::agent::CriticId;
    for id in [CriticId::Exploit, CriticId::Explore] {
        let mut live = (0.0, 0.0);
        let mut target = (0.0, 0.0);
        for a in agents.iter() {
            let c = a.critic(id);
            live.0 += c.head.mu;
            live.1 += c.head.second_moment;
            target.0 += c.target_head.mu;
            target.1 += c.target_head.second_moment;
        }
        for a in agents.iter_mut() {
            let c = a.critic_mut(id);
            c.head.set_statistics(&mut c.net, live.0 / w, live.1 / w)?;
            c.target_head.set_statistics(&mut c.target, target.0 / w, target.1 / w)?;
        }
    }

    let n_nets = agents[0].networks().len();
    for k in 0..n_nets {
        let reference = agents[0].networks()[k].flat_params();
        let mut sum = vec![0.0; reference.len()];
        for a in agents.iter() {
            let net = a.networks()[k];
            ensure!(
                net.same_shape(agents[0].networks()[k]),
                "network {k} differs in shape across workers"
            );
            for (s, p) in sum.iter_mut().zip(net.flat_params()) {
                *s += p;
            }
        }
        sum.iter_mut().for_each(|s| *s /= w);
        for a in agents.iter_mut() {
            a.networks_mut()[k].set_flat_params(&sum)?;
        }
    }

    let sigma = agents.iter().map(|a| a.param_sigma()).sum::<f64>() / w;
    agents.iter_mut().for_each(|a| a.set_param_sigma(sigma));
    Ok(())
}

pub fn average_parameters(workers: &mut [Worker]) -> Result<()> {
    let mut agents: Vec<&mut Agent> = workers.iter_mut().map(|w| &mut w.agent).collect();
    average_agents(&mut agents)
}

/// Episode outcome recorded in the evaluation window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalEpisode {
    pub success: bool,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    her: HerConfig,
    schedule: CurriculumSchedule,
    env_config: EnvConfig,
    workers: Vec<Worker>,
    eval_env: BlockWorld,
    eval_rng: ChaCha8Rng,
    window: VecDeque<EvalEpisode>,
    stage: Stage,
    epoch: usize,
    env_steps: u64,
    test_steps: u64,
    epoch_train: Vec<TrainStats>,
}

/// Everything needed to build a [`Trainer`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerSetup {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub her: HerConfig,
    pub curriculum: CurriculumSchedule,
    pub use_curiosity: bool,
}

impl Trainer {
    pub fn new(setup: TrainerSetup) -> Result<Self> {
        Self::with_agent(setup, None)
    }

    /// Starts from `agent` when given (e.g. a checkpoint), else a fresh one.
    pub fn with_agent(setup: TrainerSetup, agent: Option<Agent>) -> Result<Self> {
        let TrainerSetup {
            mut env,
            agent: agent_config,
            train,
            her,
            curriculum,
            use_curiosity,
        } = setup;
        train.validate()?;
        curriculum.validate()?;
        ensure!(
            (0.0..=1.0).contains(&her.augment_prob),
            "her.augment_prob must lie in [0, 1]"
        );
        let stage = curriculum.initial_stage();
        env.stage = stage;
        env.validate()?;
        let gamma = train.gamma.unwrap_or(1.0 - 1.0 / env.horizon as f64);
        let mut master = ChaCha8Rng::seed_from_u64(train.seed);
        let dims = Dims {
            obs: env.obs_dim(),
            goal: env.goal_dim(),
            action: ACTION_DIM,
        };
        let agent = match agent {
            Some(a) => {
                ensure!(a.dims() == dims, "agent dims {:?} do not fit the environment {:?}", a.dims(), dims);
                a
            }
            None => Agent::new(dims, agent_config, gamma, use_curiosity, &mut master)?,
        };
        let policies = train.policies(use_curiosity);
        let mut workers = Vec::with_capacity(train.n_workers);
        for policy in policies {
            let env_seed: u64 = master.random();
            workers.push(Worker {
                agent: agent.clone(),
                buffer: ReplayBuffer::new(train.buffer_capacity),
                env: BlockWorld::new(EnvConfig {
                    seed: env_seed,
                    ..env.clone()
                })?,
                rng: ChaCha8Rng::from_rng(&mut master),
                policy,
                next_episode: 0,
            });
        }
        let eval_seed: u64 = master.random();
        Ok(Self {
            eval_env: BlockWorld::new(EnvConfig {
                seed: eval_seed,
                ..env.clone()
            })?,
            eval_rng: ChaCha8Rng::from_rng(&mut master),
            window: VecDeque::with_capacity(train.success_window),
            config: train,
            her,
            schedule: curriculum,
            env_config: env,
            workers,
            stage,
            epoch: 0,
            env_steps: 0,
            test_steps: 0,
            epoch_train: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_config
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn workers_mut(&mut self) -> &mut [Worker] {
        &mut self.workers
    }

    pub fn agent(&self) -> &Agent {
        &self.workers[0].agent
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn window(&self) -> &VecDeque<EvalEpisode> {
        &self.window
    }

    pub fn window_success(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().filter(|e| e.success).count() as f64 / self.window.len() as f64
        }
    }

    fn window_reward(&self) -> f64 {
        if self.window.is_empty() {
            0.0
        } else {
            self.window.iter().map(|e| e.reward).sum::<f64>() / self.window.len() as f64
        }
    }

    pub fn budget_exhausted(&self) -> bool {
        self.config.max_env_steps.is_some_and(|m| self.env_steps >= m)
    }

    /// Rollouts, then `batches_per_cycle` updates each followed by the barrier.
    pub fn run_cycle(&mut self) -> Result<()> {
        let episodes = self.config.episodes_per_cycle;
        for_each_worker(&mut self.workers, |i, w| {
            for _ in 0..episodes {
                w.rollout(i)?;
            }
            Ok(())
        })?;
        self.env_steps += (self.workers.len() * episodes * self.env_config.horizon) as u64;
        // pending normalizer data from rollouts becomes shared before training
        average_parameters(&mut self.workers)?;

        let her = self.her.clone();
        let batch_size = self.config.batch_size;
        let env = self.env_config.clone();
        for b in 0..self.config.batches_per_cycle {
            let last = b + 1 == self.config.batches_per_cycle;
            let stats = for_each_worker(&mut self.workers, |_, w| {
                let s = w.train_batches(&her, batch_size, &env)?;
                if last {
                    w.adapt_noise(batch_size)?;
                }
                Ok(s)
            })?;
            self.epoch_train.extend(stats);
            average_parameters(&mut self.workers)?;
        }
        Ok(())
    }

    /// Noiseless exploit-policy episodes on the current stage.
    pub fn evaluate(&mut self) -> Result<(f64, f64)> {
        let agent = self.workers[0].agent.clone();
        let mut rng = self.eval_rng.clone();
        let out = self.evaluate_with(|_, goal, obs| {
            let a = agent.select_action(PolicyId::Exploit, obs, Some(goal.as_slice()), None, &mut rng)?;
            Action::from_slice(&a)
        });
        self.eval_rng = rng;
        out
    }

    /// Evaluates an arbitrary policy `(state, goal, obs) -> action`.
    /// Returns `(success_rate, mean_reward)` of this call's episodes.
    pub fn evaluate_with<F>(&mut self, mut policy: F) -> Result<(f64, f64)>
    where
        F: FnMut(&EnvState, &Goal, &[f64]) -> Result<Action>,
    {
        let n = self.config.test_episodes;
        let mut successes = 0usize;
        let mut rewards = 0.0;
        for _ in 0..n {
            let (mut obs, goal) = self.eval_env.reset();
            let mut total = 0.0;
            let success = loop {
                let a = policy(self.eval_env.state(), &goal, &obs)?;
                let out = self.eval_env.step(&a);
                total += out.reward;
                obs = out.obs;
                if out.done {
                    break out.info.is_success;
                }
            };
            self.test_steps += self.env_config.horizon as u64;
            successes += success as usize;
            rewards += total;
            if self.window.len() == self.config.success_window {
                self.window.pop_front();
            }
            self.window.push_back(EvalEpisode { success, reward: total });
        }
        Ok((successes as f64 / n as f64, rewards / n as f64))
    }

    /// Moves to the next stage when the full window clears the threshold.
    pub fn maybe_advance_stage(&mut self) -> bool {
        if !self.schedule.enabled || self.window.len() < self.config.success_window {
            return false;
        }
        match self.schedule.threshold(self.stage) {
            Some(t) if self.window_success() >= t => {
                self.advance_stage();
                true
            }
            _ => false,
        }
    }

    /// Unconditional transition: buffers emptied, weights and statistics kept,
    /// optimizer moments and noise scale reset.
    pub fn advance_stage(&mut self) -> bool {
        let Some(next) = self.stage.next() else {
            return false;
        };
        self.stage = next;
        self.env_config.stage = next;
        for w in &mut self.workers {
            w.buffer.clear();
            w.agent.reset_optimizers();
            w.agent.reset_noise();
            w.env.set_stage(next);
        }
        self.eval_env.set_stage(next);
        self.window.clear();
        true
    }

    /// One epoch of cycles, then evaluation and a curriculum check.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        self.epoch_train.clear();
        for _ in 0..self.config.cycles_per_epoch {
            self.run_cycle()?;
            if self.budget_exhausted() {
                break;
            }
        }
        self.evaluate()?;
        let stats = self.epoch_stats();
        self.epoch += 1;
        self.maybe_advance_stage();
        Ok(stats)
    }

    fn epoch_stats(&self) -> EpochStats {
        let n = self.epoch_train.len().max(1) as f64;
        let avg = |f: fn(&TrainStats) -> f64| self.epoch_train.iter().map(f).sum::<f64>() / n;
        EpochStats {
            epoch: self.epoch,
            env_steps: self.env_steps,
            test_steps: self.test_steps,
            stage: self.stage,
            success_rate: self.window_success(),
            mean_episode_reward: self.window_reward(),
            exploit_critic_loss: avg(|s| s.exploit_critic_loss),
            explore_critic_loss: avg(|s| s.explore_critic_loss),
            dynamics_loss: avg(|s| s.dynamics_loss),
            explore_reward_mean: avg(|s| s.explore_reward_mean),
            param_noise_sigma: self.agent().param_sigma(),
        }
    }

    /// Runs until `epochs` or the step budget; `on_epoch` sees each epoch's stats
    /// and whether the stage changed.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<Vec<EpochStats>>
    where
        F: FnMut(&Trainer, &EpochStats, bool) -> Result<()>,
    {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs && !self.budget_exhausted() {
            let before = self.stage;
            let stats = self.run_epoch()?;
            on_epoch(self, &stats, self.stage != before)?;
            all.push(stats);
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.agent().write_checkpoint(&mut ckpt)?;
        ckpt.set_meta("env", serde_json::to_value(&self.env_config)?);
        ckpt.set_meta("stage", serde_json::to_value(self.stage)?);
        ckpt.set_meta("epoch", serde_json::to_value(self.epoch)?);
        ckpt.set_meta("env_steps", serde_json::to_value(self.env_steps)?);
        Ok(ckpt)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }
}

/// Writes the metrics CSV header followed by one row per epoch.
pub fn write_csv(mut w: impl Write, rows: &[EpochStats]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
