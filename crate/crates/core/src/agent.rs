//! Three-actor, two-critic DDPG learner with PopArt-normalized critics.
//!
//! * exploit pair: `π_r(obs‖goal)`, `n_r(obs‖goal‖action)`, trained on env reward
//! * explore pair: `π_e(obs)`, `n_e(obs‖action)`, trained on dynamics-model error
//! * combined actor `π_c(obs‖goal)` ascending `w_e·n_e + w_r·n_r`
//!
//! Every network input is normalized with the agent's running statistics and
//! clipped; actions enter critics unnormalized in `[-1, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blockworld::ACTION_DIM;
use crate::curiosity::DynamicsModel;
use crate::error::{ensure, Error, Result};
use crate::ndmath::{adam_step, Activation, AdamConfig, AdamState, Checkpoint, Gradients, Matrix, Mlp, MlpSpec};
use crate::normalize::{Normalizer, PopArtHead};
use crate::replay::Transition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyId {
    #[serde(rename = "e")]
    Explore,
    #[serde(rename = "r")]
    Exploit,
    #[serde(rename = "c")]
    Combined,
}

impl PolicyId {
    pub const ALL: [PolicyId; 3] = [PolicyId::Explore, PolicyId::Exploit, PolicyId::Combined];

    pub fn uses_goal(self) -> bool {
        !matches!(self, PolicyId::Explore)
    }

    fn name(self) -> &'static str {
        match self {
            PolicyId::Explore => "explore_actor",
            PolicyId::Exploit => "exploit_actor",
            PolicyId::Combined => "combined_actor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticId {
    Explore,
    Exploit,
}

impl CriticId {
    fn name(self) -> &'static str {
        match self {
            CriticId::Explore => "explore_critic",
            CriticId::Exploit => "exploit_critic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Desired mean action-space distance between perturbed and clean actors.
    pub param_noise_target: f64,
    pub param_noise_initial_sigma: f64,
    pub param_noise_adaptation: f64,
    pub use_param_noise: bool,
    pub action_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            param_noise_target: 0.1,
            param_noise_initial_sigma: 0.1,
            param_noise_adaptation: 1.01,
            use_param_noise: true,
            action_sigma: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden_layers: Vec<usize>,
    pub dynamics_hidden_layers: Vec<usize>,
    pub exploit_critic_lr: f64,
    pub exploit_critic_l2: f64,
    pub exploit_actor_lr: f64,
    pub exploit_polyak: f64,
    pub explore_critic_lr: f64,
    pub explore_critic_l2: f64,
    pub explore_actor_lr: f64,
    pub explore_polyak: f64,
    pub combined_actor_lr: f64,
    /// `(w_e, w_r)` weighting of the normalized critics for `π_c`.
    pub combine_weights: [f64; 2],
    pub dynamics_lr: f64,
    pub preactivation_penalty: f64,
    pub popart_step: f64,
    pub noise: NoiseConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![256, 256, 256],
            dynamics_hidden_layers: vec![256, 256, 256],
            exploit_critic_lr: 0.001,
            exploit_critic_l2: 0.0,
            exploit_actor_lr: 0.001,
            exploit_polyak: 0.001,
            explore_critic_lr: 0.001,
            explore_critic_l2: 0.01,
            explore_actor_lr: 0.001,
            explore_polyak: 0.05,
            combined_actor_lr: 0.001,
            combine_weights: [0.5, 0.5],
            dynamics_lr: 0.007,
            preactivation_penalty: 0.001,
            popart_step: 1e-3,
            noise: NoiseConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("agent.{field}: {msg}")));
        if self.hidden_layers.contains(&0) {
            return bad("hidden_layers", "layer widths must be positive");
        }
        if self.dynamics_hidden_layers.contains(&0) {
            return bad("dynamics_hidden_layers", "layer widths must be positive");
        }
        for (field, v) in [
            ("exploit_critic_lr", self.exploit_critic_lr),
            ("exploit_actor_lr", self.exploit_actor_lr),
            ("explore_critic_lr", self.explore_critic_lr),
            ("explore_actor_lr", self.explore_actor_lr),
            ("combined_actor_lr", self.combined_actor_lr),
            ("dynamics_lr", self.dynamics_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, "learning rate must be positive");
            }
        }
        for (field, v) in [
            ("exploit_polyak", self.exploit_polyak),
            ("explore_polyak", self.explore_polyak),
            ("popart_step", self.popart_step),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(field, "must lie in (0, 1]");
            }
        }
        for (field, v) in [
            ("exploit_critic_l2", self.exploit_critic_l2),
            ("explore_critic_l2", self.explore_critic_l2),
            ("preactivation_penalty", self.preactivation_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, "must be non-negative");
            }
        }
        if self.combine_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("combine_weights", "weights must be non-negative");
        }
        let n = &self.noise;
        if !(n.action_sigma >= 0.0) {
            return bad("noise.action_sigma", "must be non-negative");
        }
        if !(n.param_noise_target > 0.0) || !(n.param_noise_initial_sigma >= 0.0) {
            return bad("noise.param_noise_target", "targets and sigmas must be positive");
        }
        if !(n.param_noise_adaptation >= 1.0) {
            return bad("noise.param_noise_adaptation", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub obs: usize,
    pub goal: usize,
    pub action: usize,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub net: Mlp,
    pub head: PopArtHead,
    pub target: Mlp,
    pub target_head: PopArtHead,
    pub optimizer: AdamState,
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub net: Mlp,
    pub target: Mlp,
    pub optimizer: AdamState,
}

/// Normalized network inputs for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub obs: Matrix,
    pub next_obs: Matrix,
    pub goal: Matrix,
    pub action: Matrix,
    pub env_reward: Vec<f64>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    /// Reorders goals (and only goals) by `perm`.
    pub fn permute_goals(&mut self, perm: &[usize]) {
        self.goal = self.goal.select_rows(perm);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub exploit: Vec<f64>,
    /// Absent when curiosity is disabled.
    pub explore: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TrainStats {
    pub exploit_critic_loss: f64,
    pub explore_critic_loss: f64,
    pub dynamics_loss: f64,
    pub explore_reward_mean: f64,
    pub exploit_actor_loss: f64,
    pub explore_actor_loss: f64,
    pub combined_actor_loss: f64,
}

/// Per-row value of a critic and its gradient with respect to the action.
pub trait ActionValue {
    fn evaluate(&self, actions: &Matrix) -> Result<(Vec<f64>, Matrix)>;
}

/// A critic network whose input is `context ‖ action`.
pub struct NetCritic<'a> {
    pub net: &'a Mlp,
    pub context: &'a Matrix,
}

impl ActionValue for NetCritic<'_> {
    fn evaluate(&self, actions: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let x = Matrix::hcat(&[self.context, actions])?;
        let (q, cache) = self.net.forward_batch(&x)?;
        let seed = Matrix::from_vec(q.rows(), 1, vec![1.0; q.rows()])?;
        let (_, dx) = self.net.backward(&cache, &seed)?;
        let c = self.context.cols();
        Ok((q.into_vec(), dx.columns(c, c + actions.cols())?))
    }
}

/// Loss `-Σ_k w_k mean_i Q_k(a_i) + coeff·mean_i |z_i|²` for the actor and its gradient.
pub fn actor_loss(actor: &Mlp, inputs: &Matrix, terms: &[(f64, &dyn ActionValue)]) -> Result<(f64, Gradients)> {
    let (actions, cache) = actor.forward_batch(inputs)?;
    let n = actions.rows() as f64;
    let mut seed = Matrix::zeros(actions.rows(), actions.cols());
    let mut value = 0.0;
    for &(w, critic) in terms {
        let (q, dq) = critic.evaluate(&actions)?;
        value -= w * q.iter().sum::<f64>() / n;
        for (s, d) in seed.as_mut_slice().iter_mut().zip(dq.as_slice()) {
            *s -= w * d / n;
        }
    }
    let coeff = actor.spec().preactivation_penalty;
    let penalty: f64 = cache.output_preactivations().as_slice().iter().map(|z| z * z).sum();
    value += coeff * penalty / n;
    let (grads, _) = actor.backward(&cache, &seed)?;
    Ok((value, grads))
}

/// Scale-invariant critic loss `mean((y - mu)/sigma - n(x))²` and its gradient.
pub fn critic_loss(net: &Mlp, head: &PopArtHead, inputs: &Matrix, targets: &[f64]) -> Result<(f64, Gradients)> {
    ensure!(inputs.rows() == targets.len(), "critic batch and target counts differ");
    let (pred, cache) = net.forward_batch(inputs)?;
    let n = targets.len() as f64;
    let mut seed = Matrix::zeros(pred.rows(), 1);
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let d = pred.get(i, 0) - head.normalize_target(y);
        loss += d * d;
        seed.set(i, 0, 2.0 * d / n);
    }
    let (grads, _) = net.backward(&cache, &seed)?;
    Ok((loss / n, grads))
}

/// Multiplicative noise-scale adaptation toward a target action distance.
pub fn adapt_param_noise(sigma: f64, distance: f64, target: f64, factor: f64) -> f64 {
    if distance < target {
        sigma * factor
    } else {
        sigma / factor
    }
}

/// Noise for one rollout episode: optionally a perturbed actor plus action noise.
#[derive(Clone, Debug)]
pub struct EpisodeNoise {
    pub perturbed: Option<Mlp>,
    pub action_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    dims: Dims,
    gamma: f64,
    use_curiosity: bool,
    exploit_critic: Critic,
    explore_critic: Critic,
    exploit_actor: Actor,
    explore_actor: Actor,
    combined_actor: Actor,
    dynamics: DynamicsModel,
    obs_norm: Normalizer,
    goal_norm: Normalizer,
    param_sigma: f64,
}

fn make_critic<R: Rng + ?Sized>(input: usize, config: &AgentConfig, lr: f64, l2: f64, rng: &mut R) -> Result<Critic> {
    let spec = MlpSpec::new(input, &config.hidden_layers, 1, Activation::Identity);
    let net = Mlp::new(spec, rng)?;
    Ok(Critic {
        target: net.clone(),
        optimizer: AdamState::new(&net, AdamConfig::new(lr).with_l2(l2)),
        head: PopArtHead::new(config.popart_step),
        target_head: PopArtHead::new(config.popart_step),
        net,
    })
}

fn make_actor<R: Rng + ?Sized>(input: usize, dims: Dims, config: &AgentConfig, lr: f64, rng: &mut R) -> Result<Actor> {
    let spec = MlpSpec::new(input, &config.hidden_layers, dims.action, Activation::Tanh)
        .with_penalty(config.preactivation_penalty);
    let net = Mlp::new(spec, rng)?;
    Ok(Actor {
        target: net.clone(),
        optimizer: AdamState::new(&net, AdamConfig::new(lr)),
        net,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        dims: Dims,
        config: AgentConfig,
        gamma: f64,
        use_curiosity: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(dims.obs > 0 && dims.goal > 0 && dims.action > 0, "agent dims must be positive");
        ensure!((0.0..1.0).contains(&gamma), "gamma {gamma} outside [0, 1)");
        let og = dims.obs + dims.goal;
        let exploit_critic = make_critic(og + dims.action, &config, config.exploit_critic_lr, config.exploit_critic_l2, rng)?;
        let explore_critic = make_critic(dims.obs + dims.action, &config, config.explore_critic_lr, config.explore_critic_l2, rng)?;
        let exploit_actor = make_actor(og, dims, &config, config.exploit_actor_lr, rng)?;
        let explore_actor = make_actor(dims.obs, dims, &config, config.explore_actor_lr, rng)?;
        let combined_actor = make_actor(og, dims, &config, config.combined_actor_lr, rng)?;
        let dynamics = DynamicsModel::new(dims.obs, dims.action, &config.dynamics_hidden_layers, config.dynamics_lr, rng)?;
        Ok(Self {
            param_sigma: config.noise.param_noise_initial_sigma,
            config,
            dims,
            gamma,
            use_curiosity,
            exploit_critic,
            explore_critic,
            exploit_actor,
            explore_actor,
            combined_actor,
            dynamics,
            obs_norm: Normalizer::new(dims.obs),
            goal_norm: Normalizer::new(dims.goal),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn use_curiosity(&self) -> bool {
        self.use_curiosity
    }

    pub fn critic(&self, id: CriticId) -> &Critic {
        match id {
            CriticId::Explore => &self.explore_critic,
            CriticId::Exploit => &self.exploit_critic,
        }
    }

    pub fn critic_mut(&mut self, id: CriticId) -> &mut Critic {
        match id {
            CriticId::Explore => &mut self.explore_critic,
            CriticId::Exploit => &mut self.exploit_critic,
        }
    }

    pub fn actor(&self, id: PolicyId) -> &Actor {
        match id {
            PolicyId::Explore => &self.explore_actor,
            PolicyId::Exploit => &self.exploit_actor,
            PolicyId::Combined => &self.combined_actor,
        }
    }

    pub fn actor_mut(&mut self, id: PolicyId) -> &mut Actor {
        match id {
            PolicyId::Explore => &mut self.explore_actor,
            PolicyId::Exploit => &mut self.exploit_actor,
            PolicyId::Combined => &mut self.combined_actor,
        }
    }

    pub fn dynamics(&self) -> &DynamicsModel {
        &self.dynamics
    }

    pub fn dynamics_mut(&mut self) -> &mut DynamicsModel {
        &mut self.dynamics
    }

    pub fn obs_normalizer(&self) -> &Normalizer {
        &self.obs_norm
    }

    pub fn goal_normalizer(&self) -> &Normalizer {
        &self.goal_norm
    }

    pub fn normalizers_mut(&mut self) -> (&mut Normalizer, &mut Normalizer) {
        (&mut self.obs_norm, &mut self.goal_norm)
    }

    pub fn param_sigma(&self) -> f64 {
        self.param_sigma
    }

    pub fn set_param_sigma(&mut self, sigma: f64) {
        self.param_sigma = sigma;
    }

    /// Every network in a fixed order: live then target for each critic and
    /// actor, then the dynamics model.
    pub fn networks(&self) -> Vec<&Mlp> {
        let mut out = Vec::with_capacity(11);
        for c in [&self.exploit_critic, &self.explore_critic] {
            out.push(&c.net);
            out.push(&c.target);
        }
        for a in [&self.exploit_actor, &self.explore_actor, &self.combined_actor] {
            out.push(&a.net);
            out.push(&a.target);
        }
        out.push(self.dynamics.net());
        out
    }

    pub fn networks_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out = Vec::with_capacity(11);
        for c in [&mut self.exploit_critic, &mut self.explore_critic] {
            out.push(&mut c.net);
            out.push(&mut c.target);
        }
        for a in [&mut self.exploit_actor, &mut self.explore_actor, &mut self.combined_actor] {
            out.push(&mut a.net);
            out.push(&mut a.target);
        }
        out.push(self.dynamics.net_mut());
        out
    }

    /// Combined checksum over all parameters, PopArt heads and normalizers.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for net in self.networks() {
            mix(net.checksum());
        }
        for c in [&self.exploit_critic, &self.explore_critic] {
            for head in [c.head, c.target_head] {
                mix(head.mu.to_bits());
                mix(head.second_moment.to_bits());
            }
        }
        for norm in [&self.obs_norm, &self.goal_norm] {
            let s = norm.stats();
            mix(s.count().to_bits());
            s.sum().iter().chain(s.sum_sq()).for_each(|v| mix(v.to_bits()));
        }
        h
    }

    pub fn reset_optimizers(&mut self) {
        self.exploit_critic.optimizer.reset_moments();
        self.explore_critic.optimizer.reset_moments();
        self.exploit_actor.optimizer.reset_moments();
        self.explore_actor.optimizer.reset_moments();
        self.combined_actor.optimizer.reset_moments();
        self.dynamics.optimizer_mut().reset_moments();
    }

    pub fn optimizers_are_reset(&self) -> bool {
        [
            &self.exploit_critic.optimizer,
            &self.explore_critic.optimizer,
            &self.exploit_actor.optimizer,
            &self.explore_actor.optimizer,
            &self.combined_actor.optimizer,
            self.dynamics.optimizer(),
        ]
        .iter()
        .all(|o| o.moments_are_zero() && o.step_count() == 0)
    }

    pub fn reset_noise(&mut self) {
        self.param_sigma = self.config.noise.param_noise_initial_sigma;
    }

    /// Feeds an episode's observations and goals into the pending statistics.
    pub fn observe_episode(&mut self, transitions: &[Transition]) -> Result<()> {
        let mut obs: Vec<&[f64]> = transitions.iter().map(|t| t.obs.as_slice()).collect();
        if let Some(last) = transitions.last() {
            obs.push(&last.next_obs);
        }
        self.obs_norm.observe(&obs)?;
        let goals: Vec<&[f64]> = transitions
            .iter()
            .flat_map(|t| [t.goal.as_slice(), t.achieved_next.as_slice()])
            .collect();
        self.goal_norm.observe(&goals)?;
        Ok(())
    }

    pub fn prepare_batch(&self, transitions: &[Transition]) -> Result<PreparedBatch> {
        ensure!(!transitions.is_empty(), "training batch is empty");
        let n = transitions.len();
        let d = self.dims;
        let mut obs = Matrix::zeros(n, d.obs);
        let mut next_obs = Matrix::zeros(n, d.obs);
        let mut goal = Matrix::zeros(n, d.goal);
        let mut action = Matrix::zeros(n, d.action);
        let mut env_reward = Vec::with_capacity(n);
        for (i, t) in transitions.iter().enumerate() {
            ensure!(
                t.obs.len() == d.obs && t.next_obs.len() == d.obs && t.goal.as_slice().len() == d.goal,
                "transition dims do not match the agent"
            );
            obs.row_mut(i).copy_from_slice(&t.obs);
            next_obs.row_mut(i).copy_from_slice(&t.next_obs);
            goal.row_mut(i).copy_from_slice(t.goal.as_slice());
            action.row_mut(i).copy_from_slice(&t.action[..d.action]);
            env_reward.push(t.reward);
        }
        Ok(PreparedBatch {
            obs: self.obs_norm.normalize_rows(&obs)?,
            next_obs: self.obs_norm.normalize_rows(&next_obs)?,
            goal: self.goal_norm.normalize_rows(&goal)?,
            action,
            env_reward,
        })
    }

    fn actor_inputs(id: PolicyId, obs: &Matrix, goal: &Matrix) -> Result<Matrix> {
        if id.uses_goal() {
            Matrix::hcat(&[obs, goal])
        } else {
            Ok(obs.clone())
        }
    }

    /// Trains the dynamics model on the batch and returns its pre-update errors.
    pub fn exploration_rewards(&mut self, batch: &PreparedBatch) -> Result<(Vec<f64>, f64)> {
        let inputs = Matrix::hcat(&[&batch.obs, &batch.action])?;
        self.dynamics.train_and_score(&inputs, &batch.next_obs)
    }

    /// Bootstrap targets from the target networks only.
    pub fn compute_targets(&self, batch: &PreparedBatch, explore_rewards: Option<&[f64]>) -> Result<Targets> {
        let og_next = Matrix::hcat(&[&batch.next_obs, &batch.goal])?;
        let a_r = self.exploit_actor.target.predict(&og_next)?;
        let q_r = self.exploit_critic.target.predict(&Matrix::hcat(&[&og_next, &a_r])?)?;
        let head_r = &self.exploit_critic.target_head;
        let exploit = batch
            .env_reward
            .iter()
            .zip(q_r.as_slice())
            .map(|(r, q)| r + self.gamma * head_r.denormalize(*q))
            .collect();
        let explore = match explore_rewards {
            None => None,
            Some(rewards) => {
                ensure!(rewards.len() == batch.len(), "exploration reward count mismatch");
                let a_e = self.explore_actor.target.predict(&batch.next_obs)?;
                let q_e = self.explore_critic.target.predict(&Matrix::hcat(&[&batch.next_obs, &a_e])?)?;
                let head_e = &self.explore_critic.target_head;
                Some(
                    rewards
                        .iter()
                        .zip(q_e.as_slice())
                        .map(|(r, q)| r + self.gamma * head_e.denormalize(*q))
                        .collect(),
                )
            }
        };
        Ok(Targets { exploit, explore })
    }

    pub fn critic_inputs(&self, id: CriticId, batch: &PreparedBatch) -> Result<Matrix> {
        match id {
            CriticId::Exploit => Matrix::hcat(&[&batch.obs, &batch.goal, &batch.action]),
            CriticId::Explore => Matrix::hcat(&[&batch.obs, &batch.action]),
        }
    }

    fn update_critic(&mut self, id: CriticId, inputs: &Matrix, targets: &[f64]) -> Result<f64> {
        let critic = self.critic_mut(id);
        critic.head.update(&mut critic.net, targets)?;
        let (loss, grads) = critic_loss(&critic.net, &critic.head, inputs, targets)?;
        adam_step(&mut critic.net, &grads, &mut critic.optimizer)?;
        Ok(loss)
    }

    /// Refreshes PopArt statistics on the targets, then one Adam step per critic.
    /// Returns `(exploit_loss, explore_loss)`.
    pub fn update_critics(&mut self, batch: &PreparedBatch, targets: &Targets) -> Result<(f64, f64)> {
        let x_r = self.critic_inputs(CriticId::Exploit, batch)?;
        let loss_r = self.update_critic(CriticId::Exploit, &x_r, &targets.exploit)?;
        let loss_e = match &targets.explore {
            Some(y_e) => {
                let x_e = self.critic_inputs(CriticId::Explore, batch)?;
                self.update_critic(CriticId::Explore, &x_e, y_e)?
            }
            None => 0.0,
        };
        Ok((loss_r, loss_e))
    }

    /// Loss and gradient of one actor's objective on `batch`.
    pub fn actor_gradients(&self, id: PolicyId, batch: &PreparedBatch) -> Result<(f64, Gradients)> {
        let og = Matrix::hcat(&[&batch.obs, &batch.goal])?;
        let exploit = NetCritic {
            net: &self.exploit_critic.net,
            context: &og,
        };
        let explore = NetCritic {
            net: &self.explore_critic.net,
            context: &batch.obs,
        };
        let [w_e, w_r] = self.config.combine_weights;
        match id {
            PolicyId::Exploit => actor_loss(&self.exploit_actor.net, &og, &[(1.0, &exploit)]),
            PolicyId::Explore => actor_loss(&self.explore_actor.net, &batch.obs, &[(1.0, &explore)]),
            PolicyId::Combined => actor_loss(
                &self.combined_actor.net,
                &og,
                &[(w_e, &explore as &dyn ActionValue), (w_r, &exploit)],
            ),
        }
    }

    /// One Adam step for each trained actor; critics are read only.
    pub fn update_actors(&mut self, batch: &PreparedBatch) -> Result<[f64; 3]> {
        let mut losses = [0.0; 3];
        let ids: &[PolicyId] = if self.use_curiosity {
            &[PolicyId::Exploit, PolicyId::Explore, PolicyId::Combined]
        } else {
            &[PolicyId::Exploit]
        };
        let mut updates = Vec::with_capacity(ids.len());
        for &id in ids {
            updates.push((id, self.actor_gradients(id, batch)?));
        }
        for (id, (loss, grads)) in updates {
            let actor = self.actor_mut(id);
            adam_step(&mut actor.net, &grads, &mut actor.optimizer)?;
            losses[match id {
                PolicyId::Exploit => 0,
                PolicyId::Explore => 1,
                PolicyId::Combined => 2,
            }] = loss;
        }
        Ok(losses)
    }

    /// Polyak-averages every target network and target PopArt head.
    ///
    /// The exploit rate covers `π_r`, `n_r` and `π_c`; the explore rate covers
    /// `π_e` and `n_e`.
    pub fn soft_update_targets(&mut self) -> Result<()> {
        let tau_r = self.config.exploit_polyak;
        let tau_e = self.config.explore_polyak;
        for (c, tau) in [(&mut self.exploit_critic, tau_r), (&mut self.explore_critic, tau_e)] {
            c.target.polyak_update(&c.net, tau)?;
            c.target_head.polyak_update(&c.head, tau);
        }
        for (a, tau) in [
            (&mut self.exploit_actor, tau_r),
            (&mut self.explore_actor, tau_e),
            (&mut self.combined_actor, tau_r),
        ] {
            a.target.polyak_update(&a.net, tau)?;
        }
        Ok(())
    }

    /// Full update on one sampled minibatch.
    pub fn train_batch(&mut self, transitions: &[Transition]) -> Result<TrainStats> {
        let batch = self.prepare_batch(transitions)?;
        let mut stats = TrainStats::default();
        let explore = if self.use_curiosity {
            let (rewards, loss) = self.exploration_rewards(&batch)?;
            stats.dynamics_loss = loss;
            stats.explore_reward_mean = mean(&rewards);
            Some(rewards)
        } else {
            None
        };
        let targets = self.compute_targets(&batch, explore.as_deref())?;
        let (lr, le) = self.update_critics(&batch, &targets)?;
        stats.exploit_critic_loss = lr;
        stats.explore_critic_loss = le;
        let [ar, ae, ac] = self.update_actors(&batch)?;
        stats.exploit_actor_loss = ar;
        stats.explore_actor_loss = ae;
        stats.combined_actor_loss = ac;
        self.soft_update_targets()?;
        Ok(stats)
    }

    /// Draws the exploration noise used for a whole rollout episode.
    pub fn episode_noise<R: Rng + ?Sized>(&self, id: PolicyId, rng: &mut R) -> EpisodeNoise {
        let noise = &self.config.noise;
        EpisodeNoise {
            perturbed: noise
                .use_param_noise
                .then(|| self.actor(id).net.perturbed(self.param_sigma, rng)),
            action_sigma: noise.action_sigma,
        }
    }

    fn actor_input_row(&self, id: PolicyId, obs: &[f64], goal: Option<&[f64]>) -> Result<Vec<f64>> {
        ensure!(obs.len() == self.dims.obs, "observation has {} values, expected {}", obs.len(), self.dims.obs);
        let mut x = self.obs_norm.normalize(obs);
        if id.uses_goal() {
            let g = goal.ok_or_else(|| crate::error::contract(format!("policy {id:?} needs a goal")))?;
            ensure!(g.len() == self.dims.goal, "goal has {} values, expected {}", g.len(), self.dims.goal);
            x.extend(self.goal_norm.normalize(g));
        }
        Ok(x)
    }

    /// Chooses an action from raw (unnormalized) observation and goal.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        id: PolicyId,
        obs: &[f64],
        goal: Option<&[f64]>,
        noise: Option<&EpisodeNoise>,
        rng: &mut R,
    ) -> Result<[f64; ACTION_DIM]> {
        let x = self.actor_input_row(id, obs, goal)?;
        let net = noise
            .and_then(|n| n.perturbed.as_ref())
            .unwrap_or(&self.actor(id).net);
        let raw = net.predict_one(&x)?;
        ensure!(raw.len() == ACTION_DIM, "actor emits {} values, expected 4", raw.len());
        let mut a = [0.0; ACTION_DIM];
        let gauss = noise
            .filter(|n| n.action_sigma > 0.0)
            .map(|n| Normal::new(0.0, n.action_sigma).expect("finite sigma"));
        for (dst, v) in a.iter_mut().zip(raw) {
            let e = gauss.as_ref().map_or(0.0, |g| g.sample(rng));
            *dst = (v + e).clamp(-1.0, 1.0);
        }
        Ok(a)
    }

    /// RMS difference between clean and perturbed actions over a batch and
    /// every action component.
    pub fn param_noise_distance(&self, id: PolicyId, batch: &PreparedBatch, perturbed: &Mlp) -> Result<f64> {
        let x = Self::actor_inputs(id, &batch.obs, &batch.goal)?;
        let clean = self.actor(id).net.predict(&x)?;
        let noisy = perturbed.predict(&x)?;
        let sq: Vec<f64> = clean
            .as_slice()
            .iter()
            .zip(noisy.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .collect();
        Ok(mean(&sq).sqrt())
    }

    /// Adapts the parameter-noise scale from one probe batch.
    pub fn adapt_noise<R: Rng + ?Sized>(&mut self, id: PolicyId, batch: &PreparedBatch, rng: &mut R) -> Result<f64> {
        let perturbed = self.actor(id).net.perturbed(self.param_sigma, rng);
        let d = self.param_noise_distance(id, batch, &perturbed)?;
        let n = &self.config.noise;
        self.param_sigma = adapt_param_noise(self.param_sigma, d, n.param_noise_target, n.param_noise_adaptation);
        Ok(d)
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for id in [CriticId::Exploit, CriticId::Explore] {
            let c = self.critic(id);
            let name = id.name();
            c.net.write_checkpoint(name, ckpt)?;
            c.target.write_checkpoint(&format!("{name}_target"), ckpt)?;
            c.head.write_checkpoint(name, ckpt);
            c.target_head.write_checkpoint(&format!("{name}_target"), ckpt);
        }
        for id in PolicyId::ALL {
            let a = self.actor(id);
            a.net.write_checkpoint(id.name(), ckpt)?;
            a.target.write_checkpoint(&format!("{}_target", id.name()), ckpt)?;
        }
        self.dynamics.write_checkpoint(ckpt)?;
        self.obs_norm.write_checkpoint("obs_norm", ckpt);
        self.goal_norm.write_checkpoint("goal_norm", ckpt);
        ckpt.insert_scalar("param_noise_sigma", self.param_sigma);
        ckpt.set_meta("agent_config", serde_json::to_value(&self.config)?);
        ckpt.set_meta("dims", serde_json::to_value(self.dims)?);
        ckpt.set_meta("gamma", serde_json::to_value(self.gamma)?);
        ckpt.set_meta("use_curiosity", serde_json::to_value(self.use_curiosity)?);
        Ok(())
    }

    /// Restores an agent; optimizer moments start fresh.
    pub fn read_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| {
            ckpt.meta(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}` metadata")))
        };
        let config: AgentConfig = serde_json::from_value(meta("agent_config")?)?;
        let dims: Dims = serde_json::from_value(meta("dims")?)?;
        let gamma: f64 = serde_json::from_value(meta("gamma")?)?;
        let use_curiosity: bool = serde_json::from_value(meta("use_curiosity")?)?;
        let critic = |id: CriticId, lr: f64, l2: f64| -> Result<Critic> {
            let name = id.name();
            let net = Mlp::read_checkpoint(name, ckpt)?;
            Ok(Critic {
                target: Mlp::read_checkpoint(&format!("{name}_target"), ckpt)?,
                head: PopArtHead::read_checkpoint(name, ckpt)?,
                target_head: PopArtHead::read_checkpoint(&format!("{name}_target"), ckpt)?,
                optimizer: AdamState::new(&net, AdamConfig::new(lr).with_l2(l2)),
                net,
            })
        };
        let actor = |id: PolicyId, lr: f64| -> Result<Actor> {
            let net = Mlp::read_checkpoint(id.name(), ckpt)?;
            Ok(Actor {
                target: Mlp::read_checkpoint(&format!("{}_target", id.name()), ckpt)?,
                optimizer: AdamState::new(&net, AdamConfig::new(lr)),
                net,
            })
        };
        let agent = Self {
            exploit_critic: critic(CriticId::Exploit, config.exploit_critic_lr, config.exploit_critic_l2)?,
            explore_critic: critic(CriticId::Explore, config.explore_critic_lr, config.explore_critic_l2)?,
            exploit_actor: actor(PolicyId::Exploit, config.exploit_actor_lr)?,
            explore_actor: actor(PolicyId::Explore, config.explore_actor_lr)?,
            combined_actor: actor(PolicyId::Combined, config.combined_actor_lr)?,
            dynamics: DynamicsModel::from_net(
                Mlp::read_checkpoint(crate::curiosity::CHECKPOINT_NAME, ckpt)?,
                dims.action,
                config.dynamics_lr,
            )?,
            obs_norm: Normalizer::read_checkpoint("obs_norm", ckpt)?,
            goal_norm: Normalizer::read_checkpoint("goal_norm", ckpt)?,
            param_sigma: ckpt.get_scalar("param_noise_sigma")?,
            config,
            dims,
            gamma,
            use_curiosity,
        };
        agent.check_shapes()?;
        Ok(agent)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dims;
        let og = d.obs + d.goal;
        let expect = [
            (&self.exploit_critic.net, og + d.action, 1),
            (&self.exploit_critic.target, og + d.action, 1),
            (&self.explore_critic.net, d.obs + d.action, 1),
            (&self.explore_critic.target, d.obs + d.action, 1),
            (&self.exploit_actor.net, og, d.action),
            (&self.exploit_actor.target, og, d.action),
            (&self.explore_actor.net, d.obs, d.action),
            (&self.explore_actor.target, d.obs, d.action),
            (&self.combined_actor.net, og, d.action),
            (&self.combined_actor.target, og, d.action),
            (self.dynamics.net(), d.obs + d.action, d.obs),
        ];
        for (net, i, o) in expect {
            if net.input_dim() != i || net.output_dim() != o {
                return Err(Error::Checkpoint(format!(
                    "network shape {}→{} does not fit dims obs={} goal={} action={}",
                    net.input_dim(),
                    net.output_dim(),
                    d.obs,
                    d.goal,
                    d.action
                )));
            }
        }
        Ok(())
    }
}
