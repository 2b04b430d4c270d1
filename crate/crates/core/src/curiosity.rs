//! Forward dynamics model whose prediction error is the exploration reward.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::ndmath::{adam_step, Activation, AdamConfig, AdamState, Checkpoint, Gradients, Matrix, Mlp, MlpSpec};

pub const DEFAULT_LEARNING_RATE: f64 = 0.007;
pub const CHECKPOINT_NAME: &str = "dynamics";

#[derive(Clone, Debug)]
pub struct DynamicsModel {
    net: Mlp,
    optimizer: AdamState,
    obs_dim: usize,
    action_dim: usize,
}

/// Per-row summed squared error, the loss (their mean) and its gradient.
pub fn dynamics_loss(net: &Mlp, inputs: &Matrix, targets: &Matrix) -> Result<(Vec<f64>, f64, Gradients)> {
    let (pred, cache) = net.forward_batch(inputs)?;
    ensure!(
        pred.shape() == targets.shape(),
        "dynamics targets are {:?}, predictions {:?}",
        targets.shape(),
        pred.shape()
    );
    let n = inputs.rows() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut errors = Vec::with_capacity(pred.rows());
    for r in 0..pred.rows() {
        let mut e = 0.0;
        for ((g, p), t) in grad.row_mut(r).iter_mut().zip(pred.row(r)).zip(targets.row(r)) {
            let d = p - t;
            e += d * d;
            *g = 2.0 * d / n;
        }
        errors.push(e);
    }
    let loss = errors.iter().sum::<f64>() / n;
    let (grads, _) = net.backward(&cache, &grad)?;
    Ok((errors, loss, grads))
}

impl DynamicsModel {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        learning_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(obs_dim + action_dim, hidden, obs_dim, Activation::Identity);
        let net = Mlp::new(spec, rng)?;
        Self::from_net(net, action_dim, learning_rate)
    }

    pub fn from_net(net: Mlp, action_dim: usize, learning_rate: f64) -> Result<Self> {
        ensure!(
            net.input_dim() > action_dim,
            "dynamics net input {} cannot hold a {action_dim}-dim action",
            net.input_dim()
        );
        let obs_dim = net.input_dim() - action_dim;
        ensure!(net.output_dim() == obs_dim, "dynamics net must predict the observation");
        let optimizer = AdamState::new(&net, AdamConfig::new(learning_rate));
        Ok(Self {
            net,
            optimizer,
            obs_dim,
            action_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut AdamState {
        &mut self.optimizer
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn predict_next(&self, obs: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            obs.len() == self.obs_dim && action.len() == self.action_dim,
            "dynamics input dims ({}, {}) expected ({}, {})",
            obs.len(),
            action.len(),
            self.obs_dim,
            self.action_dim
        );
        let mut x = Vec::with_capacity(obs.len() + action.len());
        x.extend_from_slice(obs);
        x.extend_from_slice(action);
        self.net.predict_one(&x)
    }

    /// Scores the batch with the current model, then takes one Adam step on
    /// the mean of those scores. `inputs` rows are `obs ‖ action`.
    pub fn train_and_score(&mut self, inputs: &Matrix, next_obs: &Matrix) -> Result<(Vec<f64>, f64)> {
        ensure!(inputs.rows() > 0, "dynamics batch is empty");
        let (rewards, loss, grads) = dynamics_loss(&self.net, inputs, next_obs)?;
        adam_step(&mut self.net, &grads, &mut self.optimizer)?;
        Ok((rewards, loss))
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.net.write_checkpoint(CHECKPOINT_NAME, ckpt)
    }
}
