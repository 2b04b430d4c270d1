//! Input normalization and PopArt target normalization.
//!
//! [`RunningStats`] keeps exact `(count, sum, sum_sq)` accumulators so that
//! statistics from several workers merge by plain addition. [`Normalizer`]
//! splits those accumulators into a synchronized base and a local pending part,
//! which is what the trainer exchanges at each averaging barrier.
//!
//! [`PopArtHead`] holds `(mu, sigma)` for a scalar critic: the critic network
//! predicts a normalized value `n(x)` and the value estimate is
//! `sigma * n(x) + mu`. Every statistics change rewrites the network's top layer
//! so that the value estimate is unchanged for all inputs.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::ndmath::{Checkpoint, Matrix, Mlp};

pub const STD_FLOOR: f64 = 1e-2;
pub const CLIP_RANGE: f64 = 5.0;
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    pub fn observe_one(&mut self, v: &[f64]) -> Result<()> {
        self.accumulate(v)?;
        self.refresh();
        Ok(())
    }

    pub fn observe<V: AsRef<[f64]>>(&mut self, batch: &[V]) -> Result<()> {
        for v in batch {
            self.accumulate(v.as_ref())?;
        }
        self.refresh();
        Ok(())
    }

    fn accumulate(&mut self, v: &[f64]) -> Result<()> {
        ensure!(
            v.len() == self.dim(),
            "stats dimension {} != vector length {}",
            self.dim(),
            v.len()
        );
        self.count += 1.0;
        for ((s, q), x) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(v) {
            *s += x;
            *q += x * x;
        }
        Ok(())
    }

    /// Adds another accumulator's `(count, sum, sum_sq)`.
    pub fn merge(&mut self, other: &RunningStats) -> Result<()> {
        ensure!(other.dim() == self.dim(), "merging stats of different dimension");
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        if self.count <= 0.0 {
            self.mean.iter_mut().for_each(|m| *m = 0.0);
            self.std.iter_mut().for_each(|s| *s = 1.0);
            return;
        }
        for i in 0..self.dim() {
            let mean = self.sum[i] / self.count;
            let var = (self.sum_sq[i] / self.count - mean * mean).max(0.0);
            self.mean[i] = mean;
            self.std[i] = var.sqrt().max(STD_FLOOR);
        }
    }

    /// `clamp((v - mean) / std, -5, 5)` component-wise.
    pub fn normalize_clip(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| ((x - m) / s).clamp(-CLIP_RANGE, CLIP_RANGE))
            .collect()
    }

    pub fn normalize_clip_rows(&self, m: &Matrix) -> Result<Matrix> {
        ensure!(m.cols() == self.dim(), "normalizing {} columns with {}-d stats", m.cols(), self.dim());
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (x, (mu, s)) in row.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                *x = ((*x - mu) / s).clamp(-CLIP_RANGE, CLIP_RANGE);
            }
        }
        Ok(out)
    }

    pub(crate) fn from_accumulators(count: f64, sum: Vec<f64>, sum_sq: Vec<f64>) -> Result<Self> {
        ensure!(sum.len() == sum_sq.len(), "accumulator lengths differ");
        let dim = sum.len();
        let mut s = Self {
            count,
            sum,
            sum_sq,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        };
        s.refresh();
        Ok(s)
    }
}

/// Running statistics with a worker-local pending part.
///
/// Normalization uses `base + pending`. At a barrier, every worker's base
/// becomes `base + Σ pending` (summed in worker order) and pending is cleared.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    base: RunningStats,
    pending: RunningStats,
    effective: RunningStats,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            base: RunningStats::new(dim),
            pending: RunningStats::new(dim),
            effective: RunningStats::new(dim),
        }
    }

    pub fn stats(&self) -> &RunningStats {
        &self.effective
    }

    pub fn pending(&self) -> &RunningStats {
        &self.pending
    }

    pub fn observe<V: AsRef<[f64]>>(&mut self, batch: &[V]) -> Result<()> {
        self.pending.observe(batch)?;
        let mut eff = self.base.clone();
        eff.merge(&self.pending)?;
        self.effective = eff;
        Ok(())
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        self.effective.normalize_clip(v)
    }

    pub fn normalize_rows(&self, m: &Matrix) -> Result<Matrix> {
        self.effective.normalize_clip_rows(m)
    }

    /// Synchronizes a group of normalizers on the sum of their pending data.
    pub fn synchronize(group: &mut [&mut Normalizer]) -> Result<()> {
        let Some(first) = group.first() else {
            return Ok(());
        };
        let mut merged = first.base.clone();
        for n in group.iter() {
            merged.merge(&n.pending)?;
        }
        let dim = merged.dim();
        for n in group.iter_mut() {
            n.base = merged.clone();
            n.pending = RunningStats::new(dim);
            n.effective = merged.clone();
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, name: &str, ckpt: &mut Checkpoint) {
        for (part, s) in [("base", &self.base), ("pending", &self.pending)] {
            ckpt.insert_scalar(format!("{name}/{part}/count"), s.count);
            ckpt.insert(format!("{name}/{part}/sum"), s.sum.clone());
            ckpt.insert(format!("{name}/{part}/sum_sq"), s.sum_sq.clone());
        }
    }

    pub fn read_checkpoint(name: &str, ckpt: &Checkpoint) -> Result<Self> {
        let load = |part: &str| -> Result<RunningStats> {
            RunningStats::from_accumulators(
                ckpt.get_scalar(&format!("{name}/{part}/count"))?,
                ckpt.get(&format!("{name}/{part}/sum"))?.to_vec(),
                ckpt.get(&format!("{name}/{part}/sum_sq"))?.to_vec(),
            )
        };
        let base = load("base")?;
        let pending = load("pending")?;
        let mut effective = base.clone();
        effective.merge(&pending)?;
        Ok(Self {
            base,
            pending,
            effective,
        })
    }
}

/// Adaptive `(mu, sigma)` of a scalar critic's targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopArtHead {
    pub mu: f64,
    pub sigma: f64,
    pub second_moment: f64,
    pub step_size: f64,
}

impl PopArtHead {
    pub fn new(step_size: f64) -> Self {
        Self {
            mu: 0.0,
            sigma: 1.0,
            second_moment: 1.0,
            step_size,
        }
    }

    #[inline]
    pub fn denormalize(&self, normalized: f64) -> f64 {
        self.sigma * normalized + self.mu
    }

    #[inline]
    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.mu) / self.sigma
    }

    /// Moves the statistics toward the batch moments and rewrites the top layer
    /// of `critic` so that `sigma * critic(x) + mu` is preserved.
    pub fn update(&mut self, critic: &mut Mlp, targets: &[f64]) -> Result<()> {
        ensure!(!targets.is_empty(), "popart update on an empty batch");
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let mean_sq = targets.iter().map(|y| y * y).sum::<f64>() / n;
        let mu = self.mu + self.step_size * (mean - self.mu);
        let nu = self.second_moment + self.step_size * (mean_sq - self.second_moment);
        self.set_statistics(critic, mu, nu)
    }

    /// Replaces `(mu, second_moment)` and rewrites the top layer to preserve outputs.
    pub fn set_statistics(&mut self, critic: &mut Mlp, mu: f64, second_moment: f64) -> Result<()> {
        ensure!(critic.output_dim() == 1, "popart head expects a scalar critic");
        ensure!(mu.is_finite() && second_moment.is_finite(), "non-finite popart statistics");
        if mu == self.mu && second_moment == self.second_moment {
            return Ok(());
        }
        let sigma = (second_moment - mu * mu).max(0.0).sqrt().max(SIGMA_FLOOR);
        let (old_mu, old_sigma) = (self.mu, self.sigma);
        let top = critic.output_layer_mut();
        let ratio = old_sigma / sigma;
        top.weights.as_mut_slice().iter_mut().for_each(|w| *w *= ratio);
        for b in &mut top.biases {
            *b = (old_sigma * *b + old_mu - mu) / sigma;
        }
        self.mu = mu;
        self.second_moment = second_moment;
        self.sigma = sigma;
        Ok(())
    }

    /// Moves `(mu, second_moment)` toward `live` by `tau` without touching any
    /// network; used for the heads of target critics.
    pub fn polyak_update(&mut self, live: &PopArtHead, tau: f64) {
        self.mu = (1.0 - tau) * self.mu + tau * live.mu;
        self.second_moment = (1.0 - tau) * self.second_moment + tau * live.second_moment;
        self.sigma = (self.second_moment - self.mu * self.mu)
            .max(0.0)
            .sqrt()
            .max(SIGMA_FLOOR);
    }

    pub fn write_checkpoint(&self, name: &str, ckpt: &mut Checkpoint) {
        ckpt.insert(
            format!("{name}/popart"),
            vec![self.mu, self.sigma, self.second_moment, self.step_size],
        );
    }

    pub fn read_checkpoint(name: &str, ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.get(&format!("{name}/popart"))? {
            &[mu, sigma, second_moment, step_size] => Ok(Self {
                mu,
                sigma,
                second_moment,
                step_size,
            }),
            _ => Err(crate::Error::Checkpoint(format!("{name}/popart must hold 4 values"))),
        }
    }
}
