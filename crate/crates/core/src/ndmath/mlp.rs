//! Fully-connected networks with explicit backpropagation.
//!
//! `forward_batch` returns the activation record instead of storing it, so a
//! network is read-only during evaluation and can be shared across threads.
//! Every mutation bumps the network's generation; `backward` rejects a cache
//! produced by a different network or an older generation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::matrix::Matrix;
use crate::error::{ensure, Error, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Saturating output in `[-1, 1]`.
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at preactivation `z` given the activation value `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Architecture of an [`Mlp`]: everything except the parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Coefficient of the squared-magnitude penalty on output preactivations.
    pub preactivation_penalty: f64,
}

impl MlpSpec {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_activation: Activation,
    ) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
            output_activation,
            preactivation_penalty: 0.0,
        }
    }

    pub fn with_penalty(mut self, coeff: f64) -> Self {
        self.preactivation_penalty = coeff;
        self
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.layer_sizes.len() >= 2,
            "an mlp needs at least input and output sizes"
        );
        ensure!(
            self.layer_sizes.iter().all(|&s| s > 0),
            "layer sizes must be positive: {:?}",
            self.layer_sizes
        );
        ensure!(
            self.preactivation_penalty >= 0.0 && self.preactivation_penalty.is_finite(),
            "preactivation penalty must be finite and non-negative"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// Shape `(out, in)`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Activation record of one `forward_batch` call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    net_id: u64,
    generation: u64,
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Output-layer preactivations.
    pub fn output_preactivations(&self) -> &Matrix {
        self.preacts.last().expect("non-empty network")
    }

    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }
}

/// One gradient buffer per parameter tensor, ordered `[W0, b0, W1, b1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            tensors: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        ensure!(
            self.tensors.len() == other.tensors.len(),
            "gradient tensor counts differ"
        );
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            ensure!(a.len() == b.len(), "gradient tensor shapes differ");
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// A multilayer perceptron with ReLU hidden layers.
#[derive(Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    id: u64,
    generation: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Mlp {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let biases = (0..fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, weights)
                        .expect("shape computed from sizes"),
                    biases,
                }
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[1], w[0]),
                biases: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.layer_sizes.last().expect("validated")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the top layer; invalidates outstanding caches.
    pub fn output_layer_mut(&mut self) -> &mut Layer {
        self.generation += 1;
        self.layers.last_mut().expect("validated")
    }

    pub fn set_preactivation_penalty(&mut self, coeff: f64) {
        self.spec.preactivation_penalty = coeff;
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let (out, cache) = self.forward_batch(&Matrix::row_vector(input))?;
        Ok((out.into_vec(), cache))
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        ensure!(
            input.cols() == self.input_dim(),
            "input dimension {} != network input {}",
            input.cols(),
            self.input_dim()
        );
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n);
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul_nt(&layer.weights)?;
            z.add_row_broadcast(&layer.biases)?;
            let act = if l + 1 == n {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            let mut y = z.clone();
            y.map_inplace(|v| act.apply(v));
            inputs.push(x);
            preacts.push(z);
            x = y;
        }
        Ok((
            x.clone(),
            ForwardCache {
                net_id: self.id,
                generation: self.generation,
                inputs,
                preacts,
                output: x,
            },
        ))
    }

    /// Forward pass without an activation record.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        ensure!(
            input.cols() == self.input_dim(),
            "input dimension {} != network input {}",
            input.cols(),
            self.input_dim()
        );
        let n = self.layers.len();
        let mut x = input.matmul_nt(&self.layers[0].weights)?;
        for l in 0..n {
            if l > 0 {
                x = x.matmul_nt(&self.layers[l].weights)?;
            }
            x.add_row_broadcast(&self.layers[l].biases)?;
            let act = if l + 1 == n {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            x.map_inplace(|v| act.apply(v));
        }
        Ok(x)
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(&Matrix::row_vector(input))?.into_vec())
    }

    /// Gradients of `Σ_rows loss_row`, given `dloss/doutput` per row.
    ///
    /// When the preactivation penalty is positive, the objective also carries
    /// `coeff * mean_rows |z_out|²`, matching callers that fold `1/N` into
    /// `output_grad`. Returns the parameter gradients and `dloss/dinput`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(Gradients, Matrix)> {
        ensure!(
            cache.net_id == self.id && cache.generation == self.generation,
            "forward cache does not belong to this network state"
        );
        ensure!(
            output_grad.shape() == cache.output.shape(),
            "output gradient shape {:?} != output shape {:?}",
            output_grad.shape(),
            cache.output.shape()
        );
        let n = self.layers.len();
        let mut tensors = vec![Vec::new(); 2 * n];

        let mut delta = output_grad.clone();
        {
            let z = &cache.preacts[n - 1];
            let y = &cache.output;
            let act = self.spec.output_activation;
            let coeff = self.spec.preactivation_penalty / output_grad.rows().max(1) as f64;
            for ((d, &zv), &yv) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(z.as_slice())
                .zip(y.as_slice())
            {
                *d = *d * act.derivative(zv, yv) + 2.0 * coeff * zv;
            }
        }

        let mut input_grad = Matrix::zeros(0, 0);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let dw = delta.matmul_tn(&cache.inputs[l])?;
            tensors[2 * l] = dw.into_vec();
            tensors[2 * l + 1] = delta.sum_rows();
            let dx = delta.matmul(&layer.weights)?;
            if l == 0 {
                input_grad = dx;
            } else {
                let z = &cache.preacts[l - 1];
                let y = &cache.inputs[l];
                let act = self.spec.hidden_activation;
                let mut next = dx;
                for ((d, &zv), &yv) in next
                    .as_mut_slice()
                    .iter_mut()
                    .zip(z.as_slice())
                    .zip(y.as_slice())
                {
                    *d *= act.derivative(zv, yv);
                }
                delta = next;
            }
        }
        Ok((Gradients { tensors }, input_grad))
    }

    /// Parameter tensors in gradient order `[W0, b0, W1, b1, ...]`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.num_params(),
            "flat parameter length {} != {}",
            flat.len(),
            self.num_params()
        );
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Reads parameter `idx` in flat order.
    pub fn param(&self, idx: usize) -> f64 {
        let (t, i) = self.locate(idx);
        self.tensors()[t][i]
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (t, i) = self.locate(idx);
        self.tensors_mut()[t][i] = value;
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors().iter().enumerate() {
            if idx < tensor.len() {
                return (t, idx);
            }
            idx -= tensor.len();
        }
        panic!("parameter index out of range");
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.tensors().into_iter().flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().into_iter().flatten().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.spec.layer_sizes == other.spec.layer_sizes
    }

    /// `self ← (1 - tau)·self + tau·live`, element-wise.
    pub fn polyak_update(&mut self, live: &Mlp, tau: f64) -> Result<()> {
        ensure!(self.same_shape(live), "polyak update between mismatched networks");
        ensure!((0.0..=1.0).contains(&tau), "polyak coefficient {tau} outside [0, 1]");
        let src = live.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (1.0 - tau) * *d + tau * s;
            }
        }
        Ok(())
    }

    /// Copy with i.i.d. Gaussian noise of std `sigma` added to every parameter.
    pub fn perturbed<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Mlp {
        let mut out = self.clone();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
            for t in out.tensors_mut() {
                t.iter_mut().for_each(|x| *x += normal.sample(rng));
            }
        }
        out
    }

    pub fn write_checkpoint(&self, name: &str, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_network_spec(name, &self.spec)?;
        for (l, layer) in self.layers.iter().enumerate() {
            ckpt.insert(format!("{name}/{l}/weights"), layer.weights.as_slice().to_vec());
            ckpt.insert(format!("{name}/{l}/biases"), layer.biases.clone());
        }
        Ok(())
    }

    pub fn read_checkpoint(name: &str, ckpt: &Checkpoint) -> Result<Mlp> {
        let spec = ckpt.network_spec(name)?;
        let mut net = Mlp::zeros(spec)?;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let w = ckpt.get(&format!("{name}/{l}/weights"))?;
            let b = ckpt.get(&format!("{name}/{l}/biases"))?;
            if w.len() != layer.weights.as_slice().len() || b.len() != layer.biases.len() {
                return Err(Error::Checkpoint(format!(
                    "{name}/{l}: stored tensor sizes do not match the recorded layer sizes"
                )));
            }
            layer.weights.as_mut_slice().copy_from_slice(w);
            layer.biases.copy_from_slice(b);
        }
        Ok(net)
    }
}
