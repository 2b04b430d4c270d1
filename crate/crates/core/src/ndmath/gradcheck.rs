//! Central finite-difference gradient oracle.

use rand::seq::index::sample;
use rand::Rng;

use super::matrix::Matrix;
use super::mlp::{Gradients, Mlp};
use crate::error::{ensure, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central differences of
/// `objective` w.r.t. the parameters of `net`.
///
/// With `subset = Some(k)`, only `k` parameters drawn without replacement are
/// probed.
pub fn finite_difference_error<F, R>(
    net: &Mlp,
    analytic: &Gradients,
    objective: F,
    step: f64,
    subset: Option<(usize, &mut R)>,
) -> Result<f64>
where
    F: Fn(&Mlp) -> f64,
    R: Rng + ?Sized,
{
    let flat = analytic.flat();
    ensure!(
        flat.len() == net.num_params(),
        "analytic gradient has {} entries, network has {} parameters",
        flat.len(),
        net.num_params()
    );
    let indices: Vec<usize> = match subset {
        Some((k, rng)) if k < flat.len() => sample(rng, flat.len(), k).into_vec(),
        _ => (0..flat.len()).collect(),
    };
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for idx in indices {
        let orig = probe.param(idx);
        probe.set_param(idx, orig + step);
        let up = objective(&probe);
        probe.set_param(idx, orig - step);
        let down = objective(&probe);
        probe.set_param(idx, orig);
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(flat[idx], numeric));
    }
    Ok(worst)
}

/// Checks `backward` against finite differences for a loss on a batch of outputs.
///
/// `loss` maps the output matrix to `(value, dvalue/doutput)`. The network's
/// preactivation penalty is part of the checked objective.
pub fn gradient_check_batch<L>(net: &Mlp, loss: L, inputs: &Matrix) -> Result<f64>
where
    L: Fn(&Matrix) -> (f64, Matrix),
{
    let (out, cache) = net.forward_batch(inputs)?;
    let (_, seed) = loss(&out);
    let (analytic, _) = net.backward(&cache, &seed)?;
    let coeff = net.spec().preactivation_penalty;
    let objective = |probe: &Mlp| -> f64 {
        let (out, cache) = probe.forward_batch(inputs).expect("shape checked above");
        let penalty: f64 = cache
            .output_preactivations()
            .as_slice()
            .iter()
            .map(|z| z * z)
            .sum();
        loss(&out).0 + coeff * penalty / inputs.rows().max(1) as f64
    };
    finite_difference_error::<_, rand_chacha::ChaCha8Rng>(net, &analytic, objective, DEFAULT_STEP, None)
}

/// Single-input form of [`gradient_check_batch`].
pub fn gradient_check<L>(net: &Mlp, loss: L, input: &[f64]) -> Result<f64>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    gradient_check_batch(
        net,
        |out: &Matrix| {
            let (v, g) = loss(out.row(0));
            (v, Matrix::row_vector(&g))
        },
        &Matrix::row_vector(input),
    )
}

/// Mean squared error against `target`, summed over components: `(value, gradient)`.
pub fn squared_error_loss(target: &Matrix) -> impl Fn(&Matrix) -> (f64, Matrix) + '_ {
    move |out: &Matrix| {
        let n = out.rows().max(1) as f64;
        let mut grad = out.clone();
        let mut value = 0.0;
        for (g, t) in grad.as_mut_slice().iter_mut().zip(target.as_slice()) {
            let d = *g - t;
            value += d * d;
            *g = 2.0 * d / n;
        }
        (value / n, grad)
    }
}
