//! Central finite-difference gradient checking in 64-bit precision.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{bind_params, embed, ModelWeights};
use crate::tensor::Tensor;
use crate::train::triplet_loss;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` receives a fresh graph and the input as a differentiable leaf and must
/// return a scalar. It is evaluated `2·len(x) + 1` times, so it must be
/// deterministic.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |input: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(input.clone());
        let out = f(&mut g, v)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check`] of the inference-mode triplet loss of three inputs with
/// respect to each parameter tensor in turn; one `(name, error)` per tensor.
pub fn model_grad_check(
    weights: &ModelWeights<f64>,
    inputs: [&Tensor<f64>; 3],
    margin: f64,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    weights
        .manifest()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let err = grad_check(
                |g, v| {
                    let mut params = bind_params(g, weights, false);
                    params[i] = v;
                    let mut out = [v; 3];
                    for (o, x) in out.iter_mut().zip(inputs) {
                        let x = g.constant(x.clone());
                        *o = embed(g, weights, &params, x, None)?;
                    }
                    triplet_loss(g, out[0], out[1], out[2], margin)
                },
                &weights.tensors()[i],
                h,
            )?;
            Ok((spec.name.clone(), err))
        })
        .collect()
}

fn scalar_value(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
