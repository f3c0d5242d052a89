//! Building blocks of the two-branch encoder, expressed on an autograd graph.

use super::weights::{Affine, LayerIdx, Norm};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub attn_norm: NormParams,
    pub convs: Vec<Linear>,
    pub inner_norm: NormParams,
    pub msc_norm: NormParams,
}

impl Linear {
    pub fn bound(a: Affine, vars: &[Var]) -> Self {
        Linear {
            weight: vars[a.weight],
            bias: vars[a.bias],
        }
    }

    /// `x · W + b` for `x` of shape `rows × in`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

impl NormParams {
    pub fn bound(n: Norm, vars: &[Var]) -> Self {
        NormParams {
            gain: vars[n.gain],
            bias: vars[n.bias],
        }
    }
}

impl LayerParams {
    pub fn bound(idx: &LayerIdx, vars: &[Var]) -> Self {
        LayerParams {
            attention: AttentionParams {
                query: Linear::bound(idx.query, vars),
                key: Linear::bound(idx.key, vars),
                value: Linear::bound(idx.value, vars),
                output: Linear::bound(idx.output, vars),
            },
            attn_norm: NormParams::bound(idx.attn_norm, vars),
            convs: idx.convs.iter().map(|&c| Linear::bound(c, vars)).collect(),
            inner_norm: NormParams::bound(idx.inner_norm, vars),
            msc_norm: NormParams::bound(idx.msc_norm, vars),
        }
    }
}

/// `length × d` positional term: L1-normalized Gaussian responses of each
/// position, mixed by the learnable range embeddings (`G × d`).
pub fn gaussian_range_encode<T: Real>(
    g: &mut Graph<T>,
    means: Var,
    raw_stds: Var,
    embeddings: Var,
    length: usize,
) -> Result<Var> {
    let pdf = g.gaussian_range(means, raw_stds, length)?;
    g.matmul(pdf, embeddings)
}

/// Unmasked scaled dot-product attention over `heads` column groups of `x`
/// (`T × d`), followed by the output projection.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2("multi_head_attention")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = p.query.apply(g, x)?;
    let k = p.key.apply(g, x)?;
    let v = p.value.apply(g, x)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    p.output.apply(g, cat)
}

/// Parallel same-padded convolutions over the token axis of `x` (`T × d`),
/// each followed by ReLU and summed; then normalization and dropout.
///
/// `norm = None` skips the normalization step.
pub fn multi_scale_cnn<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    convs: &[Linear],
    norm: Option<NormParams>,
    eps: f64,
    dropout: f64,
    rng: Option<&mut RngState>,
) -> Result<Var> {
    if convs.is_empty() {
        return Err(Error::Config("multi-scale CNN needs at least one kernel".into()));
    }
    let xt = g.transpose(x)?;
    let mut acc: Option<Var> = None;
    for c in convs {
        let y = g.conv1d(xt, c.weight, c.bias)?;
        let y = g.relu(y)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    let summed = g.transpose(acc.expect("non-empty"))?;
    let normed = match norm {
        Some(n) => g.layer_norm(summed, n.gain, n.bias, eps)?,
        None => summed,
    };
    g.dropout(normed, dropout, rng)
}

/// `y = LN(x + MHA(x))`, `z = LN(y + MSC(y))`.
pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &LayerParams,
    heads: usize,
    eps: f64,
    dropout: f64,
    rng: Option<&mut RngState>,
) -> Result<Var> {
    let a = multi_head_attention(g, x, &p.attention, heads)?;
    let r = g.add(x, a)?;
    let y = g.layer_norm(r, p.attn_norm.gain, p.attn_norm.bias, eps)?;
    let m = multi_scale_cnn(g, y, &p.convs, Some(p.inner_norm), eps, dropout, rng)?;
    let r = g.add(y, m)?;
    g.layer_norm(r, p.msc_norm.gain, p.msc_norm.bias, eps)
}
