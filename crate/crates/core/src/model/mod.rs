//! Two-branch transformer producing probability-simplex embeddings.
//!
//! The temporal branch attends over keystrokes (tokens are rows of the
//! feature matrix); the channel branch attends over the five feature
//! channels (tokens are columns). Each branch adds a Gaussian range encoding,
//! runs its encoder layers, then a convolutional head with max pooling. The
//! two pooled vectors are concatenated, projected to `S` and softmaxed.

mod config;
pub mod layers;
mod weights;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use layers::{
    encoder_layer, gaussian_range_encode, multi_head_attention, multi_scale_cnn, AttentionParams,
    LayerParams, Linear, NormParams,
};
pub use weights::{shape_manifest, BranchIdx, Layout, ModelWeights, ParamSpec};

use crate::autograd::{Graph, Var};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

/// Output of the softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Self {
        Embedding { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Non-negative entries summing to 1 within `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        let sum: f64 = self.values.iter().map(|&v| f64::from(v)).sum();
        self.values.iter().all(|&v| v >= 0.0 && v.is_finite()) && (sum - 1.0).abs() <= tol
    }
}

/// Euclidean distance.
pub fn distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "distance",
            format!("embedding lengths {} and {}", a.len(), b.len()),
        ));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Adds every parameter tensor to `g` as a leaf; the result is indexed like
/// [`ModelWeights::tensors`].
pub fn bind_params<T: Real>(g: &mut Graph<T>, weights: &ModelWeights<T>, trainable: bool) -> Vec<Var> {
    weights
        .tensors()
        .iter()
        .map(|t| g.leaf(t.clone(), trainable))
        .collect()
}

fn run_branch<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    idx: &BranchIdx,
    params: &[Var],
    tokens: Var,
    heads: usize,
    mut rng: Option<&mut RngState>,
) -> Result<Var> {
    let (len, _) = g.value(tokens).dims2("branch")?;
    let mut x = match idx.input {
        Some(a) => Linear::bound(a, params).apply(g, tokens)?,
        None => tokens,
    };
    let enc = gaussian_range_encode(
        g,
        params[idx.encoding.means],
        params[idx.encoding.raw_stds],
        params[idx.encoding.embeddings],
        len,
    )?;
    x = g.add(x, enc)?;
    for layer in &idx.layers {
        let p = LayerParams::bound(layer, params);
        x = encoder_layer(g, x, &p, heads, cfg.layer_norm_eps, cfg.msc_dropout, rng.as_deref_mut())?;
    }
    let mut h = g.transpose(x)?;
    for &conv in &idx.head {
        let c = Linear::bound(conv, params);
        h = g.conv1d(h, c.weight, c.bias)?;
        h = g.relu(h)?;
        h = g.dropout(h, cfg.head_dropout, rng.as_deref_mut())?;
    }
    g.max_pool1d(h)
}

/// Embeds one `seq_len × channels` input already placed on the graph.
///
/// Passing `rng` selects training mode (dropout active).
pub fn embed<T: Real>(
    g: &mut Graph<T>,
    weights: &ModelWeights<T>,
    params: &[Var],
    input: Var,
    mut rng: Option<&mut RngState>,
) -> Result<Var> {
    let cfg = weights.config();
    let layout = weights.layout();
    let (rows, cols) = g.value(input).dims2("forward_embed")?;
    if rows != cfg.seq_len || cols != cfg.channels {
        return Err(Error::Contract(format!(
            "input is {rows}×{cols}, model expects {}×{}",
            cfg.seq_len, cfg.channels
        )));
    }
    let temporal = run_branch(
        g,
        cfg,
        &layout.temporal,
        params,
        input,
        cfg.temporal_heads,
        rng.as_deref_mut(),
    )?;
    let transposed = g.transpose(input)?;
    let channel = run_branch(
        g,
        cfg,
        &layout.channel,
        params,
        transposed,
        cfg.channel_heads,
        rng.as_deref_mut(),
    )?;
    let joined = g.concat(&[temporal, channel], 0)?;
    let row = g.reshape(joined, &[1, 2 * cfg.d_model])?;
    let logits = Linear::bound(layout.output, params).apply(g, row)?;
    let probs = g.softmax(logits, 1)?;
    g.reshape(probs, &[cfg.embedding_size])
}

/// Places a feature sequence on the graph as a constant input.
pub fn input_tensor<T: Real>(fs: &FeatureSequence) -> Result<Tensor<T>> {
    let data = fs.values.iter().map(|&v| T::from_f64(f64::from(v))).collect();
    Tensor::new(&[fs.seq_len, crate::data::FEATURES], data)
}

/// Embedding of one sequence; `rng = None` is inference mode.
pub fn forward_embed(
    weights: &ModelWeights<f32>,
    fs: &FeatureSequence,
    rng: Option<&mut RngState>,
) -> Result<Embedding> {
    let mut g = Graph::new();
    let params = bind_params(&mut g, weights, false);
    let x = g.constant(input_tensor(fs)?);
    let out = embed(&mut g, weights, &params, x, rng)?;
    Ok(Embedding::new(g.value(out).data().to_vec()))
}

const INFERENCE_CHUNK: usize = 16;

/// Inference-mode embeddings of many sequences, in input order.
pub fn embed_batch(weights: &ModelWeights<f32>, seqs: &[&FeatureSequence]) -> Result<Vec<Embedding>> {
    let chunks: Vec<Result<Vec<Embedding>>> = seqs
        .par_chunks(INFERENCE_CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let params = bind_params(&mut g, weights, false);
            chunk
                .iter()
                .map(|fs| {
                    let x = g.constant(input_tensor(fs)?);
                    let out = embed(&mut g, weights, &params, x, None)?;
                    Ok(Embedding::new(g.value(out).data().to_vec()))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(seqs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}
