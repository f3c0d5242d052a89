//! Parameter layout, shape manifest and initialization.
//!
//! Every learnable tensor lives in one flat list whose order and shapes are
//! fully determined by the [`ModelConfig`]. [`Layout`] records where each
//! layer's tensors sit in that list.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::raw_std_for;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `uniform(-sqrt(1/fan_in), sqrt(1/fan_in))`
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    /// Evenly spaced over `[0, length - 1]`.
    Means { length: usize },
    /// Raw value whose positivity transform gives `length / (2G)`.
    Widths { length: usize },
}

/// Indices of a weight and bias pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodingIdx {
    pub means: usize,
    pub raw_stds: usize,
    pub embeddings: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIdx {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub attn_norm: Norm,
    pub convs: Vec<Affine>,
    pub inner_norm: Norm,
    pub msc_norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchIdx {
    /// Absent for the channel branch when its token width already equals
    /// `d_model`.
    pub input: Option<Affine>,
    pub encoding: EncodingIdx,
    pub layers: Vec<LayerIdx>,
    pub head: Vec<Affine>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub temporal: BranchIdx,
    pub channel: BranchIdx,
    pub output: Affine,
}

struct Builder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape });
        self.inits.push(init);
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> Affine {
        Affine {
            weight: self.add(format!("{prefix}.weight"), vec![inp, out], Init::Uniform { fan_in: inp }),
            bias: self.add(format!("{prefix}.bias"), vec![out], Init::Zeros),
        }
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Affine {
        Affine {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![c_out, c_in, k],
                Init::Uniform { fan_in: c_in * k },
            ),
            bias: self.add(format!("{prefix}.bias"), vec![c_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn branch(
        &mut self,
        name: &str,
        cfg: &ModelConfig,
        token_width: usize,
        tokens: usize,
        gaussians: usize,
        layers: usize,
    ) -> BranchIdx {
        let d = cfg.d_model;
        let input = (name == "temporal" || token_width != d)
            .then(|| self.linear(&format!("{name}.input"), token_width, d));
        let encoding = EncodingIdx {
            means: self.add(format!("{name}.encoding.means"), vec![gaussians], Init::Means { length: tokens }),
            raw_stds: self.add(
                format!("{name}.encoding.raw_stds"),
                vec![gaussians],
                Init::Widths { length: tokens },
            ),
            embeddings: self.add(
                format!("{name}.encoding.embeddings"),
                vec![gaussians, d],
                Init::Uniform { fan_in: gaussians },
            ),
        };
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                LayerIdx {
                    query: self.linear(&format!("{p}.attn.query"), d, d),
                    key: self.linear(&format!("{p}.attn.key"), d, d),
                    value: self.linear(&format!("{p}.attn.value"), d, d),
                    output: self.linear(&format!("{p}.attn.output"), d, d),
                    attn_norm: self.norm(&format!("{p}.attn_norm"), d),
                    convs: cfg
                        .msc_kernels
                        .iter()
                        .enumerate()
                        .map(|(j, &k)| self.conv(&format!("{p}.msc.conv{j}"), d, d, k))
                        .collect(),
                    inner_norm: self.norm(&format!("{p}.msc.inner_norm"), d),
                    msc_norm: self.norm(&format!("{p}.msc_norm"), d),
                }
            })
            .collect();
        let head = cfg
            .head_kernels
            .iter()
            .enumerate()
            .map(|(j, &k)| self.conv(&format!("{name}.head.conv{j}"), d, d, k))
            .collect();
        BranchIdx {
            input,
            encoding,
            layers,
            head,
        }
    }
}

fn build(cfg: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        specs: Vec::new(),
        inits: Vec::new(),
    };
    let temporal = b.branch("temporal", cfg, cfg.channels, cfg.seq_len, cfg.gaussians, cfg.temporal_layers);
    let channel = b.branch(
        "channel",
        cfg,
        cfg.seq_len,
        cfg.channels,
        cfg.channel_gaussians,
        cfg.channel_layers,
    );
    let output = b.linear("output", 2 * cfg.d_model, cfg.embedding_size);
    (
        Layout {
            temporal,
            channel,
            output,
        },
        b,
    )
}

/// Names and shapes of every parameter, in storage order.
pub fn shape_manifest(cfg: &ModelConfig) -> Vec<ParamSpec> {
    build(cfg).1.specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    config: ModelConfig,
    layout: Layout,
    manifest: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    /// Deterministic initialization from `rng`.
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build(config);
        let tensors = builder
            .specs
            .iter()
            .zip(&builder.inits)
            .map(|(spec, init)| init_tensor(&spec.shape, *init, rng))
            .collect();
        Ok(ModelWeights {
            config: config.clone(),
            layout,
            manifest: builder.specs,
            tensors,
        })
    }

    /// Wraps loaded tensors, checking them against the config's manifest.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build(config);
        if tensors.len() != builder.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                builder.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in builder.specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(spec.name.clone()));
            }
        }
        Ok(ModelWeights {
            config: config.clone(),
            layout,
            manifest: builder.specs,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn manifest(&self) -> &[ParamSpec] {
        &self.manifest
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Index of the parameter called `name`.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.manifest.iter().position(|s| s.name == name)
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            layout: self.layout.clone(),
            manifest: self.manifest.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

fn init_tensor<T: Real>(shape: &[usize], init: Init, rng: &mut RngState) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::Uniform { fan_in } => {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect()
        }
        Init::Zeros => vec![T::ZERO; n],
        Init::Ones => vec![T::ONE; n],
        Init::Means { length } => {
            let span = (length - 1) as f64;
            (0..n)
                .map(|g| {
                    let pos = if n == 1 { span / 2.0 } else { span * g as f64 / (n - 1) as f64 };
                    T::from_f64(pos)
                })
                .collect()
        }
        Init::Widths { length } => {
            let raw = raw_std_for(length as f64 / (2.0 * n as f64));
            vec![T::from_f64(raw); n]
        }
    };
    Tensor::new(shape, data).expect("manifest shapes are non-empty")
}
