//! A small decoder-only transformer with exact log-likelihood and hand-written gradients.
//!
//! Conditioning is plain concatenation: the prompt tokens come first and the
//! continuation is scored (or generated) after them. All arithmetic is `f64`.
//!
//! Architecture per layer (pre-norm):
//!
//! ```text
//! x = x + Wo · attn(LN1(x))          causal multi-head self-attention
//! x = x + W2 · gelu(W1 · LN2(x) + b1) + b2
//! ```
//!
//! followed by a final layer norm and an untied output projection with bias.

mod decode;
mod ops;
mod optim;
mod transformer;

pub use decode::{greedy_decode, greedy_decode_counted, sample, sample_from, DecodeState};
pub use ops::{sigmoid, softplus};
pub use optim::{adamw_step, AdamWConfig, Objective, OptimizerState};
pub use transformer::{accumulate_grad_log_prob, grad_log_prob, log_prob};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Tensors per transformer layer, in declared order.
const LAYER_TENSORS: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2",
    "mlp.b2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl ModelConfig {
    /// 2 layers, width 64, 4 heads, 64 positions.
    pub fn reference(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            n_layers: 2,
            dim: 64,
            n_heads: 4,
            max_len: 64,
            seed,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::invalid("vocab_size must cover the four specials plus one word"));
        }
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} must be a positive multiple of n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid("init_std must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size, self.dim, self.hidden());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![h, d],
                vec![h],
                vec![d, h],
                vec![d],
            ];
            for (name, shape) in LAYER_TENSORS.iter().zip(shapes) {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("lnf.g".to_string(), vec![d]));
        out.push(("lnf.b".to_string(), vec![d]));
        out.push(("out.w".to_string(), vec![v, d]));
        out.push(("out.b".to_string(), vec![v]));
        out
    }
}

/// Index arithmetic over the flat tensor list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slots {
    n_layers: usize,
}

impl Slots {
    pub(crate) const TOK: usize = 0;
    pub(crate) const POS: usize = 1;
    pub(crate) const LN1_G: usize = 0;
    pub(crate) const LN1_B: usize = 1;
    pub(crate) const WQ: usize = 2;
    pub(crate) const WK: usize = 3;
    pub(crate) const WV: usize = 4;
    pub(crate) const WO: usize = 5;
    pub(crate) const LN2_G: usize = 6;
    pub(crate) const LN2_B: usize = 7;
    pub(crate) const W1: usize = 8;
    pub(crate) const B1: usize = 9;
    pub(crate) const W2: usize = 10;
    pub(crate) const B2: usize = 11;

    pub(crate) fn layer(&self, l: usize, slot: usize) -> usize {
        2 + l * LAYER_TENSORS.len() + slot
    }

    pub(crate) fn lnf_g(&self) -> usize {
        2 + self.n_layers * LAYER_TENSORS.len()
    }

    pub(crate) fn lnf_b(&self) -> usize {
        self.lnf_g() + 1
    }

    pub(crate) fn out_w(&self) -> usize {
        self.lnf_g() + 2
    }

    pub(crate) fn out_b(&self) -> usize {
        self.lnf_g() + 3
    }
}

/// Trainable weights of the sequence model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Wraps tensors loaded from elsewhere after checking them against the config layout.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub(crate) fn slots(&self) -> Slots {
        Slots {
            n_layers: self.config.n_layers,
        }
    }

    pub(crate) fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        tensor::zeros_like(&self.tensors)
    }

    /// Content digest used as the checkpoint identity.
    pub fn digest(&self) -> String {
        tensor::digest(&self.tensors)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::invalid(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }
}

/// Deterministic Gaussian initialization from `config.seed`.
///
/// Layer-norm gains start at 1, biases at 0, and the residual output projections
/// are scaled down by `sqrt(2 * n_layers)`.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let resid_scale = 1.0 / ((2 * config.n_layers.max(1)) as f64).sqrt();
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(name, &shape);
            let n = &t.name;
            if n.ends_with(".g") {
                t.data.fill(1.0);
            } else if shape.len() == 2 {
                let std = if n.ends_with("attn.wo") || n.ends_with("mlp.w2") {
                    config.init_std * resid_scale
                } else {
                    config.init_std
                };
                for v in &mut t.data {
                    *v = std * normal.sample(&mut rng);
                }
            }
            t
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}
