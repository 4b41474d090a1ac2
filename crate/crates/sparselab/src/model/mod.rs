//! Decoder-only transformer with gated FFNs: configuration, parameter
//! layout, deterministic initialization, and checkpoint state.
//!
//! The design keeps every parameter in one flat `Vec<f32>` addressed
//! through a named tensor manifest, which makes the optimizer, gradient
//! checks, and binary serialization uniform over all tensors.

pub(crate) mod eval;
pub(crate) mod ffn;
pub(crate) mod forward;

pub use eval::{evaluate_ppl, PplReport};
pub use ffn::{
    ffn_col_norms, ffn_forward, ffn_forward_masked, neuron_output, neuron_records, FfnRef,
    FfnWeights, NeuronRecord,
};
pub use forward::{forward_with_tap, transformer_forward, FfnTap, MaskRule};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// FFN gating nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    SiLU,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::ReLU => x.max(0.0),
            // x * sigmoid(x); satisfies sigma(0) = 0
            Activation::SiLU => x / (1.0 + (-x).exp()),
        }
    }

    /// d(activation)/dx, needed by the trainer.
    #[inline]
    pub fn grad(self, x: f32) -> f32 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::SiLU => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::ReLU => write!(f, "relu"),
            Activation::SiLU => write!(f, "silu"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::ReLU),
            "silu" => Ok(Activation::SiLU),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Architecture hyperparameters. `d_f` defaults to `round(2.5 * d_h)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_f: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub seed: u64,
}

/// Default FFN width multiplier applied to the hidden dimension.
pub const FFN_WIDTH_RATIO: f64 = 2.5;

impl ModelConfig {
    /// Config with the default FFN width `d_f = round(2.5 * d_h)`.
    pub fn new(
        d_h: usize,
        n_layers: usize,
        n_heads: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        ModelConfig {
            d_h,
            d_f: default_d_f(d_h),
            n_layers,
            n_heads,
            vocab_size: 256,
            max_seq_len: 256,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_f == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h {} not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.n_heads
    }

    /// Hidden dimension over layer count; the transformer's shape parameter.
    pub fn width_depth_ratio(&self) -> f64 {
        self.d_h as f64 / self.n_layers as f64
    }

    /// Parameter count excluding token/position embeddings and the LM head.
    pub fn non_embedding_params(&self) -> usize {
        let per_layer = 4 * self.d_h * self.d_h   // wq, wk, wv, wo
            + 3 * self.d_f * self.d_h             // w_gate, w_in, w_out
            + 2 * self.d_h; // two norm gains
        self.n_layers * per_layer + self.d_h // final norm
    }
}

pub fn default_d_f(d_h: usize) -> usize {
    (FFN_WIDTH_RATIO * d_h as f64).round() as usize
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat buffer.
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical tensor manifest derived from a config. The order is fixed so
/// optimizer state, gradients, and serialized checkpoints all line up.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            specs.push(TensorSpec { name, shape, offset });
            offset += len;
        };
        push("tok_emb".into(), vec![cfg.vocab_size, cfg.d_h]);
        push("pos_emb".into(), vec![cfg.max_seq_len, cfg.d_h]);
        for l in 0..cfg.n_layers {
            push(format!("layer{l}.attn_norm"), vec![cfg.d_h]);
            push(format!("layer{l}.wq"), vec![cfg.d_h, cfg.d_h]);
            push(format!("layer{l}.wk"), vec![cfg.d_h, cfg.d_h]);
            push(format!("layer{l}.wv"), vec![cfg.d_h, cfg.d_h]);
            push(format!("layer{l}.wo"), vec![cfg.d_h, cfg.d_h]);
            push(format!("layer{l}.ffn_norm"), vec![cfg.d_h]);
            push(format!("layer{l}.w_gate"), vec![cfg.d_f, cfg.d_h]);
            push(format!("layer{l}.w_in"), vec![cfg.d_f, cfg.d_h]);
            push(format!("layer{l}.w_out"), vec![cfg.d_h, cfg.d_f]);
        }
        push("final_norm".into(), vec![cfg.d_h]);
        push("lm_head".into(), vec![cfg.vocab_size, cfg.d_h]);
        let total = offset;
        ParamLayout { specs, total }
    }

    pub fn total_elements(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// RMS normalization epsilon shared by forward and backward passes.
pub const RMS_EPS: f32 = 1e-5;

/// A model snapshot: config, flat parameters, and training progress.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f32>,
    pub tokens_seen: u64,
    pub step: u64,
}

impl Checkpoint {
    /// Deterministic initialization: linear weights are Gaussian with
    /// std 1/sqrt(fan_in), embeddings use std 0.02, norm gains start at 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0f32; layout.total_elements()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for spec in layout.specs() {
            let slice = &mut params[spec.offset..spec.offset + spec.len()];
            let base = spec.name.rsplit('.').next().unwrap_or(&spec.name);
            match base {
                "attn_norm" | "ffn_norm" | "final_norm" => slice.fill(1.0),
                "tok_emb" | "pos_emb" => fill_gaussian(slice, 0.02, &mut rng),
                _ => {
                    let fan_in = *spec.shape.last().expect("matrix shape") as f64;
                    fill_gaussian(slice, 1.0 / fan_in.sqrt(), &mut rng);
                }
            }
        }
        Ok(Checkpoint {
            config,
            layout,
            params,
            tokens_seen: 0,
            step: 0,
        })
    }

    /// Borrow a named tensor as a flat slice.
    pub fn tensor(&self, name: &str) -> Result<&[f32]> {
        let spec = self
            .layout
            .find(name)
            .ok_or_else(|| Error::CheckpointFormat(format!("unknown tensor '{name}'")))?;
        Ok(&self.params[spec.offset..spec.offset + spec.len()])
    }

    pub(crate) fn slice(&self, spec: &TensorSpec) -> &[f32] {
        &self.params[spec.offset..spec.offset + spec.len()]
    }

    /// Named tensor as a row-major matrix view (rows, cols, data).
    pub fn tensor_2d(&self, name: &str) -> Result<(usize, usize, &[f32])> {
        let spec = self
            .layout
            .find(name)
            .ok_or_else(|| Error::CheckpointFormat(format!("unknown tensor '{name}'")))?;
        if spec.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "tensor_2d",
                expected: "2-d tensor".into(),
                got: format!("{:?}", spec.shape),
            });
        }
        Ok((
            spec.shape[0],
            spec.shape[1],
            &self.params[spec.offset..spec.offset + spec.len()],
        ))
    }
}

fn fill_gaussian(slice: &mut [f32], std: f64, rng: &mut ChaCha8Rng) {
    for v in slice.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (z * std) as f32;
    }
}
