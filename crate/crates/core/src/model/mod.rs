//! Single-layer, attention-only transformer with the head projection fused
//! into the output layer.
//!
//! Two forward routes are provided. [`forward_full`] runs causal attention
//! over an explicit token sequence. [`CountEngine`] evaluates the two
//! supervised positions (`=` and the answer token) directly from token-type
//! multiplicities, which is exact because the model has no positional
//! embedding: every occurrence of a token type produces the same key, query
//! and value.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, StorageDtype, FORMAT_VERSION};
pub use forward::{
    forward_counts, forward_full, forward_positions, loss_counts, loss_full, multiplicities,
    CountEngine, CountForward, ForwardTrace, LossAndGrad, QueryToken,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension `d`.
    pub d: usize,
    /// Number of heads `a`.
    pub heads: usize,
    /// Per-head dimension `d0`; `d / heads` unless overridden.
    pub head_dim: usize,
    pub layer_norm: bool,
    /// Divide attention logits by `sqrt(head_dim)`.
    pub scale_logits: bool,
    /// Dropout on the concatenated head outputs (reference path, training only).
    pub dropout: f64,
    /// Add the (normalised) query-token embedding through a separate unembedding.
    pub skip_to_output: bool,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            head_dim: d.checked_div(heads).map_or(0, |h| h.max(1)),
            layer_norm: true,
            scale_logits: false,
            dropout: 0.0,
            skip_to_output: false,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn with_head_dim(mut self, head_dim: usize) -> Self {
        self.head_dim = head_dim;
        self
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (d={}, heads={}, head_dim={})",
                self.d, self.heads, self.head_dim
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocabulary size must be {VOCAB_SIZE}, found {}",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Multiplier applied to `q · k`.
    pub fn logit_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / (self.head_dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

/// All trainable tensors. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `vocab × d`
    pub embed: Matrix,
    pub layer_norm: Option<LayerNormParams>,
    /// Per head, `d × head_dim`.
    pub key: Vec<Matrix>,
    pub query: Vec<Matrix>,
    pub value: Vec<Matrix>,
    /// Fused output weights, `(heads · head_dim) × vocab`; rows
    /// `h·d0 .. (h+1)·d0` hold `w_{h,t}` in column `t`.
    pub out_w: Matrix,
    /// `1 × vocab`
    pub out_b: Matrix,
    /// `d × vocab`, only with `skip_to_output`.
    pub unembed: Option<Matrix>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, a, d0, v) = (config.d, config.heads, config.head_dim, config.vocab_size);
        ModelParams {
            embed: Matrix::zeros(v, d),
            layer_norm: config.layer_norm.then(|| LayerNormParams {
                gamma: Matrix::zeros(1, d),
                beta: Matrix::zeros(1, d),
            }),
            key: vec![Matrix::zeros(d, d0); a],
            query: vec![Matrix::zeros(d, d0); a],
            value: vec![Matrix::zeros(d, d0); a],
            out_w: Matrix::zeros(a * d0, v),
            out_b: Matrix::zeros(1, v),
            unembed: config.skip_to_output.then(|| Matrix::zeros(d, v)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, m| m.fill(0.0));
        z
    }

    pub fn heads(&self) -> usize {
        self.key.len()
    }

    pub fn head_dim(&self) -> usize {
        self.key.first().map(|m| m.cols()).unwrap_or(0)
    }

    /// Visits every tensor with a stable name, in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Matrix)) {
        f("embed", &self.embed);
        if let Some(ln) = &self.layer_norm {
            f("ln_gamma", &ln.gamma);
            f("ln_beta", &ln.beta);
        }
        for (kind, mats) in [("key", &self.key), ("query", &self.query), ("value", &self.value)] {
            for (h, m) in mats.iter().enumerate() {
                f(&format!("{kind}.{h}"), m);
            }
        }
        f("out_w", &self.out_w);
        f("out_b", &self.out_b);
        if let Some(u) = &self.unembed {
            f("unembed", u);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix)) {
        f("embed", &mut self.embed);
        if let Some(ln) = &mut self.layer_norm {
            f("ln_gamma", &mut ln.gamma);
            f("ln_beta", &mut ln.beta);
        }
        for (kind, mats) in [
            ("key", &mut self.key),
            ("query", &mut self.query),
            ("value", &mut self.value),
        ] {
            for (h, m) in mats.iter_mut().enumerate() {
                f(&format!("{kind}.{h}"), m);
            }
        }
        f("out_w", &mut self.out_w);
        f("out_b", &mut self.out_b);
        if let Some(u) = &mut self.unembed {
            f("unembed", u);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.for_each(|n, m| out.push((n.to_string(), m.clone())));
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each(|_, m| out.push(m.as_slice().len()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_sizes().iter().sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each(|_, m| out.extend_from_slice(m.as_slice()));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_mut(|_, m| {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, m| ok &= m.is_finite());
        ok
    }

    /// `w_{h,t}` as a slice-free copy of length `head_dim`.
    pub fn head_out_weight(&self, head: usize, token: usize) -> Vec<f64> {
        let d0 = self.head_dim();
        (0..d0).map(|k| self.out_w.get(head * d0 + k, token)).collect()
    }

    /// The embedding pipeline up to the attention input: optional layer norm of `W_E[token]`.
    pub fn input_feature(&self, token: usize) -> Vec<f64> {
        let e = self.embed.row(token);
        match &self.layer_norm {
            Some(ln) => crate::numerics::layernorm(e, ln.gamma.row(0), ln.beta.row(0)),
            None => e.to_vec(),
        }
    }
}

/// i.i.d. N(0, 0.02²) for embeddings, K/Q/V, output and unembedding weights;
/// zero biases; layer-norm gain 1 and shift 0.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut params = ModelParams::zeros(config);
    params.for_each_mut(|name, m| match name {
        "ln_gamma" => m.fill(1.0),
        "ln_beta" | "out_b" => {}
        _ => m.as_mut_slice().iter_mut().for_each(|x| *x = normal.sample(rng)),
    });
    Ok(params)
}

/// Logits `z_{t,H}` for heads in `subset`: the sum of their cached
/// contributions plus the output bias. Heads outside the subset contribute
/// exactly zero.
pub fn logits_from_heads(
    bias: &[f64],
    contributions: &[[f64; VOCAB_SIZE]],
    subset: impl IntoIterator<Item = usize>,
) -> [f64; VOCAB_SIZE] {
    let mut z = [0.0; VOCAB_SIZE];
    z.copy_from_slice(&bias[..VOCAB_SIZE]);
    for h in subset {
        for t in 0..VOCAB_SIZE {
            z[t] += contributions[h][t];
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::new(32, 16);
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.heads(), 16);
        assert_eq!(a.head_dim(), 2);
        assert_eq!(a.out_w.shape(), (32, 8));
        assert!(a.out_b.as_slice().iter().all(|&b| b == 0.0));
        let ln = a.layer_norm.as_ref().unwrap();
        assert!(ln.gamma.as_slice().iter().all(|&g| g == 1.0));
        assert!(ln.beta.as_slice().iter().all(|&g| g == 0.0));
        let std = (a.embed.as_slice().iter().map(|x| x * x).sum::<f64>() / 256.0).sqrt();
        assert!((std - INIT_STD).abs() < 0.005, "{std}");
    }

    #[test]
    fn minimal_shape_is_legal() {
        let cfg = ModelConfig::new(1, 1).with_layer_norm(false);
        cfg.validate().unwrap();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.head_dim(), 1);
        assert!(p.layer_norm.is_none());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::new(4, 2);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4, 2);
        cfg.vocab_size = 9;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::new(0, 1).validate().is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut cfg = ModelConfig::new(4, 2);
        cfg.skip_to_output = true;
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        q.assign_flat(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn logits_from_heads_ablation() {
        let bias = [0.5, -1.0, 0.0, 0.0, 0.0, 2.0, 3.0, 0.0];
        let contrib = vec![[1.0; 8], [2.0; 8]];
        assert_eq!(logits_from_heads(&bias, &contrib, []), bias);
        let all = logits_from_heads(&bias, &contrib, [0, 1]);
        assert_eq!(all[5], 5.0);
        let one = logits_from_heads(&bias, &contrib, [1]);
        assert_eq!(one[6], 5.0);
    }
}
