//! Minimal deterministic decoder-only transformer with activation taps and
//! injection sites at every layer's attention and MLP sub-layers.
//!
//! Architecture: pre-norm blocks with RMS normalization, SiLU MLP, no
//! positional term, byte-level vocabulary (256). Weights are either derived
//! from `(config, seed)` or loaded from a `TLMW` file; they never change
//! after construction, so a [`Model`] can be shared freely across threads.

mod forward;
mod io;

pub use io::{load_weights, save_weights};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FintsError, Result};

/// Vocabulary size of the byte tokenizer. Fixed: one token per byte.
pub const VOCAB_SIZE: usize = 256;

/// End-of-text sentinel. The byte tokenizer has no reserved specials, so
/// greedy decoding stops when the model emits byte 0.
pub const EOT_BYTE: u8 = 0;

// ---------------------------------------------------------------------------
// Config and weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// A small default suitable for desk-scale experiments.
    pub fn small(seed: u64) -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 512,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(FintsError::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(FintsError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(FintsError::InvalidConfig("d_ff must be >= 1".into()));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(FintsError::InvalidConfig(format!(
                "vocab_size must be {VOCAB_SIZE} (byte tokenizer), got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(FintsError::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// 16-byte digest of `(dimensions, seed)`. Identifies which frozen model
    /// a steering dict was extracted from; a mismatch on load is a warning,
    /// not an error.
    pub fn fingerprint(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        h.update(b"fints-model-v1");
        for v in [
            self.n_layers as u64,
            self.d_model as u64,
            self.n_heads as u64,
            self.d_ff as u64,
            self.vocab_size as u64,
            self.max_seq_len as u64,
            self.seed,
        ] {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        out
    }
}

/// Per-layer parameters. Projection matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>, // d_model
    pub wq: Vec<f32>,        // d_model x d_model
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>, // d_model
    pub w_up: Vec<f32>,     // d_ff x d_model
    pub w_down: Vec<f32>,   // d_model x d_ff
}

/// The full frozen parameter set. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Vec<f32>, // vocab x d_model
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>, // d_model
    pub unembed: Vec<f32>,    // vocab x d_model
}

impl Weights {
    /// All-zero parameters with norm gains set to 1. Starting point for the
    /// hand-constructed probe models in `eval`.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: vec![0.0; d * d],
                wk: vec![0.0; d * d],
                wv: vec![0.0; d * d],
                wo: vec![0.0; d * d],
                mlp_norm: vec![1.0; d],
                w_up: vec![0.0; config.d_ff * d],
                w_down: vec![0.0; d * config.d_ff],
            })
            .collect();
        Ok(Self {
            embed: vec![0.0; config.vocab_size * d],
            layers,
            final_norm: vec![1.0; d],
            unembed: vec![0.0; config.vocab_size * d],
        })
    }

    /// FNV-1a over the little-endian bytes of every parameter, in storage
    /// order. Cheap identity check for tests and diagnostics.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |values: &[f32]| {
            for v in values {
                for b in v.to_le_bytes() {
                    hash ^= u64::from(b);
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(&self.embed);
        for layer in &self.layers {
            eat(&layer.attn_norm);
            eat(&layer.wq);
            eat(&layer.wk);
            eat(&layer.wv);
            eat(&layer.wo);
            eat(&layer.mlp_norm);
            eat(&layer.w_up);
            eat(&layer.w_down);
        }
        eat(&self.final_norm);
        eat(&self.unembed);
        hash
    }
}

/// Deterministic pseudo-random weights for a config.
///
/// Scheme: a single `ChaCha8` stream seeded with `config.seed`; every matrix
/// entry is drawn uniformly from `[-1, 1)` and scaled by `1/sqrt(d_model)`,
/// row-major, in the order: embedding, then per layer `wq, wk, wv, wo, w_up,
/// w_down`, then unembedding. Normalization gains are constant 1 and are not
/// drawn. Identical `(config, seed)` therefore yields bit-identical weights.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (config.d_model as f32).sqrt();
    let mut draw = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * scale)
            .collect()
    };

    let d = config.d_model;
    let embed = draw(config.vocab_size * d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq: draw(d * d),
            wk: draw(d * d),
            wv: draw(d * d),
            wo: draw(d * d),
            mlp_norm: vec![1.0; d],
            w_up: draw(config.d_ff * d),
            w_down: draw(d * config.d_ff),
        });
    }
    let final_norm = vec![1.0; d];
    let unembed = draw(config.vocab_size * d);
    Ok(Weights {
        embed,
        layers,
        final_norm,
        unembed,
    })
}

// ---------------------------------------------------------------------------
// Hooks and injection
// ---------------------------------------------------------------------------

/// Which sub-layer signal a hook or injection addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Attn,
    Mlp,
    Whole,
    AttnMlp,
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attn" => Ok(Self::Attn),
            "mlp" => Ok(Self::Mlp),
            "whole" => Ok(Self::Whole),
            "attn+mlp" | "attn_mlp" => Ok(Self::AttnMlp),
            other => Err(format!(
                "unknown granularity '{other}' (expected attn|mlp|whole|attn+mlp)"
            )),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Attn => "attn",
            Self::Mlp => "mlp",
            Self::Whole => "whole",
            Self::AttnMlp => "attn+mlp",
        };
        f.write_str(s)
    }
}

/// Where to read activations during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookConfig {
    pub layer: usize,
    pub granularity: Granularity,
}

impl HookConfig {
    pub fn new(layer: usize, granularity: Granularity) -> Self {
        Self { layer, granularity }
    }
}

/// Sub-layer activations captured at one layer for the last position of the
/// sequence. `attn_out` and `mlp_out` are the sub-layer outputs before their
/// residual additions; `whole_out` is the residual stream at block exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap {
    pub attn_out: Vec<f32>,
    pub mlp_out: Vec<f32>,
    pub whole_out: Vec<f32>,
}

/// Steering vectors to add during a forward pass, applied at every sequence
/// position at `layer`: `alpha * s_attn` to the attention sub-layer output,
/// `beta * s_mlp` to the MLP sub-layer output, `gamma * s_whole` to the
/// residual stream at block exit.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPayload {
    pub layer: usize,
    pub s_attn: Option<Vec<f32>>,
    pub s_mlp: Option<Vec<f32>>,
    pub s_whole: Option<Vec<f32>>,
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
}

impl InjectionPayload {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(FintsError::InvalidLayer {
                layer: self.layer,
                n_layers: config.n_layers,
            });
        }
        if self.s_attn.is_none() && self.s_mlp.is_none() && self.s_whole.is_none() {
            return Err(FintsError::InvalidPayload(
                "at least one of s_attn/s_mlp/s_whole must be present".into(),
            ));
        }
        for scale in [self.alpha, self.beta, self.gamma] {
            if !scale.is_finite() || scale < 0.0 {
                return Err(FintsError::InvalidPayload(format!(
                    "scales must be finite and >= 0, got {scale}"
                )));
            }
        }
        for v in [&self.s_attn, &self.s_mlp, &self.s_whole].into_iter().flatten() {
            if v.len() != config.d_model {
                return Err(FintsError::DimensionMismatch {
                    expected: config.d_model,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Byte-level tokenizer: one token per byte of the UTF-8 encoding.
pub fn tokenize(text: &str) -> Vec<u8> {
    text.as_bytes().to_vec()
}

/// Lossy inverse of [`tokenize`]; invalid UTF-8 becomes replacement chars.
pub fn detokenize(tokens: &[u8]) -> String {
    String::from_utf8_lossy(tokens).into_owned()
}

// ---------------------------------------------------------------------------
// Logits
// ---------------------------------------------------------------------------

/// Next-token logits for every position of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub(crate) data: Vec<f32>,
    pub seq_len: usize,
    pub vocab_size: usize,
}

impl Logits {
    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn last(&self) -> &[f32] {
        self.row(self.seq_len - 1)
    }

    /// Greedy pick over a logit row; ties go to the lowest token id.
    pub fn argmax(row: &[f32]) -> u8 {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best as u8
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A frozen transformer: config plus immutable weights. All operations are
/// pure functions of the weights and their inputs; scratch state is
/// call-private, so `&Model` is safe to share across threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    /// Builds the model with seed-derived weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = init_weights(&config)?;
        Ok(Self { config, weights })
    }

    /// Wraps externally constructed weights (probe models, loaded files).
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if weights.embed.len() != config.vocab_size * d
            || weights.unembed.len() != config.vocab_size * d
            || weights.layers.len() != config.n_layers
        {
            return Err(FintsError::InvalidConfig(
                "weight shapes do not match config".into(),
            ));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn fingerprint(&self) -> [u8; 16] {
        self.config.fingerprint()
    }

    /// Embedding row of a token.
    pub fn embedding(&self, token: u8) -> &[f32] {
        let d = self.config.d_model;
        &self.weights.embed[token as usize * d..(token as usize + 1) * d]
    }

    /// Unembedding row of a token.
    pub fn unembed_row(&self, token: u8) -> &[f32] {
        let d = self.config.d_model;
        &self.weights.unembed[token as usize * d..(token as usize + 1) * d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_is_byte_identity() {
        assert_eq!(tokenize(""), Vec::<u8>::new());
        assert_eq!(tokenize("A"), vec![65]);
        assert_eq!(tokenize("Hi"), vec![72, 105]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = ModelConfig::small(7);
        let a = init_weights(&c).unwrap();
        let b = init_weights(&c).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);

        let mut c8 = c.clone();
        c8.seed = 8;
        let other = init_weights(&c8).unwrap();
        // Compare the generated buffers, not just the digest.
        assert_ne!(a.embed, other.embed);
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn init_rejects_bad_configs() {
        let mut c = ModelConfig::small(0);
        c.d_model = 12;
        c.n_heads = 5;
        assert!(matches!(init_weights(&c), Err(FintsError::InvalidConfig(_))));

        let mut c = ModelConfig::small(0);
        c.vocab_size = 100;
        assert!(init_weights(&c).is_err());

        let mut c = ModelConfig::small(0);
        c.n_layers = 0;
        assert!(init_weights(&c).is_err());

        let mut c = ModelConfig::small(0);
        c.max_seq_len = 1;
        assert!(init_weights(&c).is_err());
    }

    #[test]
    fn init_scale_matches_documented_scheme() {
        let c = ModelConfig::small(3);
        let w = init_weights(&c).unwrap();
        let bound = 1.0 / (c.d_model as f32).sqrt();
        assert!(w.embed.iter().all(|v| v.abs() <= bound));
        assert!(w.layers[0].wq.iter().all(|v| v.abs() <= bound));
        assert!(w.layers[0].attn_norm.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fingerprint_tracks_config_and_seed() {
        let a = ModelConfig::small(1).fingerprint();
        let b = ModelConfig::small(1).fingerprint();
        let c = ModelConfig::small(2).fingerprint();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn payload_validation() {
        let c = ModelConfig::small(0);
        let empty = InjectionPayload {
            layer: 0,
            s_attn: None,
            s_mlp: None,
            s_whole: None,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        assert!(empty.validate(&c).is_err());

        let bad_layer = InjectionPayload {
            layer: c.n_layers,
            s_whole: Some(vec![0.0; c.d_model]),
            ..empty.clone()
        };
        assert!(matches!(
            bad_layer.validate(&c),
            Err(FintsError::InvalidLayer { .. })
        ));

        let bad_dim = InjectionPayload {
            s_whole: Some(vec![0.0; c.d_model + 1]),
            ..empty.clone()
        };
        assert!(matches!(
            bad_dim.validate(&c),
            Err(FintsError::DimensionMismatch { .. })
        ));

        let neg_scale = InjectionPayload {
            s_whole: Some(vec![0.0; c.d_model]),
            gamma: -1.0,
            ..empty
        };
        assert!(neg_scale.validate(&c).is_err());
    }
}
