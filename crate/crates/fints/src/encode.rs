//! Sequence encoding for dictionary keys and query matching, plus the
//! cosine-distance primitive used by top-K selection.
//!
//! Two realizations of the encoder are provided. The default is a hashed
//! character 3-gram frequency vector: model-free, cheap at preparation time,
//! and stable across model configs. The alternative pools residual-stream
//! states from the model at a chosen layer.

use serde::{Deserialize, Serialize};

use crate::error::{FintsError, Result};
use crate::model::Model;

/// Default dimensionality of hashed 3-gram keys.
pub const DEFAULT_KEY_DIM: usize = 256;

/// A dictionary key or query embedding. Unit L2 norm, or the zero vector for
/// empty text.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyVector {
    pub values: Vec<f32>,
}

impl KeyVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Which encoder builds keys and query embeddings. Keys and queries must use
/// the same encoder, so dictionaries record `key_dim` and inference re-checks
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderSpec {
    /// Hashed lowercase character 3-gram frequencies.
    Hashed { key_dim: usize },
    /// Mean-pooled residual-stream states at `layer`, key_dim = d_model.
    ModelLayer { layer: usize },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::Hashed {
            key_dim: DEFAULT_KEY_DIM,
        }
    }
}

impl EncoderSpec {
    pub fn encode(&self, text: &str, model: &Model) -> Result<KeyVector> {
        match *self {
            Self::Hashed { key_dim } => encode_text(text, key_dim),
            Self::ModelLayer { layer } => encode_with_model(text, model, layer),
        }
    }

    pub fn key_dim(&self, model: &Model) -> usize {
        match *self {
            Self::Hashed { key_dim } => key_dim,
            Self::ModelLayer { .. } => model.config().d_model,
        }
    }
}

/// FNV-1a, 64-bit: offset basis 0xcbf29ce484222325, prime 0x100000001b3.
/// Fixed here so that key buckets are reproducible everywhere.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed character 3-gram encoder.
///
/// Lowercases the text, slides a 3-character window over it, increments
/// bucket `fnv1a64(gram) % key_dim` per occurrence, then L2-normalizes.
/// Texts shorter than 3 characters contribute a single whole-text gram;
/// empty text yields the zero vector.
pub fn encode_text(text: &str, key_dim: usize) -> Result<KeyVector> {
    if key_dim < 16 {
        return Err(FintsError::KeyDimTooSmall(key_dim));
    }
    let mut values = vec![0.0f32; key_dim];
    let lowered = text.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    if !chars.is_empty() {
        let mut bump = |gram: &str| {
            let bucket = (fnv1a64(gram.as_bytes()) % key_dim as u64) as usize;
            values[bucket] += 1.0;
        };
        if chars.len() < 3 {
            bump(&lowered);
        } else {
            let mut gram = String::with_capacity(12);
            for window in chars.windows(3) {
                gram.clear();
                gram.extend(window);
                bump(&gram);
            }
        }
        normalize(&mut values);
    }
    Ok(KeyVector { values })
}

/// Model-based encoder: mean of the residual-stream states at `layer` over
/// all token positions, L2-normalized. Empty text yields the zero vector.
pub fn encode_with_model(text: &str, model: &Model, layer: usize) -> Result<KeyVector> {
    let d = model.config().d_model;
    let tokens = crate::model::tokenize(text);
    if tokens.is_empty() {
        return Ok(KeyVector {
            values: vec![0.0; d],
        });
    }
    let states = model.layer_states(&tokens, layer)?;
    let t_len = tokens.len();
    let mut values = vec![0.0f32; d];
    for (i, value) in values.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for pos in 0..t_len {
            acc += f64::from(states[pos * d + i]);
        }
        *value = (acc / t_len as f64) as f32;
    }
    normalize(&mut values);
    Ok(KeyVector { values })
}

fn normalize(values: &mut [f32]) {
    let norm = values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
}

/// `1 - cos(a, b)`, in `[0, 2]`. A zero-norm side is treated as
/// uninformative and scores distance 1.
pub fn cosine_distance(a: &KeyVector, b: &KeyVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FintsError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.values.len() {
        let (x, y) = (f64::from(a.values[i]), f64::from(b.values[i]));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn encoder_is_deterministic_and_unit_norm() {
        let a = encode_text("Some query text", 256).unwrap();
        let b = encode_text("Some query text", 256).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let k = encode_text("", 64).unwrap();
        assert!(k.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_text_uses_whole_text_gram() {
        let k = encode_text("ab", 64).unwrap();
        let expected_bucket = (fnv1a64(b"ab") % 64) as usize;
        for (i, &v) in k.values.iter().enumerate() {
            if i == expected_bucket {
                assert!((v - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn trigram_buckets_match_hand_enumeration() {
        // Independent oracle: enumerate the 3-grams of "abcab" by hand and
        // hash them with a separately written FNV-1a.
        fn fnv_oracle(s: &str) -> u64 {
            let mut h: u64 = 14695981039346656037;
            for &b in s.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            h
        }
        let key_dim = 256usize;
        let k = encode_text("abcab", key_dim).unwrap();
        let mut expected = vec![0.0f64; key_dim];
        for gram in ["abc", "bca", "cab"] {
            expected[(fnv_oracle(gram) % key_dim as u64) as usize] += 1.0;
        }
        let norm = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, &v) in k.values.iter().enumerate() {
            let want = expected[i] / norm;
            assert!(
                (f64::from(v) - want).abs() < 1e-6,
                "bucket {i}: got {v}, want {want}"
            );
        }
        // Exactly three non-zero buckets with pre-normalization count 1 each.
        assert_eq!(k.values.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn key_dim_floor_enforced() {
        assert!(matches!(
            encode_text("x", 8),
            Err(FintsError::KeyDimTooSmall(8))
        ));
    }

    #[test]
    fn cosine_distance_fixtures() {
        let v = KeyVector {
            values: vec![0.3, -0.2, 0.9],
        };
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-9);

        let a = KeyVector {
            values: vec![1.0, 0.0],
        };
        let b = KeyVector {
            values: vec![0.0, 1.0],
        };
        assert!((cosine_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);

        let c = KeyVector {
            values: vec![-1.0, 0.0],
        };
        assert!((cosine_distance(&a, &c).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_scores_distance_one() {
        let z = KeyVector {
            values: vec![0.0, 0.0],
        };
        let a = KeyVector {
            values: vec![1.0, 0.0],
        };
        assert_eq!(cosine_distance(&z, &a).unwrap(), 1.0);
        assert_eq!(cosine_distance(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = KeyVector {
            values: vec![1.0, 0.0],
        };
        let b = KeyVector {
            values: vec![1.0, 0.0, 0.0],
        };
        assert!(cosine_distance(&a, &b).is_err());
    }

    #[test]
    fn model_encoder_single_token_equals_normalized_state() {
        let model = Model::new(ModelConfig::small(17)).unwrap();
        let layer = 1;
        let k = encode_with_model("Q", &model, layer).unwrap();
        assert!((k.norm() - 1.0).abs() < 1e-6);

        let states = model.layer_states(&crate::model::tokenize("Q"), layer).unwrap();
        let norm = states.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        for (i, &v) in k.values.iter().enumerate() {
            assert!((f64::from(v) - f64::from(states[i]) / norm).abs() < 1e-6);
        }

        let a = encode_with_model("same text", &model, layer).unwrap();
        let b = encode_with_model("same text", &model, layer).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn cosine_distance_is_symmetric(xs in proptest::collection::vec(-5.0f32..5.0, 6), ys in proptest::collection::vec(-5.0f32..5.0, 6)) {
            let a = KeyVector { values: xs };
            let b = KeyVector { values: ys };
            prop_assert_eq!(
                cosine_distance(&a, &b).unwrap().to_bits(),
                cosine_distance(&b, &a).unwrap().to_bits()
            );
        }

        #[test]
        fn cosine_distance_is_scale_invariant(xs in proptest::collection::vec(-5.0f32..5.0, 6), ys in proptest::collection::vec(-5.0f32..5.0, 6), exp in -6i32..7) {
            // Power-of-two scales keep the f32 components exact, so this
            // checks the formula's invariance rather than storage rounding.
            let c = 2.0f32.powi(exp);
            let a = KeyVector { values: xs.clone() };
            let scaled = KeyVector { values: xs.iter().map(|v| v * c).collect() };
            let b = KeyVector { values: ys };
            let d1 = cosine_distance(&a, &b).unwrap();
            let d2 = cosine_distance(&scaled, &b).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9);
        }

        #[test]
        fn nonempty_keys_are_unit_norm(s in "[a-z ]{1,40}") {
            let k = encode_text(&s, 64).unwrap();
            prop_assert!((k.norm() - 1.0).abs() < 1e-6);
        }
    }
}
