//! Teacher-forcing forward pass, steered forward pass, and greedy decoding.
//!
//! Dot products and reductions accumulate in f64 so that results stay stable
//! against the naive reference implementations used by the test oracles.

use super::{
    ActivationTap, EOT_BYTE, HookConfig, InjectionPayload, Logits, Model,
};
use crate::error::{FintsError, Result};

const RMS_EPS: f64 = 1e-5;

/// `y = W x` for a row-major `d_out x d_in` matrix.
fn matvec(w: &[f32], x: &[f32], d_out: usize, d_in: usize, y: &mut [f32]) {
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(x.len(), d_in);
    for o in 0..d_out {
        let row = &w[o * d_in..(o + 1) * d_in];
        let mut acc = 0.0f64;
        for i in 0..d_in {
            acc += f64::from(row[i]) * f64::from(x[i]);
        }
        y[o] = acc as f32;
    }
}

fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let mut sum_sq = 0.0f64;
    for &v in x {
        sum_sq += f64::from(v) * f64::from(v);
    }
    let inv = 1.0 / (sum_sq / x.len() as f64 + RMS_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (f64::from(x[i]) * inv) as f32 * gain[i];
    }
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// In-place softmax with max subtraction. Rows of attention weights sum to 1.
pub(crate) fn softmax(scores: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in scores.iter_mut() {
        *v = (*v - max).exp();
        sum += f64::from(*v);
    }
    for v in scores.iter_mut() {
        *v = (f64::from(*v) / sum) as f32;
    }
}

/// Everything one pass can produce; callers pick what they asked for.
pub(crate) struct ForwardOutput {
    pub logits: Logits,
    pub tap: Option<ActivationTap>,
    /// Residual stream at block exit for every position of `capture_layer`,
    /// flattened `seq_len x d_model`.
    pub layer_states: Option<Vec<f32>>,
}

impl Model {
    pub(crate) fn forward_opts(
        &self,
        tokens: &[u8],
        inject: Option<&InjectionPayload>,
        tap_layer: Option<usize>,
        capture_layer: Option<usize>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(FintsError::EmptySequence);
        }
        if t_len > cfg.max_seq_len {
            return Err(FintsError::SequenceTooLong {
                len: t_len,
                max: cfg.max_seq_len,
            });
        }
        if let Some(p) = inject {
            p.validate(cfg)?;
        }
        for layer in [tap_layer, capture_layer].into_iter().flatten() {
            if layer >= cfg.n_layers {
                return Err(FintsError::InvalidLayer {
                    layer,
                    n_layers: cfg.n_layers,
                });
            }
        }

        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();

        // Residual stream, seq_len x d_model.
        let mut x = vec![0.0f32; t_len * d];
        for (pos, &tok) in tokens.iter().enumerate() {
            x[pos * d..(pos + 1) * d].copy_from_slice(self.embedding(tok));
        }

        let mut normed = vec![0.0f32; t_len * d];
        let mut q = vec![0.0f32; t_len * d];
        let mut k = vec![0.0f32; t_len * d];
        let mut v = vec![0.0f32; t_len * d];
        let mut head_mix = vec![0.0f32; t_len * d];
        let mut sub_out = vec![0.0f32; t_len * d];
        let mut hidden = vec![0.0f32; cfg.d_ff];
        let mut scores = vec![0.0f32; t_len];

        let mut tap_attn = None;
        let mut tap_mlp = None;
        let mut tap_whole = None;
        let mut layer_states = None;

        for (layer_idx, layer) in self.weights.layers.iter().enumerate() {
            let injected_here = inject.filter(|p| p.layer == layer_idx);

            // Attention sub-layer.
            for pos in 0..t_len {
                rms_norm(
                    &x[pos * d..(pos + 1) * d],
                    &layer.attn_norm,
                    &mut normed[pos * d..(pos + 1) * d],
                );
            }
            for pos in 0..t_len {
                let n = &normed[pos * d..(pos + 1) * d];
                matvec(&layer.wq, n, d, d, &mut q[pos * d..(pos + 1) * d]);
                matvec(&layer.wk, n, d, d, &mut k[pos * d..(pos + 1) * d]);
                matvec(&layer.wv, n, d, d, &mut v[pos * d..(pos + 1) * d]);
            }
            for h in 0..n_heads {
                let off = h * head_dim;
                for pos in 0..t_len {
                    let q_h = &q[pos * d + off..pos * d + off + head_dim];
                    let row = &mut scores[..=pos];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k_h = &k[j * d + off..j * d + off + head_dim];
                        let mut acc = 0.0f64;
                        for i in 0..head_dim {
                            acc += f64::from(q_h[i]) * f64::from(k_h[i]);
                        }
                        *s = (acc * scale) as f32;
                    }
                    softmax(row);
                    let out = &mut head_mix[pos * d + off..pos * d + off + head_dim];
                    for i in 0..head_dim {
                        let mut acc = 0.0f64;
                        for (j, &p) in row.iter().enumerate() {
                            acc += f64::from(p) * f64::from(v[j * d + off + i]);
                        }
                        out[i] = acc as f32;
                    }
                }
            }
            for pos in 0..t_len {
                matvec(
                    &layer.wo,
                    &head_mix[pos * d..(pos + 1) * d],
                    d,
                    d,
                    &mut sub_out[pos * d..(pos + 1) * d],
                );
            }
            // Pulse: steer the attention output at every position, then let
            // the residual addition propagate it.
            if let Some(p) = injected_here {
                if let Some(s) = p.s_attn.as_ref().filter(|_| p.alpha != 0.0) {
                    for pos in 0..t_len {
                        for i in 0..d {
                            sub_out[pos * d + i] += p.alpha * s[i];
                        }
                    }
                }
            }
            if tap_layer == Some(layer_idx) {
                tap_attn = Some(sub_out[(t_len - 1) * d..t_len * d].to_vec());
            }
            for i in 0..t_len * d {
                x[i] += sub_out[i];
            }

            // MLP sub-layer.
            for pos in 0..t_len {
                rms_norm(
                    &x[pos * d..(pos + 1) * d],
                    &layer.mlp_norm,
                    &mut normed[pos * d..(pos + 1) * d],
                );
                matvec(
                    &layer.w_up,
                    &normed[pos * d..(pos + 1) * d],
                    cfg.d_ff,
                    d,
                    &mut hidden,
                );
                for h in hidden.iter_mut() {
                    *h = silu(*h);
                }
                matvec(
                    &layer.w_down,
                    &hidden,
                    d,
                    cfg.d_ff,
                    &mut sub_out[pos * d..(pos + 1) * d],
                );
            }
            // Re-Pulse: steer the MLP output the same way.
            if let Some(p) = injected_here {
                if let Some(s) = p.s_mlp.as_ref().filter(|_| p.beta != 0.0) {
                    for pos in 0..t_len {
                        for i in 0..d {
                            sub_out[pos * d + i] += p.beta * s[i];
                        }
                    }
                }
            }
            if tap_layer == Some(layer_idx) {
                tap_mlp = Some(sub_out[(t_len - 1) * d..t_len * d].to_vec());
            }
            for i in 0..t_len * d {
                x[i] += sub_out[i];
            }

            // Whole-block steering lands on the residual stream at block exit.
            if let Some(p) = injected_here {
                if let Some(s) = p.s_whole.as_ref().filter(|_| p.gamma != 0.0) {
                    for pos in 0..t_len {
                        for i in 0..d {
                            x[pos * d + i] += p.gamma * s[i];
                        }
                    }
                }
            }
            if tap_layer == Some(layer_idx) {
                tap_whole = Some(x[(t_len - 1) * d..t_len * d].to_vec());
            }
            if capture_layer == Some(layer_idx) {
                layer_states = Some(x.clone());
            }
        }

        // Final norm and unembedding.
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0f32; t_len * vocab];
        for pos in 0..t_len {
            rms_norm(
                &x[pos * d..(pos + 1) * d],
                &self.weights.final_norm,
                &mut normed[pos * d..(pos + 1) * d],
            );
            matvec(
                &self.weights.unembed,
                &normed[pos * d..(pos + 1) * d],
                vocab,
                d,
                &mut logits[pos * vocab..(pos + 1) * vocab],
            );
        }

        let tap = tap_layer.map(|_| ActivationTap {
            attn_out: tap_attn.unwrap(),
            mlp_out: tap_mlp.unwrap(),
            whole_out: tap_whole.unwrap(),
        });
        Ok(ForwardOutput {
            logits: Logits {
                data: logits,
                seq_len: t_len,
                vocab_size: vocab,
            },
            tap,
            layer_states,
        })
    }

    /// Teacher-forcing pass: logits for every position plus the sub-layer
    /// activations at `hook.layer` for the last position.
    pub fn forward_full(&self, tokens: &[u8], hook: HookConfig) -> Result<(Logits, ActivationTap)> {
        let out = self.forward_opts(tokens, None, Some(hook.layer), None)?;
        Ok((out.logits, out.tap.unwrap()))
    }

    /// Steered pass. With all scales zero the logits are bit-identical to
    /// [`Model::forward_full`]: zero-scale additions are skipped outright.
    pub fn forward_injected(&self, tokens: &[u8], payload: &InjectionPayload) -> Result<Logits> {
        Ok(self.forward_opts(tokens, Some(payload), None, None)?.logits)
    }

    /// Steered pass that also reads activations back at `tap_layer`, which
    /// may differ from the injection layer.
    pub fn forward_injected_tapped(
        &self,
        tokens: &[u8],
        payload: &InjectionPayload,
        tap_layer: usize,
    ) -> Result<(Logits, ActivationTap)> {
        let out = self.forward_opts(tokens, Some(payload), Some(tap_layer), None)?;
        Ok((out.logits, out.tap.unwrap()))
    }

    /// Residual stream at block exit of `layer` for every position,
    /// flattened `seq_len x d_model`. Used by the model-based encoder.
    pub fn layer_states(&self, tokens: &[u8], layer: usize) -> Result<Vec<f32>> {
        let out = self.forward_opts(tokens, None, None, Some(layer))?;
        Ok(out.layer_states.unwrap())
    }

    /// Greedy decoding: argmax next byte, ties to the lowest id, stop at
    /// `max_new` tokens, the byte-0 sentinel, or a full context window.
    /// Returns the continuation only. When a payload is present it steers
    /// every decode step.
    pub fn generate(
        &self,
        prompt: &[u8],
        payload: Option<&InjectionPayload>,
        max_new: usize,
    ) -> Result<Vec<u8>> {
        if prompt.is_empty() {
            return Err(FintsError::EmptySequence);
        }
        if prompt.len() > self.config.max_seq_len {
            return Err(FintsError::SequenceTooLong {
                len: prompt.len(),
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let logits = match payload {
                Some(p) => self.forward_injected(&tokens, p)?,
                None => self.forward_opts(&tokens, None, None, None)?.logits,
            };
            let next = Logits::argmax(logits.last());
            if next == EOT_BYTE {
                break;
            }
            tokens.push(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Mean per-token log-probability of `continuation` given `prompt`,
    /// under an optionally steered pass. Used by the tuning guard.
    pub fn mean_logprob(
        &self,
        prompt: &[u8],
        continuation: &[u8],
        payload: Option<&InjectionPayload>,
    ) -> Result<f64> {
        if prompt.is_empty() || continuation.is_empty() {
            return Err(FintsError::EmptySequence);
        }
        let mut tokens = Vec::with_capacity(prompt.len() + continuation.len());
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(continuation);
        let logits = match payload {
            Some(p) => self.forward_injected(&tokens, p)?,
            None => self.forward_opts(&tokens, None, None, None)?.logits,
        };
        let mut total = 0.0f64;
        for (i, &tok) in continuation.iter().enumerate() {
            let row = logits.row(prompt.len() - 1 + i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &v in row {
                sum += f64::from(v - max).exp();
            }
            total += f64::from(row[tok as usize] - max) - sum.ln();
        }
        Ok(total / continuation.len() as f64)
    }
}
