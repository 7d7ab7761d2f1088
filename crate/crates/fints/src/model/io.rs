//! Optional flat binary weight file.
//!
//! Layout: magic `TLMW`, u32 version (1), u32 n_layers, u32 d_model,
//! u32 n_heads, u32 d_ff, then every parameter as little-endian f32 in the
//! order: embedding; per layer `attn_norm, wq, wk, wv, wo, mlp_norm, w_up,
//! w_down`; final norm; unembedding. Integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerWeights, Model, ModelConfig, Weights, VOCAB_SIZE};
use crate::error::{FintsError, Result};

const MAGIC: [u8; 4] = *b"TLMW";
const VERSION: u32 = 1;

fn write_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|_| FintsError::Truncated {
        entry: 0,
        total: 0,
    })?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let cfg = model.config();
    let w = model.weights();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    for v in [
        VERSION,
        cfg.n_layers as u32,
        cfg.d_model as u32,
        cfg.n_heads as u32,
        cfg.d_ff as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    write_f32s(&mut out, &w.embed)?;
    for layer in &w.layers {
        write_f32s(&mut out, &layer.attn_norm)?;
        write_f32s(&mut out, &layer.wq)?;
        write_f32s(&mut out, &layer.wk)?;
        write_f32s(&mut out, &layer.wv)?;
        write_f32s(&mut out, &layer.wo)?;
        write_f32s(&mut out, &layer.mlp_norm)?;
        write_f32s(&mut out, &layer.w_up)?;
        write_f32s(&mut out, &layer.w_down)?;
    }
    write_f32s(&mut out, &w.final_norm)?;
    write_f32s(&mut out, &w.unembed)?;
    out.flush()?;
    Ok(())
}

/// Loads a `TLMW` file. The file does not carry `max_seq_len` or a seed, so
/// the caller supplies the context length; the config seed is set to 0.
pub fn load_weights(path: &Path, max_seq_len: usize) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(FintsError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(FintsError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let n_layers = read_u32(&mut r)? as usize;
    let d_model = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let d_ff = read_u32(&mut r)? as usize;
    let config = ModelConfig {
        n_layers,
        d_model,
        n_heads,
        d_ff,
        vocab_size: VOCAB_SIZE,
        max_seq_len,
        seed: 0,
    };
    config.validate()?;

    let embed = read_f32s(&mut r, VOCAB_SIZE * d_model)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(LayerWeights {
            attn_norm: read_f32s(&mut r, d_model)?,
            wq: read_f32s(&mut r, d_model * d_model)?,
            wk: read_f32s(&mut r, d_model * d_model)?,
            wv: read_f32s(&mut r, d_model * d_model)?,
            wo: read_f32s(&mut r, d_model * d_model)?,
            mlp_norm: read_f32s(&mut r, d_model)?,
            w_up: read_f32s(&mut r, d_ff * d_model)?,
            w_down: read_f32s(&mut r, d_model * d_ff)?,
        });
    }
    let final_norm = read_f32s(&mut r, d_model)?;
    let unembed = read_f32s(&mut r, VOCAB_SIZE * d_model)?;
    Model::from_weights(
        config,
        Weights {
            embed,
            layers,
            final_norm,
            unembed,
        },
    )
}
