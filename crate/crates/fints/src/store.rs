//! Durable persistence of steering dictionaries: the `FNTS` binary format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    4 bytes  "FNTS"
//! version  u32      1
//! d_model  u32
//! key_dim  u32
//! layer    u32
//! n_entries u32
//! model_fingerprint 16 bytes
//! user_id  u32 length + UTF-8 bytes
//! entries  n_entries x { u32 pair_id, i64 source_ts,
//!                        key_dim f32, 3 x d_model f32 (attn, mlp, whole) }
//! ```
//!
//! Writes go through a temp file in the target directory and are renamed
//! into place, so readers never observe a partial file. Serialization is a
//! pure function of the dict: saving twice yields identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::encode::KeyVector;
use crate::error::{FintsError, Result};
use crate::prep::{SteeringDict, SteeringEntry};

const MAGIC: [u8; 4] = *b"FNTS";
const VERSION: u32 = 1;

fn push_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a dict to its canonical byte form.
pub fn encode_dict(dict: &SteeringDict) -> Result<Vec<u8>> {
    let n_entries = u32::try_from(dict.entries.len())
        .map_err(|_| FintsError::HeaderOverflow("entry count exceeds u32".into()))?;
    let user_len = u32::try_from(dict.user_id.len())
        .map_err(|_| FintsError::HeaderOverflow("user_id length exceeds u32".into()))?;
    for field in [dict.d_model, dict.key_dim, dict.layer] {
        if u32::try_from(field).is_err() {
            return Err(FintsError::HeaderOverflow(
                "dimension field exceeds u32".into(),
            ));
        }
    }

    let entry_bytes = 4 + 8 + 4 * (dict.key_dim + 3 * dict.d_model);
    let mut buf =
        Vec::with_capacity(40 + dict.user_id.len() + dict.entries.len() * entry_bytes);
    buf.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        dict.d_model as u32,
        dict.key_dim as u32,
        dict.layer as u32,
        n_entries,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&dict.model_fingerprint);
    buf.extend_from_slice(&user_len.to_le_bytes());
    buf.extend_from_slice(dict.user_id.as_bytes());

    for e in &dict.entries {
        debug_assert_eq!(e.key.dim(), dict.key_dim);
        debug_assert_eq!(e.delta_attn.len(), dict.d_model);
        buf.extend_from_slice(&e.pair_id.to_le_bytes());
        buf.extend_from_slice(&e.source_ts.to_le_bytes());
        push_f32s(&mut buf, &e.key.values);
        push_f32s(&mut buf, &e.delta_attn);
        push_f32s(&mut buf, &e.delta_mlp);
        push_f32s(&mut buf, &e.delta_whole);
    }
    Ok(buf)
}

/// Writes a dict atomically: temp file in the same directory, then rename.
pub fn save_dict(dict: &SteeringDict, path: &Path) -> Result<()> {
    let bytes = encode_dict(dict)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(&bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| FintsError::Io(e.error))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, ctx: Option<(usize, usize)>) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(match ctx {
                Some((entry, total)) => FintsError::Truncated { entry, total },
                None => FintsError::TruncatedHeader,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, ctx: Option<(usize, usize)>) -> Result<u32> {
        let b = self.take(4, ctx)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i64(&mut self, ctx: Option<(usize, usize)>) -> Result<i64> {
        let b = self.take(8, ctx)?;
        Ok(i64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, ctx: Option<(usize, usize)>) -> Result<Vec<f32>> {
        let b = self.take(n * 4, ctx)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parses canonical dict bytes, restoring float bit patterns exactly.
pub fn decode_dict(bytes: &[u8]) -> Result<SteeringDict> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, None)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FintsError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = cur.u32(None)?;
    if version != VERSION {
        return Err(FintsError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let d_model = cur.u32(None)? as usize;
    let key_dim = cur.u32(None)? as usize;
    let layer = cur.u32(None)? as usize;
    let n_entries = cur.u32(None)? as usize;
    let mut fingerprint = [0u8; 16];
    fingerprint.copy_from_slice(cur.take(16, None)?);
    let user_len = cur.u32(None)? as usize;
    let user_id = String::from_utf8(cur.take(user_len, None)?.to_vec())
        .map_err(|_| FintsError::TruncatedHeader)?;

    let mut entries = Vec::with_capacity(n_entries);
    for idx in 0..n_entries {
        let ctx = Some((idx, n_entries));
        entries.push(SteeringEntry {
            pair_id: cur.u32(ctx)?,
            source_ts: cur.i64(ctx)?,
            key: KeyVector {
                values: cur.f32s(key_dim, ctx)?,
            },
            delta_attn: cur.f32s(d_model, ctx)?,
            delta_mlp: cur.f32s(d_model, ctx)?,
            delta_whole: cur.f32s(d_model, ctx)?,
        });
    }
    Ok(SteeringDict {
        user_id,
        model_fingerprint: fingerprint,
        layer,
        d_model,
        key_dim,
        entries,
    })
}

/// Loads a dict file. A fingerprint mismatch against the serving model is
/// not detectable here (no model in scope); call
/// [`SteeringDict::fingerprint_matches`] and surface the warning yourself.
pub fn load_dict(path: &Path) -> Result<SteeringDict> {
    let bytes = fs::read(path)?;
    decode_dict(&bytes)
}
