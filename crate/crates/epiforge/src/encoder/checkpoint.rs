//! Binary weight-file format.
//!
//! Layout: magic `EPIF`, format version (u32 LE), record count (u32 LE),
//! then per record: name length (u32 LE), UTF-8 name, rank (u32 LE), dims
//! (u64 LE each), row-major 64-bit LE floats; finally a JSON trailer with
//! the config, step count and optimizer metadata, running to end of file.
//! Round-trips are bit-exact.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::EncoderParams;
use super::{AdamState, EncoderConfig, EncoderError, EncoderState};

const MAGIC: &[u8; 4] = b"EPIF";
const VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: EncoderConfig,
    step_count: u64,
    adam_t: Option<u64>,
}

pub fn save_weights(state: &EncoderState, path: &Path) -> Result<(), EncoderError> {
    let bytes = encode_checkpoint(state);
    std::fs::write(path, bytes).map_err(|e| EncoderError::CheckpointIo {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_weights(path: &Path) -> Result<EncoderState, EncoderError> {
    let bytes = std::fs::read(path).map_err(|e| EncoderError::CheckpointIo {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_checkpoint(&bytes)
}

/// Serialize a state to the wire format.
pub fn encode_checkpoint(state: &EncoderState) -> Vec<u8> {
    let mut records: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (name, dims, values) in state.params.named_slices() {
        records.push((format!("param.{name}"), dims, values));
    }
    if let Some(adam) = &state.adam {
        for (name, dims, values) in adam.m.named_slices() {
            records.push((format!("adam.m.{name}"), dims, values));
        }
        for (name, dims, values) in adam.v.named_slices() {
            records.push((format!("adam.v.{name}"), dims, values));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, dims, values) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = Trailer {
        config: state.config,
        step_count: state.step_count,
        adam_t: state.adam.as_ref().map(|a| a.t),
    };
    out.extend_from_slice(&serde_json::to_vec(&trailer).expect("trailer serializes"));
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        if self.data.len() - self.pos < n {
            return Err(EncoderError::BadCheckpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.data[self.pos..]
    }
}

/// Decode a checkpoint from raw bytes. Safe on arbitrary (untrusted) input:
/// every length is validated against the remaining buffer before allocation.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderState, EncoderError> {
    let mut cur = Cursor {
        data: bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(EncoderError::BadCheckpoint(
            "magic mismatch: not an encoder checkpoint".into(),
        ));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(EncoderError::BadCheckpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let n_records = cur.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..n_records {
        let name_len = cur.u32()? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(EncoderError::BadCheckpoint(format!(
                "tensor name length {name_len} exceeds limit"
            )));
        }
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| EncoderError::BadCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(EncoderError::BadCheckpoint(format!(
                "tensor {name}: rank {rank} exceeds limit"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = cur.u64()? as usize;
            count = count.checked_mul(d).ok_or_else(|| {
                EncoderError::BadCheckpoint(format!("tensor {name}: dim overflow"))
            })?;
            dims.push(d);
        }
        let raw = cur.take(count.checked_mul(8).ok_or_else(|| {
            EncoderError::BadCheckpoint(format!("tensor {name}: size overflow"))
        })?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (dims, values)).is_some() {
            return Err(EncoderError::BadCheckpoint(format!(
                "duplicate tensor {name}"
            )));
        }
    }

    let trailer: Trailer = serde_json::from_slice(cur.rest())
        .map_err(|e| EncoderError::BadCheckpoint(format!("bad JSON trailer: {e}")))?;
    trailer.config.validate()?;

    let mut params = EncoderParams::zeros(&trailer.config);
    fill_tree(&mut params, &mut tensors, "param.")?;
    let adam = match trailer.adam_t {
        Some(t) => {
            let mut m = EncoderParams::zeros(&trailer.config);
            let mut v = EncoderParams::zeros(&trailer.config);
            fill_tree(&mut m, &mut tensors, "adam.m.")?;
            fill_tree(&mut v, &mut tensors, "adam.v.")?;
            Some(AdamState { t, m, v })
        }
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(EncoderError::BadCheckpoint(format!(
            "unexpected tensor {extra}"
        )));
    }
    Ok(EncoderState {
        config: trailer.config,
        params,
        adam,
        step_count: trailer.step_count,
    })
}

/// Move tensors with the given prefix into a parameter tree, verifying names
/// and shapes against what the config implies.
fn fill_tree(
    tree: &mut EncoderParams,
    tensors: &mut HashMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
) -> Result<(), EncoderError> {
    let expected: Vec<(String, Vec<usize>)> = tree
        .named_slices()
        .iter()
        .map(|(n, d, _)| (n.clone(), d.clone()))
        .collect();
    for ((name, dims), (slot_name, slot)) in expected.iter().zip(tree.named_slices_mut()) {
        debug_assert_eq!(*name, slot_name);
        let key = format!("{prefix}{name}");
        let (found_dims, values) = tensors.remove(&key).ok_or_else(|| {
            EncoderError::BadCheckpoint(format!("missing tensor {key}"))
        })?;
        if found_dims != *dims {
            return Err(EncoderError::TensorShapeMismatch {
                name: key,
                expected: dims.clone(),
                found: found_dims,
            });
        }
        slot.copy_from_slice(&values);
    }
    Ok(())
}
