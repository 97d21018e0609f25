//! Binary checkpoint: magic `DRKF1`, little-endian `u32` header length, a
//! JSON header, then little-endian `f64` payload. The payload holds every
//! parameter in store order, followed by the first and second optimizer
//! moments in the same layout. Offsets in the header are byte offsets from
//! the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DrkfModel, ModelConfig};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"DRKF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment_offset: u64,
    pub second_moment_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub optimizer: OptimizerEntry,
    pub payload_bytes: u64,
}

pub fn encode_checkpoint(model: &DrkfModel, optim: &AdamW) -> Result<Vec<u8>> {
    let store = &model.store;
    let n = store.numel() as u64;
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        model: model.config.clone(),
        params,
        optimizer: OptimizerEntry {
            config: optim.config,
            step: optim.step,
            first_moment_offset: 8 * n,
            second_moment_offset: 16 * n,
        },
        payload_bytes: 24 * n,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 24 * n as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    let values = store.iter().flat_map(|(_, t)| t.data().iter());
    let moments = optim.m.iter().flatten().chain(optim.v.iter().flatten());
    for v in values.chain(moments) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &DrkfModel, optim: &AdamW) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, optim)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing DRKF1 magic".into()));
    }
    let mut len = [0u8; 4];
    len.copy_from_slice(&bytes[5..9]);
    let len = u32::from_le_bytes(len) as usize;
    let body = &bytes[9..];
    if body.len() < len {
        return Err(bad(format!("header truncated: {len} bytes declared, {} present", body.len())));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let payload = &body[len..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(bad(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    Ok((header, payload))
}

/// Header of a checkpoint file, without touching any model.
pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

fn read_f64s(payload: &[u8], offset: u64, count: usize, what: &str) -> Result<Vec<f64>> {
    let start = usize::try_from(offset).map_err(|_| Error::Checkpoint(format!("{what}: offset overflow")))?;
    let end = start
        .checked_add(8 * count)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Checkpoint(format!("{what}: data runs past the payload")))?;
    Ok(payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Restores parameters and optimizer state from `bytes`. Everything is
/// decoded and validated first; on error neither `model` nor `optim` is
/// modified.
pub fn decode_checkpoint_into(bytes: &[u8], model: &mut DrkfModel, optim: &mut AdamW) -> Result<()> {
    let (header, payload) = split(bytes)?;
    let store = &model.store;
    if header.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(store.len());
    let mut first = Vec::with_capacity(store.len());
    let mut second = Vec::with_capacity(store.len());
    let mut moment_offset = 0u64;
    for ((name, t), entry) in store.iter().zip(&header.params) {
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected `{name}`, found `{}`",
                entry.name
            )));
        }
        if entry.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                entry.shape,
                t.shape()
            )));
        }
        let k = t.numel();
        values.push(read_f64s(payload, entry.offset, k, name)?);
        first.push(read_f64s(payload, header.optimizer.first_moment_offset + moment_offset, k, name)?);
        second.push(read_f64s(payload, header.optimizer.second_moment_offset + moment_offset, k, name)?);
        moment_offset += 8 * k as u64;
    }
    header.optimizer.config.validate()?;

    let ids: Vec<_> = model.store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        model.store.get_mut(id).data_mut().copy_from_slice(&v);
    }
    optim.config = header.optimizer.config;
    optim.step = header.optimizer.step;
    optim.m = first;
    optim.v = second;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut DrkfModel, optim: &mut AdamW) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint_into(&bytes, model, optim)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ModelConfig;

    fn small(d_z: usize) -> (DrkfModel, AdamW) {
        let cfg = ModelConfig {
            d_z,
            d_p: 8,
            d_h: 8,
            classes: 3,
            fe_heads: 2,
            ..Default::default()
        };
        let model = DrkfModel::new(cfg, 5).unwrap();
        let mut optim = AdamW::new(AdamWConfig::default(), &model.store);
        optim.step = 7;
        for (i, m) in optim.m.iter_mut().flatten().enumerate() {
            *m = (i as f64).sin();
        }
        for (i, v) in optim.v.iter_mut().flatten().enumerate() {
            *v = (i as f64).cos().abs();
        }
        (model, optim)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (model, optim) = small(4);
        let bytes = encode_checkpoint(&model, &optim).unwrap();
        assert_eq!(&bytes[..5], b"DRKF1");
        let mut m2 = DrkfModel::new(model.config.clone(), 99).unwrap();
        let mut o2 = AdamW::new(AdamWConfig::default(), &m2.store);
        decode_checkpoint_into(&bytes, &mut m2, &mut o2).unwrap();
        assert_eq!(m2.store, model.store);
        assert_eq!(o2, optim);
        assert_eq!(encode_checkpoint(&m2, &o2).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_leaves_state_untouched() {
        let (model, optim) = small(4);
        let bytes = encode_checkpoint(&model, &optim).unwrap();
        let mut target = DrkfModel::new(model.config.clone(), 1).unwrap();
        let mut topt = AdamW::new(AdamWConfig::default(), &target.store);
        let before = (target.store.clone(), topt.clone());
        for cut in [3, 20, bytes.len() - 8, bytes.len() - 1] {
            assert!(decode_checkpoint_into(&bytes[..cut], &mut target, &mut topt).is_err());
            assert_eq!(target.store, before.0);
            assert_eq!(topt, before.1);
        }
    }

    #[test]
    fn wrong_width_names_the_parameter() {
        let (model, optim) = small(4);
        let bytes = encode_checkpoint(&model, &optim).unwrap();
        let (mut other, mut oopt) = small(6);
        let err = decode_checkpoint_into(&bytes, &mut other, &mut oopt).unwrap_err().to_string();
        assert!(err.contains("shape mismatch for `ae_speech.block0.0.weight`"), "{err}");
    }

    #[test]
    fn version_is_checked() {
        let (model, optim) = small(4);
        let bytes = encode_checkpoint(&model, &optim).unwrap();
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[9..9 + len]).unwrap();
        let patched = header.replacen("\"version\":1", "\"version\":9", 1);
        assert_eq!(patched.len(), header.len());
        let mut edited = bytes[..9].to_vec();
        edited.extend_from_slice(patched.as_bytes());
        edited.extend_from_slice(&bytes[9 + len..]);
        let (mut m, mut o) = small(4);
        let err = decode_checkpoint_into(&edited, &mut m, &mut o).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
