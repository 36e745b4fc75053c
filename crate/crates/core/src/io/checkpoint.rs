//! Binary checkpoints.
//!
//! ```text
//! "HNERCKPT" | u32 LE version | u64 LE header length | JSON header | f32 LE data
//! ```
//!
//! The header lists `{name, shape, offset}` per tensor, with offsets counted
//! in bytes from the start of the data section. Tensors are densely packed
//! in header order. Values are held as f64 in memory and rounded to f32 on
//! save, so a loaded checkpoint reproduces the f32-rounded parameters
//! exactly and re-saving it is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::LabelScheme;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::{ParamStore, Tensor};
use crate::trainer::{AdamConfig, EmaState, OptimizerState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"HNERCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// The on-disk container: named f32 tensors plus two free-form JSON blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<TensorEntry>,
    pub configs: serde_json::Value,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
    configs: serde_json::Value,
    metadata: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(corrupt(format!("tensor `{}`: shape {:?} vs {} values", t.name, t.shape, t.data.len())));
            }
            entries.push(HeaderEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            configs: self.configs.clone(),
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(corrupt(format!("file is {} bytes, shorter than the fixed preamble", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let data_start = 20u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt(format!("header length {header_len} runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        let data = &bytes[data_start..];

        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.offset != expected {
                return Err(corrupt(format!(
                    "tensor `{}` at offset {}, expected {expected} (tensors must be densely packed)",
                    e.name, e.offset
                )));
            }
            let n = e
                .shape
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| corrupt(format!("tensor `{}` shape {:?} overflows", e.name, e.shape)))?;
            let end = expected + n;
            if end > data.len() as u64 {
                return Err(corrupt(format!(
                    "tensor `{}` needs bytes {expected}..{end} but the data section has {}",
                    e.name,
                    data.len()
                )));
            }
            let raw = &data[expected as usize..end as usize];
            tensors.push(TensorEntry {
                name: e.name,
                shape: e.shape,
                data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            });
            expected = end;
        }
        if expected != data.len() as u64 {
            return Err(corrupt(format!("{} trailing bytes after the last tensor", data.len() as u64 - expected)));
        }
        Ok(Checkpoint {
            tensors,
            configs: header.configs,
            metadata: header.metadata,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Everything needed to rebuild a model and continue or evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfigs {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    pub scheme: LabelScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub dev_f1: Option<f64>,
    pub steps: u64,
}

const MODEL: &str = "model.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const EMA: &str = "ema.";

fn push_store(out: &mut Vec<TensorEntry>, prefix: &str, store: &ParamStore) {
    for (_, name, t) in store.iter() {
        out.push(TensorEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        });
    }
}

/// Tensors under `prefix`, validated against `config` and returned in the
/// configuration's parameter order.
fn read_store(ck: &Checkpoint, prefix: &str, config: &ModelConfig) -> Result<ParamStore> {
    let mut found = ParamStore::new();
    for t in ck.tensors.iter().filter(|t| t.name.starts_with(prefix)) {
        let data = t.data.iter().map(|&v| v as f64).collect();
        found.insert(&t.name[prefix.len()..], Tensor::new(t.shape.clone(), data)?)?;
    }
    config
        .check_params(&found)
        .map_err(|e| corrupt(format!("`{prefix}*` tensors: {e}")))?;
    let mut ordered = ParamStore::new();
    for name in config.param_names() {
        ordered.insert(name.clone(), found.by_name(&name).unwrap().clone())?;
    }
    Ok(ordered)
}

pub fn state_to_checkpoint(
    state: &TrainState,
    configs: &CheckpointConfigs,
    metadata: &TrainingMetadata,
) -> Result<Checkpoint> {
    let mut tensors = Vec::new();
    push_store(&mut tensors, MODEL, &state.params);
    push_store(&mut tensors, ADAM_M, &state.optimizer.first_moment);
    push_store(&mut tensors, ADAM_V, &state.optimizer.second_moment);
    if let Some(ema) = &state.ema {
        push_store(&mut tensors, EMA, &ema.shadow);
    }
    Ok(Checkpoint {
        tensors,
        configs: serde_json::to_value(configs)?,
        metadata: serde_json::to_value(metadata)?,
    })
}

/// Rebuilds configs, metadata and the full training state.
pub fn checkpoint_to_state(ck: &Checkpoint) -> Result<(CheckpointConfigs, TrainingMetadata, TrainState)> {
    let configs: CheckpointConfigs = serde_json::from_value(ck.configs.clone())?;
    let metadata: TrainingMetadata = serde_json::from_value(ck.metadata.clone())?;
    configs.model.validate()?;
    let params = read_store(ck, MODEL, &configs.model)?;
    let optimizer = OptimizerState {
        first_moment: read_store(ck, ADAM_M, &configs.model)?,
        second_moment: read_store(ck, ADAM_V, &configs.model)?,
        step: metadata.steps,
        config: AdamConfig::default(),
    };
    let has_ema = ck.tensors.iter().any(|t| t.name.starts_with(EMA));
    let ema = if has_ema {
        Some(EmaState {
            shadow: read_store(ck, EMA, &configs.model)?,
            lambda: configs.train.ema_lambda,
            step: metadata.steps,
        })
    } else {
        None
    };
    let state = TrainState {
        params,
        optimizer,
        ema,
        epoch: metadata.epoch,
    };
    Ok((configs, metadata, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_tensor() -> Checkpoint {
        Checkpoint {
            tensors: vec![TensorEntry {
                name: "w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0],
            }],
            configs: serde_json::json!({"k": 1}),
            metadata: serde_json::json!(null),
        }
    }

    #[test]
    fn single_tensor_round_trip() {
        let ck = one_tensor();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors[0].name, "w");
        assert_eq!(back.tensors[0].shape, [2, 3]);
        let bits = |t: &TensorEntry| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.tensors[0]), bits(&ck.tensors[0]));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = one_tensor().to_bytes().unwrap();
        for n in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "truncated at {n}");
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let bytes = one_tensor().to_bytes().unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = bytes.clone();
        b[8] = 2;
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = bytes;
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn gapped_offsets_are_rejected() {
        let header = br#"{"tensors":[{"name":"a","shape":[1],"offset":0},{"name":"b","shape":[1],"offset":8}],"configs":null,"metadata":null}"#;
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(header);
        b.extend_from_slice(&[0u8; 12]);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn shape_mismatch_refuses_to_save() {
        let mut ck = one_tensor();
        ck.tensors[0].shape = vec![4];
        assert!(ck.to_bytes().is_err());
    }

    proptest! {
        #[test]
        fn f64_values_survive_one_rounding(vals in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let ck = Checkpoint {
                tensors: vec![TensorEntry { name: "x".into(), shape: vec![vals.len()], data: vals.iter().map(|&v| v as f32).collect() }],
                configs: serde_json::Value::Null,
                metadata: serde_json::Value::Null,
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            for (a, b) in vals.iter().zip(&back.tensors[0].data) {
                prop_assert_eq!((*a as f32 as f64).to_bits(), (*b as f64).to_bits());
                prop_assert!((a - *b as f64).abs() <= a.abs() * f32::EPSILON as f64);
            }
        }
    }
}
