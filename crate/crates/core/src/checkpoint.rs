//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MMCK" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | f64 data
//! ```
//!
//! The manifest holds the network config, class list, training progress and a
//! directory of `{name, shape, offset}` entries; offsets are in bytes from the
//! start of the data section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_space::ClassInfo;
use crate::network::{check_params, init_params, NetworkConfig, Params};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    /// Classes behind the output channels, in channel order.
    pub classes: Vec<ClassInfo>,
    pub params: Params,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: NetworkConfig,
    classes: Vec<ClassInfo>,
    epoch: usize,
    best_val_loss: Option<f64>,
    adam_step: u64,
    tensors: Vec<DirEntry>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

impl Checkpoint {
    /// Fresh checkpoint with initialized parameters and empty optimizer state.
    pub fn init(config: NetworkConfig, classes: Vec<ClassInfo>, seed: u64) -> Result<Self> {
        if !classes.is_empty() && classes.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} classes given for {} output channels",
                classes.len(),
                config.num_classes
            )));
        }
        let params = init_params(&config, seed)?;
        Ok(Checkpoint {
            config,
            classes,
            params,
            optimizer: AdamState::default(),
            epoch: 0,
            best_val_loss: None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups: [(&str, &BTreeMap<String, Tensor>); 3] =
            [(PARAM, &self.params), (ADAM_M, &self.optimizer.m), (ADAM_V, &self.optimizer.v)];
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (prefix, map) in groups {
            for (name, t) in map {
                tensors.push(DirEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset: data.len() as u64,
                });
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            config: self.config.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            adam_step: self.optimizer.step,
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let data_start = 16u64
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::format(8, "manifest length exceeds file size"))? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::format(16, format!("bad manifest: {e}")))?;
        let data = &bytes[data_start..];
        let mut params = Params::new();
        let mut optimizer = AdamState {
            step: manifest.adam_step,
            ..AdamState::default()
        };
        for entry in manifest.tensors {
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(16, format!("shape overflow for {}", entry.name)))?;
            let end = numel
                .checked_mul(8)
                .and_then(|n| n.checked_add(entry.offset as usize))
                .filter(|&e| e <= data.len())
                .ok_or_else(|| {
                    Error::format(data_start as u64 + entry.offset, format!("tensor {} runs past end of file", entry.name))
                })?;
            let values = data[entry.offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape, values)
                .map_err(|e| Error::format(data_start as u64 + entry.offset, e.to_string()))?;
            let (map, name) = if let Some(n) = entry.name.strip_prefix(PARAM) {
                (&mut params, n)
            } else if let Some(n) = entry.name.strip_prefix(ADAM_M) {
                (&mut optimizer.m, n)
            } else if let Some(n) = entry.name.strip_prefix(ADAM_V) {
                (&mut optimizer.v, n)
            } else {
                return Err(Error::format(16, format!("unknown tensor group in {}", entry.name)));
            };
            map.insert(name.to_string(), t);
        }
        check_params(&manifest.config, &params)?;
        Ok(Checkpoint {
            config: manifest.config,
            classes: manifest.classes,
            params,
            optimizer,
            epoch: manifest.epoch,
            best_val_loss: manifest.best_val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionConfig, FusionVariant};

    fn small() -> Checkpoint {
        let cfg = NetworkConfig {
            in_channels: 1,
            base_channels: 2,
            depth: 1,
            num_classes: 2,
            fusion: FusionConfig {
                sigmas: [0.3, 0.7, 1.9],
                variant: FusionVariant::FuseClosestPair,
            },
        };
        let mut ck = Checkpoint::init(cfg, vec![], 3).unwrap();
        ck.epoch = 12;
        ck.best_val_loss = Some(0.1 + 0.2);
        ck.optimizer.step = 5;
        for (k, v) in &ck.params {
            ck.optimizer.m.insert(k.clone(), v.scale(0.1));
            ck.optimizer.v.insert(k.clone(), v.map(|x| x * x));
        }
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = small();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = small().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
