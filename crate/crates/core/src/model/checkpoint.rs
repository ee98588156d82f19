//! Checkpoint directories: `manifest.json` describing the layout plus
//! `params.bin` holding little-endian f64 values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{Layer, ParameterSet};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_TAG: &str = "mergeforge-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    seed: Option<u64>,
    manifest_hash: String,
    layers: Vec<LayerEntry>,
    #[serde(default)]
    provenance: serde_json::Value,
}

/// A parameter set together with the metadata stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub seed: Option<u64>,
    /// Free-form record of how the weights were produced (task, training
    /// config, merge method, ...).
    pub provenance: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParameterSet, seed: Option<u64>, provenance: serde_json::Value) -> Self {
        Self {
            params,
            seed,
            provenance,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            config: *self.params.config(),
            seed: self.seed,
            manifest_hash: self.params.manifest_hash().to_string(),
            layers: self
                .params
                .layers()
                .iter()
                .map(|l| LayerEntry {
                    name: l.name.clone(),
                    params: l
                        .params
                        .iter()
                        .map(|(n, t)| ParamEntry {
                            name: n.clone(),
                            shape: t.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

        let mut bytes = Vec::with_capacity(self.params.numel() * 8);
        for (_, _, t) in self.params.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let params_path = dir.join(PARAMS_FILE);
        fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Format(format!(
                "unsupported checkpoint format `{}`",
                manifest.format
            )));
        }
        manifest.config.validate()?;

        let params_path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let expected: usize = manifest
            .layers
            .iter()
            .flat_map(|l| &l.params)
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != expected * 8 {
            return Err(Error::Format(format!(
                "{} holds {} bytes, manifest needs {}",
                params_path.display(),
                bytes.len(),
                expected * 8
            )));
        }

        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for entry in manifest.layers {
            let mut params = Vec::with_capacity(entry.params.len());
            for p in entry.params {
                let n = p.shape.iter().product();
                let data: Vec<f64> = values.by_ref().take(n).collect();
                params.push((p.name, Tensor::new(p.shape, data)?));
            }
            layers.push(Layer {
                name: entry.name,
                params,
            });
        }
        let params = ParameterSet::new(manifest.config, layers)?;
        if params.manifest_hash() != manifest.manifest_hash {
            return Err(Error::ManifestMismatch {
                expected: manifest.manifest_hash,
                found: params.manifest_hash().to_string(),
            });
        }
        Ok(Self {
            params,
            seed: manifest.seed,
            provenance: manifest.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let params = init_model(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new(params, Some(11), serde_json::json!({"task_id": "parity"}));
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let bits: Vec<u64> = back.params.flatten().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = ckpt.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn truncated_params_are_rejected() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(init_model(&cfg, 1).unwrap(), None, serde_json::Value::Null)
            .save(dir.path())
            .unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
    }
}
