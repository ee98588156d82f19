use std::collections::HashSet;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One named group of parameters; the unit of layer-level merging.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
}

impl Layer {
    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Ordered, named collection of weight tensors for one model.
///
/// The order of layers and of parameters within a layer is canonical. Two
/// sets can be combined elementwise iff their manifest hashes agree; the hash
/// covers the model config and every name and shape, not the values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    config: ModelConfig,
    layers: Vec<Layer>,
    manifest_hash: String,
}

impl ParameterSet {
    pub fn new(config: ModelConfig, layers: Vec<Layer>) -> Result<Self> {
        let mut layer_names = HashSet::new();
        for layer in &layers {
            if !layer_names.insert(layer.name.as_str()) {
                return Err(Error::contract(format!("duplicate layer name `{}`", layer.name)));
            }
            let mut param_names = HashSet::new();
            for (name, _) in &layer.params {
                if !param_names.insert(name.as_str()) {
                    return Err(Error::contract(format!(
                        "duplicate parameter `{name}` in layer `{}`",
                        layer.name
                    )));
                }
            }
        }
        let manifest_hash = manifest_digest(&config, &layers);
        Ok(Self {
            config,
            layers,
            manifest_hash,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn manifest_hash(&self) -> &str {
        &self.manifest_hash
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(Layer::numel).sum()
    }

    /// Iterates `(layer_index, param_name, tensor)` in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = (usize, &str, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(li, layer)| {
            layer
                .params
                .iter()
                .map(move |(name, t)| (li, name.as_str(), t))
        })
    }

    pub fn tensor(&self, layer: usize, param: usize) -> &Tensor {
        &self.layers[layer].params[param].1
    }

    pub fn is_compatible(&self, other: &ParameterSet) -> bool {
        self.manifest_hash == other.manifest_hash
    }

    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::ManifestMismatch {
                expected: self.manifest_hash.clone(),
                found: other.manifest_hash.clone(),
            })
        }
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, _, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Values of one layer concatenated in canonical order.
    pub fn flatten_layer(&self, layer: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers[layer].numel());
        for (_, t) in &self.layers[layer].params {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// A set with this manifest and the given flat values.
    pub fn with_flat(&self, values: &[f64]) -> Result<ParameterSet> {
        if values.len() != self.numel() {
            return Err(Error::contract(format!(
                "flat vector has {} values, manifest needs {}",
                values.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut out = self.clone();
        for layer in &mut out.layers {
            for (_, t) in &mut layer.params {
                let n = t.len();
                let chunk = &values[offset..offset + n];
                if chunk.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric("non-finite parameter value"));
                }
                t.data_mut().copy_from_slice(chunk);
                offset += n;
            }
        }
        Ok(out)
    }

    /// Elementwise combination of two compatible sets.
    pub fn zip_map(
        &self,
        other: &ParameterSet,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<ParameterSet> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (lo, lb) in out.layers.iter_mut().zip(&other.layers) {
            for ((_, to), (_, tb)) in lo.params.iter_mut().zip(&lb.params) {
                for (a, &b) in to.data_mut().iter_mut().zip(tb.data()) {
                    *a = f(*a, b);
                }
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }

    /// Applies `f(layer_index, value)` to every value.
    pub fn map_layers(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<ParameterSet> {
        let mut out = self.clone();
        for (li, layer) in out.layers.iter_mut().enumerate() {
            for (_, t) in &mut layer.params {
                for v in t.data_mut() {
                    *v = f(li, *v);
                }
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }

    /// `self += scale * other`, restricted to one layer when `layer` is set.
    pub(crate) fn axpy_in_place(&mut self, other: &ParameterSet, scale: f64, layer: Option<usize>) {
        debug_assert!(self.is_compatible(other));
        for (li, (lo, lb)) in self.layers.iter_mut().zip(&other.layers).enumerate() {
            if layer.is_some_and(|l| l != li) {
                continue;
            }
            for ((_, to), (_, tb)) in lo.params.iter_mut().zip(&lb.params) {
                to.add_scaled(tb, scale);
            }
        }
    }

    /// Same manifest, all values zero.
    pub fn zeros_like(&self) -> ParameterSet {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for (_, t) in &mut layer.params {
                t.data_mut().fill(0.0);
            }
        }
        out
    }

    pub(crate) fn tensor_mut(&mut self, layer: usize, param: usize) -> &mut Tensor {
        &mut self.layers[layer].params[param].1
    }

    pub fn dot(&self, other: &ParameterSet) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|((_, _, a), (_, _, b))| a.dot(b))
            .sum()
    }

    /// Inner product restricted to each layer.
    pub fn layer_dots(&self, other: &ParameterSet) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(la, lb)| {
                la.params
                    .iter()
                    .zip(&lb.params)
                    .map(|((_, a), (_, b))| a.dot(b))
                    .sum()
            })
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(|(_, _, t)| t.norm_sq()).sum::<f64>().sqrt()
    }

    fn ensure_finite(&self) -> Result<()> {
        if self.tensors().all(|(_, _, t)| t.all_finite()) {
            Ok(())
        } else {
            Err(Error::numeric("parameter combination produced a non-finite value"))
        }
    }
}

fn manifest_digest(config: &ModelConfig, layers: &[Layer]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(
        format!(
            "vocab={};d={};layers={};heads={};seq={}\n",
            config.vocab_size, config.d_model, config.n_layers, config.n_heads, config.max_seq_len
        )
        .as_bytes(),
    );
    for layer in layers {
        hasher.update(format!("[{}]\n", layer.name).as_bytes());
        for (name, t) in &layer.params {
            hasher.update(format!("{name}:{:?}\n", t.shape()).as_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
