//! Named parameter storage, AdamW updates, and the binary checkpoint format.
//!
//! Checkpoint layout: an 8-byte little-endian manifest length, a JSON
//! manifest (metadata echo plus the ordered name-to-shape map), then raw
//! little-endian f32 blocks in manifest order. Learned parameters come
//! first, running normalization statistics after.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{CgqrError, Result};
use crate::pgm::atomic_write;
use crate::tape::{Tape, Var};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Default)]
struct Slot {
    value: ArrayD<f64>,
    grad: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    params: IndexMap<String, Slot>,
    stats: IndexMap<String, ArrayD<f64>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.params.contains_key(name),
            "parameter {name} registered twice"
        );
        let zeros = ArrayD::zeros(IxDyn(value.shape()));
        self.params.insert(
            name.to_string(),
            Slot { grad: zeros.clone(), m: zeros.clone(), v: zeros, value },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        self.params.get_mut(name).unwrap().value = value;
    }

    /// Materialize a parameter as a tape leaf.
    pub fn leaf(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, self.get(name).clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(|s| s.value.len()).sum()
    }

    // ----- running statistics (non-learned) -----

    pub fn stat(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.stats.get(name)
    }

    pub fn set_stat(&mut self, name: &str, value: ArrayD<f64>) {
        self.stats.insert(name.to_string(), value);
    }

    /// Exponential update of a running stat (factor `momentum` toward `new`).
    pub fn update_stat(&mut self, name: &str, new: &ArrayD<f64>, momentum: f64) {
        match self.stats.get_mut(name) {
            Some(cur) => *cur = &*cur * (1.0 - momentum) + new * momentum,
            None => {
                self.stats.insert(name.to_string(), new.clone());
            }
        }
    }

    // ----- gradients and updates -----

    pub fn zero_grads(&mut self) {
        for slot in self.params.values_mut() {
            slot.grad.fill(0.0);
        }
    }

    /// Accumulate the named-leaf gradients of one backward pass.
    pub fn accumulate(&mut self, tape: &Tape, grads: &[ArrayD<f64>]) {
        for (name, g) in tape.param_grads(grads) {
            if let Some(slot) = self.params.get_mut(name) {
                slot.grad += g;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|s| s.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// One AdamW step with decoupled weight decay and optional global-norm
    /// gradient clipping.
    pub fn adamw_step(&mut self, lr: f64, weight_decay: f64, clip_norm: Option<f64>) {
        let scale = match clip_norm {
            Some(max) => {
                let norm = self.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for slot in self.params.values_mut() {
            ndarray::Zip::from(&mut slot.value)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(&slot.grad)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *p);
                });
        }
    }

    /// FNV-1a over the f32 serialization of all parameters and stats, in
    /// registration order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, slot) in &self.params {
            eat(name.as_bytes());
            for &v in slot.value.iter() {
                eat(&(v as f32).to_le_bytes());
            }
        }
        for (name, stat) in &self.stats {
            eat(name.as_bytes());
            for &v in stat.iter() {
                eat(&(v as f32).to_le_bytes());
            }
        }
        h
    }

    // ----- checkpoint i/o -----

    pub fn save_checkpoint(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        let entries: Vec<ManifestEntry> = self
            .params
            .iter()
            .map(|(n, s)| ManifestEntry { name: n.clone(), shape: s.value.shape().to_vec(), stat: false })
            .chain(self.stats.iter().map(|(n, s)| ManifestEntry {
                name: n.clone(),
                shape: s.shape().to_vec(),
                stat: true,
            }))
            .collect();
        let manifest = CheckpointManifest { meta, entries };
        let json = serde_json::to_vec(&manifest)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for e in &manifest.entries {
            let arr = if e.stat { &self.stats[&e.name] } else { &self.params[&e.name].value };
            for &v in arr.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        atomic_write(path, &buf)
    }

    /// Load parameter values into this store. Every manifest entry must match
    /// a registered parameter (or becomes a stat entry).
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 8 {
            return Err(CgqrError::Data("checkpoint too short".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + len {
            return Err(CgqrError::Data("checkpoint manifest truncated".into()));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[8..8 + len])?;
        let mut pos = 8 + len;
        for e in &manifest.entries {
            let n: usize = e.shape.iter().product();
            if bytes.len() < pos + 4 * n {
                return Err(CgqrError::Data(format!("checkpoint block {} truncated", e.name)));
            }
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    let off = pos + 4 * i;
                    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
                })
                .collect();
            pos += 4 * n;
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|err| CgqrError::Data(err.to_string()))?;
            if e.stat {
                self.stats.insert(e.name.clone(), arr);
            } else {
                let slot = self.params.get_mut(&e.name).ok_or_else(|| {
                    CgqrError::Data(format!("checkpoint parameter {} not in model", e.name))
                })?;
                if slot.value.shape() != arr.shape() {
                    return Err(CgqrError::Shape(format!(
                        "checkpoint parameter {}: {:?} vs model {:?}",
                        e.name,
                        arr.shape(),
                        slot.value.shape()
                    )));
                }
                slot.value = arr;
            }
        }
        Ok(manifest.meta)
    }
}

/// Read only the metadata block of a checkpoint, without needing a store
/// whose registered parameters match.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CgqrError::Data("checkpoint too short".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + len {
        return Err(CgqrError::Data("checkpoint manifest truncated".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[8..8 + len])?;
    Ok(manifest.meta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub stat: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_val_dsc: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    meta: CheckpointMeta,
    entries: Vec<ManifestEntry>,
}
