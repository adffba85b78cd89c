//! Named parameter registry with freezing and a versioned checkpoint format.
//!
//! Checkpoints are JSON: `{"version": 1, "params": {name: {"shape": [..],
//! "data": [..]}}}` with full-precision f64 values, so a save/load round
//! trip is bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LumError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Plain, thread-safe snapshot of all parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, CheckpointEntry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(LumError::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// Registry of named leaf tensors plus a frozen set the optimizer skips.
#[derive(Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Register a fresh parameter initialized uniformly in ±1/sqrt(fan_in).
    pub fn init(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(data, shape, true);
        self.register(name, t.clone());
        t
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let t = Tensor::new(vec![0.0; shape.iter().product()], shape, true);
        self.register(name, t.clone());
        t
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let t = Tensor::new(vec![1.0; shape.iter().product()], shape, true);
        self.register(name, t.clone());
        t
    }

    pub fn register(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&self) {
        for t in self.entries.values() {
            t.zero_grad();
        }
    }

    /// Freeze every parameter whose name starts with the prefix.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .entries
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        CheckpointEntry {
                            shape: t.shape().to_vec(),
                            data: t.data(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Restore values from a checkpoint; every entry must match a registered
    /// parameter of identical shape.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, entry) in &ckpt.params {
            let t = self
                .entries
                .get(name)
                .ok_or_else(|| LumError::Config(format!("checkpoint has unknown parameter {name}")))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(LumError::ShapeMismatch {
                    op: "restore",
                    left: t.shape().to_vec(),
                    right: entry.shape.clone(),
                });
            }
            t.set_data(&entry.data);
        }
        Ok(())
    }
}
