//! Named, grouped parameter storage.
//!
//! Every learnable tensor lives in exactly one group (`backbone`, `flownet`,
//! `decoder`, ...). Groups can be frozen: a frozen parameter is handed to the
//! forward pass as a detached tensor, so no gradient is ever produced for it,
//! and the optimizer refuses to register it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{EmipError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with standard deviation `gain * sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
}

impl Init {
    pub fn kaiming(fan_in: usize) -> Self {
        Self::Kaiming { fan_in, gain: 1.0 }
    }
}

/// Biases and normalization shifts are zeroed by [`ParamStore::zero_biases`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Bias,
}

/// Handle to one stored tensor, shared with the store.
#[derive(Debug, Clone)]
pub struct Param {
    var: Var,
    frozen: Arc<AtomicBool>,
}

impl Param {
    /// The value to use in a forward pass; detached when the group is frozen.
    pub fn t(&self) -> Tensor {
        if self.frozen.load(Ordering::Relaxed) {
            self.var.as_tensor().detach()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }
}

struct Entry {
    group: String,
    kind: Kind,
    var: Var,
}

struct Inner {
    seed: u64,
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Entry>,
    frozen: BTreeMap<String, Arc<AtomicBool>>,
}

/// Cheaply clonable handle; clones share the same storage.
#[derive(Clone)]
pub struct ParamStore(Arc<Mutex<Inner>>);

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.lock();
        f.debug_struct("ParamStore")
            .field("dtype", &inner.dtype)
            .field("params", &inner.entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self(Arc::new(Mutex::new(Inner {
            seed,
            dtype,
            device: Device::Cpu,
            entries: BTreeMap::new(),
            frozen: BTreeMap::new(),
        })))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.0.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn scope(&self, group: &str) -> Scope {
        Scope {
            store: self.clone(),
            group: group.to_string(),
            path: group.to_string(),
        }
    }

    fn create(&self, group: &str, name: String, shape: &[usize], init: Init, kind: Kind) -> Result<Param> {
        let mut inner = self.lock();
        if inner.entries.contains_key(&name) {
            return Err(EmipError::Config(format!("parameter `{name}` registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Kaiming { fan_in, gain } => {
                let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| EmipError::Config(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(inner.seed, &name));
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let frozen = inner
            .frozen
            .entry(group.to_string())
            .or_insert_with(|| Arc::new(AtomicBool::new(false)))
            .clone();
        inner.entries.insert(
            name,
            Entry {
                group: group.to_string(),
                kind,
                var: var.clone(),
            },
        );
        Ok(Param { var, frozen })
    }

    pub fn set_frozen(&self, group: &str, frozen: bool) {
        let mut inner = self.lock();
        inner
            .frozen
            .entry(group.to_string())
            .or_insert_with(|| Arc::new(AtomicBool::new(false)))
            .store(frozen, Ordering::Relaxed);
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.lock()
            .frozen
            .get(group)
            .is_some_and(|f| f.load(Ordering::Relaxed))
    }

    /// Groups in name order.
    pub fn groups(&self) -> Vec<String> {
        let inner = self.lock();
        let mut g: Vec<String> = inner.entries.values().map(|e| e.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().entries.keys().cloned().collect()
    }

    pub fn group_of(&self, name: &str) -> Option<String> {
        self.lock().entries.get(name).map(|e| e.group.clone())
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().entries.get(name).map(|e| e.var.clone())
    }

    /// `(name, var)` of every parameter in `group`, in name order.
    pub fn group_vars(&self, group: &str) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    /// `(name, var)` of every parameter whose group is not frozen.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .entries
            .iter()
            .filter(|(_, e)| !inner.frozen.get(&e.group).is_some_and(|f| f.load(Ordering::Relaxed)))
            .map(|(n, e)| (n.clone(), e.var.clone()))
            .collect()
    }

    pub fn count_group(&self, group: &str) -> usize {
        self.group_vars(group).iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn count_total(&self) -> usize {
        self.lock().entries.values().map(|e| e.var.elem_count()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.trainable_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f32` values of a group.
    pub fn hash_group(&self, group: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.group_vars(group) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Sets every bias and normalization shift to zero.
    pub fn zero_biases(&self) -> Result<()> {
        let inner = self.lock();
        for e in inner.entries.values().filter(|e| e.kind == Kind::Bias) {
            e.var.set(&e.var.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    /// Overwrites a stored value; shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| EmipError::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(EmipError::Shape(format!(
                "parameter `{name}` has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Copies every parameter under `from.` into the matching name under `to.`.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<usize> {
        let pairs: Vec<(String, Var)> = {
            let inner = self.lock();
            inner
                .entries
                .iter()
                .filter_map(|(n, e)| n.strip_prefix(&format!("{from}.")).map(|rest| (format!("{to}.{rest}"), e.var.clone())))
                .collect()
        };
        for (name, src) in &pairs {
            self.assign(name, src.as_tensor())?;
        }
        Ok(pairs.len())
    }
}

/// A naming scope inside one group.
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    group: String,
    path: String,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        Scope {
            store: self.store.clone(),
            group: self.group.clone(),
            path: format!("{}.{}", self.path, name),
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn weight(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        self.store
            .create(&self.group, format!("{}.{}", self.path, name), shape, init, Kind::Weight)
    }

    pub fn bias(&self, name: &str, shape: &[usize]) -> Result<Param> {
        self.store
            .create(&self.group, format!("{}.{}", self.path, name), shape, Init::Zeros, Kind::Bias)
    }
}
