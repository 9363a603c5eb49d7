//! Versioned checkpoint container.
//!
//! ```text
//! b"EMIPCKPT1" | u64 LE header length | JSON header | f32 LE tensor data
//! ```
//!
//! The header echoes the run configuration, lists every tensor with its group,
//! shape and element offset, and records a SHA-256 content hash and the frozen
//! flag per parameter group. Adam moments are stored as tensors of the
//! reserved group `optimizer`. Loading verifies every restored group against
//! its recorded hash; writing a loaded checkpoint reproduces its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{EmipError, Result};
use crate::optim::Adam;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 9] = b"EMIPCKPT1";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_GROUP: &str = "optimizer";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub hash: String,
    pub frozen: bool,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Pipeline stage that wrote the file (`flow`, `static`, `video`, `longterm`).
    pub stage: String,
    pub config: RunConfig,
    pub groups: BTreeMap<String, GroupEntry>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    data: Vec<f32>,
}

impl Checkpoint {
    /// Snapshots `groups` of `store` and, optionally, an optimizer's moments.
    pub fn capture(store: &ParamStore, groups: &[String], stage: &str, config: &RunConfig, optimizer: Option<&Adam>) -> Result<Self> {
        let known = store.groups();
        let mut sorted = groups.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut ck = Self {
            header: Header {
                version: VERSION,
                stage: stage.to_string(),
                config: config.clone(),
                groups: BTreeMap::new(),
                tensors: Vec::new(),
                optimizer_step: optimizer.map_or(0, Adam::steps_taken),
            },
            data: Vec::new(),
        };
        for g in &sorted {
            if g == OPTIMIZER_GROUP || !known.contains(g) {
                return Err(EmipError::Checkpoint(format!("cannot store group `{g}`")));
            }
            for (name, var) in store.group_vars(g) {
                ck.push(name, g, var.as_tensor())?;
            }
            ck.header.groups.insert(
                g.clone(),
                GroupEntry {
                    hash: store.hash_group(g)?,
                    frozen: store.is_frozen(g),
                    params: store.count_group(g),
                },
            );
        }
        if let Some(opt) = optimizer {
            for (name, m, v) in opt.state() {
                ck.push(format!("m.{name}"), OPTIMIZER_GROUP, &m)?;
                ck.push(format!("v.{name}"), OPTIMIZER_GROUP, &v)?;
            }
        }
        Ok(ck)
    }

    fn push(&mut self, name: String, group: &str, t: &Tensor) -> Result<()> {
        let values = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        self.header.tensors.push(TensorEntry {
            name,
            group: group.to_string(),
            shape: t.dims().to_vec(),
            offset: self.data.len(),
        });
        self.data.extend(values);
        Ok(())
    }

    pub fn stage(&self) -> &str {
        &self.header.stage
    }

    pub fn config(&self) -> &RunConfig {
        &self.header.config
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.header.groups.contains_key(group)
    }

    pub fn group_names(&self) -> Vec<String> {
        self.header.groups.keys().cloned().collect()
    }

    pub fn group_hash(&self, group: &str) -> Option<&str> {
        self.header.groups.get(group).map(|g| g.hash.as_str())
    }

    /// Total number of stored model parameters (optimizer state excluded).
    pub fn param_count(&self) -> usize {
        self.header.groups.values().map(|g| g.params).sum()
    }

    fn values(&self, e: &TensorEntry) -> &[f32] {
        let n: usize = e.shape.iter().product();
        &self.data[e.offset..e.offset + n]
    }

    pub fn tensor(&self, name: &str) -> Option<Result<Tensor>> {
        self.header.tensors.iter().find(|e| e.name == name).map(|e| {
            Ok(Tensor::from_slice(self.values(e), e.shape.as_slice(), &Device::Cpu)?)
        })
    }

    /// Loads `groups` (all stored groups when `None`) into `store`, then checks
    /// the content hash of each and sets its frozen flag as recorded.
    pub fn restore(&self, store: &ParamStore, groups: Option<&[String]>) -> Result<()> {
        let wanted: Vec<String> = match groups {
            Some(g) => g.to_vec(),
            None => self.group_names(),
        };
        for g in &wanted {
            let entry = self
                .header
                .groups
                .get(g)
                .ok_or_else(|| EmipError::Checkpoint(format!("group `{g}` is not in the checkpoint")))?;
            let stored: Vec<&TensorEntry> = self.header.tensors.iter().filter(|e| &e.group == g).collect();
            let live = store.group_vars(g);
            if live.len() != stored.len() {
                return Err(EmipError::Checkpoint(format!(
                    "group `{g}` has {} tensors in the model and {} in the checkpoint",
                    live.len(),
                    stored.len()
                )));
            }
            for e in stored {
                let t = Tensor::from_slice(self.values(e), e.shape.as_slice(), &Device::Cpu)?;
                store.assign(&e.name, &t)?;
            }
            let found = store.hash_group(g)?;
            if found != entry.hash {
                return Err(EmipError::Integrity {
                    group: g.clone(),
                    expected: entry.hash.clone(),
                    found,
                });
            }
            store.set_frozen(g, entry.frozen);
        }
        Ok(())
    }

    /// Restores Adam moments saved by [`Checkpoint::capture`].
    pub fn restore_optimizer(&self, opt: &mut Adam) -> Result<()> {
        let step = self.header.optimizer_step;
        opt.restore_state(step, |name| {
            let m = self.tensor(&format!("m.{name}"))?.ok()?;
            let v = self.tensor(&format!("v.{name}"))?.ok()?;
            Some((m, v))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| EmipError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing EMIPCKPT1 magic"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header length overflows"))?;
        let start = MAGIC.len() + 8;
        let end = start.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[start..end]).map_err(|e| EmipError::Checkpoint(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(EmipError::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let body = &bytes[end..];
        if body.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let data: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut expected = 0usize;
        for e in &header.tensors {
            if e.offset != expected {
                return Err(EmipError::Checkpoint(format!("tensor `{}` has offset {}, expected {expected}", e.name, e.offset)));
            }
            expected += e.shape.iter().product::<usize>();
        }
        if expected != data.len() {
            return Err(EmipError::Checkpoint(format!("data holds {} values, tensors need {expected}", data.len())));
        }
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| EmipError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| EmipError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EmipError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use candle_core::DType;

    fn store() -> ParamStore {
        let s = ParamStore::new(3, DType::F32);
        s.scope("a").weight("w", &[2, 3], Init::kaiming(3)).unwrap();
        s.scope("b").bias("c", &[4]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let s = store();
        let ck = Checkpoint::capture(&s, &["a".into(), "b".into()], "static", &RunConfig::desk(), None).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tampered_values_fail_the_hash_check() {
        let s = store();
        let mut ck = Checkpoint::capture(&s, &["a".into()], "flow", &RunConfig::desk(), None).unwrap();
        ck.data[0] += 1.0;
        let err = ck.restore(&ParamStore::clone(&store()), None).unwrap_err();
        assert!(matches!(err, EmipError::Integrity { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT1\0\0\0\0\0\0\0\0").is_err());
    }
}
