//! Run configuration: TOML files plus `key=value` overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EmipError, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pyramid widths C1..C4 at strides 4, 8, 16, 32.
    pub backbone_channels: [usize; 4],
    /// Residual blocks per backbone stage.
    pub backbone_depths: [usize; 4],
    /// Flow encoder widths after layers 1, 2, 3; the last is the matching width.
    pub flow_dims: [usize; 3],
    pub flow_blocks: usize,
    pub flow_heads: usize,
    pub prompt_heads: usize,
    pub ffn_expansion: usize,
    pub decoder_channels: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub memory_len: usize,
    /// Radius, in flow cells, of the displacement window the matching prompt
    /// is re-indexed to before alignment.
    pub align_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32, 64, 128],
            backbone_depths: [1, 1, 2, 8],
            flow_dims: [16, 32, 64],
            flow_blocks: 2,
            flow_heads: 1,
            prompt_heads: 1,
            ffn_expansion: 2,
            decoder_channels: 32,
            key_dim: 32,
            value_dim: 64,
            memory_len: 5,
            align_radius: 2,
        }
    }
}

/// Flow-encoder layer that receives the camouflage prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptDest {
    Layer1,
    Layer2,
    Layer3,
}

/// Appearance pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    F2,
    F3,
    F4,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::F2 => 1,
            Level::F3 => 2,
            Level::F4 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::F2 => "f2",
            Level::F3 => "f3",
            Level::F4 => "f4",
        }
    }
}

/// The switches varied by the ablation grid. Defaults are the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_cf: bool,
    pub use_mc: bool,
    pub freeze_flow: bool,
    pub prompt_dest: PromptDest,
    pub prompt_src: Level,
    pub mc_dest: Vec<Level>,
    pub use_selfsup: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_cf: true,
            use_mc: true,
            freeze_flow: true,
            prompt_dest: PromptDest::Layer3,
            prompt_src: Level::F2,
            mc_dest: vec![Level::F2],
            use_selfsup: true,
        }
    }
}

impl Ablation {
    /// Whether the flow stream has to run at all.
    pub fn needs_flow(&self) -> bool {
        self.use_cf || self.use_mc
    }

    /// `key=value` pairs that differ from `other`, for per-row audit logs.
    pub fn diff(&self, other: &Ablation) -> Vec<String> {
        let a = toml::Value::try_from(self).expect("ablation serializes");
        let b = toml::Value::try_from(other).expect("ablation serializes");
        let (Some(a), Some(b)) = (a.as_table(), b.as_table()) else {
            return vec![];
        };
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    }
}

/// One optimization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine annealing period measured in epochs.
    pub anneal_epochs: f64,
    /// Optimizer steps that make up one scheduling epoch.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr_max: 2e-3,
            lr_min: 2e-4,
            anneal_epochs: 20.0,
            steps_per_epoch: 20,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub flow: StageConfig,
    #[serde(rename = "static")]
    pub static_stage: StageConfig,
    pub video: StageConfig,
    pub longterm: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small inputs and step budgets that train on a single CPU core.
    pub fn desk() -> Self {
        Self {
            mode: Mode::Desk,
            height: 64,
            width: 64,
            seed: 7,
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            flow: StageConfig {
                steps: 600,
                lr_max: 2e-3,
                lr_min: 1e-4,
                ..StageConfig::default()
            },
            static_stage: StageConfig {
                steps: 1200,
                steps_per_epoch: 60,
                ..StageConfig::default()
            },
            video: StageConfig {
                steps: 400,
                lr_max: 1e-3,
                lr_min: 1e-4,
                ..StageConfig::default()
            },
            longterm: StageConfig {
                steps: 200,
                lr_max: 1e-3,
                lr_min: 1e-4,
                batch_size: 4,
                ..StageConfig::default()
            },
        }
    }

    /// Input size, batch size and learning rates of the original recipe.
    pub fn full() -> Self {
        let stage = |steps| StageConfig {
            steps,
            lr_max: 1e-5,
            lr_min: 1e-6,
            anneal_epochs: 20.0,
            steps_per_epoch: 1000,
            batch_size: 6,
        };
        Self {
            mode: Mode::Full,
            height: 352,
            width: 352,
            seed: 7,
            model: ModelConfig {
                backbone_channels: [32, 64, 128, 256],
                ..ModelConfig::default()
            },
            ablation: Ablation::default(),
            flow: stage(20_000),
            static_stage: stage(20_000),
            video: stage(20_000),
            longterm: stage(20_000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(EmipError::Config(format!(
                "input size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.model.ffn_expansion == 0 || self.model.memory_len == 0 {
            return Err(EmipError::Config("ffn_expansion and memory_len must be positive".into()));
        }
        for (name, heads, width) in [
            ("flow_heads", self.model.flow_heads, self.model.flow_dims[2]),
            ("prompt_heads", self.model.prompt_heads, self.model.backbone_channels[1]),
        ] {
            if heads == 0 || width % heads != 0 {
                return Err(EmipError::Config(format!("{name}={heads} must divide width {width}")));
            }
        }
        if self.ablation.use_mc && self.ablation.mc_dest.is_empty() {
            return Err(EmipError::Config("use_mc requires a non-empty mc_dest".into()));
        }
        for (name, s) in [
            ("flow", &self.flow),
            ("static", &self.static_stage),
            ("video", &self.video),
            ("longterm", &self.longterm),
        ] {
            if s.batch_size == 0 || s.steps_per_epoch == 0 || s.anneal_epochs <= 0.0 {
                return Err(EmipError::Config(format!(
                    "{name}: batch_size, steps_per_epoch and anneal_epochs must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EmipError::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| EmipError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `a.b.c=value`; the value is parsed as a TOML literal, falling
    /// back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| EmipError::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for part in path {
            node = node
                .get_mut(*part)
                .filter(|n| n.is_table())
                .ok_or_else(|| EmipError::Config(format!("unknown setting `{key}`")))?;
        }
        match node.get_mut(*last) {
            Some(slot) => *slot = value,
            None => return Err(EmipError::Config(format!("unknown setting `{key}`"))),
        }
        let updated: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| EmipError::Config(format!("`{assignment}`: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// `HxW` frame size on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSize {
    pub height: usize,
    pub width: usize,
}

impl FromStr for FrameSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
        Ok(Self {
            height: parse(h)?,
            width: parse(w)?,
        })
    }
}

impl fmt::Display for FrameSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}
