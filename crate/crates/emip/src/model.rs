//! The dual-stream short-term model.
//!
//! ```text
//! frame_t ──backbone──> f1 f2 f3 f4 ───────────────┐
//!             │ (prompt source, default f2)        │
//!             v                                    v
//! frame_t ──flow enc──CF──┐                 MC(f2, align_g(G)) ──> NCD ──> logits
//! frame_t-1 ─flow enc─────┴─ match ─> V, M, G ─────^
//! ```

use candle_core::Tensor;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::{Ablation, Level, ModelConfig, PromptDest};
use crate::decoder::Ncd;
use crate::error::{EmipError, Result};
use crate::flownet::{FlowBundle, FlowNet};
use crate::longterm::TrunkFeatures;
use crate::nn::resize_bilinear;
use crate::params::ParamStore;
use crate::prompts::{AlignG, PromptBlock};

/// Parameter groups of the short-term model, in checkpoint order.
pub const SHORT_TERM_GROUPS: [&str; 6] = [
    "align_g",
    "backbone",
    "camouflage_feeder",
    "decoder",
    "flownet",
    "motion_collector",
];

#[derive(Debug, Clone)]
struct Collector {
    level: Level,
    align: AlignG,
    block: PromptBlock,
}

#[derive(Debug, Clone)]
pub struct Emip {
    pub store: ParamStore,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub backbone: Backbone,
    pub flownet: FlowNet,
    pub decoder: Ncd,
    feeder: Option<PromptBlock>,
    collectors: Vec<Collector>,
    height: usize,
    width: usize,
}

/// Everything one forward pass over a frame pair produces.
#[derive(Debug, Clone)]
pub struct PairOutput {
    pub logits: Tensor,
    pub pyramid: FeaturePyramid,
    pub flow: Option<FlowBundle>,
    /// `f2` after the motion collector (equals `pyramid.f2` without one).
    pub f2_prompted: Tensor,
    /// `align_g(G)` at stride 8, when a collector exists for `f2`.
    pub g_hat: Option<Tensor>,
}

impl Emip {
    pub fn new(store: &ParamStore, model: &ModelConfig, ablation: &Ablation, height: usize, width: usize) -> Result<Self> {
        if height % 32 != 0 || width % 32 != 0 {
            return Err(EmipError::Shape(format!("input {height}x{width} is not divisible by 32")));
        }
        let c = model.backbone_channels;
        let backbone = Backbone::new(&store.scope("backbone"), c, model.backbone_depths)?;
        let flownet = FlowNet::new(&store.scope("flownet"), model.flow_dims, model.flow_blocks, model.flow_heads)?;
        let decoder = Ncd::new(&store.scope("decoder"), [c[1], c[2], c[3]], model.decoder_channels)?;
        let feeder = if ablation.use_cf {
            let q = match ablation.prompt_dest {
                PromptDest::Layer1 => model.flow_dims[0],
                PromptDest::Layer2 => model.flow_dims[1],
                PromptDest::Layer3 => model.flow_dims[2],
            };
            let kv = c[ablation.prompt_src.index()];
            Some(PromptBlock::new(&store.scope("camouflage_feeder"), q, kv, model.prompt_heads, model.ffn_expansion)?)
        } else {
            None
        };
        let mut collectors = Vec::new();
        if ablation.use_mc {
            let mut levels = ablation.mc_dest.clone();
            levels.sort();
            levels.dedup();
            for level in levels {
                let ch = c[level.index()];
                collectors.push(Collector {
                    level,
                    align: AlignG::new(&store.scope("align_g").pp(level.name()), model.align_radius, ch)?,
                    block: PromptBlock::new(
                        &store.scope("motion_collector").pp(level.name()),
                        ch,
                        ch,
                        model.prompt_heads,
                        model.ffn_expansion,
                    )?,
                });
            }
        }
        Ok(Self {
            store: store.clone(),
            model: model.clone(),
            ablation: ablation.clone(),
            backbone,
            flownet,
            decoder,
            feeder,
            collectors,
            height,
            width,
        })
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn feeder(&self) -> Option<&PromptBlock> {
        self.feeder.as_ref()
    }

    /// Flow for a pair, with the camouflage prompt when the feeder is enabled.
    pub fn flow(&self, frame_t: &Tensor, frame_prev: &Tensor, pyramid: Option<&FeaturePyramid>) -> Result<FlowBundle> {
        let prev = self.flownet.encode(frame_prev)?;
        let cur = match (&self.feeder, pyramid) {
            (Some(cf), Some(pyr)) => {
                let after = match self.ablation.prompt_dest {
                    PromptDest::Layer1 => 0,
                    PromptDest::Layer2 => 1,
                    PromptDest::Layer3 => 2,
                };
                let src = pyr.level(self.ablation.prompt_src.index());
                self.flownet.encode_with(frame_t, Some(after), |x| {
                    let (_, _, h, w) = x.dims4()?;
                    cf.forward(x, &resize_bilinear(src, h, w)?)
                })?
            }
            _ => self.flownet.encode(frame_t)?,
        };
        self.flownet.match_and_flow(&cur.layer3, &prev.layer3)
    }

    /// Segmentation of `frame_t` given `frame_prev`; both `[B, 3, H, W]`.
    pub fn forward_pair(&self, frame_t: &Tensor, frame_prev: &Tensor) -> Result<PairOutput> {
        let pyramid = self.backbone.forward(frame_t)?;
        let flow = if self.ablation.needs_flow() {
            Some(self.flow(frame_t, frame_prev, Some(&pyramid))?)
        } else {
            None
        };
        let mut levels = [pyramid.f2.clone(), pyramid.f3.clone(), pyramid.f4.clone()];
        let mut g_hat = None;
        if let Some(bundle) = &flow {
            for col in &self.collectors {
                let aligned = col.align.forward(&bundle.g)?;
                let slot = &mut levels[col.level.index() - 1];
                let (_, _, h, w) = slot.dims4()?;
                let prompt = resize_bilinear(&aligned, h, w)?;
                *slot = col.block.forward(slot, &prompt)?;
                if col.level == Level::F2 {
                    g_hat = Some(aligned);
                }
            }
        }
        let logits = self.decoder.forward(&levels[0], &levels[1], &levels[2])?;
        Ok(PairOutput {
            logits,
            pyramid,
            flow,
            f2_prompted: levels[0].clone(),
            g_hat,
        })
    }

    /// Appearance-only segmentation used by static pre-training.
    pub fn forward_static(&self, frame: &Tensor) -> Result<Tensor> {
        let p = self.backbone.forward(frame)?;
        self.decoder.forward(&p.f2, &p.f3, &p.f4)
    }

    /// Inputs of the long-term head for a pair: raw `f2`, `f3`, `f4` and `G_hat`.
    pub fn trunk_features(&self, frame_t: &Tensor, frame_prev: &Tensor) -> Result<(TrunkFeatures, Tensor)> {
        let out = self.forward_pair(frame_t, frame_prev)?;
        let g_hat = out
            .g_hat
            .ok_or_else(|| EmipError::Config("the long-term head needs a motion collector on f2".into()))?;
        Ok((
            TrunkFeatures {
                f2: out.pyramid.f2,
                f3: out.pyramid.f3,
                f4: out.pyramid.f4,
                g_hat,
            },
            out.logits,
        ))
    }

    /// Groups that exist in this configuration.
    pub fn groups(&self) -> Vec<String> {
        self.store
            .groups()
            .into_iter()
            .filter(|g| SHORT_TERM_GROUPS.contains(&g.as_str()))
            .collect()
    }
}

/// Previous-frame indices for a clip: frame 0 is paired with itself.
pub fn previous_indices(len: usize) -> Vec<u32> {
    (0..len).map(|t| t.saturating_sub(1) as u32).collect()
}
