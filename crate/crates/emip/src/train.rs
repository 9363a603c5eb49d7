//! Training stages.
//!
//! | stage      | data                         | trained groups                          | loss                 |
//! |------------|------------------------------|-----------------------------------------|----------------------|
//! | `flow`     | clip pairs with flow labels  | `flownet`                               | end-point error      |
//! | `static`   | single frames (alpha ~ 0.5)  | `backbone`, `decoder`                   | segmentation         |
//! | `video`    | adjacent frame pairs         | everything but a frozen `flownet`       | segmentation + flow  |
//! | `longterm` | whole clips, cached trunk    | the five long-term groups               | segmentation         |
//!
//! Every stage draws its batches from a ChaCha stream keyed by the run seed
//! and the stage name, so two runs with the same inputs are identical.

use std::time::Instant;

use candle_core::{DType, Tensor};
use emip_core::noise::derive_seed;
use emip_core::schedule::CosineAnnealing;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::StageConfig;
use crate::dataset::ClipTensors;
use crate::error::{EmipError, Result};
use crate::longterm::{LongTerm, TrunkFeatures, LONGTERM_GROUPS};
use crate::losses::{epe_loss, epe_sum, flow_loss, seg_loss, total_loss, LossReport};
use crate::model::{previous_indices, Emip};
use crate::optim::Adam;
use crate::params::ParamStore;

/// Per-step log of one stage.
#[derive(Debug, Clone, Default)]
pub struct StageLog {
    pub losses: Vec<LossReport>,
    pub seconds: f64,
}

impl StageLog {
    /// Loss CSV: header plus one row per step.
    pub fn csv(&self) -> String {
        let mut out = String::from(LossReport::CSV_HEADER);
        out.push('\n');
        for (i, r) in self.losses.iter().enumerate() {
            out.push_str(&r.csv_row(i));
            out.push('\n');
        }
        out
    }
}

/// Seeded batch sampler.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64, stage: &str) -> Self {
        let tag = stage.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
        Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, tag)),
        }
    }

    /// `(clip, t)` with `t >= 1`, so `(t, t - 1)` is a real pair.
    pub fn pairs(&mut self, clips: &[ClipTensors], n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .map(|_| {
                let c = self.rng.gen_range(0..clips.len());
                (c, self.rng.gen_range(1..clips[c].len()))
            })
            .collect()
    }

    /// `(clip, t)` over all frames.
    pub fn frames(&mut self, clips: &[ClipTensors], n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .map(|_| {
                let c = self.rng.gen_range(0..clips.len());
                (c, self.rng.gen_range(0..clips[c].len()))
            })
            .collect()
    }

    pub fn clips(&mut self, clips: &[ClipTensors], n: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.gen_range(0..clips.len())).collect()
    }

    /// Whether to mirror a batch horizontally and vertically.
    pub fn flips(&mut self) -> (bool, bool) {
        (self.rng.gen(), self.rng.gen())
    }
}

/// Mirrors `[B, C, H, W]` along the width and/or height axis.
pub fn flip(x: &Tensor, horizontal: bool, vertical: bool) -> Result<Tensor> {
    let reverse = |x: Tensor, dim: usize| -> Result<Tensor> {
        let n = x.dim(dim)?;
        let idx = Tensor::from_vec((0..n as u32).rev().collect::<Vec<_>>(), n, x.device())?;
        Ok(x.index_select(&idx, dim)?)
    };
    let mut y = x.clone();
    if horizontal {
        y = reverse(y, 3)?;
    }
    if vertical {
        y = reverse(y, 2)?;
    }
    Ok(y)
}

/// A batch of frame pairs `(I_t, I_{t-1})` with labels of frame `t`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub frame_t: Tensor,
    pub frame_prev: Tensor,
    pub mask_t: Tensor,
    pub flow_t: Tensor,
}

impl PairBatch {
    pub fn gather(clips: &[ClipTensors], picks: &[(usize, usize)]) -> Result<Self> {
        let take = |f: &dyn Fn(&ClipTensors) -> &Tensor, off: usize| -> Result<Tensor> {
            let parts: Vec<Tensor> = picks
                .iter()
                .map(|&(c, t)| Ok(f(&clips[c]).narrow(0, t.saturating_sub(off), 1)?))
                .collect::<Result<_>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        Ok(Self {
            frame_t: take(&|c| &c.frames, 0)?,
            frame_prev: take(&|c| &c.frames, 1)?,
            mask_t: take(&|c| &c.masks, 0)?,
            flow_t: take(&|c| &c.back_flow, 0)?,
        })
    }
}

fn require_clips(clips: &[ClipTensors], min_len: usize, what: &str) -> Result<()> {
    if clips.is_empty() {
        return Err(EmipError::Config(format!("{what}: no training clips")));
    }
    if let Some(c) = clips.iter().find(|c| c.len() < min_len) {
        return Err(EmipError::Config(format!("{what}: clip `{}` has fewer than {min_len} frames", c.id)));
    }
    Ok(())
}

/// Shared optimization loop: `step_loss(step)` returns the scalar to minimize
/// and its logged parts.
pub fn run_stage<F>(store: &ParamStore, groups: &[String], cfg: &StageConfig, mut step_loss: F) -> Result<(StageLog, Adam)>
where
    F: FnMut(usize) -> Result<(Tensor, LossReport)>,
{
    let mut opt = Adam::new(store, groups)?;
    let schedule = CosineAnnealing {
        lr_max: cfg.lr_max,
        lr_min: cfg.lr_min,
        period: cfg.anneal_epochs,
    };
    let start = Instant::now();
    let mut log = StageLog::default();
    for step in 0..cfg.steps {
        let (loss, report) = step_loss(step)?;
        let grads = loss.backward()?;
        opt.step(&grads, schedule.at_step(step, cfg.steps_per_epoch))?;
        log.losses.push(report);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok((log, opt))
}

/// Supervised flow pre-training on ground-truth backward flow.
pub fn pretrain_flow(model: &Emip, train: &[ClipTensors], cfg: &StageConfig, seed: u64) -> Result<(StageLog, Adam)> {
    require_clips(train, 2, "pretrain-flow")?;
    let (h, w) = model.input_size();
    let mut sampler = Sampler::new(seed, "flow");
    run_stage(&model.store, &["flownet".to_string()], cfg, |_| {
        let b = PairBatch::gather(train, &sampler.pairs(train, cfg.batch_size))?;
        let pred = model.flownet.forward(&b.frame_t, &b.frame_prev)?.full_resolution(h, w)?;
        let loss = epe_loss(&pred, &b.flow_t)?;
        let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok((
            loss,
            LossReport {
                l_total: v,
                l_flow: v,
                ..LossReport::default()
            },
        ))
    })
}

/// Mean EPE of the bare flow network over every pair `t >= 1`.
pub fn flow_epe(model: &Emip, clips: &[ClipTensors]) -> Result<f64> {
    let (h, w) = model.input_size();
    let (mut sum, mut count) = (0.0, 0.0);
    for c in clips {
        let n = c.len() - 1;
        let cur = c.frames.narrow(0, 1, n)?;
        let prev = c.frames.narrow(0, 0, n)?;
        let pred = model.flownet.forward(&cur, &prev)?.full_resolution(h, w)?;
        let (s, k) = epe_sum(&pred, &c.back_flow.narrow(0, 1, n)?, None)?;
        sum += s;
        count += k;
    }
    Ok(if count > 0.0 { sum / count } else { 0.0 })
}

/// Appearance-only training of backbone and decoder on single frames.
pub fn train_static(model: &Emip, train: &[ClipTensors], cfg: &StageConfig, seed: u64) -> Result<(StageLog, Adam)> {
    require_clips(train, 1, "pretrain-static")?;
    let mut sampler = Sampler::new(seed, "static");
    let groups = vec!["backbone".to_string(), "decoder".to_string()];
    run_stage(&model.store, &groups, cfg, |_| {
        let b = PairBatch::gather(train, &sampler.frames(train, cfg.batch_size))?;
        let (h, v) = sampler.flips();
        let seg = seg_loss(&model.forward_static(&flip(&b.frame_t, h, v)?)?, &flip(&b.mask_t, h, v)?)?;
        let t = total_loss(&seg, None)?;
        Ok((t.total, t.report))
    })
}

/// Groups optimized by the video stage for the model's ablation.
pub fn video_groups(model: &Emip) -> Vec<String> {
    let tune_flow = model.ablation.needs_flow() && !model.ablation.freeze_flow;
    model
        .groups()
        .into_iter()
        .filter(|g| g != "flownet" || tune_flow)
        .collect()
}

/// Joint fine-tuning on adjacent frame pairs. The flow network is frozen
/// unless the ablation asks for full tuning.
pub fn train_video(model: &Emip, train: &[ClipTensors], cfg: &StageConfig, seed: u64) -> Result<(StageLog, Adam)> {
    require_clips(train, 2, "train")?;
    let (h, w) = model.input_size();
    let tune_flow = model.ablation.needs_flow() && !model.ablation.freeze_flow;
    model.store.set_frozen("flownet", !tune_flow);
    let mut sampler = Sampler::new(seed, "video");
    run_stage(&model.store, &video_groups(model), cfg, |_| {
        let b = PairBatch::gather(train, &sampler.pairs(train, cfg.batch_size))?;
        let out = model.forward_pair(&b.frame_t, &b.frame_prev)?;
        let seg = seg_loss(&out.logits, &b.mask_t)?;
        let flow = match (&out.flow, model.ablation.use_selfsup) {
            (Some(bundle), true) => Some(flow_loss(&b.frame_t, &b.frame_prev, &bundle.full_resolution(h, w)?)?),
            _ => None,
        };
        let t = total_loss(&seg, flow.as_ref())?;
        Ok((t.total, t.report))
    })
}

/// Detached short-term outputs for every frame of a clip, `[T, ...]`.
#[derive(Debug, Clone)]
pub struct ClipTrunk {
    pub trunk: TrunkFeatures,
    /// Short-term logits `[T, 1, H, W]`.
    pub logits: Tensor,
}

pub fn clip_trunk(model: &Emip, clip: &ClipTensors) -> Result<ClipTrunk> {
    let prev_idx = Tensor::new(previous_indices(clip.len()).as_slice(), clip.frames.device())?;
    let prev = clip.frames.index_select(&prev_idx, 0)?;
    let (trunk, logits) = model.trunk_features(&clip.frames, &prev)?;
    Ok(ClipTrunk {
        trunk: TrunkFeatures {
            f2: trunk.f2.detach(),
            f3: trunk.f3.detach(),
            f4: trunk.f4.detach(),
            g_hat: trunk.g_hat.detach(),
        },
        logits: logits.detach(),
    })
}

fn frame_of(trunks: &[&ClipTrunk], t: usize) -> Result<TrunkFeatures> {
    let pick = |f: &dyn Fn(&TrunkFeatures) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = trunks
            .iter()
            .map(|c| Ok(f(&c.trunk).narrow(0, t, 1)?))
            .collect::<Result<_>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    Ok(TrunkFeatures {
        f2: pick(&|x| &x.f2)?,
        f3: pick(&|x| &x.f3)?,
        f4: pick(&|x| &x.f4)?,
        g_hat: pick(&|x| &x.g_hat)?,
    })
}

/// Causal long-term logits for a batch of clips, one tensor per frame.
pub fn longterm_sequence(lt: &LongTerm, trunks: &[&ClipTrunk]) -> Result<Vec<Tensor>> {
    let len = trunks.first().map_or(0, |c| c.logits.dim(0).unwrap_or(0));
    let mut pool = lt.new_pool()?;
    (0..len).map(|t| lt.step(&mut pool, &frame_of(trunks, t)?, t)).collect()
}

/// Trains the long-term head over a frozen short-term trunk whose features are
/// computed once per clip.
pub fn train_longterm(
    model: &Emip,
    lt: &LongTerm,
    train: &[ClipTensors],
    cfg: &StageConfig,
    seed: u64,
) -> Result<(StageLog, Adam)> {
    require_clips(train, 2, "train-longterm")?;
    for g in model.groups() {
        model.store.set_frozen(&g, true);
    }
    let cache: Vec<ClipTrunk> = train.iter().map(|c| clip_trunk(model, c)).collect::<Result<_>>()?;
    let groups: Vec<String> = LONGTERM_GROUPS.iter().map(|g| g.to_string()).collect();
    let mut sampler = Sampler::new(seed, "longterm");
    run_stage(&model.store, &groups, cfg, |_| {
        let picked = sampler.clips(train, cfg.batch_size);
        let len = picked.iter().map(|&c| train[c].len()).min().unwrap_or(0);
        let trunks: Vec<ClipTrunk> = picked
            .iter()
            .map(|&c| {
                let k = &cache[c];
                Ok(ClipTrunk {
                    trunk: TrunkFeatures {
                        f2: k.trunk.f2.narrow(0, 0, len)?,
                        f3: k.trunk.f3.narrow(0, 0, len)?,
                        f4: k.trunk.f4.narrow(0, 0, len)?,
                        g_hat: k.trunk.g_hat.narrow(0, 0, len)?,
                    },
                    logits: k.logits.narrow(0, 0, len)?,
                })
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&ClipTrunk> = trunks.iter().collect();
        let logits = longterm_sequence(lt, &refs)?;
        let mut total: Option<Tensor> = None;
        let mut report = LossReport::default();
        let frames = (len - 1) as f64;
        for (t, lg) in logits.iter().enumerate().skip(1) {
            let masks: Vec<Tensor> = picked
                .iter()
                .map(|&c| Ok(train[c].masks.narrow(0, t, 1)?))
                .collect::<Result<_>>()?;
            let seg = seg_loss(lg, &Tensor::cat(&masks, 0)?)?;
            let r = total_loss(&seg, None)?.report;
            report.l_total += r.l_total / frames;
            report.l_seg += r.l_seg / frames;
            report.l_iou += r.l_iou / frames;
            report.l_bce += r.l_bce / frames;
            report.l_eloss += r.l_eloss / frames;
            total = Some(match total {
                Some(acc) => (acc + seg.total)?,
                None => seg.total,
            });
        }
        let total = total.expect("clips have at least two frames");
        Ok(((total / frames)?, report))
    })
}

/// Initializes the long-term collector and decoder from their short-term
/// counterparts.
pub fn warm_start_longterm(store: &ParamStore) -> Result<usize> {
    Ok(store.copy_prefix("motion_collector.f2", "mc_lt")? + store.copy_prefix("decoder", "ncd_lt")?)
}
