//! The desk pipeline and the ablation grid.
//!
//! ```text
//! datagen ─┬─ alpha=1 clips ──> pretrain-flow ──┐
//!          └─ alpha=0.5 clips ─> pretrain-static ┴─> train (one run per row) ─> eval
//!                                                     └─ full row ─> train-longterm ─> eval
//! ```
//!
//! Every ablation row starts from the same two pre-trained checkpoints and
//! the same seed; the only differences between rows are their ablation flags,
//! which each row records as a diff against the full model.

use candle_core::DType;
use emip_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, RunConfig};
use crate::dataset::{generate, select, to_tensors, ClipTensors, DatagenConfig, Split};
use crate::error::Result;
use crate::eval::{flow_epe_by_region, predict_short_term, score};
use crate::longterm::{LongTerm, LONGTERM_GROUPS};
use crate::model::{Emip, SHORT_TERM_GROUPS};
use crate::params::ParamStore;
use crate::train::{flow_epe, pretrain_flow, train_static, train_video, StageLog};

/// Train / val / test tensors of one generated dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<ClipTensors>,
    pub val: Vec<ClipTensors>,
    pub test: Vec<ClipTensors>,
}

impl SplitData {
    pub fn generate(cfg: &DatagenConfig) -> Result<Self> {
        let records = generate(cfg)?;
        Ok(Self {
            train: to_tensors(&select(&records, Split::Train))?,
            val: to_tensors(&select(&records, Split::Val))?,
            test: to_tensors(&select(&records, Split::Test))?,
        })
    }
}

/// Datasets of the desk recipe: 200 clips of 8 frames at alpha 1 for the
/// video stages, and an alpha 0.5 set for static pre-training. Frames of one
/// clip share a background, so the stills use many short clips instead.
pub fn desk_datagen(cfg: &RunConfig) -> (DatagenConfig, DatagenConfig) {
    let video = DatagenConfig {
        clips: 200,
        frames: 8,
        height: cfg.height,
        width: cfg.width,
        alpha: 1.0,
        seed: cfg.seed,
        ..DatagenConfig::default()
    };
    let stills = DatagenConfig {
        clips: 800,
        frames: 2,
        alpha: 0.5,
        seed: cfg.seed.wrapping_add(1),
        ..video.clone()
    };
    (video, stills)
}

/// A fresh parameter store for `cfg` holding every group of the model.
pub fn build_model(cfg: &RunConfig, ablation: &Ablation) -> Result<Emip> {
    let store = ParamStore::new(cfg.seed, DType::F32);
    Emip::new(&store, &cfg.model, ablation, cfg.height, cfg.width)
}

fn groups(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Flow pre-training; returns the `flownet` checkpoint, its log and val EPE.
pub fn stage_flow(cfg: &RunConfig, data: &SplitData) -> Result<(Checkpoint, StageLog, f64)> {
    let model = build_model(cfg, &Ablation::default())?;
    let (log, opt) = pretrain_flow(&model, &data.train, &cfg.flow, cfg.seed)?;
    let epe = flow_epe(&model, &data.val)?;
    model.store.set_frozen("flownet", true);
    let ck = Checkpoint::capture(&model.store, &groups(&["flownet"]), "flow", cfg, Some(&opt))?;
    Ok((ck, log, epe))
}

/// Static pre-training; returns the backbone + decoder checkpoint, its log
/// and the mean validation IoU on still frames.
pub fn stage_static(cfg: &RunConfig, stills: &SplitData) -> Result<(Checkpoint, StageLog, f64)> {
    let model = build_model(cfg, &Ablation::default())?;
    let (log, opt) = train_static(&model, &stills.train, &cfg.static_stage, cfg.seed)?;
    let preds = stills
        .val
        .iter()
        .map(|c| crate::eval::predict_static(&model, c))
        .collect::<Result<Vec<_>>>()?;
    let report = score(&preds, &stills.val, cfg.height, cfg.width)?;
    let ck = Checkpoint::capture(&model.store, &groups(&["backbone", "decoder"]), "static", cfg, Some(&opt))?;
    Ok((ck, log, report.mean.iou))
}

/// Builds the row's model, loads both pre-trained checkpoints and runs the
/// video stage.
pub fn stage_video(cfg: &RunConfig, ablation: &Ablation, flow: &Checkpoint, stills: &Checkpoint, train: &[ClipTensors]) -> Result<(Emip, StageLog)> {
    let model = build_model(cfg, ablation)?;
    flow.restore(&model.store, Some(&groups(&["flownet"])))?;
    stills.restore(&model.store, Some(&groups(&["backbone", "decoder"])))?;
    let (log, _) = train_video(&model, train, &cfg.video, cfg.seed)?;
    Ok((model, log))
}

/// Checkpoint of every short-term group of a trained model.
pub fn short_term_checkpoint(model: &Emip, cfg: &RunConfig) -> Result<Checkpoint> {
    Checkpoint::capture(&model.store, &model.groups(), "video", cfg, None)
}

/// `(total, trainable, trainable / total)`.
pub fn count_params(store: &ParamStore) -> (usize, usize, f64) {
    let total = store.count_total();
    let trainable = store.count_trainable();
    (total, trainable, if total == 0 { 0.0 } else { trainable as f64 / total as f64 })
}

/// Parameter count of the long-term configuration with the short-term trunk
/// frozen: `(total, trainable, fraction)`.
pub fn longterm_param_count(cfg: &RunConfig) -> Result<(usize, usize, f64)> {
    let model = build_model(cfg, &cfg.ablation)?;
    LongTerm::new(&model.store, &cfg.model)?;
    for g in SHORT_TERM_GROUPS {
        model.store.set_frozen(g, true);
    }
    for g in LONGTERM_GROUPS {
        model.store.set_frozen(g, false);
    }
    Ok(count_params(&model.store))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    /// Flags that differ from the full model.
    pub diff: Vec<String>,
    pub metrics: MetricReport,
    pub epe_inside: Option<f64>,
    pub epe_outside: Option<f64>,
    pub final_loss: f64,
    pub seconds: f64,
}

/// The default grid: the component rows (baseline, +MC, +CF+MC), the flow
/// freezing row and the self-supervision row.
pub fn default_grid() -> Vec<(String, Ablation)> {
    let full = Ablation::default();
    vec![
        (
            "baseline".to_string(),
            Ablation {
                use_cf: false,
                use_mc: false,
                ..full.clone()
            },
        ),
        (
            "+MC".to_string(),
            Ablation {
                use_cf: false,
                ..full.clone()
            },
        ),
        ("+CF+MC".to_string(), full.clone()),
        (
            "full-tune".to_string(),
            Ablation {
                freeze_flow: false,
                ..full.clone()
            },
        ),
        (
            "no-selfsup".to_string(),
            Ablation {
                use_selfsup: false,
                ..full
            },
        ),
    ]
}

/// Trains and scores one row on `test`.
pub fn run_row(
    cfg: &RunConfig,
    name: &str,
    ablation: &Ablation,
    flow: &Checkpoint,
    stills: &Checkpoint,
    train: &[ClipTensors],
    test: &[ClipTensors],
) -> Result<(AblationRow, Emip)> {
    let (model, log) = stage_video(cfg, ablation, flow, stills, train)?;
    let preds = test.iter().map(|c| predict_short_term(&model, c)).collect::<Result<Vec<_>>>()?;
    let metrics = score(&preds, test, cfg.height, cfg.width)?;
    let (epe_inside, epe_outside) = if ablation.needs_flow() {
        let (i, o) = flow_epe_by_region(&model, test)?;
        (Some(i), Some(o))
    } else {
        (None, None)
    };
    let row = AblationRow {
        name: name.to_string(),
        ablation: ablation.clone(),
        diff: Ablation::default().diff(ablation),
        metrics,
        epe_inside,
        epe_outside,
        final_loss: log.losses.last().map_or(f64::NAN, |r| r.l_total),
        seconds: log.seconds,
    };
    Ok((row, model))
}

/// Fixed-width summary of a finished grid.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}  {}\n",
        "row", "S_alpha", "F_w", "MAE", "Dice", "IoU", "EPE_in", "EPE_out", "diff"
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let m = &r.metrics.mean;
        out.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9} {:>9}  {}\n",
            r.name,
            m.s_alpha,
            m.f_beta_w,
            m.mae,
            m.dice,
            m.iou,
            opt(r.epe_inside),
            opt(r.epe_outside),
            if r.diff.is_empty() { "(full model)".to_string() } else { r.diff.join(", ") }
        ));
    }
    out
}
