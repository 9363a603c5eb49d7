//! Inference, scoring and qualitative dumps.
//!
//! Frame 0 of every clip has no predecessor (the short-term model pairs it
//! with itself), so scores cover frames `1..T`.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use emip_core::flowviz::flow_to_rgb;
use emip_core::metrics::{score_frame, FrameScores, MetricReport};
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_to_rgb, ClipRecord, ClipTensors};
use crate::error::{EmipError, Result};
use crate::longterm::LongTerm;
use crate::losses::epe_sum;
use crate::model::{previous_indices, Emip};
use crate::nn::host;
use crate::train::{clip_trunk, longterm_sequence};

/// Per-frame foreground probabilities, row-major `[H * W]` each.
pub type ClipProbs = Vec<Vec<f64>>;

fn to_probs(logits: &Tensor) -> Result<ClipProbs> {
    let t = logits.dim(0)?;
    let p = candle_nn::ops::sigmoid(&logits.to_dtype(DType::F64)?)?;
    (0..t).map(|i| host(&p.get(i)?)).collect()
}

fn previous_frames(clip: &ClipTensors) -> Result<Tensor> {
    let idx = Tensor::new(previous_indices(clip.len()).as_slice(), clip.frames.device())?;
    Ok(clip.frames.index_select(&idx, 0)?)
}

/// Short-term predictions for every frame of a clip.
pub fn predict_short_term(model: &Emip, clip: &ClipTensors) -> Result<ClipProbs> {
    to_probs(&model.forward_pair(&clip.frames, &previous_frames(clip)?)?.logits)
}

/// Appearance-only predictions.
pub fn predict_static(model: &Emip, clip: &ClipTensors) -> Result<ClipProbs> {
    to_probs(&model.forward_static(&clip.frames)?)
}

/// Long-term predictions; frame `t` only sees frames `0..=t`.
pub fn predict_longterm(model: &Emip, lt: &LongTerm, clip: &ClipTensors) -> Result<ClipProbs> {
    let trunk = clip_trunk(model, clip)?;
    let logits = longterm_sequence(lt, &[&trunk])?;
    logits.iter().map(|l| Ok(to_probs(l)?.remove(0))).collect()
}

/// Scores frames `1..T` of each clip.
pub fn score(preds: &[ClipProbs], clips: &[ClipTensors], height: usize, width: usize) -> Result<MetricReport> {
    if preds.len() != clips.len() {
        return Err(EmipError::Shape(format!("{} predictions for {} clips", preds.len(), clips.len())));
    }
    let mut rows = Vec::with_capacity(clips.len());
    for (p, c) in preds.iter().zip(clips) {
        let frames: Vec<FrameScores> = (1..c.len())
            .map(|t| score_frame(&p[t], &c.mask_bits[t], height, width))
            .collect::<std::result::Result<_, _>>()?;
        rows.push((c.id.clone(), frames));
    }
    Ok(MetricReport::from_clips(rows))
}

/// Mean flow EPE inside and outside the ground-truth mask, using the flow the
/// model actually computes (with the camouflage prompt when enabled).
pub fn flow_epe_by_region(model: &Emip, clips: &[ClipTensors]) -> Result<(f64, f64)> {
    let (h, w) = model.input_size();
    let (mut si, mut ki, mut so, mut ko) = (0.0, 0.0, 0.0, 0.0);
    for c in clips {
        let n = c.len() - 1;
        let cur = c.frames.narrow(0, 1, n)?;
        let prev = c.frames.narrow(0, 0, n)?;
        let pyramid = model.backbone.forward(&cur)?;
        let flow = model.flow(&cur, &prev, Some(&pyramid))?.full_resolution(h, w)?;
        let gt = c.back_flow.narrow(0, 1, n)?;
        let inside = c.masks.narrow(0, 1, n)?;
        let outside = inside.affine(-1.0, 1.0)?;
        let (s, k) = epe_sum(&flow, &gt, Some(&inside))?;
        si += s;
        ki += k;
        let (s, k) = epe_sum(&flow, &gt, Some(&outside))?;
        so += s;
        ko += k;
    }
    let mean = |s: f64, k: f64| if k > 0.0 { s / k } else { 0.0 };
    Ok((mean(si, ki), mean(so, ko)))
}

/// Full evaluation output written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub metrics: MetricReport,
    pub epe_inside: Option<f64>,
    pub epe_outside: Option<f64>,
}

fn save_png(path: &Path, img: image::DynamicImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EmipError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| EmipError::data(path, e.to_string()))
}

/// Writes `frame | ground truth | prediction` strips, one PNG per frame.
pub fn dump_overlays(dir: &Path, record: &ClipRecord, probs: &ClipProbs) -> Result<()> {
    let clip = &record.clip;
    let (h, w) = (clip.height(), clip.width());
    for (t, p) in probs.iter().enumerate() {
        let frame = frame_to_rgb(clip.frame(t), h, w);
        let mut strip = image::RgbImage::new(3 * w as u32, h as u32);
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                let i = y as usize * w + x as usize;
                let px = *frame.get_pixel(x, y);
                strip.put_pixel(x, y, px);
                let g = if clip.mask(t)[i] != 0 { 255 } else { 0 };
                strip.put_pixel(x + w as u32, y, image::Rgb([g, g, g]));
                // prediction tinted red over the frame
                let a = p[i].clamp(0.0, 1.0);
                let tint = |c: u8, target: f64| (f64::from(c) * (1.0 - a) + target * a).round() as u8;
                strip.put_pixel(x + 2 * w as u32, y, image::Rgb([tint(px[0], 255.0), tint(px[1], 0.0), tint(px[2], 0.0)]));
            }
        }
        save_png(&dir.join(&record.id).join(format!("{t:05}.png")), strip.into())?;
    }
    Ok(())
}

/// Renders the model's flow for frames `1..T` with the flow colour wheel.
pub fn dump_flow(dir: &Path, model: &Emip, clip: &ClipTensors) -> Result<()> {
    let (h, w) = model.input_size();
    let n = clip.len() - 1;
    let cur = clip.frames.narrow(0, 1, n)?;
    let prev = clip.frames.narrow(0, 0, n)?;
    let pyramid = model.backbone.forward(&cur)?;
    let flow = model.flow(&cur, &prev, Some(&pyramid))?.full_resolution(h, w)?;
    for i in 0..n {
        let hwc = flow.get(i)?.permute((1, 2, 0))?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let rgb = image::RgbImage::from_raw(w as u32, h as u32, flow_to_rgb(&hwc)).expect("flow image matches its size");
        save_png(&dir.join(&clip.id).join(format!("{:05}.png", i + 1)), rgb.into())?;
    }
    Ok(())
}

/// Reads `pred_dir/<clip>/<t>.png` grayscale probability maps.
pub fn read_prediction_dir(pred_dir: &Path, clips: &[ClipTensors], height: usize, width: usize) -> Result<Vec<ClipProbs>> {
    clips
        .iter()
        .map(|c| {
            (0..c.len())
                .map(|t| {
                    let path = pred_dir.join(&c.id).join(format!("{t:05}.png"));
                    if t == 0 && !path.exists() {
                        return Ok(vec![0.0; height * width]);
                    }
                    let img = image::open(&path).map_err(|e| EmipError::data(&path, e.to_string()))?.to_luma8();
                    if (img.height() as usize, img.width() as usize) != (height, width) {
                        return Err(EmipError::data(&path, format!("expected {height}x{width}")));
                    }
                    Ok(img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect())
                })
                .collect()
        })
        .collect()
}

/// Writes probability maps as 8-bit grayscale PNGs in the layout read back by
/// [`read_prediction_dir`].
pub fn write_prediction_dir(dir: &Path, id: &str, probs: &ClipProbs, height: usize, width: usize) -> Result<()> {
    for (t, p) in probs.iter().enumerate() {
        let px: Vec<u8> = p.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(width as u32, height as u32, px).expect("prediction matches its size");
        save_png(&dir.join(id).join(format!("{t:05}.png")), img.into())?;
    }
    Ok(())
}
