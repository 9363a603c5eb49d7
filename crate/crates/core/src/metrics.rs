//! Segmentation quality metrics for probability maps against binary masks.
//!
//! Conventions:
//! - predictions are probabilities in `[0, 1]`, ground truth is `bool`;
//! - Dice and IoU binarize with `pred >= threshold` (0.5 by default), and two
//!   empty sets score 1;
//! - max F sweeps the 255 thresholds `k / 255`, `k = 1..=255`, with beta^2 = 0.3;
//! - weighted F uses beta^2 = 1 and scores 0 when the mask is empty;
//! - dataset means are taken per clip first, then over clips.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

const EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("prediction has {pred} pixels but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("{height}x{width} map needs {expected} pixels, got {actual}")]
    ShapeMismatch {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
}

fn check_len(pred: &[f64], gt: &[bool]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

fn check_shape(pred: &[f64], gt: &[bool], height: usize, width: usize) -> Result<(), MetricError> {
    check_len(pred, gt)?;
    if pred.len() != height * width {
        return Err(MetricError::ShapeMismatch {
            height,
            width,
            expected: height * width,
            actual: pred.len(),
        });
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn mae(pred: &[f64], gt: &[bool]) -> Result<f64, MetricError> {
    check_len(pred, gt)?;
    Ok(mean(
        pred.iter()
            .zip(gt)
            .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs()),
    ))
}

/// Returns `(dice, iou)` after binarizing `pred >= threshold`.
pub fn dice_iou(pred: &[f64], gt: &[bool], threshold: f64) -> Result<(f64, f64), MetricError> {
    check_len(pred, gt)?;
    let (mut inter, mut p_area, mut g_area) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let p = p >= threshold;
        inter += (p && g) as usize;
        p_area += p as usize;
        g_area += g as usize;
    }
    let union = p_area + g_area - inter;
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    Ok((
        2.0 * inter as f64 / (p_area + g_area) as f64,
        inter as f64 / union as f64,
    ))
}

fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean(values.iter().copied());
    let sigma = if n > 1 {
        libm::sqrt(values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| !g)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let u = fg.len() as f64 / pred.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Structural similarity of one quadrant, as used by the region term.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = mean(pred.iter().copied());
    let y = mean(gt.iter().copied());
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        sxx += (p - x) * (p - x);
        syy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let denom = n - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Foreground centroid in 1-based column/row units, rounded half away from zero.
fn centroid(gt: &[bool], height: usize, width: usize) -> (usize, usize) {
    let total = gt.iter().filter(|&&g| g).count();
    if total == 0 {
        return (
            libm::round(width as f64 / 2.0) as usize,
            libm::round(height as f64 / 2.0) as usize,
        );
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in gt.iter().enumerate().filter(|(_, &g)| g) {
        sx += (i % width + 1) as f64;
        sy += (i / width + 1) as f64;
    }
    (
        libm::round(sx / total as f64) as usize,
        libm::round(sy / total as f64) as usize,
    )
}

fn s_region(pred: &[f64], gt: &[bool], height: usize, width: usize) -> f64 {
    let (cx, cy) = centroid(gt, height, width);
    let area = (height * width) as f64;
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, width),
        (cy, height, 0, cx),
        (cy, height, cx, width),
    ];
    let mut score = 0.0;
    for (r0, r1, c0, c1) in quads {
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let mut p = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut g = Vec::with_capacity(p.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[r * width + c]);
                g.push(if gt[r * width + c] { 1.0 } else { 0.0 });
            }
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / area;
        score += weight * region_ssim(&p, &g);
    }
    score
}

/// Structure measure: `alpha * S_object + (1 - alpha) * S_region`, floored at 0.
///
/// An all-background mask scores `1 - mean(pred)`, an all-foreground mask `mean(pred)`.
pub fn s_measure(
    pred: &[f64],
    gt: &[bool],
    height: usize,
    width: usize,
    alpha: f64,
) -> Result<f64, MetricError> {
    check_shape(pred, gt, height, width)?;
    let fg = gt.iter().filter(|&&g| g).count();
    if fg == 0 {
        return Ok(1.0 - mean(pred.iter().copied()));
    }
    if fg == gt.len() {
        return Ok(mean(pred.iter().copied()));
    }
    let q = alpha * s_object(pred, gt) + (1.0 - alpha) * s_region(pred, gt, height, width);
    Ok(q.max(0.0))
}

/// Exact Euclidean distance to the nearest foreground pixel and that pixel's index.
///
/// Ties are broken towards the smallest column, then the smallest row.
/// Column pass finds the nearest foreground row per column; row pass then
/// minimizes `(x - c)^2 + dy(c)^2` over every column `c`.
pub fn distance_to_foreground(gt: &[bool], height: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    const NONE: usize = usize::MAX;
    // nearest foreground row in the same column, per pixel
    let mut near_row = vec![NONE; height * width];
    for c in 0..width {
        let mut last = NONE;
        for r in 0..height {
            if gt[r * width + c] {
                last = r;
            }
            near_row[r * width + c] = last;
        }
        let mut next = NONE;
        for r in (0..height).rev() {
            if gt[r * width + c] {
                next = r;
            }
            let up = near_row[r * width + c];
            near_row[r * width + c] = match (up, next) {
                (NONE, n) => n,
                (u, NONE) => u,
                (u, n) => {
                    if r - u <= n - r {
                        u
                    } else {
                        n
                    }
                }
            };
        }
    }
    let mut dist = vec![0.0; height * width];
    let mut index = vec![0; height * width];
    for r in 0..height {
        for x in 0..width {
            let mut best = (u64::MAX, NONE);
            for c in 0..width {
                let nr = near_row[r * width + c];
                if nr == NONE {
                    continue;
                }
                let dy = r.abs_diff(nr) as u64;
                let dx = x.abs_diff(c) as u64;
                let d2 = dx * dx + dy * dy;
                if d2 < best.0 {
                    best = (d2, nr * width + c);
                }
            }
            dist[r * width + x] = libm::sqrt(best.0 as f64);
            index[r * width + x] = best.1;
        }
    }
    (dist, index)
}

/// `size x size` Gaussian normalized over the grid.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 - half, (i / size) as f64 - half);
            libm::exp(-(x * x + y * y) / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Same-size correlation with zero padding.
fn filter_zero_pad(src: &[f64], height: usize, width: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for r in 0..height as isize {
        for c in 0..width as isize {
            let mut acc = 0.0;
            for ky in 0..size as isize {
                let rr = r + ky - half;
                if rr < 0 || rr >= height as isize {
                    continue;
                }
                for kx in 0..size as isize {
                    let cc = c + kx - half;
                    if cc < 0 || cc >= width as isize {
                        continue;
                    }
                    acc += kernel[(ky * size as isize + kx) as usize] * src[(rr * width as isize + cc) as usize];
                }
            }
            out[(r * width as isize + c) as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure with dependency- and distance-weighted errors (beta^2 = 1).
pub fn weighted_f(pred: &[f64], gt: &[bool], height: usize, width: usize) -> Result<f64, MetricError> {
    check_shape(pred, gt, height, width)?;
    if !gt.iter().any(|&g| g) {
        return Ok(0.0);
    }
    let (dist, nearest) = distance_to_foreground(gt, height, width);
    let err: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .collect();
    let err_t: Vec<f64> = (0..err.len())
        .map(|i| if gt[i] { err[i] } else { err[nearest[i]] })
        .collect();
    let kernel = gaussian_kernel(7, 5.0);
    let blurred = filter_zero_pad(&err_t, height, width, &kernel, 7);
    let (mut tp_w, mut fp_w, mut fg_err, mut fg_n) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..err.len() {
        if gt[i] {
            let e = if blurred[i] < err[i] { blurred[i] } else { err[i] };
            fg_err += e;
            fg_n += 1;
        } else {
            let weight = 2.0 - libm::exp(libm::log(0.5) / 5.0 * dist[i]);
            fp_w += err[i] * weight;
        }
    }
    tp_w += fg_n as f64 - fg_err;
    let recall = 1.0 - fg_err / fg_n as f64;
    let precision = tp_w / (tp_w + fp_w + EPS);
    Ok(2.0 * recall * precision / (recall + precision + EPS))
}

/// Maximum F-measure (beta^2 = 0.3) over thresholds `k / 255`, `k = 1..=255`.
pub fn max_f(pred: &[f64], gt: &[bool]) -> Result<f64, MetricError> {
    check_len(pred, gt)?;
    const BETA2: f64 = 0.3;
    // bucket each prediction by the highest threshold it clears
    let mut pos = [0usize; 256];
    let mut neg = [0usize; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        let mut k = libm::floor(p * 255.0).clamp(0.0, 255.0) as usize;
        // guard against p * 255 rounding below an exactly representable k / 255
        while k < 255 && p >= (k + 1) as f64 / 255.0 {
            k += 1;
        }
        while k > 0 && p < k as f64 / 255.0 {
            k -= 1;
        }
        if g {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let total_pos = gt.iter().filter(|&&g| g).count() as f64;
    let (mut tp, mut fp, mut best) = (0.0, 0.0, 0.0f64);
    for k in (1..=255).rev() {
        tp += pos[k] as f64;
        fp += neg[k] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if total_pos > 0.0 { tp / total_pos } else { 0.0 };
        let denom = BETA2 * precision + recall;
        let f = if denom > 0.0 {
            (1.0 + BETA2) * precision * recall / denom
        } else {
            0.0
        };
        best = best.max(f);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub max_f: f64,
    pub mae: f64,
    pub dice: f64,
    pub iou: f64,
}

impl FrameScores {
    fn fields(&self) -> [f64; 6] {
        [self.s_alpha, self.f_beta_w, self.max_f, self.mae, self.dice, self.iou]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Self {
            s_alpha: f[0],
            f_beta_w: f[1],
            max_f: f[2],
            mae: f[3],
            dice: f[4],
            iou: f[5],
        }
    }

    pub fn average(scores: &[FrameScores]) -> FrameScores {
        let mut acc = [0.0; 6];
        for s in scores {
            for (a, v) in acc.iter_mut().zip(s.fields()) {
                *a += v;
            }
        }
        let n = scores.len().max(1) as f64;
        Self::from_fields(acc.map(|a| a / n))
    }
}

/// All metrics for one frame with the default parameters.
pub fn score_frame(pred: &[f64], gt: &[bool], height: usize, width: usize) -> Result<FrameScores, MetricError> {
    let (dice, iou) = dice_iou(pred, gt, 0.5)?;
    Ok(FrameScores {
        s_alpha: s_measure(pred, gt, height, width, 0.5)?,
        f_beta_w: weighted_f(pred, gt, height, width)?,
        max_f: max_f(pred, gt)?,
        mae: mae(pred, gt)?,
        dice,
        iou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub frames: usize,
    pub mean: FrameScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Unweighted mean of the per-clip means.
    pub mean: FrameScores,
    pub clips: Vec<ClipScores>,
}

impl MetricReport {
    pub fn from_clips<I>(clips: I) -> Self
    where
        I: IntoIterator<Item = (String, Vec<FrameScores>)>,
    {
        let clips: Vec<ClipScores> = clips
            .into_iter()
            .map(|(clip_id, frames)| ClipScores {
                clip_id,
                frames: frames.len(),
                mean: FrameScores::average(&frames),
            })
            .collect();
        let means: Vec<FrameScores> = clips.iter().map(|c| c.mean).collect();
        Self {
            mean: FrameScores::average(&means),
            clips,
        }
    }

    /// Fixed-width table in the column order S_alpha, F_beta^w, M, Dice, IoU, maxF.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "clip", "S_alpha", "F_w", "MAE", "Dice", "IoU", "maxF"
        );
        let row = |name: &str, s: &FrameScores| {
            format!(
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                name, s.s_alpha, s.f_beta_w, s.mae, s.dice, s.iou, s.max_f
            )
        };
        for c in &self.clips {
            out.push_str(&row(&c.clip_id, &c.mean));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }
}
