//! Training objectives.
//!
//! - Flow self-supervision: warp frame `t - 1` with the predicted backward
//!   flow and score the reconstruction of frame `t` by `1 - mean SSIM`.
//! - Segmentation: soft IoU + BCE on logits + enhanced-alignment loss.
//! - Total: the unweighted sum of the two.
//!
//! Every term is computed per sample and then averaged over the batch.

use candle_core::{DType, Tensor};
use emip_core::photometric::{gaussian_taps, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

use crate::error::{EmipError, Result};
use crate::nn::host;

/// Smoothing constant of the soft IoU.
pub const IOU_EPS: f64 = 1.0;
/// Denominator guard of the alignment matrix.
pub const ELOSS_EPS: f64 = 1e-8;

/// Backward bilinear warp: `out[p] = image[p + flow[p]]`, sample positions
/// clamped to the border. `flow: [B, 2, H, W]` in pixels, `image: [B, C, H, W]`.
pub fn warp(flow: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = image.dims4()?;
    if flow.dims() != [b, 2, h, w] {
        return Err(EmipError::Shape(format!("flow {:?} does not match image {:?}", flow.dims(), image.dims())));
    }
    if h < 2 || w < 2 {
        return Err(EmipError::Shape(format!("warp needs at least 2x2 pixels, got {h}x{w}")));
    }
    let dev = image.device();
    let dt = image.dtype();
    let gx = Tensor::arange(0u32, w as u32, dev)?.to_dtype(dt)?.reshape((1, 1, 1, w))?;
    let gy = Tensor::arange(0u32, h as u32, dev)?.to_dtype(dt)?.reshape((1, 1, h, 1))?;
    let x = flow.narrow(1, 0, 1)?.broadcast_add(&gx)?.clamp(0.0, (w - 1) as f64)?;
    let y = flow.narrow(1, 1, 1)?.broadcast_add(&gy)?.clamp(0.0, (h - 1) as f64)?;
    let x0 = x.detach().floor()?.clamp(0.0, (w - 2) as f64)?;
    let y0 = y.detach().floor()?.clamp(0.0, (h - 2) as f64)?;
    let wx = (&x - &x0)?;
    let wy = (&y - &y0)?;

    let base = ((y0 * w as f64)? + x0)?.to_dtype(DType::U32)?.reshape((b, 1, h * w))?;
    let flat = image.reshape((b, c, h * w))?;
    let sample = |offset: u32| -> Result<Tensor> {
        let idx = base.broadcast_add(&Tensor::new(offset, dev)?)?;
        let idx = idx.broadcast_as((b, c, h * w))?.contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((b, c, h, w))?)
    };
    let (v00, v01) = (sample(0)?, sample(1)?);
    let (v10, v11) = (sample(w as u32)?, sample(w as u32 + 1)?);
    let one_x = wx.affine(-1.0, 1.0)?;
    let one_y = wy.affine(-1.0, 1.0)?;
    let top = (v00.broadcast_mul(&one_x)? + v01.broadcast_mul(&wx)?)?;
    let bottom = (v10.broadcast_mul(&one_x)? + v11.broadcast_mul(&wx)?)?;
    Ok((top.broadcast_mul(&one_y)? + bottom.broadcast_mul(&wy)?)?)
}

/// Mean SSIM per sample over valid window positions and channels, `[B]`.
pub fn ssim_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if a.dims() != b.dims() {
        return Err(EmipError::Shape(format!("SSIM inputs differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EmipError::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (kx, ky) = (band_matrix(&taps, w, a)?, band_matrix(&taps, h, a)?.t()?);
    // Separable valid-mode Gaussian blur as two banded matrix products.
    let blur = |x: &Tensor| -> Result<Tensor> {
        let rows = x.reshape((n * c, h, w))?.broadcast_matmul(&kx)?;
        Ok(ky.broadcast_matmul(&rows)?)
    };
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let s_aa = (blur(&a.sqr()?)? - &mu_aa)?;
    let s_bb = (blur(&b.sqr()?)? - &mu_bb)?;
    let s_ab = (blur(&(a * b)?)? - &mu_ab)?;
    let num = ((mu_ab * 2.0)? + c1)?.mul(&((s_ab * 2.0)? + c2)?)?;
    let den = ((mu_aa + mu_bb)? + c1)?.mul(&((s_aa + s_bb)? + c2)?)?;
    let map = (num / den)?;
    Ok(map.reshape((n, ()))?.mean(1)?)
}

/// `[n, n - k + 1]` matrix whose column `j` holds `taps` at rows `j..j + k`.
fn band_matrix(taps: &[f64], n: usize, like: &Tensor) -> Result<Tensor> {
    let k = taps.len();
    let m = n + 1 - k;
    let mut band = vec![0f64; n * m];
    for j in 0..m {
        for (i, t) in taps.iter().enumerate() {
            band[(j + i) * m + j] = *t;
        }
    }
    Ok(Tensor::from_vec(band, (n, m), like.device())?.to_dtype(like.dtype())?)
}

/// `1 - mean SSIM(I_t, warp(flow, I_{t-1}))`, averaged over the batch.
pub fn flow_loss(frame_t: &Tensor, frame_prev: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let recon = warp(flow, frame_prev)?;
    Ok(ssim_per_sample(frame_t, &recon)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Segmentation loss terms, each a batch-mean scalar tensor.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub iou: Tensor,
    pub bce: Tensor,
    pub eloss: Tensor,
    pub total: Tensor,
}

fn per_sample_sum(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.sum(1)?)
}

fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(1)?)
}

/// Rejects masks with values other than 0 and 1.
pub fn check_binary(gt: &Tensor) -> Result<()> {
    if host(gt)?.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(EmipError::Shape("ground-truth mask must be binary".into()));
    }
    Ok(())
}

/// IoU + BCE + enhanced-alignment loss for `logits, gt: [B, 1, H, W]`.
pub fn seg_loss(logits: &Tensor, gt: &Tensor) -> Result<SegLoss> {
    if logits.dims() != gt.dims() {
        return Err(EmipError::Shape(format!("logits {:?} vs mask {:?}", logits.dims(), gt.dims())));
    }
    check_binary(gt)?;
    let p = candle_nn::ops::sigmoid(logits)?;

    let inter = per_sample_sum(&(&p * gt)?)?;
    let union = ((per_sample_sum(&p)? + per_sample_sum(gt)?)? - &inter)?;
    let iou = ((inter + IOU_EPS)? / (union + IOU_EPS)?)?.affine(-1.0, 1.0)?.mean_all()?;

    // max(x, 0) - x g + log(1 + exp(-|x|))
    let bce_map = ((logits.relu()? - (logits * gt)?)? + logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    let bce = per_sample_mean(&bce_map)?.mean_all()?;

    let b = logits.dim(0)?;
    let mu_p = p.reshape((b, ()))?.mean_keepdim(1)?.reshape((b, 1, 1, 1))?;
    let mu_g = gt.reshape((b, ()))?.mean_keepdim(1)?.reshape((b, 1, 1, 1))?;
    let dp = p.broadcast_sub(&mu_p)?;
    let dg = gt.broadcast_sub(&mu_g)?;
    let phi = ((&dg * &dp)? * 2.0)?.div(&((dg.sqr()? + dp.sqr()?)? + ELOSS_EPS)?)?;
    let enhanced = (phi + 1.0)?.sqr()?.affine(0.25, 0.0)?;
    let eloss = per_sample_mean(&enhanced)?.affine(-1.0, 1.0)?.mean_all()?;

    let total = ((&iou + &bce)? + &eloss)?;
    Ok(SegLoss { iou, bce, eloss, total })
}

/// Logged scalar values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_total: f64,
    pub l_seg: f64,
    pub l_flow: f64,
    pub l_iou: f64,
    pub l_bce: f64,
    pub l_eloss: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_total,l_seg,l_flow,l_iou,l_bce,l_eloss";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.l_total, self.l_seg, self.l_flow, self.l_iou, self.l_bce, self.l_eloss
        )
    }
}

/// The joint objective and its logged parts.
pub struct TotalLoss {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `l_total = l_seg + l_flow`; a missing flow term counts as zero.
pub fn total_loss(seg: &SegLoss, flow: Option<&Tensor>) -> Result<TotalLoss> {
    let total = match flow {
        Some(f) => (&seg.total + f)?,
        None => seg.total.clone(),
    };
    let report = LossReport {
        l_total: scalar(&total)?,
        l_seg: scalar(&seg.total)?,
        l_flow: flow.map(scalar).transpose()?.unwrap_or(0.0),
        l_iou: scalar(&seg.iou)?,
        l_bce: scalar(&seg.bce)?,
        l_eloss: scalar(&seg.eloss)?,
    };
    Ok(TotalLoss { total, report })
}

/// Mean end-point error, `[B, 2, H, W]` fields, optionally restricted to a
/// `[B, 1, H, W]` 0/1 mask. Returns `(sum, count)` so callers can pool batches.
pub fn epe_sum(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<(f64, f64)> {
    let err = (pred - target)?.sqr()?.sum_keepdim(1)?.sqrt()?;
    match mask {
        Some(m) => Ok((scalar(&(err * m)?.sum_all()?)?, scalar(&m.sum_all()?)?)),
        None => Ok((scalar(&err.sum_all()?)?, err.elem_count() as f64)),
    }
}

/// Differentiable mean end-point error.
pub fn epe_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    // the small offset keeps the square root differentiable at zero error
    Ok(((pred - target)?.sqr()?.sum_keepdim(1)? + 1e-6)?.sqrt()?.mean_all()?)
}
