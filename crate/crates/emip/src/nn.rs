//! Layers on NCHW tensors built from [`Param`]s.

use candle_core::{DType, Tensor, D};

use crate::error::{EmipError, Result};
use crate::params::{Init, Param, Scope};

/// 2-D convolution with explicit zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    w: Param,
    b: Option<Param>,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(s: &Scope, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: s.weight("weight", &[cout, cin, k, k], init)?,
            b: Some(s.bias("bias", &[cout])?),
            stride,
            pad,
        })
    }

    /// `k x k` convolution, stride 1, same padding, He-initialized.
    pub fn same(s: &Scope, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::new(s, cin, cout, k, 1, k / 2, Init::kaiming(cin * k * k))
    }

    /// Same-padded convolution starting from all-zero weights.
    pub fn zeros(s: &Scope, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::new(s, cin, cout, k, 1, k / 2, Init::Zeros)
    }

    pub fn without_bias(mut self) -> Self {
        self.b = None;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pad > 0 {
            x.pad_with_zeros(2, self.pad, self.pad)?
                .pad_with_zeros(3, self.pad, self.pad)?
        } else {
            x.clone()
        };
        let y = x.conv2d(&self.w.t(), 0, self.stride, 1, 1)?;
        match &self.b {
            Some(b) => Ok(y.broadcast_add(&b.t().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Depth-wise 3x3 convolution, computed as nine shifted products.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3 {
    w: Param,
}

impl DepthwiseConv3 {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            w: s.weight("weight", &[channels, 1, 3, 3], Init::kaiming(9))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let taps = self.w.t().reshape((c, 9))?;
        let mut acc: Option<Tensor> = None;
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = taps.narrow(1, dy * 3 + dx, 1)?.reshape((1, c, 1, 1))?;
                let term = xp.narrow(2, dy, h)?.narrow(3, dx, w)?.broadcast_mul(&tap)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        Ok(acc.expect("nine taps"))
    }
}

/// Normalizes every pixel over its channels, then applies a per-channel affine.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    gamma: Param,
    beta: Param,
}

impl LayerNorm2d {
    pub const EPS: f64 = 1e-5;

    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.weight("gamma", &[channels], Init::Ones)?,
            beta: s.bias("beta", &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(y
            .broadcast_mul(&self.gamma.t().reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.beta.t().reshape((1, (), 1, 1))?)?)
    }
}

/// Layer norm over the last axis of a token tensor `[.., d]`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Param,
    beta: Param,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.weight("gamma", &[dim], Init::Ones)?,
            beta: s.bias("beta", &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + LayerNorm2d::EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma.t())?.broadcast_add(&self.beta.t())?)
    }
}

/// Exact (erf) GELU assembled from primitive ops, so autograd differentiates
/// it exactly; candle's fused `gelu_erf` backward uses a truncated constant
/// that is visible in finite-difference checks.
pub trait Gelu {
    fn gelu_exact(&self) -> candle_core::Result<Tensor>;
}

impl Gelu for Tensor {
    fn gelu_exact(&self) -> candle_core::Result<Tensor> {
        let cdf = ((self / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
        (self * cdf)? * 0.5
    }
}

/// Token-wise linear map `[.., din] -> [.., dout]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Param,
    b: Param,
}

impl Linear {
    pub fn new(s: &Scope, din: usize, dout: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: s.weight("weight", &[din, dout], init)?,
            b: s.bias("bias", &[dout])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w.t())?.broadcast_add(&self.b.t())?)
    }
}

/// Pre-norm residual block: `x + conv(gelu(conv(ln(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm: LayerNorm2d,
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        let fan = channels * 9;
        Ok(Self {
            norm: LayerNorm2d::new(&s.pp("norm"), channels)?,
            conv1: Conv::same(&s.pp("conv1"), channels, channels, 3)?,
            // small residual branch at start keeps deep stacks near identity
            conv2: Conv::new(&s.pp("conv2"), channels, channels, 3, 1, 1, Init::Kaiming { fan_in: fan, gain: 0.1 })?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm.forward(x)?)?.gelu_exact()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

/// Row-major `[n_out, n_in]` bilinear weights, half-pixel centers, edge clamped.
pub fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - f;
        m[i * n_in + i1] += f;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` via two matrix products.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(interp_matrix(h, oh), (oh, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(interp_matrix(w, ow), (ow, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let y = x.reshape((b * c, h, w))?.broadcast_matmul(&rx)?;
    let y = ry.broadcast_matmul(&y)?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// `[B, C, H, W] -> [B, H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H*W, C] -> [B, C, H, W]`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(EmipError::Shape(format!("{n} tokens cannot fill a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// `softmax(q k^T / sqrt(d)) v` for `q: [B, n, d]`, `k: [B, m, d]`, `v: [B, m, e]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let logits = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    let a = candle_nn::ops::softmax(&logits, D::Minus1)?;
    Ok(a.matmul(&v.contiguous()?)?)
}

/// Splits `[B, n, heads*dh]` into `[B*heads, n, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x.reshape((b, n, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * heads, n, d / heads))?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, n, dh) = x.dims3()?;
    Ok(x.reshape((bh / heads, heads, n, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((bh / heads, n, heads * dh))?)
}

/// Host-side copy of a tensor as `f64`.
pub fn host(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
