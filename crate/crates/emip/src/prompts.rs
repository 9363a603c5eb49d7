//! Cross-stream interaction blocks.
//!
//! One block design serves both directions. The camouflage feeder takes the
//! flow feature as query and the appearance feature as key/value; the motion
//! collector takes the appearance feature as query and the aligned matching
//! prompt as key/value. Each block is
//!
//! ```text
//! f_bar = q + CA(LN+Conv3(q), LN+Conv3(kv), LN+Conv3(kv))
//! out   = f_bar + C1( gelu(C3(C1(LN(f_bar)))) * C3(C1(LN(f_bar))) )
//! ```
//!
//! Queries and keys also carry a shared sine position code scaled by a
//! learnable scalar. The attention output projection and the last
//! feed-forward convolution start at zero, so a fresh block is an exact
//! identity on its query input.

use candle_core::Tensor;

use crate::error::{EmipError, Result};
use crate::flownet::{relative_matching, sine_position};
use crate::nn::{attention, from_tokens, merge_heads, split_heads, to_tokens, Conv, DepthwiseConv3, Gelu, LayerNorm2d};
use crate::params::{Init, Param, Scope};

/// Multi-head cross attention between two equally sized feature maps.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm_q: LayerNorm2d,
    q: Conv,
    norm_kv: LayerNorm2d,
    k: Conv,
    v: Conv,
    out: Conv,
    pos_scale: Param,
    heads: usize,
}

impl CrossAttention {
    pub fn new(s: &Scope, q_channels: usize, kv_channels: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(EmipError::Config(format!("{heads} heads do not divide width {dim}")));
        }
        if dim % 4 != 0 {
            return Err(EmipError::Config(format!("attention width {dim} is not a multiple of 4")));
        }
        Ok(Self {
            norm_q: LayerNorm2d::new(&s.pp("norm_q"), q_channels)?,
            q: Conv::same(&s.pp("q"), q_channels, dim, 3)?,
            norm_kv: LayerNorm2d::new(&s.pp("norm_kv"), kv_channels)?,
            k: Conv::same(&s.pp("k"), kv_channels, dim, 3)?,
            v: Conv::same(&s.pp("v"), kv_channels, dim, 3)?,
            out: Conv::zeros(&s.pp("out"), dim, q_channels, 1)?,
            pos_scale: s.weight("pos_scale", &[1], Init::Ones)?,
            heads,
        })
    }

    /// Projected attention output, same shape as `q_src`.
    pub fn forward(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let (bq, _, h, w) = q_src.dims4()?;
        let (bk, _, hk, wk) = kv_src.dims4()?;
        if bq != bk || h * w != hk * wk {
            return Err(EmipError::Shape(format!(
                "cross attention needs equal token counts: query {}x{} vs key/value {}x{}",
                h, w, hk, wk
            )));
        }
        let q = to_tokens(&self.q.forward(&self.norm_q.forward(q_src)?)?)?;
        let kv = self.norm_kv.forward(kv_src)?;
        let k = to_tokens(&self.k.forward(&kv)?)?;
        // The same position code on queries and keys lets a token find its
        // own location in the other stream; the projections alone are
        // translation-equivariant and cannot tell cells apart.
        let pos = sine_position(q.dim(2)?, h, w, q.dtype(), q.device())?.broadcast_mul(&self.pos_scale.t())?;
        let q = q.broadcast_add(&pos)?;
        let k = k.broadcast_add(&pos)?;
        let v = to_tokens(&self.v.forward(&kv)?)?;
        let heads = self.heads;
        let a = merge_heads(&attention(&split_heads(&q, heads)?, &split_heads(&k, heads)?, &split_heads(&v, heads)?)?, heads)?;
        self.out.forward(&from_tokens(&a, h, w)?)
    }
}

/// Gated depth-wise feed-forward network, bias-free.
#[derive(Debug, Clone)]
pub struct GatedFfn {
    norm_gate: LayerNorm2d,
    in_gate: Conv,
    dw_gate: DepthwiseConv3,
    norm_value: LayerNorm2d,
    in_value: Conv,
    dw_value: DepthwiseConv3,
    out: Conv,
}

impl GatedFfn {
    pub fn new(s: &Scope, channels: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            norm_gate: LayerNorm2d::new(&s.pp("norm_gate"), channels)?,
            in_gate: Conv::same(&s.pp("in_gate"), channels, hidden, 1)?.without_bias(),
            dw_gate: DepthwiseConv3::new(&s.pp("dw_gate"), hidden)?,
            norm_value: LayerNorm2d::new(&s.pp("norm_value"), channels)?,
            in_value: Conv::same(&s.pp("in_value"), channels, hidden, 1)?.without_bias(),
            dw_value: DepthwiseConv3::new(&s.pp("dw_value"), hidden)?,
            out: Conv::zeros(&s.pp("out"), hidden, channels, 1)?.without_bias(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gate = self
            .dw_gate
            .forward(&self.in_gate.forward(&self.norm_gate.forward(x)?)?)?
            .gelu_exact()?;
        let value = self.dw_value.forward(&self.in_value.forward(&self.norm_value.forward(x)?)?)?;
        self.out.forward(&(gate * value)?)
    }
}

/// Cross attention followed by the gated feed-forward network, both residual.
#[derive(Debug, Clone)]
pub struct PromptBlock {
    pub attn: CrossAttention,
    pub ffn: GatedFfn,
}

impl PromptBlock {
    pub fn new(s: &Scope, q_channels: usize, kv_channels: usize, heads: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            attn: CrossAttention::new(&s.pp("attn"), q_channels, kv_channels, q_channels, heads)?,
            ffn: GatedFfn::new(&s.pp("ffn"), q_channels, expansion)?,
        })
    }

    pub fn forward(&self, q_src: &Tensor, kv_src: &Tensor) -> Result<Tensor> {
        let bar = (q_src + self.attn.forward(q_src, kv_src)?)?;
        Ok((&bar + self.ffn.forward(&bar)?)?)
    }
}

/// Maps the matching prompt `G` to appearance width: `G` is first re-indexed
/// to a `(2r+1)^2` window of displacements around each cell (see
/// [`relative_matching`]), then a 3x3 convolution projects it.
///
/// `G`'s channels are indexed by absolute candidate position, which a
/// convolution with shared weights cannot relate to its own location; in
/// relative coordinates "matched here" and "matched next door" become fixed
/// channels.
#[derive(Debug, Clone)]
pub struct AlignG {
    radius: usize,
    conv: Conv,
}

impl AlignG {
    pub fn new(s: &Scope, radius: usize, out_channels: usize) -> Result<Self> {
        let k = (2 * radius + 1).pow(2);
        Ok(Self {
            radius,
            conv: Conv::new(s, k, out_channels, 3, 1, 1, Init::Kaiming { fan_in: 9 * k, gain: 1.0 })?,
        })
    }

    pub fn forward(&self, g: &Tensor) -> Result<Tensor> {
        self.conv.forward(&relative_matching(g, self.radius)?)
    }
}
