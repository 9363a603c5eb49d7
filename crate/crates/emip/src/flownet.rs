//! Global-matching flow network for the motion stream.
//!
//! A three-layer convolutional encoder brings each frame to stride 8. Both
//! frames' features then pass through shared transformer blocks (self
//! attention, cross attention to the other frame, feed-forward). Global
//! correlation with a row softmax gives the matching distribution `M`; flow is
//! the expected matched coordinate minus the source coordinate.
//!
//! Flow is *backward*: `V` lives on the grid of frame `t` and points to the
//! matching location in frame `t - 1`, in units of stride-8 cells. Sampling
//! frame `t - 1` at `p + 8 V(p)` reconstructs frame `t`.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{EmipError, Result};
use crate::nn::{attention, merge_heads, resize_bilinear, split_heads, to_tokens, Conv, Gelu, LayerNorm, LayerNorm2d, Linear, ResBlock};
use crate::params::{Init, Scope};

pub const FLOW_STRIDE: usize = 8;

/// Encoder outputs at strides 2, 4 and 8.
#[derive(Debug, Clone)]
pub struct FlowEncoderFeatures {
    pub layer1: Tensor,
    pub layer2: Tensor,
    pub layer3: Tensor,
}

/// Result of matching two stride-8 feature maps.
#[derive(Debug, Clone)]
pub struct FlowBundle {
    /// `[B, 2, h, w]`, `(dx, dy)` in stride-8 cells.
    pub v: Tensor,
    /// `[B, h*w, h*w]`, row `p` is the distribution over candidates `q`.
    pub m: Tensor,
    /// `[B, h*w, h, w]`: channel `q = q_y * w + q_x`, spatial position `p`.
    pub g: Tensor,
    pub height: usize,
    pub width: usize,
}

impl FlowBundle {
    /// Flow upsampled to `height x width` pixels and rescaled to pixel units.
    pub fn full_resolution(&self, height: usize, width: usize) -> Result<Tensor> {
        Ok((resize_bilinear(&self.v, height, width)? * FLOW_STRIDE as f64)?)
    }
}

/// `V[p] = sum_q M[p, q] coord(q) - coord(p)` on an `h x w` grid, `[B, 2, h, w]`.
pub fn flow_from_matching(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, nq) = m.dims3()?;
    if n != h * w || nq != h * w {
        return Err(EmipError::Shape(format!("matching [{b}, {n}, {nq}] does not fit a {h}x{w} grid")));
    }
    let mut c = Vec::with_capacity(2 * n);
    for y in 0..h {
        for x in 0..w {
            c.push(x as f64);
            c.push(y as f64);
        }
    }
    let coords = Tensor::from_vec(c, (n, 2), m.device())?.to_dtype(m.dtype())?;
    let expected = m.broadcast_matmul(&coords)?;
    let v = expected.broadcast_sub(&coords)?;
    Ok(v.transpose(1, 2)?.contiguous()?.reshape((b, 2, h, w))?)
}

/// Reshapes `M` into the prompt `G` (candidate axis becomes channels, row-major).
pub fn prompt_from_matching(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, _) = m.dims3()?;
    Ok(m.transpose(1, 2)?.contiguous()?.reshape((b, n, h, w))?)
}

/// Re-indexes `G` (`[B, h*w, h, w]`) by displacement: channel
/// `(dy + r) * (2r + 1) + (dx + r)` at cell `p` holds `M[p, p + (dx, dy)]`,
/// zero where `p + (dx, dy)` leaves the grid. Output `[B, (2r+1)^2, h, w]`.
pub fn relative_matching(g: &Tensor, radius: usize) -> Result<Tensor> {
    let (b, n, h, w) = g.dims4()?;
    if n != h * w {
        return Err(EmipError::Shape(format!("prompt has {n} channels for a {h}x{w} grid")));
    }
    let side = 2 * radius as i64 + 1;
    let k = (side * side) as usize;
    let outside = (n * n) as u32;
    let mut idx = Vec::with_capacity(k * n);
    for dy in -(radius as i64)..=radius as i64 {
        for dx in -(radius as i64)..=radius as i64 {
            for py in 0..h as i64 {
                for px in 0..w as i64 {
                    let (qy, qx) = (py + dy, px + dx);
                    idx.push(if qy < 0 || qx < 0 || qy >= h as i64 || qx >= w as i64 {
                        outside
                    } else {
                        // channel q, spatial p of G's flat layout
                        ((qy * w as i64 + qx) * n as i64 + py * w as i64 + px) as u32
                    });
                }
            }
        }
    }
    let idx = Tensor::from_vec(idx, k * n, g.device())?;
    let flat = Tensor::cat(&[g.reshape((b, n * n))?, Tensor::zeros((b, 1), g.dtype(), g.device())?], 1)?;
    Ok(flat.index_select(&idx, 1)?.reshape((b, k, h, w))?)
}

/// Fixed 2-D sine/cosine position code, `[1, h*w, d]`; `d` must be a multiple of 4.
pub fn sine_position(d: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(EmipError::Shape(format!("position code width {d} is not a multiple of 4")));
    }
    let f = d / 4;
    let mut v = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for pos in [x as f64, y as f64] {
                for k in 0..f {
                    let omega = 1.0 / 100f64.powf(k as f64 / f as f64);
                    v.push((pos * omega).sin());
                    v.push((pos * omega).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(v, (1, h * w, d), dev)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    down: Conv,
    norm: LayerNorm2d,
    block: ResBlock,
}

impl EncoderLayer {
    fn new(s: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            down: Conv::new(&s.pp("down"), cin, cout, 3, 2, 1, Init::kaiming(cin * 9))?,
            norm: LayerNorm2d::new(&s.pp("norm"), cout)?,
            block: ResBlock::new(&s.pp("block"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.down.forward(x)?)?.gelu_exact()?;
        self.block.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(s: &Scope, d: usize, heads: usize) -> Result<Self> {
        let lin = |n: &str| Linear::new(&s.pp(n), d, d, Init::Kaiming { fan_in: d, gain: 0.7 });
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(x)?, self.heads)?;
        let k = split_heads(&self.k.forward(ctx)?, self.heads)?;
        let v = split_heads(&self.v.forward(ctx)?, self.heads)?;
        self.o.forward(&merge_heads(&attention(&q, &k, &v)?, self.heads)?)
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl TransformerBlock {
    fn new(s: &Scope, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(&s.pp("ln_self"), d)?,
            self_attn: MultiHeadAttention::new(&s.pp("self_attn"), d, heads)?,
            ln_cross: LayerNorm::new(&s.pp("ln_cross"), d)?,
            cross_attn: MultiHeadAttention::new(&s.pp("cross_attn"), d, heads)?,
            ln_ffn: LayerNorm::new(&s.pp("ln_ffn"), d)?,
            ffn_in: Linear::new(&s.pp("ffn_in"), d, 2 * d, Init::kaiming(d))?,
            ffn_out: Linear::new(&s.pp("ffn_out"), 2 * d, d, Init::Kaiming { fan_in: 2 * d, gain: 0.5 })?,
        })
    }

    /// `x: [2B, n, d]` holds both frames; row `i` attends across to row `(i + B) mod 2B`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)? / 2;
        let swap = |t: &Tensor| -> Result<Tensor> { Ok(Tensor::cat(&[t.narrow(0, b, b)?, t.narrow(0, 0, b)?], 0)?) };
        let n = self.ln_self.forward(x)?;
        let h = (x + self.self_attn.forward(&n, &n)?)?;
        let n = self.ln_cross.forward(&h)?;
        let h = (&h + self.cross_attn.forward(&n, &swap(&n)?)?)?;
        let n = self.ln_ffn.forward(&h)?;
        let f = self.ffn_out.forward(&self.ffn_in.forward(&n)?.gelu_exact()?)?;
        Ok((h + f)?)
    }
}

/// Parameter-free layer norm over the token axis. Bounding the token scale
/// keeps the correlation softmax from collapsing onto the identity match,
/// which would leave no gradient for sub-cell displacements.
fn standardize(x: &Tensor) -> Result<Tensor> {
    let xc = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + LayerNorm2d::EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct FlowNet {
    layers: Vec<EncoderLayer>,
    blocks: Vec<TransformerBlock>,
    dims: [usize; 3],
}

impl FlowNet {
    pub fn new(s: &Scope, dims: [usize; 3], blocks: usize, heads: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(3);
        let mut cin = 3;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(EncoderLayer::new(&s.pp(&format!("layer{}", i + 1)), cin, d)?);
            cin = d;
        }
        let blocks = (0..blocks)
            .map(|i| TransformerBlock::new(&s.pp(&format!("transformer{i}")), dims[2], heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, blocks, dims })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Runs the encoder; `prompt_after` (0, 1 or 2) names the layer whose
    /// output is replaced by `prompt(output)` before the next layer.
    pub fn encode_with<F>(&self, frames: &Tensor, prompt_after: Option<usize>, prompt: F) -> Result<FlowEncoderFeatures>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 || h % FLOW_STRIDE != 0 || w % FLOW_STRIDE != 0 || h == 0 || w == 0 {
            return Err(EmipError::Shape(format!(
                "flow encoder input must be [B, 3, H, W] with H, W divisible by {FLOW_STRIDE}; got [_, {c}, {h}, {w}]"
            )));
        }
        let mut prompt = Some(prompt);
        let mut outs = Vec::with_capacity(3);
        let mut x = frames.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if prompt_after == Some(i) {
                x = (prompt.take().expect("prompt used once"))(&x)?;
            }
            outs.push(x.clone());
        }
        let layer3 = outs.pop().expect("three layers");
        let layer2 = outs.pop().expect("three layers");
        let layer1 = outs.pop().expect("three layers");
        Ok(FlowEncoderFeatures { layer1, layer2, layer3 })
    }

    pub fn encode(&self, frames: &Tensor) -> Result<FlowEncoderFeatures> {
        self.encode_with(frames, None, |x| Ok(x.clone()))
    }

    /// Transformer refinement, global correlation and flow from matching.
    pub fn match_and_flow(&self, feat_t: &Tensor, feat_prev: &Tensor) -> Result<FlowBundle> {
        if feat_t.dims() != feat_prev.dims() {
            return Err(EmipError::Shape(format!(
                "matching features differ: {:?} vs {:?}",
                feat_t.dims(),
                feat_prev.dims()
            )));
        }
        let (b, d, h, w) = feat_t.dims4()?;
        if d != self.dims[2] {
            return Err(EmipError::Shape(format!("matching width is {}, features have {d}", self.dims[2])));
        }
        let pos = sine_position(d, h, w, feat_t.dtype(), feat_t.device())?;
        let mut x = Tensor::cat(&[to_tokens(feat_t)?, to_tokens(feat_prev)?], 0)?.broadcast_add(&pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = standardize(&x)?;
        let a = x.narrow(0, 0, b)?;
        let p = x.narrow(0, b, b)?;
        let corr = (a.matmul(&p.t()?.contiguous()?)? / (d as f64).sqrt())?;
        let m = candle_nn::ops::softmax(&corr, D::Minus1)?;
        let v = flow_from_matching(&m, h, w)?;
        let g = prompt_from_matching(&m, h, w)?;
        Ok(FlowBundle {
            v,
            m,
            g,
            height: h,
            width: w,
        })
    }

    /// Flow for a frame pair without prompts.
    pub fn forward(&self, frame_t: &Tensor, frame_prev: &Tensor) -> Result<FlowBundle> {
        let ft = self.encode(frame_t)?;
        let fp = self.encode(frame_prev)?;
        self.match_and_flow(&ft.layer3, &fp.layer3)
    }
}
