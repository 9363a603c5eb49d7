//! Neighbor-connection decoder.
//!
//! All three levels are first reduced to a common width. The coarsest level
//! is upsampled and multiplied into the next finer one, and the products are
//! fused with the upsampled context by a 3x3 convolution. A 3x3 + 1x1 head
//! predicts logits at stride 8, which are bilinearly upsampled to the input
//! size.
//!
//! ```text
//! s3 = fuse3[ a(u(r4)) * r3 , b(u(r4)) ]
//! s2 = fuse2[ c(u(s3)) * d(u(u(r4))) * r2 , e(u(s3)) ]
//! logits = up8( head(s2) )
//! ```

use candle_core::Tensor;

use crate::error::{EmipError, Result};
use crate::nn::{resize_bilinear, Conv, Gelu};
use crate::params::Scope;

#[derive(Debug, Clone)]
pub struct Ncd {
    reduce: [Conv; 3],
    gate3: Conv,
    ctx3: Conv,
    fuse3: Conv,
    gate2_from3: Conv,
    gate2_from4: Conv,
    ctx2: Conv,
    fuse2: Conv,
    head: Conv,
    out: Conv,
}

fn up(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, h * factor, w * factor)
}

impl Ncd {
    pub const OUTPUT_STRIDE: usize = 8;

    /// `channels` are the widths of (f2, f3, f4); `c` the common width.
    pub fn new(s: &Scope, channels: [usize; 3], c: usize) -> Result<Self> {
        let conv3 = |n: &str, cin: usize| Conv::same(&s.pp(n), cin, c, 3);
        Ok(Self {
            reduce: [
                Conv::same(&s.pp("reduce2"), channels[0], c, 1)?,
                Conv::same(&s.pp("reduce3"), channels[1], c, 1)?,
                Conv::same(&s.pp("reduce4"), channels[2], c, 1)?,
            ],
            gate3: conv3("gate3", c)?,
            ctx3: conv3("ctx3", c)?,
            fuse3: conv3("fuse3", 2 * c)?,
            gate2_from3: conv3("gate2_from3", c)?,
            gate2_from4: conv3("gate2_from4", c)?,
            ctx2: conv3("ctx2", c)?,
            fuse2: conv3("fuse2", 2 * c)?,
            head: conv3("head", c)?,
            out: Conv::same(&s.pp("out"), c, 1, 1)?,
        })
    }

    /// Logits at stride 8, `[B, 1, H/8, W/8]`.
    pub fn coarse_logits(&self, f2: &Tensor, f3: &Tensor, f4: &Tensor) -> Result<Tensor> {
        let (_, _, h2, w2) = f2.dims4()?;
        let (_, _, h3, w3) = f3.dims4()?;
        let (_, _, h4, w4) = f4.dims4()?;
        if (h3 * 2, w3 * 2) != (h2, w2) || (h4 * 2, w4 * 2) != (h3, w3) {
            return Err(EmipError::Shape(format!(
                "decoder levels must halve in size: {h2}x{w2}, {h3}x{w3}, {h4}x{w4}"
            )));
        }
        let r2 = self.reduce[0].forward(f2)?;
        let r3 = self.reduce[1].forward(f3)?;
        let r4 = self.reduce[2].forward(f4)?;

        let u4 = up(&r4, 2)?;
        let a3 = (self.gate3.forward(&u4)? * r3)?;
        let s3 = self
            .fuse3
            .forward(&Tensor::cat(&[a3, self.ctx3.forward(&u4)?], 1)?)?
            .gelu_exact()?;

        let u3 = up(&s3, 2)?;
        let u44 = up(&r4, 4)?;
        let a2 = ((self.gate2_from3.forward(&u3)? * self.gate2_from4.forward(&u44)?)? * r2)?;
        let s2 = self
            .fuse2
            .forward(&Tensor::cat(&[a2, self.ctx2.forward(&u3)?], 1)?)?
            .gelu_exact()?;
        self.out.forward(&self.head.forward(&s2)?.gelu_exact()?)
    }

    /// Full-resolution logits `[B, 1, 8h, 8w]`.
    pub fn forward(&self, f2: &Tensor, f3: &Tensor, f4: &Tensor) -> Result<Tensor> {
        let coarse = self.coarse_logits(f2, f3, f4)?;
        up(&coarse, Self::OUTPUT_STRIDE)
    }
}
