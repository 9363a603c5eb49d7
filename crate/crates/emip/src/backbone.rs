//! Four-stage convolutional pyramid for the appearance stream.
//!
//! Stage 1 is a 4x4 stride-4 patch convolution; stages 2-4 are 2x2 stride-2
//! convolutions. Each downsampling is followed by channel layer norm, GELU
//! and a stack of pre-norm residual blocks.

use candle_core::Tensor;

use crate::error::{EmipError, Result};
use crate::nn::{Conv, Gelu, LayerNorm2d, ResBlock};
use crate::params::{Init, Scope};

/// Features at strides 4, 8, 16 and 32, NCHW.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl FeaturePyramid {
    /// Level by index, 0 = f1.
    pub fn level(&self, i: usize) -> &Tensor {
        match i {
            0 => &self.f1,
            1 => &self.f2,
            2 => &self.f3,
            _ => &self.f4,
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            f1: self.f1.detach(),
            f2: self.f2.detach(),
            f3: self.f3.detach(),
            f4: self.f4.detach(),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    norm: LayerNorm2d,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norm.forward(&self.down.forward(x)?)?.gelu_exact()?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Stage>,
    channels: [usize; 4],
}

impl Backbone {
    pub const STRIDE: usize = 32;

    pub fn new(s: &Scope, channels: [usize; 4], depths: [usize; 4]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, (&c, &depth)) in channels.iter().zip(&depths).enumerate() {
            let st = s.pp(&format!("stage{}", i + 1));
            let k = if i == 0 { 4 } else { 2 };
            let blocks = (0..depth)
                .map(|j| ResBlock::new(&st.pp(&format!("block{j}")), c))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                down: Conv::new(&st.pp("down"), cin, c, k, k, 0, Init::kaiming(cin * k * k))?,
                norm: LayerNorm2d::new(&st.pp("norm"), c)?,
                blocks,
            });
            cin = c;
        }
        Ok(Self { stages, channels })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// `frames: [B, 3, H, W]` with `H`, `W` multiples of 32.
    pub fn forward(&self, frames: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 || h % Self::STRIDE != 0 || w % Self::STRIDE != 0 || h == 0 || w == 0 {
            return Err(EmipError::Shape(format!(
                "backbone input must be [B, 3, H, W] with H, W divisible by {}; got [_, {c}, {h}, {w}]",
                Self::STRIDE
            )));
        }
        let f1 = self.stages[0].forward(frames)?;
        let f2 = self.stages[1].forward(&f1)?;
        let f3 = self.stages[2].forward(&f2)?;
        let f4 = self.stages[3].forward(&f3)?;
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }
}
