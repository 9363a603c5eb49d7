//! Long-term memory extension.
//!
//! Per frame, the frozen short-term model supplies the appearance feature
//! `f2` and the aligned matching prompt `G_hat`. The memory encoder turns
//! `f2 + G_hat` into a key/value pair that enters a FIFO pool of capacity `L`.
//! A query encoder maps `f2` to `(K_Q, V_Q)`; a space-time memory read
//! attends from `K_Q` over all pooled keys and concatenates the read-out with
//! `V_Q` into the long-term prompt `P_L`, which is aligned to `f2`'s width and
//! fed through a dedicated motion collector and decoder.
//!
//! The pool is pushed before it is read, so the current frame's own entry is
//! part of the memory it reads from.

use candle_core::Tensor;
use emip_core::memory::{FifoPool, FrameIndexed};

use crate::decoder::Ncd;
use crate::error::{EmipError, Result};
use crate::nn::{from_tokens, to_tokens, Conv, LayerNorm2d};
use crate::params::{ParamStore, Scope};
use crate::prompts::PromptBlock;

/// Parameter groups trained in the long-term stage.
pub const LONGTERM_GROUPS: [&str; 5] = ["mem_encoder", "query_encoder", "stm", "mc_lt", "ncd_lt"];

/// One pooled frame; tensors are `[B, d, h, w]`.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub key: Tensor,
    pub value: Tensor,
    pub frame_index: usize,
}

impl FrameIndexed for MemoryEntry {
    fn frame_index(&self) -> usize {
        self.frame_index
    }
}

pub type MemoryPool = FifoPool<MemoryEntry>;

#[derive(Debug, Clone)]
pub struct MemoryEncoder {
    conv: Conv,
    norm: LayerNorm2d,
    key: Conv,
    value: Conv,
}

impl MemoryEncoder {
    pub fn new(s: &Scope, channels: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::same(&s.pp("conv"), channels, channels, 3)?,
            norm: LayerNorm2d::new(&s.pp("norm"), channels)?,
            key: Conv::same(&s.pp("key"), channels, key_dim, 3)?,
            value: Conv::same(&s.pp("value"), channels, value_dim, 3)?,
        })
    }

    pub fn encode(&self, f2: &Tensor, g_hat: &Tensor, frame_index: usize) -> Result<MemoryEntry> {
        if f2.dims() != g_hat.dims() {
            return Err(EmipError::Shape(format!(
                "memory encoder needs aligned inputs: {:?} vs {:?}",
                f2.dims(),
                g_hat.dims()
            )));
        }
        let h = self.norm.forward(&self.conv.forward(&(f2 + g_hat)?)?)?.relu()?;
        Ok(MemoryEntry {
            key: self.key.forward(&h)?,
            value: self.value.forward(&h)?,
            frame_index,
        })
    }
}

#[derive(Debug, Clone)]
pub struct QueryEncoder {
    key: Conv,
    value: Conv,
}

impl QueryEncoder {
    pub fn new(s: &Scope, channels: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        Ok(Self {
            key: Conv::same(&s.pp("key"), channels, key_dim, 3)?,
            value: Conv::same(&s.pp("value"), channels, value_dim, 3)?,
        })
    }

    /// `(K_Q, V_Q)`.
    pub fn encode(&self, f2: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.key.forward(f2)?, self.value.forward(f2)?))
    }
}

fn pooled_tokens(pool: &MemoryPool) -> Result<(Tensor, Tensor)> {
    if pool.is_empty() {
        return Err(EmipError::Shape("memory read from an empty pool".into()));
    }
    let keys: Vec<Tensor> = pool.iter().map(|e| to_tokens(&e.key)).collect::<Result<_>>()?;
    let values: Vec<Tensor> = pool.iter().map(|e| to_tokens(&e.value)).collect::<Result<_>>()?;
    Ok((Tensor::cat(&keys, 1)?, Tensor::cat(&values, 1)?))
}

fn affinity(keys: &Tensor, query_key: &Tensor) -> Result<Tensor> {
    let q = to_tokens(query_key)?;
    let d = q.dim(2)? as f64;
    let logits = (q.matmul(&keys.t()?.contiguous()?)? / d.sqrt())?;
    Ok(candle_nn::ops::softmax(&logits, 2)?)
}

/// Affinity `softmax(K_Q K_M^T / sqrt(d_k))` over all pooled tokens,
/// `[B, h*w, L*h*w]`; every row sums to one.
pub fn stm_affinity(pool: &MemoryPool, query_key: &Tensor) -> Result<Tensor> {
    affinity(&pooled_tokens(pool)?.0, query_key)
}

/// Space-time memory read: `P_L = [softmax(K_Q K_M^T / sqrt(d_k)) V_M, V_Q]`.
pub fn stm_read(pool: &MemoryPool, query_key: &Tensor, query_value: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = query_key.dims4()?;
    let (km, vm) = pooled_tokens(pool)?;
    let read = affinity(&km, query_key)?.matmul(&vm.contiguous()?)?;
    Ok(Tensor::cat(&[&from_tokens(&read, h, w)?, query_value], 1)?)
}

/// The five trainable long-term modules.
#[derive(Debug, Clone)]
pub struct LongTerm {
    pub mem_encoder: MemoryEncoder,
    pub query_encoder: QueryEncoder,
    pub align_pl: Conv,
    pub mc_lt: PromptBlock,
    pub ncd_lt: Ncd,
    pub memory_len: usize,
}

/// Short-term quantities the long-term head consumes for one frame.
#[derive(Debug, Clone)]
pub struct TrunkFeatures {
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
    pub g_hat: Tensor,
}

impl LongTerm {
    pub fn new(store: &ParamStore, cfg: &crate::config::ModelConfig) -> Result<Self> {
        let [_, c2, c3, c4] = cfg.backbone_channels;
        Ok(Self {
            mem_encoder: MemoryEncoder::new(&store.scope("mem_encoder"), c2, cfg.key_dim, cfg.value_dim)?,
            query_encoder: QueryEncoder::new(&store.scope("query_encoder"), c2, cfg.key_dim, cfg.value_dim)?,
            align_pl: Conv::same(&store.scope("stm").pp("align_pl"), 2 * cfg.value_dim, c2, 3)?,
            mc_lt: PromptBlock::new(&store.scope("mc_lt"), c2, c2, cfg.prompt_heads, cfg.ffn_expansion)?,
            ncd_lt: Ncd::new(&store.scope("ncd_lt"), [c2, c3, c4], cfg.decoder_channels)?,
            memory_len: cfg.memory_len,
        })
    }

    pub fn new_pool(&self) -> Result<MemoryPool> {
        Ok(FifoPool::new(self.memory_len)?)
    }

    /// Pushes frame `t` into `pool`, reads it back, and decodes logits.
    pub fn step(&self, pool: &mut MemoryPool, trunk: &TrunkFeatures, t: usize) -> Result<Tensor> {
        pool.push(self.mem_encoder.encode(&trunk.f2, &trunk.g_hat, t)?)?;
        let (kq, vq) = self.query_encoder.encode(&trunk.f2)?;
        let p_l = stm_read(pool, &kq, &vq)?;
        let p_hat = self.align_pl.forward(&p_l)?;
        let f2p = self.mc_lt.forward(&trunk.f2, &p_hat)?;
        self.ncd_lt.forward(&f2p, &trunk.f3, &trunk.f4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::host;
    use candle_core::{DType, Device, D};

    fn entry(key: Vec<f64>, value: Vec<f64>, d: usize, frame: usize) -> MemoryEntry {
        MemoryEntry {
            key: Tensor::from_vec(key, (1, 2, 1, 2), &Device::Cpu).unwrap(),
            value: Tensor::from_vec(value, (1, d, 1, 2), &Device::Cpu).unwrap(),
            frame_index: frame,
        }
    }

    #[test]
    fn identical_keys_return_the_common_value() {
        let mut pool = MemoryPool::new(5).unwrap();
        // both tokens carry the same key and the same value (3, -1)
        pool.push(entry(vec![0.4, 0.4, -0.2, -0.2], vec![3.0, 3.0, -1.0, -1.0], 2, 0)).unwrap();
        let kq = Tensor::from_vec(vec![0.4, 0.4, -0.2, -0.2], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let vq = Tensor::from_vec(vec![7.0, 8.0], (1, 1, 1, 2), &Device::Cpu).unwrap();
        let p = host(&stm_read(&pool, &kq, &vq).unwrap()).unwrap();
        assert_eq!(p, vec![3.0, 3.0, -1.0, -1.0, 7.0, 8.0]);
    }

    #[test]
    fn empty_pool_read_is_an_error() {
        let pool = MemoryPool::new(5).unwrap();
        let kq = Tensor::zeros((1, 2, 1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(stm_read(&pool, &kq, &kq).is_err());
    }

    #[test]
    fn encoder_shapes_and_zero_response() {
        let store = ParamStore::new(3, DType::F32);
        let enc = MemoryEncoder::new(&store.scope("mem_encoder"), 32, 32, 64).unwrap();
        store.zero_biases().unwrap();
        let z = Tensor::zeros((1, 32, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let e = enc.encode(&z, &z, 0).unwrap();
        assert_eq!(e.key.dims(), &[1, 32, 8, 8]);
        assert_eq!(e.value.dims(), &[1, 64, 8, 8]);
        assert!(host(&e.key).unwrap().iter().chain(&host(&e.value).unwrap()).all(|&v| v == 0.0));
        let bad = Tensor::zeros((1, 16, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.encode(&z, &bad, 0).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let k = Tensor::randn(0f64, 1.0, (1, 6, 4), &Device::Cpu).unwrap();
        let q = Tensor::randn(0f64, 1.0, (1, 3, 4), &Device::Cpu).unwrap();
        let logits = (q.matmul(&k.t().unwrap()).unwrap() / 2.0).unwrap();
        let a = candle_nn::ops::softmax(&logits, D::Minus1).unwrap();
        assert!(host(&a.sum(D::Minus1).unwrap()).unwrap().iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}
