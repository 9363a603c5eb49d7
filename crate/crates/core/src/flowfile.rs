//! `CFL1` flow fields: the ASCII magic `CFL1`, then height and width as
//! little-endian `u32`, then `height * width * 2` little-endian `f32` values,
//! row-major, interleaved `(dx, dy)`.

use alloc::vec::Vec;

pub const MAGIC: &[u8; 4] = b"CFL1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FlowFileError {
    #[error("missing CFL1 magic")]
    BadMagic,
    #[error("flow payload holds {actual} bytes, header implies {expected}")]
    Truncated { expected: usize, actual: usize },
    #[error("flow buffer holds {actual} values, {height}x{width} field needs {expected}")]
    ShapeMismatch {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
}

pub fn encode_flow(height: usize, width: usize, flow: &[f32]) -> Result<Vec<u8>, FlowFileError> {
    let expected = height * width * 2;
    if flow.len() != expected {
        return Err(FlowFileError::ShapeMismatch {
            height,
            width,
            expected,
            actual: flow.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + expected * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in flow {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(height, width, values)`.
pub fn decode_flow(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), FlowFileError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(FlowFileError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (height, width) = (word(4), word(8));
    let expected = HEADER_LEN + height * width * 8;
    if bytes.len() != expected {
        return Err(FlowFileError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((height, width, values))
}
