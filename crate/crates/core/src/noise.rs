//! Seeded multi-octave value noise defined on the whole integer plane.
//!
//! Lattice values come from a stateless integer hash, so any window of the
//! plane can be sampled at any offset without precomputing a texture.

/// Splitmix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Single-octave value noise in `[0, 1]` with lattice spacing `cell` pixels.
pub fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let x0 = libm::floor(gx);
    let y0 = libm::floor(gy);
    let tx = smooth(gx - x0);
    let ty = smooth(gy - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Fractal sum of `octaves` value-noise layers, normalized back to `[0, 1]`.
///
/// Octave `k` uses spacing `base_cell / 2^k` and amplitude `2^-k`.
pub fn fbm(seed: u64, x: f64, y: f64, base_cell: f64, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut cell = base_cell;
    for k in 0..octaves {
        sum += amp * value_noise(mix(seed.wrapping_add(k as u64)), x, y, cell);
        norm += amp;
        amp *= 0.5;
        cell = (cell * 0.5).max(1.0);
    }
    sum / norm
}

/// Derives an independent stream seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_add(0x632b_e59b_d9b4_e019)))
}
