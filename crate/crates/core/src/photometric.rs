//! Reference photometric operators on plain `f64` buffers (`[H, W, C]`, row-major).
//!
//! These are the slow, obviously-correct counterparts of the differentiable
//! tensor versions used for training.

use alloc::vec;
use alloc::vec::Vec;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Backward bilinear warp: `out[p] = image[p + flow[p]]`.
///
/// Sample coordinates are clamped to the image border before interpolation.
pub fn warp(flow: &[f64], image: &[f64], height: usize, width: usize, channels: usize) -> Vec<f64> {
    assert_eq!(flow.len(), height * width * 2);
    assert_eq!(image.len(), height * width * channels);
    let mut out = vec![0.0; image.len()];
    let (max_x, max_y) = ((width - 1) as f64, (height - 1) as f64);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let sx = (x as f64 + flow[2 * p]).clamp(0.0, max_x);
            let sy = (y as f64 + flow[2 * p + 1]).clamp(0.0, max_y);
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (wx, wy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
            for c in 0..channels {
                let at = |yy: usize, xx: usize| image[(yy * width + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out[p * channels + c] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mean SSIM over the valid window positions of every channel, dynamic range 1.
///
/// Panics if either side is smaller than the 11-pixel window.
pub fn mean_ssim(a: &[f64], b: &[f64], height: usize, width: usize, channels: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(height >= SSIM_WINDOW && width >= SSIM_WINDOW);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ky, ty) in taps.iter().enumerate() {
                    for (kx, tx) in taps.iter().enumerate() {
                        let wgt = ty * tx;
                        let i = ((oy + ky) * width + ox + kx) * channels + c;
                        let (va, vb) = (a[i], b[i]);
                        mx += wgt * va;
                        my += wgt * vb;
                        xx += wgt * va * va;
                        yy += wgt * vb * vb;
                        xy += wgt * va * vb;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                    / ((mx * mx + my * my + c1) * (sx + sy + c2));
            }
        }
    }
    total / (channels * oh * ow) as f64
}
