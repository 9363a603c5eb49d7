//! Flow rendering with the Middlebury color wheel: hue encodes direction,
//! saturation encodes magnitude relative to the largest vector in the field.

use alloc::vec::Vec;

const SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [255.0, 0.0, 0.0], [0.0, 255.0, 0.0]),   // red -> yellow
    (6, [255.0, 255.0, 0.0], [-255.0, 0.0, 0.0]), // yellow -> green
    (4, [0.0, 255.0, 0.0], [0.0, 0.0, 255.0]),    // green -> cyan
    (11, [0.0, 255.0, 255.0], [0.0, -255.0, 0.0]), // cyan -> blue
    (13, [0.0, 0.0, 255.0], [255.0, 0.0, 0.0]),   // blue -> magenta
    (6, [255.0, 0.0, 255.0], [0.0, 0.0, -255.0]), // magenta -> red
];

fn wheel() -> Vec<[f64; 3]> {
    let mut colors = Vec::with_capacity(55);
    for (n, start, delta) in SEGMENTS {
        for i in 0..n {
            let f = i as f64 / n as f64;
            colors.push(core::array::from_fn(|c| start[c] + delta[c] * f));
        }
    }
    colors
}

/// Converts an interleaved `(dx, dy)` field to RGB bytes.
pub fn flow_to_rgb(flow: &[f32]) -> Vec<u8> {
    let colors = wheel();
    let ncols = colors.len();
    let max_rad = flow
        .chunks_exact(2)
        .map(|v| libm::hypot(v[0] as f64, v[1] as f64))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let mut out = Vec::with_capacity(flow.len() / 2 * 3);
    for v in flow.chunks_exact(2) {
        let (u, w) = (v[0] as f64 / max_rad, v[1] as f64 / max_rad);
        let rad = libm::hypot(u, w).min(1.0);
        let angle = libm::atan2(-w, -u) / core::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = libm::floor(fk) as usize % ncols;
        let k1 = (k0 + 1) % ncols;
        let f = fk - libm::floor(fk);
        for c in 0..3 {
            let col = ((1.0 - f) * colors[k0][c] + f * colors[k1][c]) / 255.0;
            let col = 1.0 - rad * (1.0 - col);
            out.push(libm::round(255.0 * col) as u8);
        }
    }
    out
}
