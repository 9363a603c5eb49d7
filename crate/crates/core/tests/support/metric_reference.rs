//! Reference metric implementations written directly from the metric
//! definitions, with nested loops and no shared code with the library.
//! Shared by the metric oracle tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn to_grid(v: &[f64], h: usize, w: usize) -> Grid {
    (0..h).map(|r| v[r * w..(r + 1) * w].to_vec()).collect()
}

pub fn matlab_round(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        -((-x + 0.5).floor())
    }
}

pub mod reference {
    use super::*;

    const EPS: f64 = f64::EPSILON;

    fn object(vals: &[f64]) -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let n = vals.len() as f64;
        let x = vals.iter().sum::<f64>() / n;
        let sigma = if vals.len() > 1 {
            (vals.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        2.0 * x / (x.powi(2) + 1.0 + sigma + EPS)
    }

    fn quadrant_ssim(p: &Grid, g: &Grid, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
        let mut ps = vec![];
        let mut gs = vec![];
        for r in rows {
            for c in cols.clone() {
                ps.push(p[r][c]);
                gs.push(g[r][c]);
            }
        }
        let n = ps.len() as f64;
        let x = ps.iter().sum::<f64>() / n;
        let y = gs.iter().sum::<f64>() / n;
        let sx = ps.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
        let sy = gs.iter().map(|v| (v - y).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
        let sxy = ps.iter().zip(&gs).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
        let a = 4.0 * x * y * sxy;
        let b = (x * x + y * y) * (sx + sy);
        if a != 0.0 {
            a / (b + EPS)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn s_measure(p: &Grid, g: &Grid) -> f64 {
        let (h, w) = (p.len(), p[0].len());
        let total: f64 = g.iter().flatten().sum();
        let y = total / (h * w) as f64;
        let mean_p = p.iter().flatten().sum::<f64>() / (h * w) as f64;
        if y == 0.0 {
            return 1.0 - mean_p;
        }
        if y == 1.0 {
            return mean_p;
        }
        let mut fg = vec![];
        let mut bg = vec![];
        for r in 0..h {
            for c in 0..w {
                if g[r][c] > 0.5 {
                    fg.push(p[r][c]);
                } else {
                    bg.push(1.0 - p[r][c]);
                }
            }
        }
        let s_obj = y * object(&fg) + (1.0 - y) * object(&bg);

        // centroid from zero-based coordinates shifted to one-based
        let mut mx = 0.0;
        let mut my = 0.0;
        for r in 0..h {
            for c in 0..w {
                mx += c as f64 * g[r][c];
                my += r as f64 * g[r][c];
            }
        }
        let cx = matlab_round(mx / total + 1.0) as usize;
        let cy = matlab_round(my / total + 1.0) as usize;
        let area = (h * w) as f64;
        let mut s_reg = 0.0;
        for (rows, cols) in [
            (0..cy, 0..cx),
            (0..cy, cx..w),
            (cy..h, 0..cx),
            (cy..h, cx..w),
        ] {
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            let weight = (rows.len() * cols.len()) as f64 / area;
            s_reg += weight * quadrant_ssim(p, g, rows, cols);
        }
        (0.5 * s_obj + 0.5 * s_reg).max(0.0)
    }

    /// Brute-force nearest foreground pixel, ties by (column, row).
    fn nearest(g: &Grid, r: usize, c: usize) -> (f64, usize, usize) {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for (rr, row) in g.iter().enumerate() {
            for (cc, &v) in row.iter().enumerate() {
                if v < 0.5 {
                    continue;
                }
                let d2 = ((rr as f64 - r as f64).powi(2) + (cc as f64 - c as f64).powi(2)) as f64;
                let better = d2 < best.0 || (d2 == best.0 && (cc, rr) < (best.2, best.1));
                if better {
                    best = (d2, rr, cc);
                }
            }
        }
        (best.0.sqrt(), best.1, best.2)
    }

    pub fn weighted_f(p: &Grid, g: &Grid) -> f64 {
        let (h, w) = (p.len(), p[0].len());
        if g.iter().flatten().all(|&v| v < 0.5) {
            return 0.0;
        }
        let e: Grid = (0..h).map(|r| (0..w).map(|c| (p[r][c] - g[r][c]).abs()).collect()).collect();
        let mut et = e.clone();
        let mut dist = vec![vec![0.0; w]; h];
        for r in 0..h {
            for c in 0..w {
                if g[r][c] < 0.5 {
                    let (d, nr, nc) = nearest(g, r, c);
                    dist[r][c] = d;
                    et[r][c] = e[nr][nc];
                }
            }
        }
        let sigma: f64 = 5.0;
        let mut k = [[0.0; 7]; 7];
        let mut ksum = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
                *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                ksum += *v;
            }
        }
        let mut ea = vec![vec![0.0; w]; h];
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let mut acc = 0.0;
                for i in -3..=3i64 {
                    for j in -3..=3i64 {
                        let (rr, cc) = (r + i, c + j);
                        if rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 {
                            acc += k[(i + 3) as usize][(j + 3) as usize] / ksum * et[rr as usize][cc as usize];
                        }
                    }
                }
                ea[r as usize][c as usize] = acc;
            }
        }
        let mut ew_fg = vec![];
        let mut fp = 0.0;
        for r in 0..h {
            for c in 0..w {
                if g[r][c] > 0.5 {
                    ew_fg.push(e[r][c].min(ea[r][c]));
                } else {
                    let b = 2.0 - (0.5f64.ln() / 5.0 * dist[r][c]).exp();
                    fp += e[r][c] * b;
                }
            }
        }
        let n_fg = ew_fg.len() as f64;
        let tp = n_fg - ew_fg.iter().sum::<f64>();
        let recall = 1.0 - ew_fg.iter().sum::<f64>() / n_fg;
        let precision = tp / (tp + fp + EPS);
        2.0 * recall * precision / (recall + precision + EPS)
    }

    pub fn max_f(p: &[f64], g: &[bool]) -> f64 {
        let mut best = 0.0f64;
        for k in 1..=255 {
            let t = k as f64 / 255.0;
            let tp = p.iter().zip(g).filter(|(&v, &gg)| v >= t && gg).count() as f64;
            let fp = p.iter().zip(g).filter(|(&v, &gg)| v >= t && !gg).count() as f64;
            let pos = g.iter().filter(|&&gg| gg).count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if pos > 0.0 { tp / pos } else { 0.0 };
            let f = if 0.3 * prec + rec > 0.0 {
                1.3 * prec * rec / (0.3 * prec + rec)
            } else {
                0.0
            };
            best = best.max(f);
        }
        best
    }
}

/// Random blob-ish mask plus a noisy prediction correlated with it.
pub fn random_instance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let kind = rng.gen_range(0..4);
    let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    let rad = rng.gen_range(1.0..(h as f64 / 2.0 + 1.5));
    let gt: Vec<bool> = (0..h * w)
        .map(|i| match kind {
            0 => rng.gen_bool(0.3),
            _ => {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                ((r - cy).powi(2) + (c - cx).powi(2)).sqrt() < rad
            }
        })
        .collect();
    let noise = rng.gen_range(0.0..0.8);
    let pred: Vec<f64> = gt
        .iter()
        .map(|&g| {
            let base = if g { 1.0 } else { 0.0 };
            let v: f64 = (1.0 - noise) * base + noise * rng.gen::<f64>();
            // occasionally quantize to exercise exact-threshold cases
            if rng.gen_bool(0.2) {
                (v * 255.0).round() / 255.0
            } else {
                v
            }
        })
        .collect();
    (pred, gt)
}

/// Seeded generator for `random_instance`.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
