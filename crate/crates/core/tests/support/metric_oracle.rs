//! Deliberately naive structure and enhanced-alignment measures written
//! straight from the published definitions over 2-D arrays, used as an
//! independent oracle for `selfcal_core::metrics`.
//!
//! Conventions shared with the library:
//! 1-based rounded centroid, `N − 1 + eps` variance normalizer, sample std,
//! E-measure averaged over `N` pixels, adaptive foreground `p ≥ min(2·mean, 1)`
//! restricted to `p > 0`.

#![allow(dead_code, clippy::needless_range_loop)]

const EPS: f64 = f64::EPSILON;

pub type Grid = Vec<Vec<f64>>;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn object(xs: &[f64]) -> f64 {
    let x = mean(xs);
    2.0 * x / (x * x + 1.0 + sample_std(xs) + EPS)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (x, y) = (mean(p), mean(g));
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..p.len() {
        sx += (p[i] - x).powi(2);
        sy += (g[i] - y).powi(2);
        sxy += (p[i] - x) * (g[i] - y);
    }
    sx /= n - 1.0 + EPS;
    sy /= n - 1.0 + EPS;
    sxy /= n - 1.0 + EPS;
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

fn block(m: &Grid, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::new();
    for r in rows {
        for c in cols.clone() {
            out.push(m[r][c]);
        }
    }
    out
}

pub fn s_measure(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (g.len(), g[0].len());
    let total: f64 = g.iter().flatten().sum();
    let n = (h * w) as f64;
    if total == 0.0 {
        return 1.0 - p.iter().flatten().sum::<f64>() / n;
    }
    if total == n {
        return p.iter().flatten().sum::<f64>() / n;
    }
    // object term
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if g[r][c] == 1.0 {
                fg.push(p[r][c]);
            } else {
                bg.push(1.0 - p[r][c]);
            }
        }
    }
    let u = total / n;
    let o = u * object(&fg) + (1.0 - u) * object(&bg);
    // region term around the 1-based centroid
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..h {
        for c in 0..w {
            sx += g[r][c] * (c + 1) as f64;
            sy += g[r][c] * (r + 1) as f64;
        }
    }
    let cx = (sx / total).round() as usize;
    let cy = (sy / total).round() as usize;
    let quads = [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)];
    let mut region = 0.0;
    for (rows, cols) in quads {
        let weight = (rows.len() * cols.len()) as f64 / n;
        if weight > 0.0 {
            region += weight * ssim(&block(p, rows.clone(), cols.clone()), &block(g, rows, cols));
        }
    }
    (0.5 * o + 0.5 * region).max(0.0)
}

pub fn e_measure(p: &Grid, g: &Grid) -> f64 {
    let (h, w) = (g.len(), g[0].len());
    let n = (h * w) as f64;
    let thr = (2.0 * p.iter().flatten().sum::<f64>() / n).min(1.0);
    let fm: Grid = p
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| if v >= thr && v > 0.0 { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let gsum: f64 = g.iter().flatten().sum();
    let fsum: f64 = fm.iter().flatten().sum();
    let mut enhanced = 0.0;
    for r in 0..h {
        for c in 0..w {
            enhanced += if gsum == 0.0 {
                1.0 - fm[r][c]
            } else if gsum == n {
                fm[r][c]
            } else {
                let a = fm[r][c] - fsum / n;
                let b = g[r][c] - gsum / n;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0
            };
        }
    }
    enhanced / n
}
