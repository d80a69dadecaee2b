//! Slow, obviously-correct reference implementations used as oracles.

#![allow(dead_code)]

/// Exhaustive Otsu: minimise the within-class variance over every split
/// `<= t | > t`, preferring the smallest `t` among equal minima.
pub fn otsu_oracle(pixels: &[u8]) -> u8 {
    let n = pixels.len() as f64;
    let mut best: Option<(u8, f64)> = None;
    for t in 0..=255u8 {
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let lo = pixels.iter().filter(|&&p| p <= t).map(|&p| f64::from(p)).collect();
            let hi = pixels.iter().filter(|&&p| p > t).map(|&p| f64::from(p)).collect();
            (lo, hi)
        };
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        let within = (var(&lo) + var(&hi)) / n;
        let better = match best {
            None => true,
            Some((_, b)) => within < b - 1e-9 * b.max(1e-12),
        };
        if better {
            best = Some((t, within));
        }
    }
    best.map_or(pixels[0], |(t, _)| t)
}

pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

pub struct Geometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub fn oracle_conv(g: &Geometry, x: &[f64], k: &[f64], b: &[f64]) -> (usize, usize, Vec<f64>) {
    let oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    let ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;
    let mut out = vec![0.0; g.c_out * oh * ow];
    for o in 0..g.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..g.c_in {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                continue;
                            }
                            let xi = (c * g.h + iy as usize) * g.w + ix as usize;
                            let ki = ((o * g.c_in + c) * g.k + ky) * g.k + kx;
                            acc += x[xi] * k[ki];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (oh, ow, out)
}

pub fn oracle_pool(c: usize, h: usize, w: usize, k: usize, s: usize, x: &[f64]) -> (usize, usize, Vec<f64>) {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        best = best.max(x[(ch * h + oy * s + ky) * w + ox * s + kx]);
                    }
                }
                out.push(best);
            }
        }
    }
    (oh, ow, out)
}
