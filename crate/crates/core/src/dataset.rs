//! Samples, the synthetic mammogram-like generator and stratified folds.
//!
//! Synthetic images are a bright half-ellipse "breast" against a dark
//! background. The breast carries smooth multi-octave value noise; positive
//! images additionally hold one brighter ellipse (the mass) whose area is
//! drawn around a target fraction of the image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Rect};

/// Ground-truth mass bounding box.
pub type MassBox = Rect;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: bool,
    /// Only for synthetic positives; used for localisation scoring.
    pub mass_box: Option<MassBox>,
}

impl Sample {
    pub fn new(image: GrayImage, label: bool, mass_box: Option<MassBox>) -> Result<Self> {
        if let Some(b) = mass_box {
            if !label {
                return Err(Error::invalid("Sample", "a negative sample cannot carry a mass box"));
            }
            if !b.fits_in(image.width(), image.height()) {
                return Err(Error::invalid(
                    "Sample",
                    format!("mass box {b:?} outside the {}x{} image", image.width(), image.height()),
                ));
            }
        }
        Ok(Self { image, label, mass_box })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub side: usize,
    pub pos_frac: f64,
    /// Mean mass area as a fraction of the image area.
    pub mass_area_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            side: 64,
            pos_frac: 0.5,
            mass_area_frac: 0.02,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("generate_synthetic", "n must be at least 1"));
        }
        if self.side < 16 {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("side must be at least 16, got {}", self.side),
            ));
        }
        if !(self.pos_frac > 0.0 && self.pos_frac < 1.0) {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("pos_frac must be in (0, 1), got {}", self.pos_frac),
            ));
        }
        if !(self.mass_area_frac > 0.0 && self.mass_area_frac < 0.5) {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("mass_area_frac must be in (0, 0.5), got {}", self.mass_area_frac),
            ));
        }
        Ok(())
    }

    /// Number of positives: `round(n * pos_frac)`.
    pub fn num_positive(&self) -> usize {
        libm::round(self.n as f64 * self.pos_frac) as usize
    }
}

/// Generates `cfg.n` samples; positives and negatives are interleaved in a
/// seeded random order.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pos = cfg.num_positive();
    let mut labels: Vec<bool> = (0..cfg.n).map(|i| i < n_pos).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| synth_sample(cfg, label, &mut rng))
        .collect()
}

struct Breast {
    /// Attached to the left (false) or right (true) edge.
    right: bool,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Breast {
    /// Normalised radius of pixel centre `(x, y)`; `<= 1` is inside.
    fn radius(&self, x: f64, y: f64, side: f64) -> f64 {
        let dx = if self.right { side - x } else { x };
        let u = dx / self.ax;
        let v = (y - self.cy) / self.ay;
        u * u + v * v
    }
}

fn synth_sample<R: Rng>(cfg: &SynthConfig, label: bool, rng: &mut R) -> Result<Sample> {
    let side = cfg.side;
    let s = side as f64;
    let breast = Breast {
        right: rng.random::<bool>(),
        cy: s * (0.5 + 0.06 * (2.0 * rng.random::<f64>() - 1.0)),
        ax: s * (0.72 + 0.2 * rng.random::<f64>()),
        ay: s * (0.40 + 0.08 * rng.random::<f64>()),
    };
    let texture = value_noise(side, rng);
    let base = 95.0 + 25.0 * rng.random::<f64>();

    let mut field = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            let r = breast.radius(x as f64 + 0.5, y as f64 + 0.5, s);
            let noise = 4.0 * (rng.random::<f64>() - 0.5);
            field[y * side + x] = if r <= 1.0 {
                // slight falloff towards the skin line
                let falloff = 1.0 - 0.25 * r;
                base * falloff + 55.0 * (texture[y * side + x] - 0.5) + noise
            } else {
                6.0 + 3.0 * texture[y * side + x] + noise
            };
        }
    }

    let mass_box = if label {
        Some(add_mass(&mut field, side, &breast, cfg.mass_area_frac, rng)?)
    } else {
        None
    };

    let pixels = field
        .iter()
        .map(|&v| libm::floor(v + 0.5).clamp(0.0, 255.0) as u8)
        .collect();
    Sample::new(GrayImage::new(side, side, pixels)?, label, mass_box)
}

/// Draws an axis-aligned ellipse inside the breast, brightens it and
/// returns its tight pixel bounding box.
fn add_mass<R: Rng>(field: &mut [f64], side: usize, breast: &Breast, area_frac: f64, rng: &mut R) -> Result<Rect> {
    let s = side as f64;
    let area = (0.5 + rng.random::<f64>()) * area_frac * s * s;
    let aspect = 0.7 + 0.7 * rng.random::<f64>();
    let a = libm::sqrt(area / (core::f64::consts::PI * aspect));
    let b = a * aspect;
    let contrast = 70.0 + 20.0 * rng.random::<f64>();

    for _ in 0..1000 {
        let cx = a + rng.random::<f64>() * (s - 2.0 * a);
        let cy = b + rng.random::<f64>() * (s - 2.0 * b);
        let inside = |x: f64, y: f64| breast.radius(x, y, s) <= 0.85;
        if !(inside(cx, cy) && inside(cx - a, cy) && inside(cx + a, cy) && inside(cx, cy - b) && inside(cx, cy + b)) {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 + 0.5 - cx) / a;
                let v = (y as f64 + 0.5 - cy) / b;
                let d = u * u + v * v;
                if d <= 1.0 {
                    field[y * side + x] += contrast * (0.6 + 0.4 * (1.0 - d));
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == usize::MAX {
            continue;
        }
        return Ok(Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
    }
    Err(Error::invalid(
        "generate_synthetic",
        "could not place a mass inside the breast region; lower mass_area_frac",
    ))
}

/// Sum of three octaves of bilinearly interpolated value noise, normalised
/// to `[0, 1]`.
fn value_noise<R: Rng>(side: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    let octaves = [(4usize, 0.5f64), (8, 0.3), (16, 0.2)];
    for (cells, amp) in octaves {
        let n = cells + 1;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let step = side as f64 / cells as f64;
        for y in 0..side {
            let gy = (y as f64 + 0.5) / step;
            let iy = (libm::floor(gy) as usize).min(cells - 1);
            let ty = smooth(gy - iy as f64);
            for x in 0..side {
                let gx = (x as f64 + 0.5) / step;
                let ix = (libm::floor(gx) as usize).min(cells - 1);
                let tx = smooth(gx - ix as f64);
                let l = |i: usize, j: usize| lattice[j * n + i];
                let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                let bottom = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                out[y * side + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Partition of sample indices into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold(&self, i: usize) -> &[usize] {
        &self.folds[i]
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    /// Indices of every fold except those listed in `exclude`, in fold
    /// order.
    pub fn complement(&self, exclude: &[usize]) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(i))
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }
}

/// Shuffles each class with `seed` and deals it round-robin into `k` folds.
/// Negatives continue dealing from the fold after the last positive so fold
/// sizes stay within one of each other.
pub fn stratified_kfold(labels: &[bool], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid(
            "stratified_kfold",
            format!("k must be at least 2, got {k}"),
        ));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::invalid(
            "stratified_kfold",
            format!(
                "need at least {k} samples of each class, got {} positive and {} negative",
                pos.len(),
                neg.len()
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for idx in pos.into_iter().chain(neg) {
        folds[next].push(idx);
        next = (next + 1) % k;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}
