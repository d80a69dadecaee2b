//! Background removal, resizing and training-time augmentation.
//!
//! The preparation pipeline is Otsu threshold -> crop to the bounding box of
//! foreground pixels -> bilinear resize to the backbone's input side.
//! Augmentation then runs on the resized image every epoch: horizontal flip,
//! integer shift, rotation about the centre and one zeroed square.

use alloc::format;
use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Rect};

/// Side of the cutout square at the reference 227-pixel input size.
pub const REFERENCE_SIDE: usize = 227;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Maximum shift as a fraction of the image width / height.
    pub max_shift_frac: f64,
    pub max_rotate_deg: f64,
    /// Cutout side at 227x227, scaled to the actual image size. Zero
    /// disables cutout.
    pub cutout_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_shift_frac: 0.1,
            max_rotate_deg: 45.0,
            cutout_side: 50,
        }
    }
}

impl AugmentConfig {
    /// Leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            max_shift_frac: 0.0,
            max_rotate_deg: 0.0,
            cutout_side: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.flip_prob) {
            return Err(Error::invalid(
                "augment",
                format!("flip_prob must be in [0, 1], got {}", self.flip_prob),
            ));
        }
        if !unit(self.max_shift_frac) {
            return Err(Error::invalid(
                "augment",
                format!("max_shift_frac must be in [0, 1], got {}", self.max_shift_frac),
            ));
        }
        if !(0.0..=180.0).contains(&self.max_rotate_deg) {
            return Err(Error::invalid(
                "augment",
                format!("max_rotate_deg must be in [0, 180], got {}", self.max_rotate_deg),
            ));
        }
        Ok(())
    }

    /// Cutout side for an image of side `image_side`, or 0 when disabled.
    pub fn scaled_cutout(&self, image_side: usize) -> usize {
        if self.cutout_side == 0 {
            return 0;
        }
        let s = libm::round(self.cutout_side as f64 * image_side as f64 / REFERENCE_SIDE as f64);
        (s as usize).max(1)
    }
}

/// Seed for augmenting sample `index` in `epoch`.
pub fn augment_seed(global_seed: u64, index: usize, epoch: usize) -> u64 {
    global_seed ^ (index as u64) ^ ((epoch as u64) << 32)
}

/// Otsu threshold over the 256-bin histogram.
///
/// Pixels `<= t` form the background class. The between-class variance is
/// compared exactly in integer arithmetic; among equal maxima the smallest
/// threshold wins. A constant image returns its value.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    let mut hist = [0u64; 256];
    for &p in img.pixels() {
        hist[p as usize] += 1;
    }
    let n = img.pixels().len() as u64;
    let total: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();

    let mut best: Option<(u8, BetweenClass)> = None;
    let (mut w0, mut s0) = (0u64, 0u64);
    for (t, &count) in hist.iter().enumerate() {
        w0 += count;
        s0 += t as u64 * count;
        let w1 = n - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let score = BetweenClass::new(w0, s0, w1, total - s0);
        if best.as_ref().map_or(true, |(_, b)| score.greater_than(b)) {
            best = Some((t as u8, score));
        }
    }
    match best {
        Some((t, _)) => t,
        // single intensity
        None => img.pixels()[0],
    }
}

/// Between-class variance scaled by `n^2`, kept as the exact fraction
/// `(s0 * w1 - s1 * w0)^2 / (w0 * w1)`.
struct BetweenClass {
    num: u128,
    den: u128,
}

impl BetweenClass {
    fn new(w0: u64, s0: u64, w1: u64, s1: u64) -> Self {
        let a = s0 as i128 * w1 as i128;
        let b = s1 as i128 * w0 as i128;
        let d = (a - b).unsigned_abs();
        Self {
            num: d * d,
            den: w0 as u128 * w1 as u128,
        }
    }

    fn greater_than(&self, other: &Self) -> bool {
        mul_wide(self.num, other.den) > mul_wide(other.num, self.den)
    }
}

/// Full 256-bit product as `(high, low)`.
fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    const MASK: u128 = u64::MAX as u128;
    let (a_hi, a_lo) = (a >> 64, a & MASK);
    let (b_hi, b_lo) = (b >> 64, b & MASK);
    let ll = a_lo * b_lo;
    let lh = a_lo * b_hi;
    let hl = a_hi * b_lo;
    let hh = a_hi * b_hi;
    let mid = (ll >> 64) + (lh & MASK) + (hl & MASK);
    let lo = (ll & MASK) | (mid << 64);
    let hi = hh + (lh >> 64) + (hl >> 64) + (mid >> 64);
    (hi, lo)
}

/// Tight bounding box of pixels brighter than `threshold`; the whole image
/// when none are.
pub fn foreground_box(img: &GrayImage, threshold: u8) -> Rect {
    let (w, h) = (img.width(), img.height());
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        let row = &img.pixels()[y * w..(y + 1) * w];
        for (x, &p) in row.iter().enumerate() {
            if p > threshold {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Rect::new(0, 0, w, h);
    }
    Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1)
}

pub fn crop(img: &GrayImage, rect: Rect) -> Result<GrayImage> {
    if !rect.fits_in(img.width(), img.height()) {
        return Err(Error::invalid(
            "crop",
            format!("{rect:?} outside {}x{} image", img.width(), img.height()),
        ));
    }
    let mut out = vec![0u8; rect.w * rect.h];
    for y in 0..rect.h {
        let src = (rect.y + y) * img.width() + rect.x;
        out[y * rect.w..(y + 1) * rect.w].copy_from_slice(&img.pixels()[src..src + rect.w]);
    }
    GrayImage::new(rect.w, rect.h, out)
}

/// Crops `img` to the tight box of pixels `> threshold`.
pub fn crop_foreground(img: &GrayImage, threshold: u8) -> GrayImage {
    let rect = foreground_box(img, threshold);
    crop(img, rect).expect("foreground box lies inside the image")
}

/// Bilinear resize with half-pixel centres (source coordinate
/// `(i + 0.5) * scale - 0.5`, clamped to the image) and round-half-up.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize_bilinear", "output side must be at least 1"));
    }
    let (w, h) = (img.width(), img.height());
    if (w, h) == (out_w, out_h) {
        return Ok(img.clone());
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let src_coord = |i: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = libm::floor(s) as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0u8; out_w * out_h];
    for oy in 0..out_h {
        let (y0, y1, fy) = src_coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src_coord(ox, sx, w);
            let p = |x, y| f64::from(img.get(x, y));
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out[oy * out_w + ox] = round_u8(v);
        }
    }
    GrayImage::new(out_w, out_h, out)
}

#[inline]
fn round_u8(v: f64) -> u8 {
    libm::floor(v + 0.5).clamp(0.0, 255.0) as u8
}

/// Maps `rect` from a source image through cropping to `crop_rect` and
/// resizing to `out_w x out_h`, rounding outwards.
pub fn map_rect(rect: Rect, crop_rect: Rect, out_w: usize, out_h: usize) -> Rect {
    let sx = out_w as f64 / crop_rect.w as f64;
    let sy = out_h as f64 / crop_rect.h as f64;
    let map = |v: usize, origin: usize, s: f64, limit: usize| -> f64 {
        ((v as f64 - origin as f64) * s).clamp(0.0, limit as f64)
    };
    let x0 = libm::floor(map(rect.x, crop_rect.x, sx, out_w)) as usize;
    let y0 = libm::floor(map(rect.y, crop_rect.y, sy, out_h)) as usize;
    let x1 = libm::ceil(map(rect.x + rect.w, crop_rect.x, sx, out_w)) as usize;
    let y1 = libm::ceil(map(rect.y + rect.h, crop_rect.y, sy, out_h)) as usize;
    let x0 = x0.min(out_w - 1);
    let y0 = y0.min(out_h - 1);
    Rect::new(x0, y0, (x1.max(x0 + 1)) - x0, (y1.max(y0 + 1)) - y0)
}

/// Image ready for the backbone, with its optional ground-truth box mapped
/// into the same coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub image: GrayImage,
    pub mass_box: Option<Rect>,
}

/// Otsu background removal, foreground crop and resize to `side x side`.
pub fn prepare(img: &GrayImage, mass_box: Option<Rect>, side: usize) -> Result<Prepared> {
    let t = otsu_threshold(img);
    let rect = foreground_box(img, t);
    let cropped = crop(img, rect)?;
    let image = resize_bilinear(&cropped, side, side)?;
    Ok(Prepared {
        image,
        mass_box: mass_box.map(|b| map_rect(b, rect, side, side)),
    })
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let w = img.width();
    let mut out = img.clone();
    for (dst, src) in out.pixels_mut().chunks_exact_mut(w).zip(img.pixels().chunks_exact(w)) {
        for x in 0..w {
            dst[x] = src[w - 1 - x];
        }
    }
    out
}

/// Translates by `(dx, dy)` pixels, filling with zero.
pub fn shift(img: &GrayImage, dx: isize, dy: isize) -> GrayImage {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut out = GrayImage::filled(img.width(), img.height(), 0);
    for y in 0..h {
        let sy = y - dy;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if sx >= 0 && sx < w {
                out.set(x as usize, y as usize, img.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

/// Rotates by `degrees` (counter-clockwise on screen) about the image
/// centre with bilinear sampling; samples outside the source read as zero.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let theta = degrees.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let sample = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            f64::from(img.get(x as usize, y as usize))
        }
    };
    let mut out = GrayImage::filled(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse mapping: destination -> source
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let x0 = libm::floor(sx);
            let y0 = libm::floor(sy);
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = sample(x0, y0) * (1.0 - fx) + sample(x0 + 1, y0) * fx;
            let bottom = sample(x0, y0 + 1) * (1.0 - fx) + sample(x0 + 1, y0 + 1) * fx;
            out.set(x, y, round_u8(top * (1.0 - fy) + bottom * fy));
        }
    }
    out
}

/// Sets the `side x side` square at `(x, y)` to zero, clipped to the image.
pub fn cutout(img: &mut GrayImage, x: usize, y: usize, side: usize) {
    let w = img.width();
    let x1 = (x + side).min(w);
    let y1 = (y + side).min(img.height());
    for yy in y..y1 {
        img.pixels_mut()[yy * w + x..yy * w + x1].fill(0);
    }
}

/// Random flip, shift, rotation and cutout, in that order.
///
/// The generator is always advanced by the same number of draws, so a
/// disabled step does not change what the later steps sample.
pub fn augment<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentConfig, rng: &mut R) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let flip_draw: f64 = rng.random();
    let shift_u: f64 = rng.random();
    let shift_v: f64 = rng.random();
    let angle_u: f64 = rng.random();
    let cut_u: f64 = rng.random();
    let cut_v: f64 = rng.random();

    let mut out = if flip_draw < cfg.flip_prob {
        flip_horizontal(img)
    } else {
        img.clone()
    };

    let dx = libm::round((2.0 * shift_u - 1.0) * cfg.max_shift_frac * w as f64) as isize;
    let dy = libm::round((2.0 * shift_v - 1.0) * cfg.max_shift_frac * h as f64) as isize;
    if dx != 0 || dy != 0 {
        out = shift(&out, dx, dy);
    }

    let angle = (2.0 * angle_u - 1.0) * cfg.max_rotate_deg;
    if angle != 0.0 {
        out = rotate(&out, angle);
    }

    let side = cfg.scaled_cutout(w.min(h));
    if side > 0 {
        let side = side.min(w).min(h);
        let x = libm::floor(cut_u * (w - side + 1) as f64) as usize;
        let y = libm::floor(cut_v * (h - side + 1) as f64) as usize;
        cutout(&mut out, x.min(w - side), y.min(h - side), side);
    }
    out
}

/// [`augment`] with a fresh generator seeded from `seed`.
pub fn augment_seeded(img: &GrayImage, cfg: &AugmentConfig, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment(img, cfg, &mut rng)
}
