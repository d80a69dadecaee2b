//! Patch probability maps for weak localisation.

use alloc::vec::Vec;

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::graph::descending_permutation;
use crate::image::{GrayImage, Rect};
use crate::params::ModelParams;
use crate::scalar::Real;
use crate::train::patch_probabilities;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Bag probability: the largest entry of `prob_map`.
    pub score: f64,
    pub rows: usize,
    pub cols: usize,
    /// Patch probabilities, row-major `rows x cols`.
    pub prob_map: Vec<f64>,
    /// `prob_map` scaled to 0..=255 and upscaled to the input size by
    /// nearest neighbour.
    pub rendered: GrayImage,
}

impl Heatmap {
    pub fn argmax(&self) -> usize {
        descending_permutation(&self.prob_map)[0]
    }
}

/// Probability map of `image`, which must already have the backbone's input
/// size.
pub fn export_heatmap<T: Real>(config: &BackboneConfig, params: &ModelParams<T>, image: &GrayImage) -> Result<Heatmap> {
    let prob_map = patch_probabilities(config, params, image)?;
    let (_, rows, cols) = config.output;
    let score = prob_map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let side = config.input_side;
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        let r = y * rows / side;
        for x in 0..side {
            let c = x * cols / side;
            pixels.push(probability_to_gray(prob_map[r * cols + c]));
        }
    }
    Ok(Heatmap {
        score,
        rows,
        cols,
        prob_map,
        rendered: GrayImage::new(side, side, pixels)?,
    })
}

/// `round_half_up(p * 255)`.
pub fn probability_to_gray(p: f64) -> u8 {
    libm::floor(p.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

/// Whether the centre of patch `index` lies inside `mass_box` grown by one
/// patch stride on every side.
pub fn patch_in_box(config: &BackboneConfig, index: usize, mass_box: &Rect) -> bool {
    let (x, y) = config.patch_center(index);
    let (_, stride) = config.patch_grid();
    mass_box.contains_point(x, y, stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Preset, HEAD_BIAS, HEAD_WEIGHT};
    use crate::tensor::Tensor;

    #[test]
    fn zero_head_renders_mid_gray() {
        let cfg = Preset::Tiny.config();
        let mut params = cfg.build(5).unwrap();
        *params.get_mut(HEAD_WEIGHT).unwrap() = Tensor::zeros(&[32]);
        *params.get_mut(HEAD_BIAS).unwrap() = Tensor::zeros(&[1]);
        let img = GrayImage::filled(64, 64, 90);
        let h = export_heatmap(&cfg, &params, &img).unwrap();
        assert_eq!(h.score, 0.5);
        assert_eq!(h.prob_map.len(), 36);
        assert!(h.rendered.pixels().iter().all(|&p| p == 128));
    }

    #[test]
    fn gray_mapping() {
        assert_eq!(probability_to_gray(1.0), 255);
        assert_eq!(probability_to_gray(0.0), 0);
        assert_eq!(probability_to_gray(0.5), 128);
    }

    #[test]
    fn box_dilation_uses_patch_stride() {
        let cfg = Preset::Tiny.config();
        // patch 0 is centred at (12, 12); stride 8
        assert!(patch_in_box(&cfg, 0, &Rect::new(10, 10, 4, 4)));
        assert!(patch_in_box(&cfg, 0, &Rect::new(20, 20, 4, 4)));
        assert!(!patch_in_box(&cfg, 0, &Rect::new(21, 10, 4, 4)));
    }
}
