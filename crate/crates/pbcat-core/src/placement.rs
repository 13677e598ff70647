//! Instance-level patch placement.
//!
//! Each ground-truth box may receive one square patch whose side scales with
//! the box diagonal and whose centre is drawn from a Gaussian around the box
//! centre.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TrainConfig;
use crate::tensor::PixelRect;
use crate::types::{BBox, ImageSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchPlacement {
    pub box_index: usize,
    /// Patch centre `(x, y)` in pixels, already clamped into the canvas.
    pub center: (f32, f32),
    /// Unrasterized patch side in pixels.
    pub side: f32,
    pub attached: bool,
}

/// `lambda * sqrt(w^2 + h^2)`.
pub fn patch_side(bbox: &BBox, lambda_scale: f32) -> f32 {
    lambda_scale * bbox.diagonal()
}

/// Side in whole pixels: nearest integer, at least 1, at most the canvas.
pub fn rasterized_side(side: f32, height: usize, width: usize) -> usize {
    (libm::roundf(side).max(1.0) as usize).min(height.min(width))
}

impl PatchPlacement {
    pub fn side_px(&self, height: usize, width: usize) -> usize {
        rasterized_side(self.side, height, width)
    }

    /// The rasterized square, always fully inside the `height x width` canvas.
    pub fn square(&self, height: usize, width: usize) -> PixelRect {
        let s = self.side_px(height, width);
        let origin = |c: f32, limit: usize| -> usize {
            let lo = libm::roundf(c - s as f32 * 0.5);
            (lo.max(0.0) as usize).min(limit - s)
        };
        let x0 = origin(self.center.0, width);
        let y0 = origin(self.center.1, height);
        PixelRect {
            x0,
            y0,
            x1: x0 + s,
            y1: y0 + s,
        }
    }
}

/// Smallest box extent (per axis) that may host a patch.
pub const MIN_HOST_EXTENT: f32 = 2.0;

/// Samples one placement for `bbox` on a `canvas = (height, width)` image.
///
/// The rng is always advanced by the same number of draws, whether or not the
/// patch ends up attached.
pub fn sample_placement<R: Rng + ?Sized>(
    box_index: usize,
    bbox: &BBox,
    cfg: &TrainConfig,
    canvas: (usize, usize),
    rng: &mut R,
) -> PatchPlacement {
    let (height, width) = canvas;
    let attached = rng.random_bool(f64::from(cfg.attach_prob));
    let zx: f64 = StandardNormal.sample(rng);
    let zy: f64 = StandardNormal.sample(rng);

    let side = patch_side(bbox, cfg.lambda_scale);
    let s = rasterized_side(side, height, width) as f32;
    let (mx, my) = bbox.center();
    let cx = mx + cfg.placement_sigma * bbox.width() * zx as f32;
    let cy = my + cfg.placement_sigma * bbox.height() * zy as f32;
    let half = s * 0.5;
    let center = (
        cx.clamp(half, width as f32 - half),
        cy.clamp(half, height as f32 - half),
    );

    let hostable = bbox.width() >= MIN_HOST_EXTENT && bbox.height() >= MIN_HOST_EXTENT;
    PatchPlacement {
        box_index,
        center,
        side,
        attached: attached && hostable,
    }
}

/// One placement per box, in box order. Overlapping placements are allowed.
pub fn place_all<R: Rng + ?Sized>(
    sample: &ImageSample,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Vec<PatchPlacement> {
    let canvas = (sample.image.height(), sample.image.width());
    sample
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| sample_placement(i, b, cfg, canvas, rng))
        .collect()
}
