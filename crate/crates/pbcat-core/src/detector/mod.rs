//! Differentiable detector contract and the bundled toy detector.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::eval::iou;
use crate::real::Real;
use crate::tensor::Image;
use crate::types::{BBox, Detection};

mod toy;

pub use toy::{ToyArch, ToyDetector};

/// Result of one combined forward/backward pass over a minibatch.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Per-image losses.
    pub losses: Vec<f64>,
    /// Per-image gradient of that image's own loss with respect to its pixels.
    pub input_grads: Vec<Image>,
    /// Gradient of the mean loss with respect to the parameters. Empty when
    /// parameter gradients were not requested.
    pub param_grads: Vec<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forwards: usize,
    pub backwards: usize,
}

/// Forward/backward instrumentation shared by detector implementations.
#[derive(Debug, Default)]
pub struct PassCounter {
    forwards: AtomicUsize,
    backwards: AtomicUsize,
}

impl PassCounter {
    pub fn forward(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn backward(&self) {
        self.backwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> PassCounts {
        PassCounts {
            forwards: self.forwards.load(Ordering::Relaxed),
            backwards: self.backwards.load(Ordering::Relaxed),
        }
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        let c = self.get();
        Self {
            forwards: AtomicUsize::new(c.forwards),
            backwards: AtomicUsize::new(c.backwards),
        }
    }
}

/// A detector whose loss is differentiable with respect to both its input
/// image and its parameters.
pub trait Detector {
    type Scalar: Real;

    fn num_classes(&self) -> usize;

    /// Input `(height, width)` the detector accepts.
    fn canvas(&self) -> (usize, usize);

    fn params(&self) -> &[Self::Scalar];

    fn params_mut(&mut self) -> &mut [Self::Scalar];

    /// Loss, input gradients and (optionally) parameter gradients from a
    /// single combined pass. Counts one forward and one backward per call.
    fn loss_and_grads(
        &self,
        batch: &[(&Image, &[BBox])],
        with_param_grads: bool,
    ) -> Result<BatchGrads<Self::Scalar>>;

    /// Forward-only loss. Counts one forward.
    fn loss(&self, x: &Image, boxes: &[BBox]) -> Result<f64>;

    /// Detections scoring at least `score_threshold`, after class-aware
    /// greedy NMS at `nms_iou`. Counts one forward.
    fn predict(&self, x: &Image, score_threshold: f32, nms_iou: f32) -> Result<Vec<Detection>>;

    fn counts(&self) -> PassCounts;
}

/// Class-aware greedy non-maximum suppression. Keeps the higher-scoring
/// detection whenever two of the same class overlap above `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept.iter().any(|k| {
            k.bbox.class_id == d.bbox.class_id && iou(&k.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f32, score: f32, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0, class_id).unwrap(),
            score,
        }
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let out = nms(vec![det(0.0, 0.6, 0), det(0.0, 0.9, 0)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn nms_is_class_aware_and_keeps_disjoint_boxes() {
        let out = nms(vec![det(0.0, 0.6, 0), det(0.0, 0.9, 1), det(50.0, 0.3, 0)], 0.5);
        assert_eq!(out.len(), 3);
    }
}
