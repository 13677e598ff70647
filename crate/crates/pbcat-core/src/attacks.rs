//! Masked PGD patch attack.
//!
//! Every ground-truth box gets a full square patch at its centre. Patch pixels
//! start uniformly random and are driven by sign-gradient ascent on the
//! detector loss; they are free in `[0, 1]`. Pixels outside the patches are
//! never touched.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::placement::{patch_side, PatchPlacement};
use crate::rng;
use crate::tensor::{Mask, CHANNELS};
use crate::types::ImageSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    /// Step on the `[0, 1]` pixel scale.
    pub step_size: f32,
    /// Patch side as a fraction of the box diagonal.
    pub lambda_eval: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 2.0 / 255.0,
            lambda_eval: 1.0 / (5.0 * core::f32::consts::SQRT_2),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn describe(&self) -> String {
        format!(
            "pgdpatch(steps={}, step_size={}, lambda_eval={}, seed={})",
            self.steps, self.step_size, self.lambda_eval, self.seed
        )
    }
}

/// Union of the centred attack squares of every box.
pub fn attack_support(sample: &ImageSample, lambda_eval: f32) -> Mask {
    let (h, w) = (sample.image.height(), sample.image.width());
    let mut mask = Mask::empty(h, w);
    for (i, b) in sample.boxes.iter().enumerate() {
        let p = PatchPlacement {
            box_index: i,
            center: b.center(),
            side: patch_side(b, lambda_eval),
            attached: true,
        };
        mask.fill_rect(&p.square(h, w));
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub sample: ImageSample,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

pub fn pgd_patch_attack<D: Detector, R: Rng + ?Sized>(
    det: &D,
    sample: &ImageSample,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackOutcome> {
    let clean_loss = det.loss(&sample.image, &sample.boxes)?;
    if cfg.steps == 0 || sample.boxes.is_empty() {
        return Ok(AttackOutcome {
            sample: sample.clone(),
            clean_loss,
            adv_loss: clean_loss,
        });
    }
    let support = attack_support(sample, cfg.lambda_eval);
    let plane = sample.image.plane_len();
    let idx: Vec<usize> = (0..CHANNELS)
        .flat_map(|c| {
            support
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(move |(p, _)| c * plane + p)
        })
        .collect();

    let mut adv = sample.image.clone();
    for &i in &idx {
        adv.as_mut_slice()[i] = rng.random_range(0.0f32..=1.0);
    }
    for step in 0..cfg.steps {
        let g = det
            .loss_and_grads(&[(&adv, &sample.boxes)], false)
            .map_err(|e| Error::NonFiniteLoss(format!("{}: attack step {step}: {e}", sample.id)))?;
        let grad = g.input_grads[0].as_slice();
        let px = adv.as_mut_slice();
        for &i in &idx {
            let s = if grad[i] > 0.0 {
                1.0
            } else if grad[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            px[i] = (px[i] + cfg.step_size * s).clamp(0.0, 1.0);
        }
    }
    let adv_loss = det.loss(&adv, &sample.boxes)?;
    Ok(AttackOutcome {
        sample: ImageSample {
            id: sample.id.clone(),
            image: adv,
            boxes: sample.boxes.clone(),
        },
        clean_loss,
        adv_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackLogEntry {
    pub id: String,
    pub clean_loss: f64,
    pub adv_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackedDataset {
    pub samples: Vec<ImageSample>,
    pub log: Vec<AttackLogEntry>,
}

/// Attacks every sample. Sample `i` draws its initialization from its own
/// stream, so results do not depend on iteration order.
pub fn attack_dataset<D: Detector>(
    det: &D,
    dataset: &[ImageSample],
    cfg: &AttackConfig,
) -> Result<AttackedDataset> {
    let mut samples = Vec::with_capacity(dataset.len());
    let mut log = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        let mut r = rng::stream(cfg.seed.wrapping_add(i as u64), rng::STREAM_ATTACK);
        let out = pgd_patch_attack(det, s, cfg, &mut r).map_err(|e| match e {
            Error::NonFiniteLoss(_) => e,
            other => Error::InvalidSample(format!("{}: {other}", s.id)),
        })?;
        log.push(AttackLogEntry {
            id: s.id.clone(),
            clean_loss: out.clean_loss,
            adv_loss: out.adv_loss,
        });
        samples.push(out.sample);
    }
    Ok(AttackedDataset { samples, log })
}
