use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How sub-patches are chosen once a patch is partitioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Gradient,
    Random,
}

/// Per-pixel gradient magnitude used when scoring sub-patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    /// Mean of absolute channel gradients.
    #[default]
    MeanAbs,
    /// Euclidean norm over channels.
    L2,
}

/// Training hyperparameters. Intensities are on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Bound (and step) of the global field.
    pub epsilon: f32,
    /// Step of the patch field.
    pub alpha: f32,
    /// Bound of the patch field.
    pub beta: f32,
    /// Patch side as a fraction of the box diagonal.
    pub lambda_scale: f32,
    /// Sub-patches per patch; must be a perfect square.
    pub n_subpatches: usize,
    pub topk_ratio: f32,
    /// Replays of each minibatch.
    pub replay: usize,
    /// Probability that a given box receives a patch.
    pub attach_prob: f32,
    /// Epoch budget, counted in optimizer steps per pass over the data.
    pub epochs: usize,
    /// Training canvas `[height, width]`.
    pub resolution: [usize; 2],
    pub selection_mode: SelectionMode,
    pub score_norm: ScoreNorm,
    /// Std-dev of the patch centre around the box centre, as a fraction of
    /// the box width (x) and height (y).
    pub placement_sigma: f32,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// Fraction of all optimizer steps after which the learning rate decays.
    pub lr_decay_at: f32,
    pub lr_decay_factor: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            alpha: 8.0 / 255.0,
            beta: 64.0 / 255.0,
            lambda_scale: core::f32::consts::SQRT_2 / 5.0,
            n_subpatches: 64,
            topk_ratio: 0.5,
            replay: 8,
            attach_prob: 0.5,
            epochs: 48,
            resolution: [96, 96],
            selection_mode: SelectionMode::Gradient,
            score_norm: ScoreNorm::MeanAbs,
            placement_sigma: 0.25,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            lr_decay_at: 40.0 / 48.0,
            lr_decay_factor: 0.1,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn check(ok: bool, what: &'static str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(what))
    }
}

/// Integer square root when `n` is a non-zero perfect square.
pub fn perfect_square_root(n: usize) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let mut r = libm::sqrt(n as f64) as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    (r * r == n).then_some(r)
}

impl TrainConfig {
    /// Checks every invariant and returns the config unchanged, or the name of
    /// the first invariant that fails.
    pub fn validate(self) -> Result<Self> {
        let finite = [
            self.epsilon,
            self.alpha,
            self.beta,
            self.lambda_scale,
            self.topk_ratio,
            self.attach_prob,
            self.placement_sigma,
            self.learning_rate,
            self.weight_decay,
            self.lr_decay_at,
            self.lr_decay_factor,
        ]
        .iter()
        .all(|v| v.is_finite());
        check(finite, "non-finite value")?;
        check((0.0..=1.0).contains(&self.epsilon), "epsilon out of [0, 1]")?;
        check(self.beta > 0.0 && self.beta <= 1.0, "beta out of (0, 1]")?;
        check(self.epsilon <= self.beta, "epsilon exceeds beta")?;
        check(self.alpha > 0.0, "alpha not positive")?;
        check(self.alpha <= self.beta, "alpha exceeds beta")?;
        check(self.lambda_scale > 0.0, "lambda_scale not positive")?;
        check(
            perfect_square_root(self.n_subpatches).is_some(),
            "N not a perfect square",
        )?;
        check(
            self.topk_ratio > 0.0 && self.topk_ratio <= 1.0,
            "topk_ratio out of (0, 1]",
        )?;
        check(self.replay >= 1, "replay less than 1")?;
        check(self.epochs >= 1, "epochs less than 1")?;
        check(
            self.epochs % self.replay == 0,
            "epochs not divisible by replay",
        )?;
        check(
            (0.0..=1.0).contains(&self.attach_prob),
            "attach_prob out of [0, 1]",
        )?;
        check(
            self.resolution[0] > 0 && self.resolution[1] > 0,
            "resolution has a zero side",
        )?;
        check(self.placement_sigma >= 0.0, "placement_sigma negative")?;
        check(self.learning_rate > 0.0, "learning_rate not positive")?;
        check(self.weight_decay >= 0.0, "weight_decay negative")?;
        check(
            (0.0..=1.0).contains(&self.lr_decay_at),
            "lr_decay_at out of [0, 1]",
        )?;
        check(self.lr_decay_factor > 0.0, "lr_decay_factor not positive")?;
        check(self.batch_size >= 1, "batch_size less than 1")?;
        Ok(self)
    }

    /// Grid side `n` with `n * n == n_subpatches`.
    pub fn grid_side(&self) -> usize {
        perfect_square_root(self.n_subpatches).unwrap_or(1)
    }

    /// Number of passes over the data in replayed training.
    pub fn data_passes(&self) -> usize {
        self.epochs / self.replay
    }
}
