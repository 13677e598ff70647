//! Persistent global and patch perturbation fields.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Image, Mask, CHANNELS};

/// The pair of full-canvas fields carried across minibatches.
///
/// `delta_g` stays within `[-epsilon, epsilon]` and `delta_p` within
/// `[-beta, beta]`, elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbState {
    delta_g: Image,
    delta_p: Image,
    epsilon: f32,
    beta: f32,
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sign_step(field: &mut Image, grad: &Image, step: f32, bound: f32) -> Result<()> {
    field.same_shape(grad)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    for (d, g) in field.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *d = (*d + step * sign(*g)).clamp(-bound, bound);
    }
    Ok(())
}

impl PerturbState {
    /// Both fields zero on a `canvas = (height, width)` canvas.
    pub fn new(canvas: (usize, usize), cfg: &TrainConfig) -> Result<Self> {
        if canvas != (cfg.resolution[0], cfg.resolution[1]) {
            return Err(Error::ShapeMismatch {
                expected: (CHANNELS, cfg.resolution[0], cfg.resolution[1]),
                found: (CHANNELS, canvas.0, canvas.1),
            });
        }
        Ok(Self {
            delta_g: Image::zeros(canvas.0, canvas.1),
            delta_p: Image::zeros(canvas.0, canvas.1),
            epsilon: cfg.epsilon,
            beta: cfg.beta,
        })
    }

    pub fn delta_g(&self) -> &Image {
        &self.delta_g
    }

    pub fn delta_p(&self) -> &Image {
        &self.delta_p
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.delta_g.height(), self.delta_g.width())
    }

    /// `delta_g <- clip(delta_g + epsilon * sign(g), -epsilon, epsilon)`.
    pub fn update_global(&mut self, g_adv: &Image) -> Result<()> {
        sign_step(&mut self.delta_g, g_adv, self.epsilon, self.epsilon)
    }

    /// `delta_p <- clip(delta_p + alpha * sign(g), -beta, beta)` over the
    /// whole canvas; masking happens at composition.
    pub fn update_patch(&mut self, g_adv: &Image, alpha: f32) -> Result<()> {
        sign_step(&mut self.delta_p, g_adv, alpha, self.beta)
    }
}

/// `clamp(x + delta_p * M + delta_g, 0, 1)` with `M` broadcast over channels.
pub fn compose(x: &Image, state: &PerturbState, mask: &Mask) -> Result<Image> {
    x.same_shape(&state.delta_g)?;
    if (mask.height(), mask.width()) != (x.height(), x.width()) {
        return Err(Error::ShapeMismatch {
            expected: x.shape(),
            found: (CHANNELS, mask.height(), mask.width()),
        });
    }
    let plane = x.plane_len();
    let m = mask.as_slice();
    let mut out = x.clone();
    let dg = state.delta_g.as_slice();
    let dp = state.delta_p.as_slice();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let adv = if m[i % plane] {
            *v + dp[i] + dg[i]
        } else {
            *v + dg[i]
        };
        *v = adv.clamp(0.0, 1.0);
    }
    Ok(out)
}
