//! Replayed ("free") adversarial training and its two baselines.
//!
//! All three modes share one loop skeleton and spend the same number of
//! optimizer steps for a given epoch budget:
//!
//! * `standard`: one clean step per minibatch, `epochs` passes.
//! * `linf_free`: each minibatch replayed `replay` times, `epochs / replay`
//!   passes; the global field is ascended with the input gradient recycled
//!   from the parameter step.
//! * `pbcat`: as `linf_free`, plus a patch field applied through
//!   gradient-selected sub-patch masks inside per-box patch squares.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::detector::{Detector, PassCounts};
use crate::error::{Error, Result};
use crate::masking::image_mask;
use crate::optim::{AdamW, StepDecay};
use crate::perturb::{compose, PerturbState};
use crate::placement::{place_all, PatchPlacement};
use crate::rng::{self, Rng};
use crate::tensor::{Image, Mask};
use crate::types::{BBox, ImageSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Standard,
    LinfFree,
    Pbcat,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::LinfFree => "linf_free",
            TrainMode::Pbcat => "pbcat",
        }
    }

    pub fn replays(&self, cfg: &TrainConfig) -> usize {
        match self {
            TrainMode::Standard => 1,
            _ => cfg.replay,
        }
    }

    pub fn data_passes(&self, cfg: &TrainConfig) -> usize {
        cfg.epochs / self.replays(cfg)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub mode: TrainMode,
    pub max_abs_delta_g: f32,
    pub max_abs_delta_p: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    /// Epochs completed so far (a replayed pass counts `replay` epochs).
    pub epoch: usize,
    pub pass: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub mode: TrainMode,
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochSnapshot>,
    pub forwards: usize,
    pub backwards: usize,
    pub optimizer_steps: usize,
    pub data_passes: usize,
    pub replays_per_batch: usize,
    pub batches_per_pass: usize,
    pub seed: u64,
    /// Filled in by callers that hash the serialized config.
    pub config_hash: String,
    /// Filled in by callers that have a clock.
    pub wall_clock_secs: Option<f64>,
}

/// Position of a step inside the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPosition {
    pub pass: usize,
    pub batch: usize,
    pub replay: usize,
}

/// Everything an observer may inspect after a step.
pub struct StepEvent<'a> {
    pub metrics: &'a StepMetrics,
    pub position: StepPosition,
    pub batch_ids: &'a [&'a str],
    pub state: Option<&'a PerturbState>,
    pub placements: &'a [Vec<PatchPlacement>],
    pub masks: &'a [Mask],
}

/// Hooks into the training loop. All methods default to doing nothing.
pub trait TrainObserver<D> {
    fn on_batch_start(&mut self, _pass: usize, _batch: usize, _state: Option<&PerturbState>) {}

    fn on_step(&mut self, _event: &StepEvent<'_>) {}

    fn on_epoch_end(
        &mut self,
        _snapshot: &EpochSnapshot,
        _det: &D,
        _state: Option<&PerturbState>,
    ) -> Result<()> {
        Ok(())
    }
}

impl<D> TrainObserver<D> for () {}

/// Mutable pieces threaded through the inner steps.
pub struct StepContext<'a, D: Detector> {
    pub det: &'a mut D,
    pub optimizer: &'a mut AdamW<D::Scalar>,
    pub lr: f64,
    pub cfg: &'a TrainConfig,
    pub mask_rng: &'a mut Rng,
}

/// One replay of one minibatch.
///
/// In order: compose the adversarial batch from the current fields and
/// masks; run one combined pass for the loss, input gradients and parameter
/// gradient; step the optimizer; ascend both fields with the batch-mean input
/// gradient; rebuild each image's mask from its own input gradient. Exactly
/// one forward and one backward pass are spent.
///
/// With `rebuild_masks == false` the masks are left untouched (the l∞-only
/// mode keeps them empty).
pub fn pbcat_inner_step<D: Detector>(
    ctx: &mut StepContext<'_, D>,
    batch: &[&ImageSample],
    state: &mut PerturbState,
    placements: &[Vec<PatchPlacement>],
    masks: &mut [Mask],
    rebuild_masks: bool,
) -> Result<f64> {
    let adv: Vec<Image> = batch
        .iter()
        .zip(masks.iter())
        .map(|(s, m)| compose(&s.image, state, m))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&Image, &[BBox])> = adv
        .iter()
        .zip(batch)
        .map(|(x, s)| (x, s.boxes.as_slice()))
        .collect();
    let grads = ctx.det.loss_and_grads(&pairs, true)?;
    if !grads.loss.is_finite() {
        return Err(Error::NonFiniteLoss(String::from("training step")));
    }
    ctx.optimizer
        .step(ctx.det.params_mut(), &grads.param_grads, ctx.lr);

    let g_adv = Image::mean_of(&grads.input_grads)?;
    state.update_global(&g_adv)?;
    state.update_patch(&g_adv, ctx.cfg.alpha)?;

    if rebuild_masks {
        for ((mask, grad), pl) in masks.iter_mut().zip(&grads.input_grads).zip(placements) {
            *mask = image_mask(grad, pl, ctx.cfg, ctx.mask_rng)?;
        }
    }
    Ok(grads.loss)
}

fn check_dataset(data: &[ImageSample], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w) = (cfg.resolution[0], cfg.resolution[1]);
    for s in data {
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::InvalidSample(alloc::format!(
                "{}: image is {}x{}, training canvas is {}x{}",
                s.id,
                s.image.height(),
                s.image.width(),
                h,
                w
            )));
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub record: TrainRunRecord,
    /// Final perturbation fields (absent in standard mode).
    pub state: Option<PerturbState>,
}

/// Trains `det` in place.
pub fn train<D: Detector, O: TrainObserver<D>>(
    mode: TrainMode,
    det: &mut D,
    data: &[ImageSample],
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<TrainOutcome> {
    let cfg = cfg.clone().validate()?;
    check_dataset(data, &cfg)?;
    if det.canvas() != (cfg.resolution[0], cfg.resolution[1]) {
        return Err(Error::InvalidConfig("resolution does not match detector canvas"));
    }

    let replays = mode.replays(&cfg);
    let passes = mode.data_passes(&cfg);
    let batches_per_pass = data.len().div_ceil(cfg.batch_size);
    let total_steps = passes * batches_per_pass * replays;
    let schedule = StepDecay::new(
        f64::from(cfg.learning_rate),
        total_steps,
        f64::from(cfg.lr_decay_at),
        f64::from(cfg.lr_decay_factor),
    );

    let mut order_rng = rng::stream(cfg.seed, rng::STREAM_DATA_ORDER);
    let mut place_rng = rng::stream(cfg.seed, rng::STREAM_PLACEMENT);
    let mut mask_rng = rng::stream(cfg.seed, rng::STREAM_MASK);
    let mut optimizer = AdamW::new(det.params().len(), f64::from(cfg.weight_decay));
    let canvas = (cfg.resolution[0], cfg.resolution[1]);
    let mut state = match mode {
        TrainMode::Standard => None,
        _ => Some(PerturbState::new(canvas, &cfg)?),
    };

    let counts_before = det.counts();
    let mut losses = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(passes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for pass in 0..passes {
        order.shuffle(&mut order_rng);
        let pass_start = losses.len();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &data[i]).collect();
            let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
            observer.on_batch_start(pass, bi, state.as_ref());

            // Placements are fixed for all replays of this minibatch.
            let placements: Vec<Vec<PatchPlacement>> = match mode {
                TrainMode::Pbcat => batch
                    .iter()
                    .map(|s| place_all(s, &cfg, &mut place_rng))
                    .collect(),
                _ => vec![Vec::new(); batch.len()],
            };
            // No gradient has been seen for the new placements yet, so the
            // first replay carries no patch.
            let mut masks: Vec<Mask> = vec![Mask::empty(canvas.0, canvas.1); batch.len()];

            for replay in 0..replays {
                let lr = schedule.lr(step);
                let loss = match state.as_mut() {
                    Some(st) => {
                        let mut ctx = StepContext {
                            det: &mut *det,
                            optimizer: &mut optimizer,
                            lr,
                            cfg: &cfg,
                            mask_rng: &mut mask_rng,
                        };
                        pbcat_inner_step(
                            &mut ctx,
                            &batch,
                            st,
                            &placements,
                            &mut masks,
                            mode == TrainMode::Pbcat,
                        )?
                    }
                    None => {
                        let pairs: Vec<(&Image, &[BBox])> = batch
                            .iter()
                            .map(|s| (&s.image, s.boxes.as_slice()))
                            .collect();
                        let g = det.loss_and_grads(&pairs, true)?;
                        optimizer.step(det.params_mut(), &g.param_grads, lr);
                        g.loss
                    }
                };
                let metrics = StepMetrics {
                    step,
                    loss,
                    mode,
                    max_abs_delta_g: state.as_ref().map_or(0.0, |s| s.delta_g().max_abs()),
                    max_abs_delta_p: state.as_ref().map_or(0.0, |s| s.delta_p().max_abs()),
                };
                observer.on_step(&StepEvent {
                    metrics: &metrics,
                    position: StepPosition {
                        pass,
                        batch: bi,
                        replay,
                    },
                    batch_ids: &ids,
                    state: state.as_ref(),
                    placements: &placements,
                    masks: &masks,
                });
                losses.push(loss);
                step += 1;
            }
        }
        let pass_losses = &losses[pass_start..];
        let snap = EpochSnapshot {
            epoch: (pass + 1) * replays,
            pass,
            mean_loss: pass_losses.iter().sum::<f64>() / pass_losses.len().max(1) as f64,
            steps: step,
        };
        observer.on_epoch_end(&snap, det, state.as_ref())?;
        epochs.push(snap);
    }

    let counts = det.counts();
    let PassCounts { forwards, backwards } = counts;
    Ok(TrainOutcome {
        record: TrainRunRecord {
            mode,
            losses,
            epochs,
            forwards: forwards - counts_before.forwards,
            backwards: backwards - counts_before.backwards,
            optimizer_steps: optimizer.steps() as usize,
            data_passes: passes,
            replays_per_batch: replays,
            batches_per_pass,
            seed: cfg.seed,
            config_hash: String::new(),
            wall_clock_secs: None,
        },
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{ToyArch, ToyDetector};
    use crate::types::BBox;
    use rand::Rng as _;

    fn dataset(n: usize, seed: u64) -> Vec<ImageSample> {
        let mut r = rng::stream(seed, 9);
        (0..n)
            .map(|i| {
                let data = (0..3 * 32 * 32).map(|_| r.random_range(0.0f32..1.0)).collect();
                let x = r.random_range(0.0..12.0f32);
                let y = r.random_range(0.0..12.0f32);
                ImageSample::new(
                    alloc::format!("img{i}"),
                    Image::from_vec(32, 32, data).unwrap(),
                    vec![BBox::new(x, y, x + 18.0, y + 20.0, i % 2).unwrap()],
                )
                .unwrap()
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            resolution: [32, 32],
            epochs: 4,
            replay: 2,
            batch_size: 3,
            n_subpatches: 4,
            attach_prob: 1.0,
            ..Default::default()
        }
    }

    fn detector() -> ToyDetector<f32> {
        ToyDetector::new(ToyArch::new(2, 32, 32), &mut rng::stream(0, rng::STREAM_INIT)).unwrap()
    }

    #[derive(Default)]
    struct Recorder {
        positions: Vec<StepPosition>,
        placements: Vec<Vec<Vec<PatchPlacement>>>,
        states_at_batch_start: Vec<Option<PerturbState>>,
        states_after_step: Vec<Option<PerturbState>>,
        mask_pixels: Vec<usize>,
    }

    impl<D> TrainObserver<D> for Recorder {
        fn on_batch_start(&mut self, _pass: usize, _batch: usize, state: Option<&PerturbState>) {
            self.states_at_batch_start.push(state.cloned());
        }

        fn on_step(&mut self, e: &StepEvent<'_>) {
            self.positions.push(e.position);
            self.placements.push(e.placements.to_vec());
            self.states_after_step.push(e.state.cloned());
            self.mask_pixels.push(e.masks.iter().map(Mask::count).sum());
        }
    }

    #[test]
    fn replay_schedule_and_cost_parity() {
        let data = dataset(7, 1);
        let c = cfg();
        let mut pb = detector();
        let out = train(TrainMode::Pbcat, &mut pb, &data, &c, &mut ()).unwrap();
        let r = &out.record;
        assert_eq!(r.data_passes, 2);
        assert_eq!(r.batches_per_pass, 3);
        assert_eq!(r.optimizer_steps, 2 * 3 * 2);
        assert_eq!(r.forwards, r.optimizer_steps);
        assert_eq!(r.backwards, r.optimizer_steps);

        let mut st = detector();
        let std_out = train(TrainMode::Standard, &mut st, &data, &c, &mut ()).unwrap();
        assert_eq!(std_out.record.forwards, r.forwards);
        assert_eq!(std_out.record.optimizer_steps, r.optimizer_steps);
        assert_eq!(std_out.record.data_passes, 4);
        assert!(std_out.state.is_none());
    }

    #[test]
    fn placements_stable_within_replays_and_state_carried_over() {
        let data = dataset(7, 2);
        let mut rec = Recorder::default();
        train(TrainMode::Pbcat, &mut detector(), &data, &cfg(), &mut rec).unwrap();

        let mut batch_firsts = Vec::new();
        for (i, p) in rec.positions.iter().enumerate() {
            if p.replay > 0 {
                assert_eq!(rec.placements[i], rec.placements[i - 1]);
            } else {
                batch_firsts.push(i);
            }
        }
        for w in batch_firsts.windows(2) {
            assert_ne!(rec.placements[w[0]], rec.placements[w[1]]);
        }
        // The state entering each minibatch is the state the previous one left.
        for (k, &first) in batch_firsts.iter().enumerate().skip(1) {
            assert_eq!(rec.states_at_batch_start[k], rec.states_after_step[first - 1]);
        }
        assert!(rec.states_at_batch_start[0]
            .as_ref()
            .is_some_and(|s| s.delta_g().max_abs() == 0.0));
        // Masks appear once a gradient has been seen.
        assert_eq!(rec.mask_pixels[batch_firsts[0]], rec.mask_pixels[0]);
        assert!(rec.mask_pixels[1..].iter().any(|m| *m > 0));
    }

    #[test]
    fn zero_attach_probability_reduces_to_linf_free() {
        let data = dataset(5, 3);
        let c = TrainConfig {
            attach_prob: 0.0,
            ..cfg()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        struct Collect<'a>(&'a mut Vec<StepMetrics>);
        impl<D> TrainObserver<D> for Collect<'_> {
            fn on_step(&mut self, e: &StepEvent<'_>) {
                self.0.push(*e.metrics);
            }
        }
        let mut d1 = detector();
        let mut d2 = detector();
        train(TrainMode::Pbcat, &mut d1, &data, &c, &mut Collect(&mut a)).unwrap();
        train(TrainMode::LinfFree, &mut d2, &data, &c, &mut Collect(&mut b)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                (x.step, x.loss.to_bits(), x.max_abs_delta_g, x.max_abs_delta_p),
                (y.step, y.loss.to_bits(), y.max_abs_delta_g, y.max_abs_delta_p)
            );
        }
        assert_eq!(d1.params(), d2.params());
    }

    #[test]
    fn fixed_seed_reproduces_loss_series() {
        let data = dataset(6, 4);
        let a = train(TrainMode::Pbcat, &mut detector(), &data, &cfg(), &mut ()).unwrap();
        let b = train(TrainMode::Pbcat, &mut detector(), &data, &cfg(), &mut ()).unwrap();
        assert_eq!(a.record.losses, b.record.losses);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn first_inner_step_sees_the_clean_batch() {
        let data = dataset(3, 5);
        let c = cfg();
        let mut det = detector();
        let batch: Vec<&ImageSample> = data.iter().collect();
        let pairs: Vec<(&Image, &[BBox])> = batch.iter().map(|s| (&s.image, s.boxes.as_slice())).collect();
        let clean = det.loss_and_grads(&pairs, false).unwrap().loss;

        let mut state = PerturbState::new((32, 32), &c).unwrap();
        let mut opt = AdamW::new(det.params().len(), 0.0);
        let mut mrng = rng::stream(0, rng::STREAM_MASK);
        let placements: Vec<Vec<PatchPlacement>> = batch
            .iter()
            .map(|s| place_all(s, &c, &mut rng::stream(0, 1)))
            .collect();
        let mut masks = vec![Mask::empty(32, 32); 3];
        let mut ctx = StepContext {
            det: &mut det,
            optimizer: &mut opt,
            lr: 1e-3,
            cfg: &c,
            mask_rng: &mut mrng,
        };
        let loss = pbcat_inner_step(&mut ctx, &batch, &mut state, &placements, &mut masks, true).unwrap();
        assert_eq!(loss.to_bits(), clean.to_bits());
        assert!(state.delta_g().max_abs() > 0.0);
        assert!(masks.iter().all(|m| m.count() > 0));
    }

    #[test]
    fn sign_ascent_raises_loss_on_a_frozen_model() {
        let data = dataset(20, 6);
        let c = TrainConfig {
            alpha: 1.0 / 255.0,
            ..cfg()
        };
        let det = detector();
        let mut state = PerturbState::new((32, 32), &c).unwrap();
        let mut mrng = rng::stream(0, rng::STREAM_MASK);
        let mut prng = rng::stream(0, rng::STREAM_PLACEMENT);
        let (mut up, mut total) = (0, 0);
        for s in &data {
            let pl = place_all(s, &c, &mut prng);
            let mut mask = Mask::empty(32, 32);
            for _ in 0..4 {
                let adv = compose(&s.image, &state, &mask).unwrap();
                let g = det.loss_and_grads(&[(&adv, &s.boxes)], false).unwrap();
                state.update_global(&g.input_grads[0]).unwrap();
                state.update_patch(&g.input_grads[0], c.alpha).unwrap();
                mask = image_mask(&g.input_grads[0], &pl, &c, &mut mrng).unwrap();
                let after = det.loss(&compose(&s.image, &state, &mask).unwrap(), &s.boxes).unwrap();
                total += 1;
                if after >= g.loss {
                    up += 1;
                }
            }
        }
        assert!(up as f64 >= 0.8 * total as f64, "{up}/{total}");
    }

    #[test]
    fn rejects_empty_data_and_wrong_canvas() {
        let mut det = detector();
        assert!(matches!(
            train(TrainMode::Pbcat, &mut det, &[], &cfg(), &mut ()),
            Err(Error::EmptyDataset)
        ));
        let c = TrainConfig {
            resolution: [64, 64],
            ..cfg()
        };
        assert!(train(TrainMode::Pbcat, &mut det, &dataset(2, 0), &c, &mut ()).is_err());
    }
}
