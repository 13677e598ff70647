//! Miniature anchor-free single-stage detector.
//!
//! Five 3x3 convolutions (three of them stride 2) with SiLU activations feed
//! a 1x1 head that predicts, for every cell of a stride-8 grid, one logit per
//! class and four log-distances from the cell centre to the box sides.
//! Training uses a sigmoid focal loss on every cell and a `-ln IoU` loss on
//! the cells whose centre falls inside a ground-truth box.
//!
//! Backpropagation is written out by hand and reaches the input pixels, so a
//! single pass yields both the parameter gradient and the input gradient.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{nms, BatchGrads, Detector, PassCounter, PassCounts};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Image, CHANNELS};
use crate::types::{BBox, Detection};

pub const STRIDE: usize = 8;
const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;
const PRIOR_PROB: f64 = 0.01;
const LOG_DIST_LIMIT: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyArch {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the five hidden convolutions.
    pub widths: [usize; 5],
}

impl ToyArch {
    pub fn new(num_classes: usize, height: usize, width: usize) -> Self {
        Self {
            num_classes,
            height,
            width,
            widths: [16, 32, 32, 32, 32],
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / STRIDE, self.width / STRIDE)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    w_off: usize,
    b_off: usize,
}

impl Conv {
    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn weight_len(&self) -> usize {
        self.out_c * self.col_rows()
    }

    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let n = self.out_len();
        for ic in 0..self.in_c {
            let plane = &input[ic * self.in_h * self.in_w..(ic + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ic * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], out: &mut [T]) {
        out.fill(T::zero());
        let n = self.out_len();
        for ic in 0..self.in_c {
            let plane = &mut out[ic * self.in_h * self.in_w..(ic + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ic * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-layer activations kept for the backward pass.
struct Trace<T> {
    cols: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    head: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ToyDetector<T: Real> {
    arch: ToyArch,
    convs: Vec<Conv>,
    params: Vec<T>,
    counter: PassCounter,
}

/// Assignment of one grid cell to a ground-truth box.
#[derive(Debug, Clone, Copy)]
struct Target {
    class_id: usize,
    /// Distances from the cell centre to the left, top, right and bottom sides.
    dist: [f64; 4],
}

impl<T: Real> ToyDetector<T> {
    /// Fresh detector with seeded Kaiming-uniform weights.
    pub fn new<R: Rng + ?Sized>(arch: ToyArch, rng: &mut R) -> Result<Self> {
        if arch.num_classes == 0 {
            return Err(Error::Unsupported("detector needs at least one class".into()));
        }
        if arch.height % STRIDE != 0 || arch.width % STRIDE != 0 || arch.height == 0 || arch.width == 0 {
            return Err(Error::Unsupported(alloc::format!(
                "canvas {}x{} is not a positive multiple of {STRIDE}",
                arch.height,
                arch.width
            )));
        }
        let convs = Self::layout(&arch);
        let total = convs.last().map(|c| c.b_off + c.out_c).unwrap_or(0);
        let mut params = vec![T::zero(); total];
        let last = convs.len() - 1;
        for (li, c) in convs.iter().enumerate() {
            let fan_in = c.col_rows() as f64;
            let bound = if li == last { 0.01 } else { libm::sqrt(6.0 / fan_in) };
            for w in &mut params[c.w_off..c.w_off + c.weight_len()] {
                *w = T::of(rng.random_range(-bound..bound));
            }
            if li == last {
                let cls_bias = -libm::log((1.0 - PRIOR_PROB) / PRIOR_PROB);
                for o in 0..c.out_c {
                    params[c.b_off + o] = T::of(if o < arch.num_classes { cls_bias } else { 0.5 });
                }
            }
        }
        Ok(Self {
            arch,
            convs,
            params,
            counter: PassCounter::default(),
        })
    }

    /// Detector with the given flat parameter vector.
    pub fn from_params(arch: ToyArch, params: Vec<T>) -> Result<Self> {
        let mut det = Self::new(arch, &mut crate::rng::stream(0, 0))?;
        if params.len() != det.params.len() {
            return Err(Error::Unsupported(alloc::format!(
                "expected {} parameters, found {}",
                det.params.len(),
                params.len()
            )));
        }
        det.params = params;
        Ok(det)
    }

    pub fn arch(&self) -> ToyArch {
        self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layout(arch: &ToyArch) -> Vec<Conv> {
        let strides = [2, 2, 2, 1, 1];
        let mut convs = Vec::new();
        let (mut h, mut w, mut c) = (arch.height, arch.width, CHANNELS);
        let mut off = 0;
        for (out_c, s) in arch.widths.iter().zip(strides) {
            let (oh, ow) = ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1);
            let conv = Conv {
                in_c: c,
                out_c: *out_c,
                k: 3,
                stride: s,
                pad: 1,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
                w_off: off,
                b_off: off + out_c * c * 9,
            };
            off = conv.b_off + out_c;
            convs.push(conv);
            (h, w, c) = (oh, ow, *out_c);
        }
        let head = Conv {
            in_c: c,
            out_c: arch.num_classes + 4,
            k: 1,
            stride: 1,
            pad: 0,
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            w_off: off,
            b_off: off + (arch.num_classes + 4) * c,
        };
        convs.push(head);
        convs
    }

    fn check_input_len(&self, len: usize) -> Result<()> {
        if len != CHANNELS * self.arch.height * self.arch.width {
            return Err(Error::ShapeMismatch {
                expected: (CHANNELS, self.arch.height, self.arch.width),
                found: (len / (self.arch.height * self.arch.width).max(1), self.arch.height, self.arch.width),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[T]) -> Trace<T> {
        let half = T::of(0.5);
        let mut act: Vec<T> = x.iter().map(|v| *v - half).collect();
        let mut cols_all = Vec::with_capacity(self.convs.len());
        let mut pre_all = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        for (li, c) in self.convs.iter().enumerate() {
            let n = c.out_len();
            let mut cols = vec![T::zero(); c.col_rows() * n];
            c.im2col(&act, &mut cols);
            let mut pre = vec![T::zero(); c.out_c * n];
            for o in 0..c.out_c {
                pre[o * n..(o + 1) * n].fill(self.params[c.b_off + o]);
            }
            T::gemm(
                c.out_c,
                c.col_rows(),
                n,
                &self.params[c.w_off..c.w_off + c.weight_len()],
                false,
                &cols,
                false,
                &mut pre,
                T::one(),
            );
            act = if li == last {
                pre.clone()
            } else {
                pre.iter().map(|v| *v * sigmoid(*v)).collect()
            };
            cols_all.push(cols);
            pre_all.push(pre);
        }
        Trace {
            cols: cols_all,
            pre: pre_all,
            head: act,
        }
    }

    /// Gradient of the loss with respect to the head output, given
    /// `d_head`, accumulated into `param_grads` (scaled by `scale`) and
    /// returned for the input.
    fn backward(&self, trace: &Trace<T>, d_head: Vec<T>, param_grads: Option<&mut [T]>, scale: T) -> Vec<T> {
        let mut param_grads = param_grads;
        let mut d_pre = d_head;
        let mut d_input = Vec::new();
        for li in (0..self.convs.len()).rev() {
            let c = &self.convs[li];
            let n = c.out_len();
            if let Some(pg) = param_grads.as_deref_mut() {
                let scaled: Vec<T> = d_pre.iter().map(|v| *v * scale).collect();
                T::gemm(
                    c.out_c,
                    n,
                    c.col_rows(),
                    &scaled,
                    false,
                    &trace.cols[li],
                    true,
                    &mut pg[c.w_off..c.w_off + c.weight_len()],
                    T::one(),
                );
                for o in 0..c.out_c {
                    let s = scaled[o * n..(o + 1) * n].iter().fold(T::zero(), |a, v| a + *v);
                    pg[c.b_off + o] = pg[c.b_off + o] + s;
                }
            }
            let mut d_cols = vec![T::zero(); c.col_rows() * n];
            T::gemm(
                c.col_rows(),
                c.out_c,
                n,
                &self.params[c.w_off..c.w_off + c.weight_len()],
                true,
                &d_pre,
                false,
                &mut d_cols,
                T::zero(),
            );
            let mut d_in = vec![T::zero(); c.in_c * c.in_h * c.in_w];
            c.col2im(&d_cols, &mut d_in);
            if li == 0 {
                d_input = d_in;
            } else {
                // SiLU derivative of the previous layer's pre-activation.
                let pre = &trace.pre[li - 1];
                d_pre = d_in
                    .iter()
                    .zip(pre)
                    .map(|(g, z)| {
                        let s = sigmoid(*z);
                        *g * s * (T::one() + *z * (T::one() - s))
                    })
                    .collect();
            }
        }
        d_input
    }

    fn assign_targets(&self, boxes: &[BBox]) -> Vec<Option<Target>> {
        let (gh, gw) = self.arch.grid();
        let mut out = vec![None; gh * gw];
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * STRIDE as f64;
                let cy = (gy as f64 + 0.5) * STRIDE as f64;
                let mut best: Option<(f64, Target)> = None;
                for b in boxes {
                    let (x1, y1, x2, y2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
                    if cx > x1 && cx < x2 && cy > y1 && cy < y2 {
                        let area = (x2 - x1) * (y2 - y1);
                        if best.as_ref().is_none_or(|(a, _)| area < *a) {
                            best = Some((
                                area,
                                Target {
                                    class_id: b.class_id,
                                    dist: [cx - x1, cy - y1, x2 - cx, y2 - cy],
                                },
                            ));
                        }
                    }
                }
                out[gy * gw + gx] = best.map(|(_, t)| t);
            }
        }
        out
    }

    /// Loss and its gradient with respect to the head output.
    fn head_loss(&self, head: &[T], boxes: &[BBox]) -> (T, Vec<T>) {
        let nc = self.arch.num_classes;
        let (gh, gw) = self.arch.grid();
        let g = gh * gw;
        let targets = self.assign_targets(boxes);
        let npos = targets.iter().filter(|t| t.is_some()).count().max(1);
        let norm = T::one() / T::of(npos as f64);
        let alpha = T::of(FOCAL_ALPHA);
        let gamma = T::of(FOCAL_GAMMA);
        let one = T::one();
        let mut loss = T::zero();
        let mut d = vec![T::zero(); head.len()];

        for (cell, target) in targets.iter().enumerate() {
            for k in 0..nc {
                let idx = k * g + cell;
                let z = head[idx];
                let p = sigmoid(z);
                let positive = target.is_some_and(|t| t.class_id == k);
                let (l, dz) = if positive {
                    // -a (1-p)^g ln p
                    let ln_p = -softplus(-z);
                    let q = (one - p).powf(gamma);
                    (-alpha * q * ln_p, alpha * q * (gamma * p * ln_p - (one - p)))
                } else {
                    // -(1-a) p^g ln(1-p)
                    let ln_q = -softplus(z);
                    let pg = p.powf(gamma);
                    (
                        -(one - alpha) * pg * ln_q,
                        -(one - alpha) * pg * (gamma * (one - p) * ln_q - p),
                    )
                };
                loss = loss + l * norm;
                d[idx] = dz * norm;
            }

            let Some(t) = target else { continue };
            let stride = T::of(STRIDE as f64);
            let limit = T::of(LOG_DIST_LIMIT);
            let mut pd = [T::zero(); 4];
            let mut live = [false; 4];
            for j in 0..4 {
                let r = head[(nc + j) * g + cell];
                live[j] = r.abs() < limit;
                pd[j] = stride * r.max(-limit).min(limit).exp();
            }
            let td: [T; 4] = t.dist.map(T::of);
            let iw = pd[0].min(td[0]) + pd[2].min(td[2]);
            let ih = pd[1].min(td[1]) + pd[3].min(td[3]);
            let inter = iw * ih;
            let area_p = (pd[0] + pd[2]) * (pd[1] + pd[3]);
            let area_t = (td[0] + td[2]) * (td[1] + td[3]);
            let union = area_p + area_t - inter;
            loss = loss + (union.ln() - inter.ln()) * norm;

            let d_inter = -(one / inter) - one / union;
            let d_area_p = one / union;
            for j in 0..4 {
                // Horizontal sides pair with the vertical extent and vice versa.
                let (other_inter, other_area) = if j % 2 == 0 { (ih, pd[1] + pd[3]) } else { (iw, pd[0] + pd[2]) };
                let d_inter_dj = if pd[j] < td[j] { other_inter } else { T::zero() };
                let dl_dd = d_inter * d_inter_dj + d_area_p * other_area;
                if live[j] {
                    d[(nc + j) * g + cell] = dl_dd * pd[j] * norm;
                }
            }
        }
        (loss, d)
    }

    /// Loss, input gradient and parameter gradient for one image given in the
    /// detector's own scalar type.
    pub fn loss_and_grads_raw(&self, x: &[T], boxes: &[BBox]) -> Result<(T, Vec<T>, Vec<T>)> {
        self.check_input_len(x.len())?;
        let trace = self.forward(x);
        let (loss, d_head) = self.head_loss(&trace.head, boxes);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(alloc::format!(
                "loss {:?} with {} boxes",
                loss,
                boxes.len()
            )));
        }
        let mut pg = vec![T::zero(); self.params.len()];
        let dx = self.backward(&trace, d_head, Some(&mut pg), T::one());
        Ok((loss, dx, pg))
    }

    /// Forward-only loss in the detector's scalar type.
    pub fn loss_raw(&self, x: &[T], boxes: &[BBox]) -> Result<T> {
        self.check_input_len(x.len())?;
        let trace = self.forward(x);
        Ok(self.head_loss(&trace.head, boxes).0)
    }

    fn to_scalar(x: &Image) -> Vec<T> {
        x.as_slice().iter().map(|v| T::of(f64::from(*v))).collect()
    }

    fn decode(&self, head: &[T], score_threshold: f32) -> Vec<Detection> {
        let nc = self.arch.num_classes;
        let (gh, gw) = self.arch.grid();
        let g = gh * gw;
        let (w, h) = (self.arch.width as f32, self.arch.height as f32);
        let mut out = Vec::new();
        for cell in 0..g {
            let (best_k, best_z) = (0..nc)
                .map(|k| (k, head[k * g + cell]))
                .fold((0, T::neg_infinity()), |a, b| if b.1 > a.1 { b } else { a });
            let score = sigmoid(best_z).f64() as f32;
            if !(score >= score_threshold) {
                continue;
            }
            let cx = ((cell % gw) as f32 + 0.5) * STRIDE as f32;
            let cy = ((cell / gw) as f32 + 0.5) * STRIDE as f32;
            let dist = |j: usize| {
                let r = head[(nc + j) * g + cell].f64().clamp(-LOG_DIST_LIMIT, LOG_DIST_LIMIT);
                (STRIDE as f64 * libm::exp(r)) as f32
            };
            let x1 = (cx - dist(0)).clamp(0.0, w);
            let y1 = (cy - dist(1)).clamp(0.0, h);
            let x2 = (cx + dist(2)).clamp(0.0, w);
            let y2 = (cy + dist(3)).clamp(0.0, h);
            if let Ok(bbox) = BBox::new(x1, y1, x2, y2, best_k) {
                out.push(Detection {
                    bbox,
                    score: score.clamp(0.0, 1.0),
                });
            }
        }
        out
    }
}

impl<T: Real> Detector for ToyDetector<T> {
    type Scalar = T;

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn canvas(&self) -> (usize, usize) {
        (self.arch.height, self.arch.width)
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn loss_and_grads(&self, batch: &[(&Image, &[BBox])], with_param_grads: bool) -> Result<BatchGrads<T>> {
        self.counter.forward();
        self.counter.backward();
        let mut param_grads = if with_param_grads {
            vec![T::zero(); self.params.len()]
        } else {
            Vec::new()
        };
        let scale = T::one() / T::of(batch.len().max(1) as f64);
        let mut losses = Vec::with_capacity(batch.len());
        let mut input_grads = Vec::with_capacity(batch.len());
        for (x, boxes) in batch {
            let xs = Self::to_scalar(x);
            self.check_input_len(xs.len())?;
            let trace = self.forward(&xs);
            let (loss, d_head) = self.head_loss(&trace.head, boxes);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(alloc::format!(
                    "loss {:?} on a {}-box image",
                    loss,
                    boxes.len()
                )));
            }
            let pg = with_param_grads.then_some(param_grads.as_mut_slice());
            let dx = self.backward(&trace, d_head, pg, scale);
            losses.push(loss.f64());
            input_grads.push(Image::from_vec(
                x.height(),
                x.width(),
                dx.iter().map(|v| v.f64() as f32).collect(),
            )?);
        }
        let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        Ok(BatchGrads {
            loss,
            losses,
            input_grads,
            param_grads,
        })
    }

    fn loss(&self, x: &Image, boxes: &[BBox]) -> Result<f64> {
        self.counter.forward();
        let v = self.loss_raw(&Self::to_scalar(x), boxes)?.f64();
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(alloc::format!("forward loss {v}")));
        }
        Ok(v)
    }

    fn predict(&self, x: &Image, score_threshold: f32, nms_iou: f32) -> Result<Vec<Detection>> {
        self.counter.forward();
        let xs = Self::to_scalar(x);
        self.check_input_len(xs.len())?;
        let trace = self.forward(&xs);
        Ok(nms(self.decode(&trace.head, score_threshold), nms_iou))
    }

    fn counts(&self) -> PassCounts {
        self.counter.get()
    }
}
