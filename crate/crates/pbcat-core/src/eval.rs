//! IoU, AP50 and the clean/attacked evaluation harness.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AttackConfig};
use crate::detector::Detector;
use crate::error::Result;
use crate::types::{BBox, Detection, ImageSample};

pub const AP_IOU_THRESHOLD: f32 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Detection indices of one image in matching order: descending score, ties
/// by position.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy matching within one image. Detections are visited by descending
/// score and each takes the highest-IoU unmatched ground truth with IoU at
/// least `threshold`. Returns, per detection, the matched ground-truth index.
pub fn match_detections(dets: &[Detection], gts: &[BBox], threshold: f32) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for di in score_order(dets) {
        let mut best: Option<(usize, f32)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = iou(&dets[di].bbox, g);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            out[di] = Some(gi);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    /// Set when there were neither ground truths nor detections; `ap` is
    /// then reported as 1.0.
    pub degenerate: bool,
    pub pr_curve: Vec<PrPoint>,
}

/// Single-class AP at IoU 0.5 with all-point interpolation. Class ids on the
/// inputs are ignored.
pub fn ap50(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> ApResult {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let num_det: usize = dets.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return ApResult {
            ap: if num_det == 0 { 1.0 } else { 0.0 },
            num_gt,
            tp: 0,
            fp: num_det,
            degenerate: num_det == 0,
            pr_curve: Vec::new(),
        };
    }

    // (score, image, detection, is_tp)
    let mut ranked: Vec<(f32, usize, usize, bool)> = Vec::with_capacity(num_det);
    let empty: Vec<BBox> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        let g = gts.get(img).unwrap_or(&empty);
        let m = match_detections(d, g, AP_IOU_THRESHOLD);
        for (di, det) in d.iter().enumerate() {
            ranked.push((det.score, img, di, m[di].is_some()));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut curve = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in &ranked {
        if r.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }

    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }

    ApResult {
        ap,
        num_gt,
        tp,
        fp,
        degenerate: false,
        pr_curve: curve,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub score_threshold: f32,
    pub nms_iou: f32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ap50: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub degenerate: bool,
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    /// Attack description, or `"clean"`.
    pub attack: String,
}

/// AP50 summary of one detector on one dataset, clean or attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    /// Mean over classes that have ground truth.
    pub mean_ap50: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
    pub num_images: usize,
    pub settings: EvalSettings,
    pub provenance: Provenance,
}

/// Builds a report from per-image predictions and ground truths.
pub fn report_from_predictions(
    preds: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    num_classes: usize,
    settings: EvalSettings,
    provenance: Provenance,
) -> EvalReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let d: Vec<Vec<Detection>> = preds
            .iter()
            .map(|p| p.iter().filter(|d| d.bbox.class_id == k).copied().collect())
            .collect();
        let g: Vec<Vec<BBox>> = gts
            .iter()
            .map(|b| b.iter().filter(|b| b.class_id == k).copied().collect())
            .collect();
        let r = ap50(&d, &g);
        per_class.push(ClassReport {
            class_id: k,
            ap50: r.ap,
            num_gt: r.num_gt,
            tp: r.tp,
            fp: r.fp,
            fn_: r.num_gt - r.tp,
            degenerate: r.degenerate,
            pr_curve: r.pr_curve,
        });
    }
    let with_gt: Vec<f64> = per_class.iter().filter(|c| c.num_gt > 0).map(|c| c.ap50).collect();
    let mean_ap50 = if with_gt.is_empty() {
        let any_det = per_class.iter().any(|c| c.fp > 0);
        if any_det {
            0.0
        } else {
            1.0
        }
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };
    let tp = per_class.iter().map(|c| c.tp).sum();
    let fp = per_class.iter().map(|c| c.fp).sum();
    let num_gt = per_class.iter().map(|c| c.num_gt).sum();
    EvalReport {
        per_class,
        mean_ap50,
        tp,
        fp,
        fn_: num_gt - tp,
        num_gt,
        num_images: preds.len(),
        settings,
        provenance,
    }
}

/// Runs the attack when given, then predicts and scores every image.
pub fn evaluate<D: Detector>(
    det: &D,
    dataset: &[ImageSample],
    attack: Option<&AttackConfig>,
    settings: EvalSettings,
    checkpoint: &str,
) -> Result<EvalReport> {
    let attacked;
    let (samples, label) = match attack {
        Some(cfg) => {
            attacked = attack_dataset(det, dataset, cfg)?.samples;
            (attacked.as_slice(), cfg.describe())
        }
        None => (dataset, String::from("clean")),
    };
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(det.predict(&s.image, settings.score_threshold, settings.nms_iou)?);
    }
    let gts: Vec<Vec<BBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(report_from_predictions(
        &preds,
        &gts,
        det.num_classes(),
        settings,
        Provenance {
            checkpoint: checkpoint.into(),
            attack: label,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2, 0).unwrap()
    }

    fn det(b: BBox, score: f32) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        let shifted = bx(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn single_true_positive_is_perfect() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6: 10x10 vs 10x6 inside it.
        let d = bx(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&g, &d) - 0.6).abs() < 1e-6);
        let r = ap50(&[vec![det(d, 0.9)]], &[vec![g]]);
        assert_eq!(r.ap, 1.0);
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let fp = bx(0.0, 0.0, 10.0, 2.0); // IoU 0.2
        let tp = bx(0.0, 0.0, 10.0, 7.0); // IoU 0.7
        let r = ap50(&[vec![det(fp, 0.9), det(tp, 0.8)]], &[vec![g]]);
        assert!((r.ap - 0.5).abs() < 1e-12);
        assert_eq!((r.tp, r.fp), (1, 1));
    }

    #[test]
    fn degenerate_cases() {
        let r = ap50(&[vec![]], &[vec![]]);
        assert_eq!(r.ap, 1.0);
        assert!(r.degenerate);
        let r = ap50(&[vec![det(bx(0.0, 0.0, 1.0, 1.0), 0.5)]], &[vec![]]);
        assert_eq!(r.ap, 0.0);
        assert!(!r.degenerate);
        let r = ap50(&[vec![]], &[vec![bx(0.0, 0.0, 1.0, 1.0)]]);
        assert_eq!(r.ap, 0.0);
    }

    /// Exhaustive oracle: one PR point per distinct score threshold, each
    /// computed from scratch, then the area under the precision envelope.
    fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<BBox>]) -> f64 {
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        let mut thresholds: Vec<f32> = dets.iter().flatten().map(|d| d.score).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut points: Vec<(f64, f64)> = Vec::new();
        for t in thresholds {
            let (mut tp, mut n) = (0usize, 0usize);
            for (img, d) in dets.iter().enumerate() {
                let kept: Vec<Detection> = d.iter().filter(|x| x.score >= t).copied().collect();
                n += kept.len();
                // Greedy matching, re-derived: repeatedly take the highest
                // remaining score and its best free ground truth.
                let mut free = vec![true; gts[img].len()];
                let mut pending = kept.clone();
                while !pending.is_empty() {
                    let (pi, _) = pending
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |a, (i, x)| if x.score > a.1 { (i, x.score) } else { a });
                    let d = pending.remove(pi);
                    let mut best = None;
                    let mut best_iou = 0.0f32;
                    for (gi, g) in gts[img].iter().enumerate() {
                        let v = iou(&d.bbox, g);
                        if free[gi] && v >= 0.5 && v > best_iou {
                            best_iou = v;
                            best = Some(gi);
                        }
                    }
                    if let Some(gi) = best {
                        free[gi] = false;
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / num_gt as f64, tp as f64 / n as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    fn random_instance(r: &mut crate::rng::Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BBox>>) {
        let images = r.random_range(1..4);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..images {
            let ng = r.random_range(0..=5);
            let g: Vec<BBox> = (0..ng)
                .map(|_| {
                    let x = r.random_range(0.0..20.0f32);
                    let y = r.random_range(0.0..20.0f32);
                    bx(x, y, x + r.random_range(2.0..10.0f32), y + r.random_range(2.0..10.0f32))
                })
                .collect();
            let nd = r.random_range(0..=5);
            let d: Vec<Detection> = (0..nd)
                .map(|_| {
                    let b = if !g.is_empty() && r.random_bool(0.7) {
                        let t = g[r.random_range(0..g.len())];
                        let j = r.random_range(-2.0..2.0f32);
                        bx(t.x1 + j, t.y1 + j * 0.5, t.x2 + j, t.y2 - j * 0.3)
                    } else {
                        let x = r.random_range(0.0..20.0f32);
                        let y = r.random_range(0.0..20.0f32);
                        bx(x, y, x + 5.0, y + 5.0)
                    };
                    det(b, r.random_range(0.0..1.0f32))
                })
                .collect();
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_instances() {
        let mut r = rng::stream(2024, 0);
        let mut checked = 0;
        while checked < 500 {
            let (d, g) = random_instance(&mut r);
            if g.iter().all(Vec::is_empty) {
                continue;
            }
            let fast = ap50(&d, &g).ap;
            let slow = oracle_ap(&d, &g);
            assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}: {d:?} {g:?}");
            checked += 1;
        }
    }

    #[test]
    fn report_counts_are_consistent() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0, 1).unwrap()]];
        let preds = vec![vec![det(bx(0.0, 0.0, 10.0, 9.0), 0.9)]];
        let rep = report_from_predictions(
            &preds,
            &gts,
            2,
            EvalSettings::default(),
            Provenance {
                checkpoint: "x".into(),
                attack: "clean".into(),
            },
        );
        assert_eq!(rep.tp + rep.fn_, rep.num_gt);
        assert_eq!(rep.per_class[0].ap50, 1.0);
        assert_eq!(rep.per_class[1].ap50, 0.0);
        assert_eq!(rep.mean_ap50, 0.5);
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_score_ranking(seed in any::<u64>(), k in 0.5f32..4.0, shift in -2.0f32..2.0) {
            let mut r = rng::stream(seed, 0);
            let (d, g) = random_instance(&mut r);
            let transformed: Vec<Vec<Detection>> = d
                .iter()
                .map(|v| v.iter().map(|x| det(x.bbox, (k * x.score).exp() + shift)).collect())
                .collect();
            prop_assert_eq!(ap50(&d, &g).ap, ap50(&transformed, &g).ap);
        }

        #[test]
        fn demoting_a_true_positive_never_raises_ap(seed in any::<u64>(), pick in any::<usize>()) {
            let mut r = rng::stream(seed, 0);
            let (mut d, g) = random_instance(&mut r);
            let before = ap50(&d, &g).ap;
            let all: Vec<(usize, usize)> = d.iter().enumerate().flat_map(|(i, v)| (0..v.len()).map(move |j| (i, j))).collect();
            prop_assume!(!all.is_empty());
            let (i, j) = all[pick % all.len()];
            // Move the box far from every ground truth: IoU drops to 0.
            let b = d[i][j].bbox;
            d[i][j].bbox = bx(b.x1 + 1000.0, b.y1 + 1000.0, b.x2 + 1000.0, b.y2 + 1000.0);
            prop_assert!(ap50(&d, &g).ap <= before + 1e-12);
        }

        #[test]
        fn greedy_matching_is_injective(seed in any::<u64>()) {
            let mut r = rng::stream(seed, 0);
            let (d, g) = random_instance(&mut r);
            for (dd, gg) in d.iter().zip(&g) {
                let m = match_detections(dd, gg, 0.5);
                let mut used: Vec<usize> = m.iter().flatten().copied().collect();
                let n = used.len();
                used.sort_unstable();
                used.dedup();
                prop_assert_eq!(used.len(), n);
                for (di, gi) in m.iter().enumerate() {
                    if let Some(gi) = gi {
                        prop_assert!(iou(&dd[di].bbox, &gg[*gi]) >= 0.5);
                    }
                }
            }
        }
    }
}
