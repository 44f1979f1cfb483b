//! Brute-force evaluation oracles: quadratic NMS and a from-scratch AP that
//! rescans every prefix for each recall point. Shared by the test suites
//! and the `oracle-check` command.

use super::eval::iou;
use super::{Detection, GroundTruthBox};

/// Quadratic-scan NMS over (pixel index, detection) candidates: walk the
/// score-ordered list and keep a candidate iff no already-kept detection of
/// the same class overlaps it beyond the threshold.
pub fn nms(candidates: &[(usize, Detection)], nms_iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .score
            .partial_cmp(&candidates[a].1.score)
            .unwrap()
            .then(candidates[a].0.cmp(&candidates[b].0))
            .then(candidates[a].1.class.cmp(&candidates[b].1.class))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &candidates[i].1;
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.rect, &d.rect) > nms_iou);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Single-class, single-threshold AP computed entirely from first
/// principles on one image set: explicit greedy matching with the IoU
/// matrix re-scanned at every step, then 101-point interpolation by
/// scanning all prefixes per recall point.
pub fn ap_single_class(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    class: usize,
    thresh: f64,
) -> f64 {
    // flatten and sort by (score desc, image asc)
    let mut dets: Vec<(usize, Detection)> = Vec::new();
    for (img, v) in detections.iter().enumerate() {
        for d in v.iter().filter(|d| d.class == class) {
            dets.push((img, *d));
        }
    }
    dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));

    let mut gts: Vec<(usize, GroundTruthBox, bool)> = Vec::new();
    for (img, v) in ground_truth.iter().enumerate() {
        for g in v.iter().filter(|g| g.class == class) {
            gts.push((img, *g, false));
        }
    }
    let total_gt = gts.len();
    if total_gt == 0 {
        return 0.0;
    }

    let mut flags = Vec::new();
    for (img, d) in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, g, used)) in gts.iter().enumerate() {
            if gimg != img || *used {
                continue;
            }
            let v = iou(&d.rect, &g.rect);
            if v >= thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gts[gi].2 = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }

    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        // scan every prefix; take the best precision among those whose
        // recall reaches r
        let mut best_p = 0.0f64;
        let mut tp = 0usize;
        for (i, &f) in flags.iter().enumerate() {
            if f {
                tp += 1;
            }
            let recall = tp as f64 / total_gt as f64;
            let precision = tp as f64 / (i + 1) as f64;
            if recall >= r - 1e-12 {
                best_p = best_p.max(precision);
            }
        }
        total += best_p;
    }
    total / 101.0
}

/// Mean over the classes present in the ground truth.
pub fn ap_mean(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    thresh: f64,
) -> f64 {
    let classes: std::collections::BTreeSet<usize> =
        ground_truth.iter().flatten().map(|g| g.class).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| ap_single_class(detections, ground_truth, c, thresh))
        .sum();
    sum / classes.len() as f64
}
