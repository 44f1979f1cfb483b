//! COCO-style evaluation: greedy score-ordered matching, 101-point
//! interpolated average precision per class per IoU threshold, size-bucketed
//! variants and average recall.

use std::io::{BufRead, Write};
use std::sync::Once;

use serde::{Deserialize, Serialize};

use super::{Detection, GroundTruthBox};
use crate::error::{Error, Result};
use crate::sensing::Box2D;

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Size buckets by ground-truth area, in pixels².
const MEDIUM_AREA: std::ops::Range<f64> = (32.0 * 32.0)..(96.0 * 96.0);
const LARGE_MIN_AREA: f64 = 96.0 * 96.0;

/// Intersection over union; degenerate boxes score 0.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    if a.area() == 0.0 || b.area() == 0.0 {
        static WARN: Once = Once::new();
        WARN.call_once(|| eprintln!("warning: IoU of a degenerate (zero-area) box is defined as 0"));
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Evaluation summary; every value lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean AP over the 0.50:0.05:0.95 thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP restricted to medium ground truths (area in [32², 96²)).
    pub ap_medium: f64,
    /// AP restricted to large ground truths (area ≥ 96²).
    pub ap_large: f64,
    /// Mean max recall over thresholds, up to 100 detections per image.
    pub ar: f64,
}

#[derive(Clone, Copy)]
enum Bucket {
    All,
    Medium,
    Large,
}

fn in_bucket(area: f64, bucket: Bucket) -> bool {
    match bucket {
        Bucket::All => true,
        Bucket::Medium => MEDIUM_AREA.contains(&area),
        Bucket::Large => area >= LARGE_MIN_AREA,
    }
}

/// Greedy matching of one class at one threshold. Returns (tp flags in
/// score order, matched gt count, total non-ignored gts). Detections
/// matching only ignored ground truths are skipped entirely.
fn match_class(
    dets: &[(usize, Detection)],
    gts: &[(usize, GroundTruthBox)],
    thresh: f64,
    bucket: Bucket,
) -> (Vec<bool>, Vec<f64>, usize) {
    let mut gt_used = vec![false; gts.len()];
    let n_real = gts
        .iter()
        .filter(|(_, g)| in_bucket(g.rect.area(), bucket))
        .count();
    let mut tp_flags = Vec::new();
    let mut scores = Vec::new();
    for (img, det) in dets {
        // highest-IoU unmatched ground truth in the same image at or above
        // the threshold; ties resolve to the earlier ground-truth index
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, gt)) in gts.iter().enumerate() {
            if gimg != img || gt_used[gi] {
                continue;
            }
            let v = iou(&det.rect, &gt.rect);
            if v >= thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                if in_bucket(gts[gi].1.rect.area(), bucket) {
                    tp_flags.push(true);
                    scores.push(det.score);
                }
                // a match to an out-of-bucket ground truth is ignored
            }
            None => {
                tp_flags.push(false);
                scores.push(det.score);
            }
        }
    }
    (tp_flags, scores, n_real)
}

/// 101-point interpolated AP from cumulative TP flags.
fn ap_from_flags(tp_flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope: max precision over all operating points with
    // recall >= r
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

/// COCO-style evaluation over per-image detection and ground-truth lists.
///
/// Detections are sorted by score (ties by image then input order); each
/// greedily matches the highest-IoU unmatched ground truth of its class in
/// its image. Classes absent from the ground truth do not enter the mean.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    thresholds: &[f64],
) -> Result<EvalResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Config(format!(
            "{} detection lists vs {} ground-truth lists",
            detections.len(),
            ground_truth.len()
        )));
    }
    let classes: std::collections::BTreeSet<usize> = ground_truth
        .iter()
        .flatten()
        .map(|g| g.class)
        .collect();
    if classes.is_empty() {
        return Ok(EvalResult {
            ap: 0.0,
            ap50: 0.0,
            ap75: 0.0,
            ap_medium: 0.0,
            ap_large: 0.0,
            ar: 0.0,
        });
    }

    // up to 100 detections per image, by score
    let mut capped: Vec<Vec<Detection>> = Vec::with_capacity(detections.len());
    for dets in detections {
        let mut d = dets.clone();
        d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        d.truncate(100);
        capped.push(d);
    }

    let eval_bucket = |bucket: Bucket| -> Vec<f64> {
        // per threshold: mean AP over classes
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut sum = 0.0;
            let mut counted = 0usize;
            for &c in &classes {
                let mut dets: Vec<(usize, Detection)> = capped
                    .iter()
                    .enumerate()
                    .flat_map(|(img, v)| {
                        v.iter().filter(|d| d.class == c).map(move |d| (img, *d))
                    })
                    .collect();
                dets.sort_by(|a, b| {
                    b.1.score
                        .partial_cmp(&a.1.score)
                        .unwrap()
                        .then(a.0.cmp(&b.0))
                });
                let gts: Vec<(usize, GroundTruthBox)> = ground_truth
                    .iter()
                    .enumerate()
                    .flat_map(|(img, v)| v.iter().filter(|g| g.class == c).map(move |g| (img, *g)))
                    .collect();
                let has_bucket_gt = gts.iter().any(|(_, g)| in_bucket(g.rect.area(), bucket));
                if !has_bucket_gt {
                    continue;
                }
                let (flags, _scores, n_gt) = match_class(&dets, &gts, t, bucket);
                sum += ap_from_flags(&flags, n_gt);
                counted += 1;
            }
            per_threshold.push(if counted > 0 { sum / counted as f64 } else { 0.0 });
        }
        per_threshold
    };

    let all = eval_bucket(Bucket::All);
    let medium = eval_bucket(Bucket::Medium);
    let large = eval_bucket(Bucket::Large);

    // average recall: matched fraction at each threshold, mean over classes
    let mut ar_sum = 0.0;
    let mut ar_count = 0usize;
    for &c in &classes {
        let gts: Vec<(usize, GroundTruthBox)> = ground_truth
            .iter()
            .enumerate()
            .flat_map(|(img, v)| v.iter().filter(|g| g.class == c).map(move |g| (img, *g)))
            .collect();
        if gts.is_empty() {
            continue;
        }
        let mut dets: Vec<(usize, Detection)> = capped
            .iter()
            .enumerate()
            .flat_map(|(img, v)| v.iter().filter(|d| d.class == c).map(move |d| (img, *d)))
            .collect();
        dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
        for &t in thresholds {
            let (flags, _, n_gt) = match_class(&dets, &gts, t, Bucket::All);
            let matched = flags.iter().filter(|&&f| f).count();
            ar_sum += matched as f64 / n_gt as f64;
            ar_count += 1;
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let at = |v: &[f64], t: f64| {
        thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| v[i])
            .unwrap_or(0.0)
    };
    Ok(EvalResult {
        ap: mean(&all),
        ap50: at(&all, 0.5),
        ap75: at(&all, 0.75),
        ap_medium: mean(&medium),
        ap_large: mean(&large),
        ar: if ar_count > 0 { ar_sum / ar_count as f64 } else { 0.0 },
    })
}

/// Serialize boxes one per line: `image_id class score x_min y_min x_max
/// y_max`. Ground truth is written with score 1.
pub fn write_boxes<W: Write>(mut w: W, rows: &[(usize, Detection)]) -> Result<()> {
    for (img, d) in rows {
        writeln!(
            w,
            "{img} {} {} {} {} {} {}",
            d.class, d.score, d.rect.x_min, d.rect.y_min, d.rect.x_max, d.rect.y_max
        )?;
    }
    Ok(())
}

pub fn read_boxes<R: BufRead>(r: R) -> Result<Vec<(usize, Detection)>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "line {}: expected 7 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("line {}: bad number '{s}'", lineno + 1)))
        };
        out.push((
            fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad image id", lineno + 1)))?,
            Detection {
                class: fields[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad class", lineno + 1)))?,
                score: parse(fields[2])?,
                rect: Box2D::new(parse(fields[3])?, parse(fields[4])?, parse(fields[5])?, parse(fields[6])?),
            },
        ));
    }
    Ok(out)
}
