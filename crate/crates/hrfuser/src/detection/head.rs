//! The detection head and its training loss.
//!
//! Two 2-layer conv towers over the neck map predict per-pixel class
//! logits, box distances (left/top/right/bottom, exp-activated, in input
//! pixels) and a centerness logit. Pixels whose center falls inside a
//! ground-truth box are positive, ambiguous pixels go to the smallest box.

use super::{Detection, GroundTruthBox};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Param, ParamSet};
use crate::rng::CounterRng;
use crate::sensing::Box2D;
use crate::tensor::{ops, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct HeadConfig {
    pub classes: usize,
    pub in_channels: usize,
    pub width: usize,
    /// Input pixels per neck cell.
    pub stride: usize,
}

pub struct DetectionHead {
    pub cfg: HeadConfig,
    cls_tower: Vec<Conv2d>,
    box_tower: Vec<Conv2d>,
    cls_out: Conv2d,
    box_out: Conv2d,
    ctr_out: Conv2d,
}

/// Raw per-pixel head predictions, all at the neck resolution.
pub struct HeadOutput {
    /// `[B, classes, H, W]` class logits.
    pub class_logits: Tensor,
    /// `[B, 4, H, W]` box regression, pre-activation; distances are
    /// `exp(raw) * stride` input pixels.
    pub box_regression: Tensor,
    /// `[B, 1, H, W]` centerness logits.
    pub centerness: Tensor,
    pub stride: usize,
}

impl HeadOutput {
    pub fn grid(&self) -> (usize, usize, usize) {
        let s = self.class_logits.shape();
        (s[0], s[2], s[3])
    }
}

const FOCAL_ALPHA: f64 = 0.25;
// focal loss uses (1 - p)^2, i.e. gamma = 2, inlined below as a square

impl DetectionHead {
    pub fn init(ps: &mut ParamSet, rng: &mut CounterRng, cfg: HeadConfig) -> Self {
        let tower = |ps: &mut ParamSet, rng: &mut CounterRng, name: &str| {
            (0..2)
                .map(|i| {
                    let c_in = if i == 0 { cfg.in_channels } else { cfg.width };
                    Conv2d::init(ps, &format!("head.{name}{i}"), rng, c_in, cfg.width, 3, 1, 1, 1, true)
                })
                .collect::<Vec<_>>()
        };
        let cls_tower = tower(ps, rng, "cls");
        let box_tower = tower(ps, rng, "box");
        let cls_out = Conv2d::init(ps, "head.cls_out", rng, cfg.width, cfg.classes, 3, 1, 1, 1, true);
        // rare-positive prior keeps the focal loss sane at initialization
        let prior = -((1.0 - 0.01f64) / 0.01).ln();
        cls_out
            .bias
            .as_ref()
            .map(|b: &Param| b.set(vec![prior; cfg.classes]));
        let box_out = Conv2d::init(ps, "head.box_out", rng, cfg.width, 4, 3, 1, 1, 1, true);
        // exp(2)·stride ≈ 30 px starting extent for stride 4
        box_out.bias.as_ref().map(|b: &Param| b.set(vec![2.0; 4]));
        let ctr_out = Conv2d::init(ps, "head.ctr_out", rng, cfg.width, 1, 3, 1, 1, 1, true);
        DetectionHead {
            cfg,
            cls_tower,
            box_tower,
            cls_out,
            box_out,
            ctr_out,
        }
    }

    pub fn forward(&self, tape: &Tape, neck: &Tensor) -> Result<HeadOutput> {
        if neck.rank() != 4 || neck.shape()[1] != self.cfg.in_channels {
            return Err(Error::invalid(
                "head_forward",
                neck.shape(),
                format!("expected [B, {}, H, W]", self.cfg.in_channels),
            ));
        }
        let mut cls = neck.clone();
        for conv in &self.cls_tower {
            cls = ops::relu(tape, &conv.forward(tape, &cls)?);
        }
        let mut boxes = neck.clone();
        for conv in &self.box_tower {
            boxes = ops::relu(tape, &conv.forward(tape, &boxes)?);
        }
        Ok(HeadOutput {
            class_logits: self.cls_out.forward(tape, &cls)?,
            box_regression: self.box_out.forward(tape, &boxes)?,
            centerness: self.ctr_out.forward(tape, &boxes)?,
            stride: self.cfg.stride,
        })
    }
}

/// Per-pixel assignment for one image.
struct Targets {
    /// Index into `gts` per pixel, or None for background.
    assignment: Vec<Option<usize>>,
    /// (l, t, r, b) in input pixels for positive pixels.
    distances: Vec<[f64; 4]>,
    centerness: Vec<f64>,
}

fn assign_targets(gts: &[GroundTruthBox], h: usize, w: usize, stride: usize) -> Targets {
    let mut assignment = vec![None; h * w];
    let mut distances = vec![[0.0; 4]; h * w];
    let mut centerness = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let cy = (i as f64 + 0.5) * stride as f64;
            let cx = (j as f64 + 0.5) * stride as f64;
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let r = &gt.rect;
                if cx > r.x_min && cx < r.x_max && cy > r.y_min && cy < r.y_max {
                    let area = r.area();
                    // ambiguous pixels go to the smallest box
                    if best.map_or(true, |(_, a)| area < a) {
                        best = Some((g, area));
                    }
                }
            }
            if let Some((g, _)) = best {
                let r = &gts[g].rect;
                let (l, t, rr, b) = (cx - r.x_min, cy - r.y_min, r.x_max - cx, r.y_max - cy);
                let p = i * w + j;
                assignment[p] = Some(g);
                distances[p] = [l, t, rr, b];
                centerness[p] =
                    ((l.min(rr) / l.max(rr)) * (t.min(b) / t.max(b))).sqrt();
            }
        }
    }
    Targets {
        assignment,
        distances,
        centerness,
    }
}

/// Focal classification loss, GIoU box loss and centerness BCE, summed and
/// normalized by the positive count (min 1).
pub fn compute_loss(
    tape: &Tape,
    head: &DetectionHead,
    out: &HeadOutput,
    gts_per_image: &[Vec<GroundTruthBox>],
) -> Result<Tensor> {
    let (b, h, w) = out.grid();
    if gts_per_image.len() != b {
        return Err(Error::Config(format!(
            "loss got {} target lists for batch {b}",
            gts_per_image.len()
        )));
    }
    let classes = head.cfg.classes;
    let stride = out.stride;
    let hw = h * w;
    let n = b * hw;

    // flatten predictions to rows of pixels
    let flat = |t: &Tensor, c: usize| -> Result<Tensor> {
        let p = ops::permute(tape, t, &[0, 2, 3, 1])?;
        ops::reshape(tape, &p, &[n, c])
    };
    let logits = flat(&out.class_logits, classes)?;
    let regression = flat(&out.box_regression, 4)?;
    let ctr_logits = ops::reshape(tape, &flat(&out.centerness, 1)?, &[n])?;

    // targets
    let mut onehot = vec![0.0; n * classes];
    let mut positives: Vec<usize> = Vec::new();
    let mut pos_boxes: Vec<[f64; 4]> = Vec::new();
    let mut pos_centers: Vec<[f64; 2]> = Vec::new();
    let mut pos_ctr_targets: Vec<f64> = Vec::new();
    for (bi, gts) in gts_per_image.iter().enumerate() {
        let targets = assign_targets(gts, h, w, stride);
        for p in 0..hw {
            if let Some(g) = targets.assignment[p] {
                let row = bi * hw + p;
                onehot[row * classes + gts[g].class] = 1.0;
                positives.push(row);
                let (i, j) = (p / w, p % w);
                let cy = (i as f64 + 0.5) * stride as f64;
                let cx = (j as f64 + 0.5) * stride as f64;
                let d = targets.distances[p];
                pos_boxes.push([cx - d[0], cy - d[1], cx + d[2], cy + d[3]]);
                pos_centers.push([cx, cy]);
                pos_ctr_targets.push(targets.centerness[p]);
            }
        }
    }
    let num_pos = positives.len().max(1) as f64;

    // focal loss over every pixel and class
    let t = Tensor::new(onehot, &[n, classes])?;
    let p = ops::sigmoid(tape, &logits);
    let ln_p = ops::neg(tape, &ops::softplus(tape, &ops::neg(tape, &logits)));
    let ln_1mp = ops::neg(tape, &ops::softplus(tape, &logits));
    let one = Tensor::ones(&[n, classes]);
    let one_m_p = ops::sub(tape, &one, &p)?;
    let one_m_t = ops::sub(tape, &one, &t)?;
    let pos_part = ops::mul(tape, &t, &ops::mul(tape, &ops::mul(tape, &one_m_p, &one_m_p)?, &ln_p)?)?;
    let neg_part = ops::mul(tape, &one_m_t, &ops::mul(tape, &ops::mul(tape, &p, &p)?, &ln_1mp)?)?;
    let focal = ops::sub(
        tape,
        &ops::mul_scalar(tape, &ops::neg(tape, &pos_part), FOCAL_ALPHA),
        &ops::mul_scalar(tape, &neg_part, 1.0 - FOCAL_ALPHA),
    )?;
    let mut total = ops::sum_all(tape, &focal);

    if !positives.is_empty() {
        // GIoU on the positive pixels
        let preds = ops::index_select_rows(tape, &regression, &positives)?;
        let dists = ops::mul_scalar(
            tape,
            &ops::exp(tape, &ops::clamp(tape, &preds, -8.0, 8.0)),
            stride as f64,
        );
        let col = |k: usize| -> Result<Tensor> {
            let c = ops::slice(tape, &dists, &[0, k], &[positives.len(), 1])?;
            ops::reshape(tape, &c, &[positives.len()])
        };
        let (dl, dt, dr, db) = (col(0)?, col(1)?, col(2)?, col(3)?);
        let cxs = Tensor::new(pos_centers.iter().map(|c| c[0]).collect(), &[positives.len()])?;
        let cys = Tensor::new(pos_centers.iter().map(|c| c[1]).collect(), &[positives.len()])?;
        let px1 = ops::sub(tape, &cxs, &dl)?;
        let py1 = ops::sub(tape, &cys, &dt)?;
        let px2 = ops::add(tape, &cxs, &dr)?;
        let py2 = ops::add(tape, &cys, &db)?;
        let gx1 = Tensor::new(pos_boxes.iter().map(|b| b[0]).collect(), &[positives.len()])?;
        let gy1 = Tensor::new(pos_boxes.iter().map(|b| b[1]).collect(), &[positives.len()])?;
        let gx2 = Tensor::new(pos_boxes.iter().map(|b| b[2]).collect(), &[positives.len()])?;
        let gy2 = Tensor::new(pos_boxes.iter().map(|b| b[3]).collect(), &[positives.len()])?;

        let iw = ops::relu(
            tape,
            &ops::sub(tape, &ops::minimum(tape, &px2, &gx2)?, &ops::maximum(tape, &px1, &gx1)?)?,
        );
        let ih = ops::relu(
            tape,
            &ops::sub(tape, &ops::minimum(tape, &py2, &gy2)?, &ops::maximum(tape, &py1, &gy1)?)?,
        );
        let inter = ops::mul(tape, &iw, &ih)?;
        let area_p = ops::mul(tape, &ops::sub(tape, &px2, &px1)?, &ops::sub(tape, &py2, &py1)?)?;
        let area_g = ops::mul(tape, &ops::sub(tape, &gx2, &gx1)?, &ops::sub(tape, &gy2, &gy1)?)?;
        let union = ops::sub(tape, &ops::add(tape, &area_p, &area_g)?, &inter)?;
        let iou = ops::div(tape, &inter, &union)?;
        let cw = ops::sub(tape, &ops::maximum(tape, &px2, &gx2)?, &ops::minimum(tape, &px1, &gx1)?)?;
        let ch = ops::sub(tape, &ops::maximum(tape, &py2, &gy2)?, &ops::minimum(tape, &py1, &gy1)?)?;
        let enclose = ops::mul(tape, &cw, &ch)?;
        let giou = ops::sub(tape, &iou, &ops::div(tape, &ops::sub(tape, &enclose, &union)?, &enclose)?)?;
        let giou_loss = ops::sub(tape, &Tensor::ones(&[positives.len()]), &giou)?;
        total = ops::add(tape, &total, &ops::sum_all(tape, &giou_loss))?;

        // centerness BCE with logits: softplus(z) - z*t
        let z = ops::index_select_rows(tape, &ctr_logits, &positives)?;
        let t_ctr = Tensor::new(pos_ctr_targets, &[positives.len()])?;
        let bce = ops::sub(tape, &ops::softplus(tape, &z), &ops::mul(tape, &z, &t_ctr)?)?;
        total = ops::add(tape, &total, &ops::sum_all(tape, &bce))?;
    }

    Ok(ops::mul_scalar(tape, &total, 1.0 / num_pos))
}

/// Decode one image's predictions: score = class probability × centerness,
/// threshold, then greedy per-class NMS (ties broken by lower pixel index,
/// suppression when IoU exceeds `nms_iou`).
pub fn decode_image(
    out: &HeadOutput,
    image: usize,
    score_thresh: f64,
    nms_iou: f64,
    image_w: f64,
    image_h: f64,
) -> Vec<Detection> {
    let (_, h, w) = out.grid();
    let classes = out.class_logits.shape()[1];
    let hw = h * w;
    let stride = out.stride as f64;
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());

    let cls = out.class_logits.data();
    let reg = out.box_regression.data();
    let ctr = out.centerness.data();
    let mut candidates: Vec<(usize, Detection)> = Vec::new();
    for p in 0..hw {
        let ctr_score = sigmoid(ctr[image * hw + p]);
        let (i, j) = (p / w, p % w);
        let cy = (i as f64 + 0.5) * stride;
        let cx = (j as f64 + 0.5) * stride;
        for c in 0..classes {
            let score = sigmoid(cls[(image * classes + c) * hw + p]) * ctr_score;
            if score < score_thresh {
                continue;
            }
            let d = |k: usize| (reg[(image * 4 + k) * hw + p]).clamp(-8.0, 8.0).exp() * stride;
            let rect = Box2D::new(
                (cx - d(0)).max(0.0),
                (cy - d(1)).max(0.0),
                (cx + d(2)).min(image_w),
                (cy + d(3)).min(image_h),
            );
            if rect.is_valid() {
                candidates.push((p, Detection { rect, class: c, score }));
            }
        }
    }
    decode(&mut candidates, nms_iou)
}

/// Greedy per-class NMS over `(pixel index, detection)` candidates.
pub fn decode(candidates: &mut [(usize, Detection)], nms_iou: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.class.cmp(&b.1.class))
    });
    let mut kept: Vec<Detection> = Vec::new();
    'outer: for (_, det) in candidates.iter() {
        for k in &kept {
            if k.class == det.class && super::eval::iou(&k.rect, &det.rect) > nms_iou {
                continue 'outer;
            }
        }
        kept.push(*det);
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn head(classes: usize) -> (DetectionHead, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(50);
        let cfg = HeadConfig {
            classes,
            in_channels: 8,
            width: 8,
            stride: 4,
        };
        let h = DetectionHead::init(&mut ps, &mut rng, cfg);
        (h, ps)
    }

    #[test]
    fn zero_input_gives_bias_valued_logits() {
        let (head, _ps) = head(2);
        let tape = Tape::inference();
        let neck = Tensor::zeros(&[1, 8, 5, 5]);
        let out = head.forward(&tape, &neck).unwrap();
        assert_eq!(out.class_logits.shape(), &[1, 2, 5, 5]);
        // spatially constant per channel and finite
        for c in 0..2 {
            let v0 = out.class_logits.at(&[0, c, 0, 0]);
            assert!(v0.is_finite());
            for p in 0..25 {
                assert_eq!(out.class_logits.data()[c * 25 + p], v0);
            }
        }
        // the class prior bias keeps initial foreground probability low
        assert!(out.class_logits.at(&[0, 0, 0, 0]) < -4.0 + 0.5);
    }

    #[test]
    fn output_dims_match_the_neck() {
        let (head, _ps) = head(3);
        let tape = Tape::inference();
        let out = head.forward(&tape, &Tensor::zeros(&[2, 8, 7, 9])).unwrap();
        assert_eq!(out.class_logits.shape(), &[2, 3, 7, 9]);
        assert_eq!(out.box_regression.shape(), &[2, 4, 7, 9]);
        assert_eq!(out.centerness.shape(), &[2, 1, 7, 9]);
    }

    #[test]
    fn head_and_loss_gradients_pass_finite_differences() {
        let (head, _ps) = head(2);
        let gts = vec![vec![GroundTruthBox {
            rect: Box2D::new(2.0, 2.0, 14.0, 13.0),
            class: 1,
        }]];
        let mut rng = CounterRng::new(51);
        let neck = Tensor::new(
            (0..8 * 16).map(|_| rng.range(-1.0, 1.0)).collect(),
            &[1, 8, 4, 4],
        )
        .unwrap();
        let report = gradcheck::check_fn(&[neck], gradcheck::DEFAULT_EPS, &|tape, ins| {
            let out = head.forward(tape, &ins[0])?;
            compute_loss(tape, &head, &out, &gts)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_rel_err);
    }

    #[test]
    fn no_ground_truth_gives_finite_background_loss() {
        let (head, _ps) = head(2);
        let tape = Tape::new();
        let out = head.forward(&tape, &Tensor::zeros(&[1, 8, 4, 4])).unwrap();
        let loss = compute_loss(&tape, &head, &out, &[vec![]]).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() > 0.0);
    }

    #[test]
    fn perfect_predictions_give_negligible_loss() {
        let (head, _ps) = head(2);
        let stride = 4.0;
        // a box exactly one cell large, centered on a pixel center: the only
        // positive pixel has centerness 1 and the box is exactly recoverable
        let gt = GroundTruthBox {
            rect: Box2D::new(4.0, 8.0, 8.0, 12.0),
            class: 1,
        };
        let tape = Tape::new();
        let (h, w, classes) = (4usize, 4usize, 2usize);
        let hw = h * w;
        let mut cls = vec![-40.0; classes * hw];
        let mut reg = vec![0.0; 4 * hw];
        let mut ctr = vec![-40.0; hw];
        let p = 2 * w + 1; // pixel center (6, 10)
        cls[hw + p] = 40.0; // class 1
        ctr[p] = 40.0;
        for k in 0..4 {
            reg[k * hw + p] = (2.0f64 / stride).ln(); // all distances 2 px
        }
        let out = HeadOutput {
            class_logits: Tensor::new(cls, &[1, classes, h, w]).unwrap(),
            box_regression: Tensor::new(reg, &[1, 4, h, w]).unwrap(),
            centerness: Tensor::new(ctr, &[1, 1, h, w]).unwrap(),
            stride: 4,
        };
        let loss = compute_loss(&tape, &head, &out, &[vec![gt]]).unwrap();
        assert!(loss.item() < 1e-3, "loss {}", loss.item());
    }

    #[test]
    fn nms_keeps_the_higher_scoring_duplicate() {
        let rect = Box2D::new(0.0, 0.0, 10.0, 10.0);
        let mut cands = vec![
            (3, Detection { rect, class: 0, score: 0.8 }),
            (1, Detection { rect, class: 0, score: 0.9 }),
        ];
        let kept = decode(&mut cands, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn all_below_threshold_decodes_empty() {
        let (head, _ps) = head(2);
        let tape = Tape::inference();
        let out = head.forward(&tape, &Tensor::zeros(&[1, 8, 4, 4])).unwrap();
        // bias-initialized logits give ~0.01 class prob; 0.5 threshold kills all
        let dets = decode_image(&out, 0, 0.5, 0.5, 16.0, 16.0);
        assert!(dets.is_empty());
    }

    #[test]
    fn equal_scores_resolve_by_lower_pixel_index() {
        let rect_a = Box2D::new(0.0, 0.0, 10.0, 10.0);
        let rect_b = Box2D::new(1.0, 0.0, 11.0, 10.0);
        let mut cands = vec![
            (7, Detection { rect: rect_b, class: 0, score: 0.6 }),
            (2, Detection { rect: rect_a, class: 0, score: 0.6 }),
        ];
        let kept = decode(&mut cands, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].rect, rect_a);
    }
}
