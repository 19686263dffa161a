use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::geometry::{decode_delta, iou, nms, BBox, BoxDelta};
use crate::model::{forward_rpn, RpnModel};

/// Caps `dw`/`dh` before exponentiation so decoded boxes stay finite.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// A scored box in one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub ap: f64,
    /// Fraction of ground-truth boxes covered by some detection at IoU ≥ 0.5.
    pub recall50: f64,
    pub images: usize,
    pub ground_truth: usize,
    pub detections: usize,
}

/// The ten COCO IoU thresholds.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Detections sorted by descending score; ties keep input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// True-positive flag per ranked detection. Each detection, in rank order, claims the
/// unclaimed ground-truth box of its image with the highest IoU, if that IoU reaches
/// `thresh`; ties go to the lower gt index.
pub fn match_detections(dets: &[Detection], gt: &[Vec<BBox>], thresh: f64) -> Vec<bool> {
    let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let boxes = &gt[det.image];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                if claimed[det.image][j] {
                    continue;
                }
                let o = iou(&det.bbox, g);
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    claimed[det.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-points interpolated average precision over detections pooled across images.
/// Zero when there is no ground truth.
pub fn average_precision(dets: &[Detection], gt: &[Vec<BBox>], thresh: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let tp = match_detections(dets, gt, thresh);
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // precision envelope: best precision at this rank or any later one
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            sum += precision[k];
        }
    }
    sum / n_gt as f64
}

/// Fraction of ground-truth boxes with some detection of IoU ≥ `thresh` in the same image.
pub fn recall_at(dets: &[Detection], gt: &[Vec<BBox>], thresh: f64) -> f64 {
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let covered: usize = gt
        .iter()
        .enumerate()
        .map(|(img, boxes)| {
            boxes
                .iter()
                .filter(|g| dets.iter().any(|d| d.image == img && iou(&d.bbox, g) >= thresh))
                .count()
        })
        .sum();
    covered as f64 / n_gt as f64
}

pub fn score_detections(dets: &[Detection], gt: &[Vec<BBox>]) -> EvalReport {
    let aps: Vec<f64> = coco_thresholds()
        .iter()
        .map(|&t| average_precision(dets, gt, t))
        .collect();
    EvalReport {
        ap50: aps[0],
        ap75: aps[5],
        ap: aps.iter().sum::<f64>() / aps.len() as f64,
        recall50: recall_at(dets, gt, 0.5),
        images: gt.len(),
        ground_truth: gt.iter().map(Vec::len).sum(),
        detections: dets.len(),
    }
}

/// Decoded, clipped proposals of one image after suppression, best `top_k` first.
pub fn propose(model: &RpnModel, image: &crate::numerics::Tensor, cfg: &EvalConfig) -> Result<Vec<(BBox, f64)>> {
    let batch = forward_rpn(image, model)?;
    let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
    let mut boxes = Vec::with_capacity(batch.len());
    let mut scores = Vec::with_capacity(batch.len());
    for ((a, d), &p) in batch.anchors.iter().zip(&batch.deltas).zip(&batch.objectness) {
        let d = BoxDelta {
            dw: d.dw.min(MAX_LOG_SCALE),
            dh: d.dh.min(MAX_LOG_SCALE),
            ..*d
        };
        let b = decode_delta(&a.bbox, &d).clip(w, h);
        if b.width() > 0.0 && b.height() > 0.0 {
            boxes.push(b);
            scores.push(p);
        }
    }
    let keep = nms(&boxes, &scores, cfg.nms_iou);
    Ok(keep.into_iter().take(cfg.top_k).map(|i| (boxes[i], scores[i])).collect())
}

/// Scores proposals against every box of each record, kept and dropped alike.
pub fn evaluate(model: &RpnModel, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let per_image = dataset
        .samples
        .par_iter()
        .map(|s| propose(model, &s.image.to_tensor(), cfg))
        .collect::<Result<Vec<_>>>()?;
    let dets: Vec<Detection> = per_image
        .into_iter()
        .enumerate()
        .flat_map(|(image, props)| {
            props.into_iter().map(move |(bbox, score)| Detection { image, bbox, score })
        })
        .collect();
    let gt: Vec<Vec<BBox>> = dataset.samples.iter().map(|s| s.record.full_boxes()).collect();
    Ok(score_detections(&dets, &gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image: usize, bbox: BBox, score: f64) -> Detection {
        Detection { image, bbox, score }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 35.0)], vec![b(5.0, 5.0, 9.0, 9.0)]];
        let dets: Vec<Detection> = gt
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.iter().map(move |&bb| det(i, bb, 1.0)))
            .collect();
        let r = score_detections(&dets, &gt);
        assert_eq!((r.ap50, r.ap75, r.ap, r.recall50), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0)]];
        let r = score_detections(&[], &gt);
        assert_eq!((r.ap50, r.ap75, r.ap, r.recall50), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_computed_ranking() {
        // ranks: TP, FP, TP, FP, TP against 3 gt → precisions 1, 1/2, 2/3, 1/2, 3/5
        // envelope at TPs: 1, 2/3, 3/5
        let gt = vec![vec![b(0.0, 0.0, 10.0, 10.0), b(20.0, 0.0, 30.0, 10.0), b(40.0, 0.0, 50.0, 10.0)]];
        let miss = b(60.0, 60.0, 70.0, 70.0);
        let dets = vec![
            det(0, gt[0][0], 0.9),
            det(0, miss, 0.8),
            det(0, gt[0][1], 0.7),
            det(0, gt[0][0], 0.6), // duplicate of a claimed box
            det(0, gt[0][2], 0.5),
        ];
        let ap = average_precision(&dets, &gt, 0.5);
        assert!((ap - (1.0 + 2.0 / 3.0 + 0.6) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn thresholds_are_the_coco_ten() {
        let t = coco_thresholds();
        assert_eq!(t[0], 0.5);
        assert!((t[5] - 0.75).abs() < 1e-15 && (t[9] - 0.95).abs() < 1e-15);
    }
}
