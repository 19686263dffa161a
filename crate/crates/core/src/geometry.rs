//! Boxes, anchor grids, IoU matching and box-delta coding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, corners `(x1, y1)`–`(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 >= x1 && y2 >= y1) {
            return Err(Error::contract(
                "BBox::new",
                format!("corners ({x1}, {y1})–({x2}, {y2}) are inverted"),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    pub grid_y: usize,
    pub grid_x: usize,
    pub anchor_index: usize,
}

/// Lays `scales.len()` square-ish anchors on every feature cell, row-major then by
/// anchor index. Centers sit at `(grid + 0.5) · stride`; `aspect` is width over height.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    scales: &[f64],
    aspect: f64,
) -> Vec<Anchor> {
    let ratio = aspect.sqrt();
    let mut out = Vec::with_capacity(feat_h * feat_w * scales.len());
    for gy in 0..feat_h {
        for gx in 0..feat_w {
            let cx = (gx as f64 + 0.5) * stride as f64;
            let cy = (gy as f64 + 0.5) * stride as f64;
            for (a, &s) in scales.iter().enumerate() {
                out.push(Anchor {
                    bbox: BBox::from_center(cx, cy, s * ratio, s / ratio),
                    grid_y: gy,
                    grid_x: gx,
                    anchor_index: a,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub label: ProposalLabel,
    /// Ground-truth index for positives.
    pub gt: Option<usize>,
}

/// Standard RPN assignment: positive at max-IoU ≥ `pos_thresh` or when the anchor
/// attains some ground truth's best IoU, negative below `neg_thresh`, ignored between.
pub fn match_anchors(anchors: &[Anchor], gt: &[BBox], pos_thresh: f64, neg_thresh: f64) -> Vec<Match> {
    assert!(pos_thresh > neg_thresh, "pos_thresh must exceed neg_thresh");
    if gt.is_empty() {
        return vec![
            Match {
                label: ProposalLabel::Negative,
                gt: None,
            };
            anchors.len()
        ];
    }
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(&a.bbox, g)).collect())
        .collect();
    let best_per_gt: Vec<f64> = (0..gt.len())
        .map(|j| overlaps.iter().map(|row| row[j]).fold(0.0, f64::max))
        .collect();

    overlaps
        .iter()
        .map(|row| {
            let (best_j, best) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            let is_gt_argmax = row
                .iter()
                .zip(&best_per_gt)
                .any(|(&v, &b)| b > 0.0 && v == b);
            if best >= pos_thresh || is_gt_argmax {
                Match {
                    label: ProposalLabel::Positive,
                    gt: Some(best_j),
                }
            } else if best < neg_thresh {
                Match {
                    label: ProposalLabel::Negative,
                    gt: None,
                }
            } else {
                Match {
                    label: ProposalLabel::Ignore,
                    gt: None,
                }
            }
        })
        .collect()
}

/// Regression target relating an anchor to a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn encode_delta(anchor: &BBox, gt: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::contract(
            "encode_delta",
            format!("anchor has non-positive extent {aw}×{ah}"),
        ));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::contract(
            "encode_delta",
            format!("target box has non-positive extent {gw}×{gh}"),
        ));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    Ok(BoxDelta {
        dx: (gx - ax) / aw,
        dy: (gy - ay) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

pub fn decode_delta(anchor: &BBox, d: &BoxDelta) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (ax, ay) = anchor.center();
    let cx = ax + d.dx * aw;
    let cy = ay + d.dy * ah;
    let w = aw * d.dw.exp();
    let h = ah * d.dh.exp();
    BBox::from_center(cx, cy, w, h)
}

/// Greedy suppression: keeps boxes in descending score order, dropping any box whose
/// IoU with an already kept box exceeds `iou_thresh`. Returns kept indices.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}
