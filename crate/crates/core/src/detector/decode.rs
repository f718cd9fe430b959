use serde::{Deserialize, Serialize};

use super::{AnchorSet, LevelOutput};
use crate::geometry::{decode as apply_deltas, iou, BBox};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    /// Candidates kept per level before NMS.
    pub pre_nms_topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
            pre_nms_topk: 1000,
        }
    }
}

/// Sorts by descending score; equal scores keep their input order.
fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy per-class non-maximum suppression: a box is dropped when it
/// overlaps an already kept box of its class with IoU above `iou_thresh`.
/// Output is sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    sort_by_score(&mut dets);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Turns the head outputs of image `batch_index` into final detections.
pub fn decode<T: Float>(
    outputs: &[LevelOutput<T>],
    batch_index: usize,
    anchors: &AnchorSet,
    num_classes: usize,
    image_size: usize,
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let a = anchors.per_cell;
    let logit_thresh = (cfg.score_thresh / (1.0 - cfg.score_thresh)).ln();
    let side = image_size as f64;
    let mut all = Vec::new();
    for (out, g) in outputs.iter().zip(&anchors.levels) {
        let area = g.height * g.width;
        let cls = out.cls.data();
        let reg = out.reg.data();
        let cls_img = &cls[batch_index * num_classes * a * area..(batch_index + 1) * num_classes * a * area];
        let reg_img = &reg[batch_index * 4 * a * area..(batch_index + 1) * 4 * a * area];
        // (logit, class, anchor-in-level index) candidates
        let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
        for ai in 0..a {
            for k in 0..num_classes {
                let plane = &cls_img[(ai * num_classes + k) * area..(ai * num_classes + k + 1) * area];
                for (cell, &v) in plane.iter().enumerate() {
                    let v = v.as_f64();
                    if v > logit_thresh {
                        cands.push((v, k, cell, ai));
                    }
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0));
        cands.truncate(cfg.pre_nms_topk);
        for (logit, k, cell, ai) in cands {
            let anchor = anchors.anchors[g.offset + cell * a + ai].bbox();
            let d: [f64; 4] = std::array::from_fn(|j| reg_img[(ai * 4 + j) * area + cell].as_f64());
            let bbox = apply_deltas(&anchor, d).clamp(side, side);
            if !bbox.is_valid() {
                continue;
            }
            all.push(Detection {
                class_id: k,
                score: 1.0 / (1.0 + (-logit).exp()),
                bbox,
            });
        }
    }
    let mut kept = nms(all, cfg.nms_iou);
    kept.truncate(cfg.max_dets);
    kept
}
