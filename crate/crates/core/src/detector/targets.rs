//! Anchor-to-ground-truth assignment.

use super::{AnchorSet, BoxAnnotation};
use crate::geometry::{encode, iou};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Background,
    Ignore,
    Object(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// `(dx, dy, dw, dh)` towards the matched box; zero unless positive.
    pub deltas: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            positive: 0.5,
            negative: 0.4,
        }
    }
}

/// Assigns every anchor a label.
///
/// An anchor whose best IoU reaches `positive` takes that box (lowest box
/// index on ties); below `negative` it is background; in between it is
/// ignored. Each box additionally claims its single best anchor (lowest
/// anchor index on ties) unless an earlier box already claimed that anchor
/// with at least the same IoU.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[BoxAnnotation],
    thresholds: MatchThresholds,
) -> Result<Vec<AnchorTarget>> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("anchor set is empty".into()));
    }
    if !(thresholds.positive > thresholds.negative) {
        return Err(Error::Config(format!(
            "positive threshold {} must exceed negative threshold {}",
            thresholds.positive, thresholds.negative
        )));
    }
    let boxes: Vec<_> = anchors.anchors.iter().map(|a| a.bbox()).collect();
    let mut best_gt_iou = vec![0.0f64; gts.len()];
    let mut best_gt_anchor = vec![usize::MAX; gts.len()];
    let mut matched: Vec<Option<(usize, f64)>> = vec![None; boxes.len()];
    let mut targets = Vec::with_capacity(boxes.len());

    for (ai, ab) in boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(ab, &gt.bbox);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
            if v > best_gt_iou[gi] {
                best_gt_iou[gi] = v;
                best_gt_anchor[gi] = ai;
            }
        }
        let label = match best {
            Some((gi, v)) if v >= thresholds.positive => {
                matched[ai] = Some((gi, v));
                AnchorLabel::Object(gts[gi].class_id)
            }
            Some((_, v)) if v >= thresholds.negative => AnchorLabel::Ignore,
            _ => AnchorLabel::Background,
        };
        targets.push(AnchorTarget {
            label,
            deltas: [0.0; 4],
        });
    }

    let mut forced: Vec<Option<(usize, f64)>> = vec![None; boxes.len()];
    for (gi, gt) in gts.iter().enumerate() {
        let ai = best_gt_anchor[gi];
        if ai == usize::MAX {
            continue;
        }
        let v = best_gt_iou[gi];
        if forced[ai].is_some_and(|(_, prev)| prev >= v) {
            continue;
        }
        forced[ai] = Some((gi, v));
        matched[ai] = Some((gi, v));
        targets[ai].label = AnchorLabel::Object(gt.class_id);
    }

    for (ai, m) in matched.iter().enumerate() {
        if let Some((gi, _)) = m {
            targets[ai].deltas = encode(&boxes[ai], &gts[*gi].bbox);
        }
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Anchor, LevelGrid};
    use crate::geometry::BBox;

    fn set(boxes: &[BBox]) -> AnchorSet {
        AnchorSet {
            anchors: boxes
                .iter()
                .map(|b| {
                    let (cx, cy) = b.center();
                    Anchor {
                        level: 3,
                        cx,
                        cy,
                        width: b.width(),
                        height: b.height(),
                    }
                })
                .collect(),
            levels: vec![LevelGrid {
                level: 3,
                stride: 4,
                height: 1,
                width: boxes.len(),
                offset: 0,
            }],
            per_cell: 1,
        }
    }

    fn gt(class_id: usize, b: BBox) -> BoxAnnotation {
        BoxAnnotation { class_id, bbox: b }
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_deltas() {
        let b = BBox::new(4.0, 4.0, 20.0, 20.0);
        let far = BBox::new(40.0, 40.0, 56.0, 56.0);
        let t = match_anchors(&set(&[b, far]), &[gt(2, b)], MatchThresholds::default()).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Object(2));
        assert_eq!(t[0].deltas, [0.0; 4]);
        assert_eq!(t[1].label, AnchorLabel::Background);
    }

    #[test]
    fn low_overlap_is_background() {
        // IoU 1/7: background, but the GT's best-anchor claim overrides it
        // when it is the only candidate, so give the box a better anchor.
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let g = BBox::new(1.0, 1.0, 3.0, 3.0);
        let t = match_anchors(&set(&[a, g]), &[gt(0, g)], MatchThresholds::default()).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Background);
        assert_eq!(t[1].label, AnchorLabel::Object(0));
    }

    #[test]
    fn middle_band_is_ignored() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g = BBox::new(0.0, 0.0, 10.0, 4.5); // IoU 0.45
        let best = BBox::new(0.0, 0.0, 10.0, 4.5);
        let t = match_anchors(&set(&[a, best]), &[gt(1, g)], MatchThresholds::default()).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Ignore);
        assert_eq!(t[1].label, AnchorLabel::Object(1));
    }

    #[test]
    fn each_gt_claims_its_best_anchor() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let g = BBox::new(1.0, 1.0, 3.0, 3.0);
        let t = match_anchors(&set(&[a]), &[gt(5, g)], MatchThresholds::default()).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Object(5));
    }

    #[test]
    fn no_boxes_means_all_background() {
        let t = match_anchors(&set(&[BBox::new(0.0, 0.0, 4.0, 4.0)]), &[], MatchThresholds::default()).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Background);
    }

    #[test]
    fn tie_goes_to_lowest_gt_index() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g1 = BBox::new(0.0, 0.0, 10.0, 8.0);
        let g2 = BBox::new(0.0, 2.0, 10.0, 10.0);
        let t = match_anchors(&set(&[a]), &[gt(1, g1), gt(2, g2)], MatchThresholds::default()).unwrap();
        assert_eq!(t[0].label, AnchorLabel::Object(1));
    }

    #[test]
    fn errors() {
        let empty = AnchorSet {
            anchors: vec![],
            levels: vec![],
            per_cell: 1,
        };
        assert!(match_anchors(&empty, &[], MatchThresholds::default()).is_err());
        let bad = MatchThresholds {
            positive: 0.4,
            negative: 0.5,
        };
        assert!(match_anchors(&set(&[BBox::new(0.0, 0.0, 1.0, 1.0)]), &[], bad).is_err());
    }
}
