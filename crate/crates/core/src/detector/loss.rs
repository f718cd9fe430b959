//! Detection objective: focal classification loss and smooth-L1 box loss.

use super::{match_anchors, AnchorLabel, AnchorSet, BoxAnnotation, LevelOutput, MatchThresholds};
use crate::tensor::{add_n, focal_loss, scale, smooth_l1, FocalParams, Float, Tensor};
use crate::{Error, Result};

/// Normalizer of the summed classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassNorm {
    /// Divide by the number of positive anchors (at least one).
    Positives,
    /// Divide by the number of non-ignored anchors.
    NonIgnored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub thresholds: MatchThresholds,
    pub box_beta: f64,
    pub class_norm: ClassNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal: FocalParams::new(Some(0.25), 2.0),
            thresholds: MatchThresholds::default(),
            box_beta: 1.0 / 9.0,
            class_norm: ClassNorm::Positives,
        }
    }
}

/// Per-level dense targets laid out exactly like the head outputs.
#[derive(Clone, Debug)]
pub struct LevelTargets<T: Float> {
    pub cls: Vec<u8>,
    pub cls_mask: Vec<bool>,
    pub reg: Vec<T>,
    pub reg_weight: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchTargets<T: Float = f32> {
    pub levels: Vec<LevelTargets<T>>,
    pub positives: usize,
    pub non_ignored: usize,
}

impl<T: Float> BatchTargets<T> {
    pub fn build(
        anchors: &AnchorSet,
        num_classes: usize,
        gts: &[Vec<BoxAnnotation>],
        thresholds: MatchThresholds,
    ) -> Result<Self> {
        let a = anchors.per_cell;
        let b = gts.len();
        let mut levels: Vec<LevelTargets<T>> = anchors
            .levels
            .iter()
            .map(|g| {
                let area = g.height * g.width;
                LevelTargets {
                    cls: vec![0; b * num_classes * a * area],
                    cls_mask: vec![true; b * num_classes * a * area],
                    reg: vec![T::zero(); b * 4 * a * area],
                    reg_weight: vec![T::zero(); b * 4 * a * area],
                }
            })
            .collect();
        let (mut positives, mut non_ignored) = (0, 0);
        for (bi, image_gts) in gts.iter().enumerate() {
            if let Some(bad) = image_gts.iter().find(|g| g.class_id >= num_classes) {
                return Err(Error::InvalidInput(format!(
                    "class id {} outside 0..{num_classes}",
                    bad.class_id
                )));
            }
            let targets = match_anchors(anchors, image_gts, thresholds)?;
            for (g, lt) in anchors.levels.iter().zip(levels.iter_mut()) {
                let area = g.height * g.width;
                for cell in 0..area {
                    for ai in 0..a {
                        let t = &targets[g.offset + cell * a + ai];
                        let cls_base = (bi * num_classes * a + ai * num_classes) * area + cell;
                        match t.label {
                            AnchorLabel::Ignore => {
                                for k in 0..num_classes {
                                    lt.cls_mask[cls_base + k * area] = false;
                                }
                            }
                            AnchorLabel::Background => non_ignored += 1,
                            AnchorLabel::Object(k) => {
                                non_ignored += 1;
                                positives += 1;
                                lt.cls[cls_base + k * area] = 1;
                                let reg_base = (bi * 4 * a + ai * 4) * area + cell;
                                for j in 0..4 {
                                    lt.reg[reg_base + j * area] = T::lit(t.deltas[j]);
                                    lt.reg_weight[reg_base + j * area] = T::one();
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            levels,
            positives,
            non_ignored,
        })
    }
}

/// Detection loss components.
#[derive(Clone, Debug)]
pub struct DetLoss<T: Float = f32> {
    pub l_class: Tensor<T>,
    pub l_box: Tensor<T>,
    pub positives: usize,
}

/// Focal loss over all non-ignored anchor/class slots and smooth-L1 over
/// positive anchors, both summed over levels. The box loss is averaged over
/// positives and is zero when there are none.
pub fn detection_loss<T: Float>(
    outputs: &[LevelOutput<T>],
    targets: &BatchTargets<T>,
    cfg: &LossConfig,
) -> Result<DetLoss<T>> {
    if outputs.len() != targets.levels.len() {
        return Err(Error::InvalidInput(format!(
            "{} head levels vs {} target levels",
            outputs.len(),
            targets.levels.len()
        )));
    }
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (out, t) in outputs.iter().zip(&targets.levels) {
        cls_terms.push(focal_loss(&out.cls, &t.cls, Some(&t.cls_mask), cfg.focal)?);
        box_terms.push(smooth_l1(&out.reg, &t.reg, &t.reg_weight, cfg.box_beta)?);
    }
    let cls_norm = match cfg.class_norm {
        ClassNorm::Positives => targets.positives.max(1),
        ClassNorm::NonIgnored => targets.non_ignored.max(1),
    } as f64;
    let l_class = scale(&add_n(&cls_terms)?, 1.0 / cls_norm);
    let l_box = scale(&add_n(&box_terms)?, 1.0 / targets.positives.max(1) as f64);
    Ok(DetLoss {
        l_class,
        l_box,
        positives: targets.positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, DetectorConfig};
    use crate::geometry::BBox;
    use crate::tensor::{Array, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            num_classes: 2,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn empty_image_has_zero_box_loss() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det = Detector::<f32>::new(cfg.clone(), &mut rng);
        let x = Tensor::constant(Array::full(&[1, 3, 32, 32], 0.3));
        let (_, out) = det.forward(&x, Mode::Train).unwrap();
        let t = BatchTargets::build(&cfg.anchors(32), 2, &[vec![]], MatchThresholds::default()).unwrap();
        let l = detection_loss(&out, &t, &LossConfig::default()).unwrap();
        assert_eq!(l.l_box.item(), 0.0);
        assert_eq!(l.positives, 0);
        assert!(l.l_class.item() > 0.0 && l.l_class.item().is_finite());
    }

    #[test]
    fn positives_land_in_their_channel() {
        let cfg = small_cfg();
        let anchors = cfg.anchors(32);
        let a0 = anchors.anchors[anchors.levels[0].offset + 5 * 3 + 1];
        let gt = BoxAnnotation {
            class_id: 1,
            bbox: a0.bbox(),
        };
        let t = BatchTargets::<f32>::build(&anchors, 2, &[vec![gt]], MatchThresholds::default()).unwrap();
        let area = 8 * 8;
        // anchor scale 1, class 1 -> channel 1 * 2 + 1 = 3, cell 5
        assert_eq!(t.levels[0].cls[3 * area + 5], 1);
        for j in 0..4 {
            assert_eq!(t.levels[0].reg_weight[(4 + j) * area + 5], 1.0);
            assert_eq!(t.levels[0].reg[(4 + j) * area + 5], 0.0);
        }
        assert!(t.positives >= 1);
        assert!(BatchTargets::<f32>::build(
            &anchors,
            2,
            &[vec![BoxAnnotation {
                class_id: 2,
                bbox: BBox::new(0.0, 0.0, 8.0, 8.0)
            }]],
            MatchThresholds::default()
        )
        .is_err());
    }
}
