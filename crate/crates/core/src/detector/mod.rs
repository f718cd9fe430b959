//! Miniature single-stage detector: four-stage backbone exposing C3/C4/C5,
//! a top-down pyramid, shared classification/regression subnets, and the
//! matching, loss and decoding machinery around them.

mod anchors;
mod decode;
mod loss;
mod targets;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use anchors::{Anchor, AnchorSet, LevelGrid, LEVELS, STRIDES};
pub use decode::{decode, nms, DecodeConfig, Detection};
pub use loss::{detection_loss, BatchTargets, ClassNorm, DetLoss, LossConfig};
pub use targets::{match_anchors, AnchorLabel, AnchorTarget, MatchThresholds};

use crate::geometry::BBox;
use crate::nn::{BatchNorm2d, Conv2d, Module, Named};
use crate::tensor::{add, relu, upsample_nearest2x, Float, Mode, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Output channels of the stem and the three strided stages.
    pub backbone_channels: [usize; 4],
    pub pyramid_channels: usize,
    pub head_channels: usize,
    /// Hidden 3x3 conv layers in each subnet before the output layer.
    pub head_depth: usize,
    /// Batch norm after every backbone conv.
    pub backbone_norm: bool,
    /// Base anchor side per level (P3, P4, P5) in pixels.
    pub anchor_sizes: [f64; 3],
    pub anchor_scales: Vec<f64>,
    /// Foreground prior used to initialize the classification bias.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            backbone_channels: [16, 32, 64, 128],
            pyramid_channels: 64,
            head_channels: 64,
            head_depth: 1,
            backbone_norm: false,
            anchor_sizes: [16.0, 32.0, 64.0],
            anchor_scales: vec![1.0, 1.26, 1.587],
            prior_prob: 0.01,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len()
    }

    pub fn anchors(&self, image_size: usize) -> AnchorSet {
        AnchorSet::generate(image_size, &self.anchor_sizes, &self.anchor_scales)
    }
}

/// Backbone maps at strides 4/8/16 and the pyramid derived from them.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Float = f32> {
    pub c3: Tensor<T>,
    pub c4: Tensor<T>,
    pub c5: Tensor<T>,
    pub p3: Tensor<T>,
    pub p4: Tensor<T>,
    pub p5: Tensor<T>,
}

impl<T: Float> FeaturePyramid<T> {
    pub fn c_level(&self, level: u8) -> &Tensor<T> {
        match level {
            3 => &self.c3,
            4 => &self.c4,
            _ => &self.c5,
        }
    }

    pub fn p_levels(&self) -> [&Tensor<T>; 3] {
        [&self.p3, &self.p4, &self.p5]
    }
}

/// Raw head outputs for one pyramid level: `cls [B, K*A, H, W]` logits and
/// `reg [B, 4*A, H, W]` deltas. Channel `a * K + k` holds class `k` of
/// anchor scale `a`; channel `a * 4 + j` holds delta `j`.
#[derive(Clone, Debug)]
pub struct LevelOutput<T: Float = f32> {
    pub cls: Tensor<T>,
    pub reg: Tensor<T>,
}

struct ConvUnit<T: Float> {
    conv: Conv2d<T>,
    norm: Option<BatchNorm2d<T>>,
}

impl<T: Float> ConvUnit<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, stride: usize, norm: bool, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::same3(&format!("{name}.conv"), cin, cout, stride, rng),
            norm: norm.then(|| BatchNorm2d::new(&format!("{name}.bn"), cout)),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.conv.forward(x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(&y, mode)?;
        }
        Ok(relu(&y))
    }

    fn state(&self) -> Vec<Named<T>> {
        let mut v = self.conv.state();
        if let Some(bn) = &self.norm {
            v.extend(bn.state());
        }
        v
    }
}

pub struct Backbone<T: Float = f32> {
    stages: Vec<[ConvUnit<T>; 2]>,
}

impl<T: Float> Backbone<T> {
    fn new<R: Rng + ?Sized>(cfg: &DetectorConfig, rng: &mut R) -> Self {
        let names = ["backbone.stem", "backbone.stage2", "backbone.stage3", "backbone.stage4"];
        let mut cin = 3;
        let stages = names
            .iter()
            .zip(cfg.backbone_channels)
            .map(|(name, cout)| {
                let s = [
                    ConvUnit::new(&format!("{name}.unit1"), cin, cout, 2, cfg.backbone_norm, rng),
                    ConvUnit::new(&format!("{name}.unit2"), cout, cout, 1, cfg.backbone_norm, rng),
                ];
                cin = cout;
                s
            })
            .collect();
        Self { stages }
    }

    /// Returns the outputs of the last three stages (C3, C4, C5).
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 3]> {
        let mut h = x.clone();
        let mut outs = Vec::with_capacity(3);
        for (i, [a, b]) in self.stages.iter().enumerate() {
            h = b.forward(&a.forward(&h, mode)?, mode)?;
            if i > 0 {
                outs.push(h.clone());
            }
        }
        let [c3, c4, c5]: [Tensor<T>; 3] = outs.try_into().expect("three strided stages");
        Ok([c3, c4, c5])
    }

    fn state(&self) -> Vec<Named<T>> {
        self.stages.iter().flat_map(|s| s.iter().flat_map(|u| u.state())).collect()
    }
}

struct Subnet<T: Float> {
    hidden: Vec<Conv2d<T>>,
    out: Conv2d<T>,
}

impl<T: Float> Subnet<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, width: usize, depth: usize, cout: usize, rng: &mut R) -> Self {
        let mut c = cin;
        let hidden = (0..depth)
            .map(|i| {
                let conv = Conv2d::same3(&format!("{name}.conv{}", i + 1), c, width, 1, rng);
                c = width;
                conv
            })
            .collect();
        Self {
            hidden,
            out: Conv2d::same3(&format!("{name}.out"), c, cout, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for conv in &self.hidden {
            h = relu(&conv.forward(&h)?);
        }
        Ok(self.out.forward(&h)?)
    }

    fn state(&self) -> Vec<Named<T>> {
        let mut v: Vec<_> = self.hidden.iter().flat_map(|c| c.state()).collect();
        v.extend(self.out.state());
        v
    }
}

pub struct Detector<T: Float = f32> {
    pub config: DetectorConfig,
    backbone: Backbone<T>,
    laterals: [Conv2d<T>; 3],
    cls_head: Subnet<T>,
    box_head: Subnet<T>,
}

impl<T: Float> Detector<T> {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Self {
        let [_, f3, f4, f5] = config.backbone_channels;
        let pc = config.pyramid_channels;
        let backbone = Backbone::new(&config, rng);
        let laterals = [
            Conv2d::pointwise("fpn.lateral3", f3, pc, rng),
            Conv2d::pointwise("fpn.lateral4", f4, pc, rng),
            Conv2d::pointwise("fpn.lateral5", f5, pc, rng),
        ];
        let a = config.anchors_per_cell();
        let cls_head = Subnet::new("head.cls", pc, config.head_channels, config.head_depth, config.num_classes * a, rng);
        let box_head = Subnet::new("head.box", pc, config.head_channels, config.head_depth, 4 * a, rng);
        let p = config.prior_prob;
        cls_head.out.fill_bias(-((1.0 - p) / p).ln());
        Self {
            config,
            backbone,
            laterals,
            cls_head,
            box_head,
        }
    }

    pub fn backbone_forward(&self, images: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let shape = images.shape();
        match shape.as_slice() {
            [_, 3, h, w] if h == w && h % 16 == 0 => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "images must be [B, 3, S, S] with S divisible by 16, got {shape:?}"
                )))
            }
        }
        let [c3, c4, c5] = self.backbone.forward(images, mode)?;
        let p5 = self.laterals[2].forward(&c5)?;
        let p4 = add(&self.laterals[1].forward(&c4)?, &upsample_nearest2x(&p5)?)?;
        let p3 = add(&self.laterals[0].forward(&c3)?, &upsample_nearest2x(&p4)?)?;
        Ok(FeaturePyramid { c3, c4, c5, p3, p4, p5 })
    }

    /// Applies the shared subnets to P3, P4 and P5.
    pub fn head_forward(&self, pyramid: &FeaturePyramid<T>) -> Result<Vec<LevelOutput<T>>> {
        pyramid
            .p_levels()
            .iter()
            .map(|p| {
                Ok(LevelOutput {
                    cls: self.cls_head.forward(p)?,
                    reg: self.box_head.forward(p)?,
                })
            })
            .collect()
    }

    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<(FeaturePyramid<T>, Vec<LevelOutput<T>>)> {
        let pyr = self.backbone_forward(images, mode)?;
        let out = self.head_forward(&pyr)?;
        Ok((pyr, out))
    }

    /// Names of parameters belonging to the backbone.
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }
}

impl<T: Float> Module<T> for Detector<T> {
    fn state(&self) -> Vec<Named<T>> {
        let mut v = self.backbone.state();
        v.extend(self.laterals.iter().flat_map(|c| c.state()));
        v.extend(self.cls_head.state());
        v.extend(self.box_head.state());
        v
    }
}
