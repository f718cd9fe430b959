//! Training orchestration: the same-domain baseline, feature alignment,
//! translation-only and combined pipelines, checkpoints, loss logs and
//! ablation sweeps.

mod data;
mod pipeline;
mod train;

use std::fmt;
use std::str::FromStr;

pub use data::{predict, ImageSet, LabeledSet};
pub use pipeline::{
    ablate, evaluate_checkpoint, evaluate_detector, run_pipeline, AblationRow, EvalSettings, PipelinePaths,
    PipelineReport,
};
pub use train::{batch_seed, train, train_observed, LossBreakdown, TrainOutput, LOSS_LOG_HEADER};

use crate::detector::{DecodeConfig, DetectorConfig, LossConfig};
use crate::domainadapt::{DomainConfig, LevelSet};
use crate::tensor::FocalParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    FeatureAlign,
    TranslateOnly,
    CombinedSyn2Real,
    CombinedReal2Syn,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::FeatureAlign,
        Mode::TranslateOnly,
        Mode::CombinedSyn2Real,
        Mode::CombinedReal2Syn,
    ];

    /// Whether the mode trains discriminators on an unlabeled target stream.
    pub fn aligns_features(self) -> bool {
        matches!(self, Mode::FeatureAlign | Mode::CombinedSyn2Real | Mode::CombinedReal2Syn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::FeatureAlign => "feature_align",
            Mode::TranslateOnly => "translate_only",
            Mode::CombinedSyn2Real => "combined_syn2real",
            Mode::CombinedReal2Syn => "combined_real2syn",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda: f64,
    pub levels: LevelSet,
    pub iterations: usize,
    pub batch_size: usize,
    pub target_batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate from `decay_at` on.
    pub lr_decay: f64,
    pub decay_at: usize,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub disc_focal: FocalParams,
    pub disc_dropout: f64,
    pub detector: DetectorConfig,
    pub decode: DecodeConfig,
    pub eval_iou: f64,
    pub eval_batch: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dom = DomainConfig::default();
        Self {
            mode: Mode::Baseline,
            lambda: dom.lambda,
            levels: dom.levels,
            iterations: 3000,
            batch_size: 4,
            target_batch_size: 4,
            lr: 0.005,
            lr_decay: 0.1,
            decay_at: 1500,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            disc_focal: dom.focal,
            disc_dropout: dom.dropout,
            detector: DetectorConfig::default(),
            decode: DecodeConfig::default(),
            eval_iou: 0.5,
            eval_batch: 16,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.decay_at > self.iterations {
            return fail(format!("decay point {} exceeds {} iterations", self.decay_at, self.iterations));
        }
        if self.batch_size == 0 || self.target_batch_size == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return fail(format!("invalid learning rate {} / decay {}", self.lr, self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.disc_dropout) {
            return fail(format!("discriminator dropout {} outside [0, 1)", self.disc_dropout));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return fail(format!("evaluation IoU {} outside (0, 1]", self.eval_iou));
        }
        let t = self.loss.thresholds;
        if !(t.negative < t.positive) {
            return fail(format!("negative threshold {} must be below positive {}", t.negative, t.positive));
        }
        if self.detector.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        Ok(())
    }

    pub fn domain(&self) -> DomainConfig {
        DomainConfig {
            levels: self.levels,
            lambda: self.lambda,
            focal: self.disc_focal,
            dropout: self.disc_dropout,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.decay_at {
            self.lr
        } else {
            self.lr * self.lr_decay
        }
    }

    /// Whether a target stream and discriminators take part in training.
    pub fn uses_target(&self) -> bool {
        self.mode.aligns_features() && !self.levels.is_empty()
    }
}
