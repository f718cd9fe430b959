use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::detector::ClassNorm;
use crate::domainadapt::LevelSet;
use crate::tensor::FocalParams;
use crate::toydomains::{Domain, SceneSpec, Split};
use crate::trainer::{Mode, PipelinePaths, TrainConfig};
use crate::{Error, Result};

/// Everything a run can be configured with. Files are flat `key = value`
/// lines with `#` comments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub source_train: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    pub source_test: Option<PathBuf>,
    pub source_stats: Option<PathBuf>,
    pub target_stats: Option<PathBuf>,
    pub source_train_count: usize,
    pub target_train_count: usize,
    pub test_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train: TrainConfig::default(),
            source_train: None,
            target_train: None,
            target_test: None,
            source_test: None,
            source_stats: None,
            target_stats: None,
            source_train_count: 2000,
            target_train_count: 500,
            test_count: 300,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("invalid value `{v}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: Display,
{
    let items: Vec<T> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly {N} comma-separated values, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`: expected true or false"))),
    }
}

fn parse_opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && !v.eq_ignore_ascii_case("none")).then(|| PathBuf::from(v))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

fn class_norm_name(n: ClassNorm) -> &'static str {
    match n {
        ClassNorm::Positives => "positives",
        ClassNorm::NonIgnored => "non_ignored",
    }
}

/// Key, description. The order is the order of [`RunConfig::to_file`].
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed of all randomness (scene generation and training)"),
    ("image_size", "image side length in pixels"),
    ("num_classes", "glyph classes"),
    ("min_objects", "fewest objects per image"),
    ("max_objects", "most objects per image"),
    ("domain_seed", "seed of the target color shift"),
    ("gain_min", "lowest per-channel target gain"),
    ("gain_max", "highest per-channel target gain"),
    ("bias_max", "largest absolute per-channel target bias"),
    ("noise_sigma", "target additive Gaussian noise"),
    ("blur_radius", "target box-blur radius"),
    ("clutter", "target clutter rectangles per image"),
    ("source_train_count", "default image count of source training data"),
    ("target_train_count", "default image count of target training data"),
    ("test_count", "default image count of test splits"),
    ("mode", "baseline, feature_align, translate_only, combined_syn2real or combined_real2syn"),
    ("lambda", "gradient reversal strength"),
    ("levels", "discriminator levels, e.g. 3,4,5 or none"),
    ("iterations", "training iterations"),
    ("batch_size", "source images per iteration"),
    ("target_batch_size", "target images per iteration"),
    ("lr", "initial learning rate"),
    ("lr_decay", "learning-rate multiplier after the decay point"),
    ("decay_at", "iteration at which the learning rate decays"),
    ("momentum", "SGD momentum"),
    ("focal_alpha", "detection focal alpha, or none"),
    ("focal_gamma", "detection focal gamma"),
    ("class_norm", "classification loss normalizer: positives or non_ignored"),
    ("box_beta", "smooth-L1 transition point"),
    ("match_positive", "anchor IoU for a positive"),
    ("match_negative", "anchor IoU below which an anchor is background"),
    ("disc_alpha", "discriminator focal alpha, or none for equal weighting"),
    ("disc_gamma", "discriminator focal gamma"),
    ("disc_dropout", "dropout rate inside D4 and D5"),
    ("backbone_channels", "widths of the stem and the C3, C4, C5 stages"),
    ("pyramid_channels", "width of P3 to P5"),
    ("head_channels", "width of the subnet hidden layers"),
    ("head_depth", "hidden layers per subnet"),
    ("backbone_norm", "batch norm in the backbone"),
    ("anchor_sizes", "base anchor side on P3, P4, P5"),
    ("anchor_scales", "scale multipliers per cell"),
    ("prior_prob", "initial foreground probability of the classifier"),
    ("score_thresh", "lowest score kept at inference"),
    ("nms_iou", "NMS overlap threshold"),
    ("max_dets", "detections kept per image"),
    ("pre_nms_topk", "candidates per level before NMS"),
    ("eval_iou", "IoU for a true positive"),
    ("eval_batch", "images per inference batch"),
    ("checkpoint_every", "iterations between checkpoints (0 keeps only the final one)"),
    ("source_train", "source training manifest"),
    ("target_train", "target training manifest (images only)"),
    ("target_test", "target test manifest"),
    ("source_test", "source test manifest"),
    ("source_stats", "source color statistics file"),
    ("target_stats", "target color statistics file"),
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (s, t) = (&mut self.scene, &mut self.train);
        match key {
            "seed" => {
                s.seed = parse(key, v)?;
                t.seed = s.seed;
            }
            "image_size" => s.image_size = parse(key, v)?,
            "num_classes" => {
                s.num_classes = parse(key, v)?;
                t.detector.num_classes = s.num_classes;
            }
            "min_objects" => s.min_objects = parse(key, v)?,
            "max_objects" => s.max_objects = parse(key, v)?,
            "domain_seed" => s.corruption.domain_seed = parse(key, v)?,
            "gain_min" => s.corruption.gain_min = parse(key, v)?,
            "gain_max" => s.corruption.gain_max = parse(key, v)?,
            "bias_max" => s.corruption.bias_max = parse(key, v)?,
            "noise_sigma" => s.corruption.noise_sigma = parse(key, v)?,
            "blur_radius" => s.corruption.blur_radius = parse(key, v)?,
            "clutter" => s.corruption.clutter = parse(key, v)?,
            "source_train_count" => self.source_train_count = parse(key, v)?,
            "target_train_count" => self.target_train_count = parse(key, v)?,
            "test_count" => self.test_count = parse(key, v)?,
            "mode" => t.mode = v.parse::<Mode>()?,
            "lambda" => t.lambda = parse(key, v)?,
            "levels" => t.levels = v.parse::<LevelSet>()?,
            "iterations" => t.iterations = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "target_batch_size" => t.target_batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "decay_at" => t.decay_at = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "focal_alpha" => t.loss.focal.alpha = parse_opt_f64(key, v)?,
            "focal_gamma" => t.loss.focal.gamma = parse(key, v)?,
            "class_norm" => {
                t.loss.class_norm = match v {
                    "positives" => ClassNorm::Positives,
                    "non_ignored" => ClassNorm::NonIgnored,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "box_beta" => t.loss.box_beta = parse(key, v)?,
            "match_positive" => t.loss.thresholds.positive = parse(key, v)?,
            "match_negative" => t.loss.thresholds.negative = parse(key, v)?,
            "disc_alpha" => t.disc_focal = FocalParams::new(parse_opt_f64(key, v)?, t.disc_focal.gamma),
            "disc_gamma" => t.disc_focal = FocalParams::new(t.disc_focal.alpha, parse(key, v)?),
            "disc_dropout" => t.disc_dropout = parse(key, v)?,
            "backbone_channels" => t.detector.backbone_channels = parse_array(key, v)?,
            "pyramid_channels" => t.detector.pyramid_channels = parse(key, v)?,
            "head_channels" => t.detector.head_channels = parse(key, v)?,
            "head_depth" => t.detector.head_depth = parse(key, v)?,
            "backbone_norm" => t.detector.backbone_norm = parse_bool(key, v)?,
            "anchor_sizes" => t.detector.anchor_sizes = parse_array(key, v)?,
            "anchor_scales" => t.detector.anchor_scales = parse_list(key, v)?,
            "prior_prob" => t.detector.prior_prob = parse(key, v)?,
            "score_thresh" => t.decode.score_thresh = parse(key, v)?,
            "nms_iou" => t.decode.nms_iou = parse(key, v)?,
            "max_dets" => t.decode.max_dets = parse(key, v)?,
            "pre_nms_topk" => t.decode.pre_nms_topk = parse(key, v)?,
            "eval_iou" => t.eval_iou = parse(key, v)?,
            "eval_batch" => t.eval_batch = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "source_train" => self.source_train = parse_path(v),
            "target_train" => self.target_train = parse_path(v),
            "target_test" => self.target_test = parse_path(v),
            "source_test" => self.source_test = parse_path(v),
            "source_stats" => self.source_stats = parse_path(v),
            "target_stats" => self.target_stats = parse_path(v),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (s, t) = (&self.scene, &self.train);
        let c = &s.corruption;
        Some(match key {
            "seed" => t.seed.to_string(),
            "image_size" => s.image_size.to_string(),
            "num_classes" => s.num_classes.to_string(),
            "min_objects" => s.min_objects.to_string(),
            "max_objects" => s.max_objects.to_string(),
            "domain_seed" => c.domain_seed.to_string(),
            "gain_min" => c.gain_min.to_string(),
            "gain_max" => c.gain_max.to_string(),
            "bias_max" => c.bias_max.to_string(),
            "noise_sigma" => c.noise_sigma.to_string(),
            "blur_radius" => c.blur_radius.to_string(),
            "clutter" => c.clutter.to_string(),
            "source_train_count" => self.source_train_count.to_string(),
            "target_train_count" => self.target_train_count.to_string(),
            "test_count" => self.test_count.to_string(),
            "mode" => t.mode.to_string(),
            "lambda" => t.lambda.to_string(),
            "levels" => {
                if t.levels.is_empty() {
                    "none".into()
                } else {
                    join(&t.levels.levels())
                }
            }
            "iterations" => t.iterations.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "target_batch_size" => t.target_batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "decay_at" => t.decay_at.to_string(),
            "momentum" => t.momentum.to_string(),
            "focal_alpha" => show_opt(t.loss.focal.alpha),
            "focal_gamma" => t.loss.focal.gamma.to_string(),
            "class_norm" => class_norm_name(t.loss.class_norm).to_string(),
            "box_beta" => t.loss.box_beta.to_string(),
            "match_positive" => t.loss.thresholds.positive.to_string(),
            "match_negative" => t.loss.thresholds.negative.to_string(),
            "disc_alpha" => show_opt(t.disc_focal.alpha),
            "disc_gamma" => t.disc_focal.gamma.to_string(),
            "disc_dropout" => t.disc_dropout.to_string(),
            "backbone_channels" => join(&t.detector.backbone_channels),
            "pyramid_channels" => t.detector.pyramid_channels.to_string(),
            "head_channels" => t.detector.head_channels.to_string(),
            "head_depth" => t.detector.head_depth.to_string(),
            "backbone_norm" => t.detector.backbone_norm.to_string(),
            "anchor_sizes" => join(&t.detector.anchor_sizes),
            "anchor_scales" => join(&t.detector.anchor_scales),
            "prior_prob" => t.detector.prior_prob.to_string(),
            "score_thresh" => t.decode.score_thresh.to_string(),
            "nms_iou" => t.decode.nms_iou.to_string(),
            "max_dets" => t.decode.max_dets.to_string(),
            "pre_nms_topk" => t.decode.pre_nms_topk.to_string(),
            "eval_iou" => t.eval_iou.to_string(),
            "eval_batch" => t.eval_batch.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "source_train" => show_path(&self.source_train),
            "target_train" => show_path(&self.target_train),
            "target_test" => show_path(&self.target_test),
            "source_test" => show_path(&self.source_test),
            "source_stats" => show_path(&self.source_stats),
            "target_stats" => show_path(&self.target_stats),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got `{raw}`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: key `{k}` given twice", n + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Defaults, or the file's values on top of them.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::from_file)
    }

    /// Every key with its current value and description.
    pub fn to_file(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let v = self.get(k).expect("every listed key has a value");
            out.push_str(&format!("# {doc}\n{k} = {v}\n"));
        }
        out
    }

    pub fn scene_for(&self, domain: Domain) -> SceneSpec {
        SceneSpec {
            domain,
            ..self.scene.clone()
        }
    }

    pub fn default_count(&self, domain: Domain, split: Split) -> usize {
        match (domain, split) {
            (Domain::Source, Split::Train) => self.source_train_count,
            (Domain::Target, Split::Train) => self.target_train_count,
            (_, Split::Test) => self.test_count,
        }
    }

    pub fn pipeline_paths(&self, out_dir: PathBuf) -> Result<PipelinePaths> {
        let need = |p: &Option<PathBuf>, k: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("`{k}` is not set (config key or --{})", k.replace('_', "-"))))
        };
        Ok(PipelinePaths {
            source_train: need(&self.source_train, "source_train")?,
            target_train: self.target_train.clone(),
            target_test: need(&self.target_test, "target_test")?,
            source_test: self.source_test.clone(),
            source_stats: self.source_stats.clone(),
            target_stats: self.target_stats.clone(),
            out_dir,
        })
    }
}

fn strip(e: &Error) -> String {
    let s = e.to_string();
    s.strip_prefix("configuration error: ").unwrap_or(&s).to_string()
}
