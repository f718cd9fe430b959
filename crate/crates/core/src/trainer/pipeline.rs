use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{predict, train, ImageSet, LabeledSet, LossBreakdown, Mode, TrainConfig};
use crate::detector::{DecodeConfig, Detector, DetectorConfig};
use crate::domainadapt::LevelSet;
use crate::evalmap::{evaluate, Metrics};
use crate::nn::load_state;
use crate::tensor::checkpoint;
use crate::toydomains::{read_manifest, DomainStats};
use crate::{Error, Result};

/// Inference-time settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub detector: DetectorConfig,
    pub decode: DecodeConfig,
    pub iou: f64,
    pub batch: usize,
    /// Test-time translation of every image to these statistics.
    pub translate_to: Option<DomainStats>,
}

impl EvalSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            detector: cfg.detector.clone(),
            decode: cfg.decode,
            iou: cfg.eval_iou,
            batch: cfg.eval_batch,
            translate_to: None,
        }
    }
}

pub fn evaluate_detector(detector: &Detector<f32>, data: &LabeledSet, settings: &EvalSettings) -> Result<Metrics> {
    let preds = match &settings.translate_to {
        Some(stats) => predict(detector, &data.images.translated(stats)?, &settings.decode, settings.batch)?,
        None => predict(detector, &data.images, &settings.decode, settings.batch)?,
    };
    evaluate(&preds, &data.boxes, settings.iou)
}

fn load_detector(path: &Path, cfg: &DetectorConfig) -> Result<Detector<f32>> {
    let entries = checkpoint::load(path)?;
    let det = Detector::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0));
    load_state(&det, &entries)?;
    Ok(det)
}

/// Eval-mode metrics of a saved detector on an annotated manifest.
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &Path, settings: &EvalSettings) -> Result<Metrics> {
    let det = load_detector(checkpoint, &settings.detector)?;
    let data = LabeledSet::load(&read_manifest(manifest)?)?;
    evaluate_detector(&det, &data, settings)
}

/// Dataset and output locations of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelinePaths {
    pub source_train: PathBuf,
    /// Unlabeled stream for the aligning modes.
    pub target_train: Option<PathBuf>,
    pub target_test: PathBuf,
    /// Held-out source split for a same-domain score.
    pub source_test: Option<PathBuf>,
    pub source_stats: Option<PathBuf>,
    pub target_stats: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub struct PipelineReport {
    pub mode: Mode,
    /// Target test metrics of the final model.
    pub target: Metrics,
    /// Best periodic checkpoint on target test, `(iteration, metrics)`.
    pub best_target: Option<(usize, Metrics)>,
    pub source: Option<Metrics>,
    pub log: Vec<LossBreakdown>,
    pub checkpoint: PathBuf,
    /// Annotation lists read from the target training manifest.
    pub target_label_reads: usize,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    mode: &'a str,
    levels: String,
    lambda: f64,
    seed: u64,
    iterations: usize,
    target_map: f64,
    best_target_iteration: Option<usize>,
    best_target_map: Option<f64>,
    source_map: Option<f64>,
}

fn stats_for(path: &Option<PathBuf>, what: &str, mode: Mode) -> Result<DomainStats> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("mode {mode} needs a {what} statistics file")))?;
    DomainStats::load(p)
}

/// Runs one mode end to end and returns its target-domain metrics.
///
/// `combined_syn2real` restyles the source training images with the target
/// statistics and tests on raw target images; `combined_real2syn` and
/// `translate_only` restyle target images (training stream and test set) with
/// the source statistics.
pub fn run_pipeline(cfg: &TrainConfig, paths: &PipelinePaths) -> Result<PipelineReport> {
    cfg.validate()?;
    let mode = cfg.mode;
    let source_stats = match mode {
        Mode::TranslateOnly | Mode::CombinedReal2Syn => Some(stats_for(&paths.source_stats, "source", mode)?),
        _ => None,
    };
    let target_stats = match mode {
        Mode::CombinedSyn2Real => Some(stats_for(&paths.target_stats, "target", mode)?),
        _ => None,
    };

    let mut source = LabeledSet::load(&read_manifest(&paths.source_train)?)?;
    if let Some(t) = &target_stats {
        source.images = source.images.translated(t)?;
    }
    let mut target_label_reads = 0;
    let target_train = if cfg.uses_target() {
        let p = paths
            .target_train
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {mode} needs a target training manifest")))?;
        let manifest = read_manifest(p)?;
        let set = ImageSet::load_unlabeled(&manifest)?;
        target_label_reads = manifest.label_reads();
        Some(match &source_stats {
            Some(s) => set.translated(s)?,
            None => set,
        })
    } else {
        None
    };
    let target_test = LabeledSet::load(&read_manifest(&paths.target_test)?)?;
    let source_test = paths
        .source_test
        .as_ref()
        .map(|p| read_manifest(p).and_then(|m| LabeledSet::load(&m)))
        .transpose()?;

    std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
    let out = train(cfg, &source, target_train.as_ref(), Some(&paths.out_dir))?;

    let mut eval = EvalSettings::from_config(cfg);
    eval.translate_to = source_stats;
    let target = evaluate_detector(&out.detector, &target_test, &eval)?;
    target.write(&paths.out_dir, "metrics")?;

    let mut best_target: Option<(usize, Metrics)> = None;
    for (it, p) in &out.checkpoints {
        let m = if *it == cfg.iterations {
            target.clone()
        } else {
            evaluate_detector(&load_detector(p, &cfg.detector)?, &target_test, &eval)?
        };
        if best_target.as_ref().map_or(true, |(_, b)| m.map_score > b.map_score) {
            best_target = Some((*it, m));
        }
    }

    let source_metrics = match &source_test {
        Some(data) => {
            let plain = EvalSettings::from_config(cfg);
            let m = evaluate_detector(&out.detector, data, &plain)?;
            m.write(&paths.out_dir, "metrics_source")?;
            Some(m)
        }
        None => None,
    };

    let summary = RunSummary {
        mode: mode.as_str(),
        levels: if cfg.uses_target() { cfg.levels.to_string() } else { LevelSet::NONE.to_string() },
        lambda: cfg.lambda,
        seed: cfg.seed,
        iterations: cfg.iterations,
        target_map: target.map_score,
        best_target_iteration: best_target.as_ref().map(|b| b.0),
        best_target_map: best_target.as_ref().map(|b| b.1.map_score),
        source_map: source_metrics.as_ref().map(|m| m.map_score),
    };
    let run = paths.out_dir.join("run.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&run, text + "\n").map_err(|e| Error::io(&run, e))?;

    Ok(PipelineReport {
        mode,
        target,
        best_target,
        source: source_metrics,
        log: out.log,
        checkpoint: paths.out_dir.join("model.ckpt"),
        target_label_reads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub subset: LevelSet,
    pub map: f64,
}

/// Trains one feature-alignment model per discriminator subset with the same
/// seed and data, writing `ablation.csv` (`subset,map`) under the output
/// directory.
pub fn ablate(cfg: &TrainConfig, paths: &PipelinePaths, subsets: &[LevelSet]) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() {
        return Err(Error::Config("ablation needs at least one discriminator subset".into()));
    }
    if cfg.mode != Mode::FeatureAlign {
        return Err(Error::Config(format!("ablation runs in feature_align mode, not {}", cfg.mode)));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    let mut csv = String::from("subset,map\n");
    for &subset in subsets {
        let run_cfg = TrainConfig {
            levels: subset,
            ..cfg.clone()
        };
        let run_paths = PipelinePaths {
            out_dir: paths.out_dir.join(format!("subset_{subset}")),
            ..paths.clone()
        };
        let report = run_pipeline(&run_cfg, &run_paths)?;
        csv.push_str(&format!("{subset},{}\n", report.target.map_score));
        rows.push(AblationRow {
            subset,
            map: report.target.map_score,
        });
    }
    let p = paths.out_dir.join("ablation.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    Ok(rows)
}
