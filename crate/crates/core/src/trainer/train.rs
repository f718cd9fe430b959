use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageSet, LabeledSet, TrainConfig};
use crate::detector::{detection_loss, BatchTargets, Detector};
use crate::domainadapt::{total_loss, DiscriminatorSet, DomainLoss};
use crate::nn::{state_entries, zero_grad, Module, Named, Sgd};
use crate::tensor::{checkpoint, Mode};
use crate::{Error, Result};

pub const LOSS_LOG_HEADER: &str = "iteration,l_class,l_box,l_d3,l_d4,l_d5,eq1_total";

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub l_class: f64,
    pub l_box: f64,
    pub l_d3: f64,
    pub l_d4: f64,
    pub l_d5: f64,
    /// `l_class + l_box - lambda * (l_d3 + l_d4 + l_d5)`.
    pub eq1_total: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.l_class, self.l_box, self.l_d3, self.l_d4, self.l_d5, self.eq1_total
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::InvalidInput(format!("malformed loss log row `{line}`"));
        if f.len() != 7 {
            return Err(bad());
        }
        let v = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad())?,
            l_class: v(1)?,
            l_box: v(2)?,
            l_d3: v(3)?,
            l_d4: v(4)?,
            l_d5: v(5)?,
            eq1_total: v(6)?,
        })
    }
}

pub struct TrainOutput {
    pub detector: Detector<f32>,
    pub discriminators: Option<DiscriminatorSet<f32>>,
    pub log: Vec<LossBreakdown>,
    /// Periodic detector checkpoints, final one included.
    pub checkpoints: Vec<(usize, PathBuf)>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of everything random in one iteration: batch draws and dropout.
pub fn batch_seed(seed: u64, iteration: usize) -> u64 {
    splitmix(seed ^ splitmix(iteration as u64))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn draw(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

fn save_entries(path: &Path, m: &dyn Module<f32>) -> Result<()> {
    Ok(checkpoint::save(path, &state_entries(m))?)
}

struct LogFile {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LogFile {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { out, path })
    }

    fn append(&mut self, row: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{}", row.csv_row()).map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn train(
    cfg: &TrainConfig,
    source: &LabeledSet,
    target: Option<&ImageSet>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    train_observed(cfg, source, target, out_dir, &mut |_, _| {})
}

/// Like [`train`], calling `observer(iteration, parameters)` after every
/// backward pass, before the update.
pub fn train_observed(
    cfg: &TrainConfig,
    source: &LabeledSet,
    target: Option<&ImageSet>,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(usize, &[Named<f32>]),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidInput("source training set is empty".into()));
    }
    let s = source.images.image_size()?;
    let target = if cfg.uses_target() {
        let t = target.ok_or_else(|| {
            Error::Config(format!("mode {} needs a target training manifest", cfg.mode))
        })?;
        if t.is_empty() {
            return Err(Error::InvalidInput("target training set is empty".into()));
        }
        if t.image_size()? != s {
            return Err(Error::InvalidInput(format!(
                "target images are {}px but source images are {s}px",
                t.image_size()?
            )));
        }
        Some(t)
    } else {
        None
    };
    if let Some(c) = source.boxes.iter().flatten().find(|b| b.class_id >= cfg.detector.num_classes) {
        return Err(Error::InvalidInput(format!(
            "annotation class {} outside the {} configured classes",
            c.class_id, cfg.detector.num_classes
        )));
    }

    let detector = Detector::<f32>::new(cfg.detector.clone(), &mut stream(cfg.seed, 0));
    let [_, c3, c4, c5] = cfg.detector.backbone_channels;
    let discs = match target {
        Some(_) => Some(DiscriminatorSet::<f32>::new(cfg.domain(), [c3, c4, c5], &mut stream(cfg.seed, 1))?),
        None => None,
    };
    let mut params = detector.parameters();
    if let Some(d) = &discs {
        params.extend(d.parameters());
    }
    let anchors = cfg.detector.anchors(s);

    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut log_file = out_dir.map(|d| LogFile::create(d.join("loss_log.csv"))).transpose()?;

    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    for it in 0..cfg.iterations {
        let seed = batch_seed(cfg.seed, it);
        let src_idx = draw(&mut stream(seed, 0), source.len(), cfg.batch_size);
        let images = source.images.batch(&src_idx)?;
        let gts: Vec<_> = src_idx.iter().map(|&i| source.boxes[i].clone()).collect();
        let targets = BatchTargets::build(&anchors, cfg.detector.num_classes, &gts, cfg.loss.thresholds)?;

        let (pyramid, outputs) = detector.forward(&images, Mode::Train)?;
        let det = detection_loss(&outputs, &targets, &cfg.loss)?;
        let dom = match (target, &discs) {
            (Some(t), Some(d)) => {
                let tgt_idx = draw(&mut stream(seed, 1), t.len(), cfg.target_batch_size);
                let tgt_pyramid = detector.backbone_forward(&t.batch(&tgt_idx)?, Mode::Train)?;
                d.domain_loss(&pyramid, &tgt_pyramid, Mode::Train, stream(seed, 2).gen())?
            }
            _ => DomainLoss::zero(),
        };
        let lambda = if discs.is_some() { cfg.lambda } else { 0.0 };
        let obj = total_loss(&det, &dom, lambda)?;
        let [l_d3, l_d4, l_d5] = dom.values();
        let row = LossBreakdown {
            iteration: it + 1,
            l_class: det.l_class.item().into(),
            l_box: det.l_box.item().into(),
            l_d3,
            l_d4,
            l_d5,
            eq1_total: obj.reported,
        };
        let value = f64::from(obj.optimized.item());
        if !value.is_finite() || !row.eq1_total.is_finite() {
            let detail = format!("loss components {}", row.csv_row());
            if let Some(d) = out_dir {
                let dump = d.join("nonfinite_batch.txt");
                let text = format!(
                    "iteration {}\nbatch_seed {seed}\nsource_indices {src_idx:?}\n{LOSS_LOG_HEADER}\n{}\n",
                    it + 1,
                    row.csv_row()
                );
                std::fs::write(&dump, text).map_err(|e| Error::io(&dump, e))?;
            }
            return Err(Error::NonFinite {
                iteration: it + 1,
                batch_seed: seed,
                detail,
            });
        }

        zero_grad(&params);
        obj.optimized.backward()?;
        observer(it + 1, &params);
        sgd.step(&params, cfg.lr_at(it));

        if let Some(f) = log_file.as_mut() {
            f.append(&row)?;
        }
        log.push(row);

        let done = it + 1;
        if let Some(d) = &ckpt_dir {
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.iterations {
                let p = d.join(format!("model_{done:05}.ckpt"));
                save_entries(&p, &detector)?;
                checkpoints.push((done, p));
                if let Some(f) = log_file.as_mut() {
                    f.flush()?;
                }
            }
        }
    }
    if let Some(d) = out_dir {
        save_entries(&d.join("model.ckpt"), &detector)?;
        if let Some(ds) = &discs {
            save_entries(&d.join("discriminators.ckpt"), ds)?;
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutput {
        detector,
        discriminators: discs,
        log,
        checkpoints,
    })
}
