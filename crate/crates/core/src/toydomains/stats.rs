use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_image, DatasetManifest};
use crate::tensor::Array;
use crate::{Error, Result};

/// Per-channel pixel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DomainStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("stats file {}: {e}", path.display())))
    }
}

#[derive(Default)]
struct Moments {
    n: f64,
    sum: [f64; 3],
    sq: [f64; 3],
}

impl Moments {
    fn add(&mut self, img: &Array<f32>) {
        let plane = img.numel() / 3;
        for (c, chunk) in img.data().chunks_exact(plane).enumerate() {
            for &v in chunk {
                let v = f64::from(v);
                self.sum[c] += v;
                self.sq[c] += v * v;
            }
        }
        self.n += plane as f64;
    }

    fn finish(&self) -> DomainStats {
        let mean = self.sum.map(|s| s / self.n);
        let std = std::array::from_fn(|c| (self.sq[c] / self.n - mean[c] * mean[c]).max(0.0).sqrt());
        DomainStats { mean, std }
    }
}

fn check_rgb(img: &Array<f32>) -> Result<()> {
    match img.shape() {
        [3, _, _] => Ok(()),
        s => Err(Error::InvalidInput(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

pub fn image_stats(img: &Array<f32>) -> DomainStats {
    let mut m = Moments::default();
    m.add(img);
    m.finish()
}

/// Statistics pooled over every pixel of every image.
pub fn pooled_stats<'a>(images: impl IntoIterator<Item = &'a Array<f32>>) -> Result<DomainStats> {
    let mut m = Moments::default();
    for img in images {
        check_rgb(img)?;
        m.add(img);
    }
    if m.n == 0.0 {
        return Err(Error::InvalidInput("statistics of an empty image set".into()));
    }
    Ok(m.finish())
}

/// Pooled statistics of the images listed in `manifest`. Annotations are not
/// read.
pub fn compute_domain_stats(manifest: &DatasetManifest) -> Result<DomainStats> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput("statistics of an empty manifest".into()));
    }
    let mut m = Moments::default();
    for p in manifest.image_paths() {
        let img = load_image(&p)?;
        check_rgb(&img)?;
        m.add(&img);
    }
    Ok(m.finish())
}

/// Moves each channel of `img` to the reference mean and spread:
/// `(p - mean_in) / std_in * std_ref + mean_ref`, clamped to `[0, 1]`.
/// A flat channel is only shifted.
pub fn color_stat_transfer(img: &Array<f32>, reference: &DomainStats) -> Result<Array<f32>> {
    check_rgb(img)?;
    let own = image_stats(img);
    let plane = img.numel() / 3;
    let mut out = img.clone();
    for (c, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let (mi, si) = (own.mean[c], own.std[c]);
        let (mr, sr) = (reference.mean[c], reference.std[c]);
        let k = if si > 1e-12 { sr / si } else { 1.0 };
        for v in chunk {
            *v = ((f64::from(*v) - mi) * k + mr).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}
