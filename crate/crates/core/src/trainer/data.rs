use std::path::PathBuf;

use crate::detector::{decode, BoxAnnotation, DecodeConfig, Detection, Detector};
use crate::toydomains::{color_stat_transfer, load_image, DatasetManifest, DomainStats};
use crate::tensor::{Array, Mode, Tensor};
use crate::{Error, Result};

/// In-memory images of one split, `[3, S, S]` each.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub images: Vec<Array<f32>>,
    pub paths: Vec<PathBuf>,
}

impl ImageSet {
    /// Loads pixels only; annotations are never touched.
    pub fn load_unlabeled(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::InvalidInput(format!("manifest under {} is empty", manifest.root().display())));
        }
        let paths = manifest.image_paths();
        let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        let set = Self { images, paths };
        set.image_size()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Side length shared by every image.
    pub fn image_size(&self) -> Result<usize> {
        let first = self.images.first().ok_or_else(|| Error::InvalidInput("empty image set".into()))?;
        let s = first.shape()[1];
        for (img, p) in self.images.iter().zip(&self.paths) {
            if img.shape() != [3, s, s] {
                return Err(Error::InvalidInput(format!(
                    "{}: expected a {s}x{s} RGB image, got {:?}",
                    p.display(),
                    img.shape()
                )));
            }
        }
        Ok(s)
    }

    /// Every image moved to the reference color statistics.
    pub fn translated(&self, reference: &DomainStats) -> Result<Self> {
        Ok(Self {
            images: self
                .images
                .iter()
                .map(|i| color_stat_transfer(i, reference))
                .collect::<Result<_>>()?,
            paths: self.paths.clone(),
        })
    }

    /// Stacks the selected images into `[B, 3, S, S]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let first = &self.images[indices[0]];
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(indices.len() * first.numel());
        for &i in indices {
            data.extend_from_slice(self.images[i].data());
        }
        Ok(Tensor::constant(Array::new(&shape, data)?))
    }
}

/// Images with their annotations.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub images: ImageSet,
    pub boxes: Vec<Vec<BoxAnnotation>>,
}

impl LabeledSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let images = ImageSet::load_unlabeled(manifest)?;
        let boxes = (0..manifest.len()).map(|i| manifest.boxes(i).to_vec()).collect();
        Ok(Self { images, boxes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Eval-mode detections for every image, in order.
pub fn predict(detector: &Detector<f32>, images: &ImageSet, cfg: &DecodeConfig, batch: usize) -> Result<Vec<Vec<Detection>>> {
    let s = images.image_size()?;
    let anchors = detector.config.anchors(s);
    let k = detector.config.num_classes;
    let idx: Vec<usize> = (0..images.len()).collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in idx.chunks(batch.max(1)) {
        let x = images.batch(chunk)?;
        let (_, levels) = detector.forward(&x, Mode::Eval)?;
        for b in 0..chunk.len() {
            out.push(decode(&levels, b, &anchors, k, s, cfg));
        }
    }
    Ok(out)
}
