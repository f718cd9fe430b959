//! Procedural two-domain detection benchmark: clean glyph scenes for the
//! source domain, the same scenes with a corruption profile for the target,
//! JSON-lines manifests, and color-statistics translation between domains.

mod glyph;
mod io;
mod manifest;
mod stats;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use glyph::{Glyph, GLYPHS};
pub use io::{load_image, save_png};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, Record, Split};
pub use stats::{color_stat_transfer, compute_domain_stats, image_stats, pooled_stats, DomainStats};

use crate::detector::BoxAnnotation;
use crate::geometry::{iou, BBox};
use crate::tensor::Array;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}` (expected source or target)"))),
        }
    }
}

/// Rendering corruptions that turn a source scene into a target scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionProfile {
    /// Seeds the per-channel gain and bias, shared by every image of the
    /// domain.
    pub domain_seed: u64,
    pub gain_min: f64,
    pub gain_max: f64,
    /// Bias is drawn from `[-bias_max, bias_max]` per channel.
    pub bias_max: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    /// Clutter rectangles per image.
    pub clutter: usize,
}

impl Default for CorruptionProfile {
    fn default() -> Self {
        Self {
            domain_seed: 1,
            gain_min: 0.6,
            gain_max: 0.9,
            bias_max: 0.2,
            noise_sigma: 0.05,
            blur_radius: 1,
            clutter: 3,
        }
    }
}

impl CorruptionProfile {
    /// Per-channel `(gain, bias)`.
    pub fn color_shift(&self) -> [(f64, f64); 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.domain_seed);
        std::array::from_fn(|_| {
            let g = if self.gain_max > self.gain_min {
                rng.gen_range(self.gain_min..self.gain_max)
            } else {
                self.gain_min
            };
            let b = if self.bias_max > 0.0 {
                rng.gen_range(-self.bias_max..self.bias_max)
            } else {
                0.0
            };
            (g, b)
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = self.gain_min > 0.0
            && self.gain_min <= self.gain_max
            && self.bias_max >= 0.0
            && self.noise_sigma >= 0.0
            && [self.gain_min, self.gain_max, self.bias_max, self.noise_sigma]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid corruption profile {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub domain: Domain,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Applied to the target domain only.
    pub corruption: CorruptionProfile,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            domain: Domain::Source,
            image_size: 128,
            num_classes: GLYPHS.len(),
            min_objects: 1,
            max_objects: 4,
            corruption: CorruptionProfile::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > GLYPHS.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}, got {}",
                GLYPHS.len(),
                self.num_classes
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "objects per image range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        self.corruption.validate()
    }
}

/// A rendered image in `[0, 1]`, `[3, S, S]`, with its annotations.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Array<f32>,
    pub boxes: Vec<BoxAnnotation>,
    /// Per-object pixel masks, `S * S` each, aligned with `boxes`.
    pub masks: Vec<Vec<bool>>,
}

struct Placed {
    class_id: usize,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    color: [f64; 3],
}

/// Per-image stream: 0 drives layout and content, 1 drives target styling.
fn image_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

fn overlaps(a: &Placed, b: &Placed) -> bool {
    a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> ([f64; 3], Vec<Placed>) {
    let s = spec.image_size;
    let base = rng.gen_range(0.78..0.92);
    let background = std::array::from_fn(|_| base + rng.gen_range(-0.03..0.03));
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let (lo, hi) = ((0.2 * s as f64).round() as usize, (0.5 * s as f64).round() as usize);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..50 {
            let class_id = rng.gen_range(0..spec.num_classes);
            let w = rng.gen_range(lo..=hi);
            let aspect: f64 = rng.gen_range(0.8..1.25);
            let h = ((w as f64 * aspect).round() as usize).clamp(lo, hi);
            let x = rng.gen_range(0..=s - w);
            let y = rng.gen_range(0..=s - h);
            let base = GLYPHS[class_id].color;
            let color = std::array::from_fn(|c| (base[c] + rng.gen_range(-0.04..0.04)).clamp(0.0, 1.0));
            let cand = Placed {
                class_id,
                x,
                y,
                w,
                h,
                color,
            };
            if placed.iter().all(|p| !overlaps(p, &cand)) {
                placed.push(cand);
                break;
            }
        }
    }
    (background, placed)
}

fn fill_rect(img: &mut [f32], s: usize, x0: usize, y0: usize, x1: usize, y1: usize, color: [f64; 3]) {
    for (c, &v) in color.iter().enumerate() {
        for y in y0..y1 {
            img[c * s * s + y * s + x0..c * s * s + y * s + x1].fill(v as f32);
        }
    }
}

/// Muted elongated rectangles that overlap no object box by IoU above 0.3.
fn clutter(s: usize, count: usize, objects: &[BBox], rng: &mut ChaCha8Rng) -> Vec<(BBox, [f64; 3])> {
    let mut out = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let long = rng.gen_range(0.25 * s as f64..0.6 * s as f64).round() as usize;
            let short = ((long as f64 / rng.gen_range(2.5..5.0)).round() as usize).max(2);
            let (w, h) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
            let x = rng.gen_range(0..=s - w);
            let y = rng.gen_range(0..=s - h);
            let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            let gray = rng.gen_range(0.3..0.7);
            let color = std::array::from_fn(|_| gray + rng.gen_range(-0.06..0.06));
            if objects.iter().all(|o| iou(o, &b) <= 0.3) {
                out.push((b, color));
                break;
            }
        }
    }
    out
}

fn box_blur(img: &[f32], s: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0.0; img.len()];
    for c in 0..3 {
        let plane = &img[c * s * s..(c + 1) * s * s];
        for y in 0..s as isize {
            for x in 0..s as isize {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < s && (xx as usize) < s {
                            acc += plane[yy as usize * s + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                out[c * s * s + y as usize * s + x as usize] = acc / n;
            }
        }
    }
    out
}

/// Renders image `index` of the scene family described by `spec`.
///
/// Layout and content depend only on `(seed, index)`, so the same seed gives
/// identical annotations in both domains. Pixels are quantized to 8 bits.
pub fn render_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = image_rng(spec.seed, index, 0);
    let (background, objects) = layout(spec, &mut rng);
    let mut img = vec![0.0f32; 3 * s * s];
    fill_rect(&mut img, s, 0, 0, s, s, background);

    let nominal: Vec<BBox> = objects
        .iter()
        .map(|o| BBox::new(o.x as f64, o.y as f64, (o.x + o.w) as f64, (o.y + o.h) as f64))
        .collect();
    let mut style = image_rng(spec.seed, index, 1);
    if spec.domain == Domain::Target {
        for (b, color) in clutter(s, spec.corruption.clutter, &nominal, &mut style) {
            fill_rect(&mut img, s, b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize, color);
        }
    }

    let mut boxes = Vec::with_capacity(objects.len());
    let mut masks = Vec::with_capacity(objects.len());
    for o in &objects {
        let glyph = &GLYPHS[o.class_id];
        let mut mask = vec![false; s * s];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for py in o.y..o.y + o.h {
            for px in o.x..o.x + o.w {
                let u = (px - o.x) as f64 + 0.5;
                let v = (py - o.y) as f64 + 0.5;
                if glyph.contains(u / o.w as f64, v / o.h as f64) {
                    mask[py * s + px] = true;
                    for c in 0..3 {
                        img[c * s * s + py * s + px] = o.color[c] as f32;
                    }
                    x1 = x1.min(px);
                    y1 = y1.min(py);
                    x2 = x2.max(px + 1);
                    y2 = y2.max(py + 1);
                }
            }
        }
        boxes.push(BoxAnnotation {
            class_id: o.class_id,
            bbox: BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64),
        });
        masks.push(mask);
    }

    if spec.domain == Domain::Target {
        let p = &spec.corruption;
        img = box_blur(&img, s, p.blur_radius);
        let shift = p.color_shift();
        let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for (c, &(g, b)) in shift.iter().enumerate() {
            for v in &mut img[c * s * s..(c + 1) * s * s] {
                *v = (f64::from(*v) * g + b + noise.sample(&mut style)) as f32;
            }
        }
    }
    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(Scene {
        image: Array::new(&[3, s, s], img)?,
        boxes,
        masks,
    })
}

/// Renders `count` scenes into `out_dir/images/` and writes
/// `out_dir/<split>.jsonl`.
pub fn generate_dataset(spec: &SceneSpec, split: Split, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    spec.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let scene = render_scene(spec, i)?;
        let rel = format!("images/{split}_{i:05}.png");
        save_png(&scene.image, &out_dir.join(&rel))?;
        records.push(Record {
            image: rel,
            boxes: scene.boxes,
        });
    }
    let manifest = DatasetManifest::new(split, out_dir.to_path_buf(), records);
    write_manifest(&manifest, &out_dir.join(split.file_name()))?;
    Ok(manifest)
}
