//! Per-level domain discriminators attached to C3/C4/C5 through gradient
//! reversal, their focal losses, and the combined training objective.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{DetLoss, FeaturePyramid, LEVELS};
use crate::nn::{BatchNorm2d, Conv2d, Dropout, Linear, Module, Named};
use crate::tensor::{
    add, add_n, concat_batch, focal_loss, global_average_pool, relu, scale, Array, FocalParams, Float,
    GradReverse, Mode, Tensor,
};
use crate::{Error, Result};

/// Domain label of source images.
pub const SOURCE_LABEL: u8 = 0;
/// Domain label of target images.
pub const TARGET_LABEL: u8 = 1;

const WIDTH: usize = 64;
const D5_HIDDEN: usize = 32;

/// A subset of the pyramid levels {3, 4, 5}.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LevelSet([bool; 3]);

impl LevelSet {
    pub const NONE: Self = Self([false; 3]);
    pub const ALL: Self = Self([true; 3]);

    pub fn from_levels(levels: &[u8]) -> Result<Self> {
        let mut s = Self::NONE;
        for &l in levels {
            s.insert(l)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, level: u8) -> Result<()> {
        let i = level_index(level)?;
        self.0[i] = true;
        Ok(())
    }

    pub fn contains(&self, level: u8) -> bool {
        level_index(level).is_ok_and(|i| self.0[i])
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn levels(&self) -> Vec<u8> {
        LEVELS.iter().copied().filter(|&l| self.contains(l)).collect()
    }

    /// All eight subsets, smallest first.
    pub fn all_subsets() -> Vec<Self> {
        let mut v: Vec<Self> = (0..8u8)
            .map(|m| Self([m & 1 != 0, m & 2 != 0, m & 4 != 0]))
            .collect();
        v.sort_by_key(|s| (s.levels().len(), s.levels()));
        v
    }
}

/// `none`, or levels joined by `+` such as `d3+d5`.
impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.levels().iter().map(|l| format!("d{l}")).collect();
        f.write_str(&parts.join("+"))
    }
}

/// Accepts `none`, `all`, or levels separated by `+` or `,`, each written as
/// `3` or `d3`.
impl FromStr for LevelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut set = Self::NONE;
        for part in s.split(['+', ',']) {
            let p = part.trim().to_ascii_lowercase();
            let digits = p.strip_prefix('d').unwrap_or(&p);
            let level: u8 = digits
                .parse()
                .map_err(|_| Error::Config(format!("invalid discriminator level `{part}`")))?;
            set.insert(level)
                .map_err(|_| Error::Config(format!("invalid discriminator level `{part}`")))?;
        }
        Ok(set)
    }
}

fn level_index(level: u8) -> Result<usize> {
    match level {
        3..=5 => Ok(usize::from(level - 3)),
        _ => Err(Error::InvalidInput(format!("discriminator level must be 3, 4 or 5, got {level}"))),
    }
}

/// Three stride-2 3x3 convolutions, each followed by batch norm, ReLU and
/// dropout.
struct ConvStack<T: Float> {
    convs: [Conv2d<T>; 3],
    norms: [BatchNorm2d<T>; 3],
    dropout: Dropout,
}

impl<T: Float> ConvStack<T> {
    fn new<R: Rng + ?Sized>(prefix: &str, cin: usize, dropout: f64, rng: &mut R) -> Self {
        let widths = [cin, WIDTH, WIDTH, WIDTH];
        Self {
            convs: std::array::from_fn(|i| {
                Conv2d::same3(&format!("{prefix}.conv{}", i + 1), widths[i], widths[i + 1], 2, rng)
            }),
            norms: std::array::from_fn(|i| BatchNorm2d::new(&format!("{prefix}.bn{}", i + 1), WIDTH)),
            dropout: Dropout { rate: dropout },
        }
    }

    fn forward<R: Rng + ?Sized>(&self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = relu(&bn.forward(&conv.forward(&h)?, mode)?);
            h = self.dropout.forward(&h, mode, rng)?;
        }
        Ok(h)
    }

    fn state(&self) -> Vec<Named<T>> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            v.extend(c.state());
            v.extend(n.state());
        }
        v
    }
}

enum Body<T: Float> {
    Pixel([Conv2d<T>; 3]),
    Global(ConvStack<T>, Linear<T>),
    GlobalDeep(ConvStack<T>, Linear<T>, Linear<T>),
}

/// Domain classifier for one pyramid level. D3 emits a logit map; D4 and D5
/// emit one logit per image.
pub struct Discriminator<T: Float = f32> {
    level: u8,
    in_channels: usize,
    body: Body<T>,
}

impl<T: Float> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(level: u8, in_channels: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        level_index(level)?;
        let p = format!("disc.d{level}");
        let body = match level {
            3 => Body::Pixel([
                Conv2d::pointwise(&format!("{p}.conv1"), in_channels, WIDTH, rng),
                Conv2d::pointwise(&format!("{p}.conv2"), WIDTH, WIDTH, rng),
                Conv2d::pointwise(&format!("{p}.conv3"), WIDTH, 1, rng),
            ]),
            4 => Body::Global(
                ConvStack::new(&p, in_channels, dropout, rng),
                Linear::new(&format!("{p}.fc"), WIDTH, 1, rng),
            ),
            5 => Body::GlobalDeep(
                ConvStack::new(&p, in_channels, dropout, rng),
                Linear::new(&format!("{p}.fc1"), WIDTH, D5_HIDDEN, rng),
                Linear::new(&format!("{p}.fc2"), D5_HIDDEN, 1, rng),
            ),
            _ => unreachable!("level checked above"),
        };
        Ok(Self {
            level,
            in_channels,
            body,
        })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::InvalidInput(format!(
                "D{} expects [B, {}, H, W] features, got {shape:?}",
                self.level, self.in_channels
            )));
        }
        match &self.body {
            Body::Pixel([c1, c2, c3]) => {
                let h = relu(&c1.forward(x)?);
                let h = relu(&c2.forward(&h)?);
                Ok(c3.forward(&h)?)
            }
            Body::Global(stack, fc) => {
                let h = global_average_pool(&stack.forward(x, mode, rng)?)?;
                Ok(fc.forward(&h)?)
            }
            Body::GlobalDeep(stack, fc1, fc2) => {
                let h = global_average_pool(&stack.forward(x, mode, rng)?)?;
                let h = relu(&fc1.forward(&h)?);
                Ok(fc2.forward(&h)?)
            }
        }
    }

    /// The layer producing the final logit.
    #[cfg(test)]
    fn output_layer(&self) -> (&Tensor<T>, &Tensor<T>) {
        match &self.body {
            Body::Pixel(c) => (&c[2].weight, c[2].bias.as_ref().expect("pointwise convs carry a bias")),
            Body::Global(_, fc) | Body::GlobalDeep(_, _, fc) => (&fc.weight, &fc.bias),
        }
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn state(&self) -> Vec<Named<T>> {
        match &self.body {
            Body::Pixel(c) => c.iter().flat_map(|c| c.state()).collect(),
            Body::Global(s, fc) => {
                let mut v = s.state();
                v.extend(fc.state());
                v
            }
            Body::GlobalDeep(s, fc1, fc2) => {
                let mut v = s.state();
                v.extend(fc1.state());
                v.extend(fc2.state());
                v
            }
        }
    }
}

/// Builds the discriminator for `level` with the default dropout of 0.5.
pub fn build_discriminator<T: Float, R: Rng + ?Sized>(
    level: u8,
    in_channels: usize,
    rng: &mut R,
) -> Result<Discriminator<T>> {
    Discriminator::new(level, in_channels, 0.5, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainConfig {
    pub levels: LevelSet,
    pub lambda: f64,
    pub focal: FocalParams,
    pub dropout: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            levels: LevelSet::ALL,
            lambda: 0.5,
            focal: FocalParams::new(None, 2.0),
            dropout: 0.5,
        }
    }
}

/// Domain-classification loss of one level; zero for disabled levels.
pub struct DomainLoss<T: Float = f32> {
    pub l_d3: Tensor<T>,
    pub l_d4: Tensor<T>,
    pub l_d5: Tensor<T>,
}

impl<T: Float> DomainLoss<T> {
    pub fn zero() -> Self {
        let z = || Tensor::constant(Array::scalar(T::zero()));
        Self {
            l_d3: z(),
            l_d4: z(),
            l_d5: z(),
        }
    }

    pub fn components(&self) -> [&Tensor<T>; 3] {
        [&self.l_d3, &self.l_d4, &self.l_d5]
    }

    pub fn values(&self) -> [f64; 3] {
        self.components().map(|t| t.item().as_f64())
    }
}

/// Source-side and target-side focal losses, each averaged over its
/// elements (images, and locations for a logit map).
fn side_losses<T: Float, R: Rng + ?Sized>(
    disc: &Discriminator<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    grl: GradReverse,
    focal: FocalParams,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, bt) = (source.shape()[0], target.shape()[0]);
    if bs == 0 || bt == 0 {
        return Err(Error::InvalidInput("discriminator needs a non-empty batch on both sides".into()));
    }
    // one pass over both domains so batch statistics mix them
    let joint = concat_batch(&[grl.apply(source), grl.apply(target)])?;
    let logits = disc.forward(&joint, mode, rng)?;
    let per_image = logits.numel() / (bs + bt);
    let ns = bs * per_image;
    let nt = bt * per_image;
    let mut labels = vec![SOURCE_LABEL; ns];
    labels.resize(ns + nt, TARGET_LABEL);
    let src_mask: Vec<bool> = (0..ns + nt).map(|i| i < ns).collect();
    let tgt_mask: Vec<bool> = src_mask.iter().map(|&b| !b).collect();
    let ls = scale(&focal_loss(&logits, &labels, Some(&src_mask), focal)?, 1.0 / ns as f64);
    let lt = scale(&focal_loss(&logits, &labels, Some(&tgt_mask), focal)?, 1.0 / nt as f64);
    Ok((ls, lt))
}

fn half_sum<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(scale(&add(a, b)?, 0.5))
}

/// `(L_source + L_target) / 2` for one discriminator, with both feature
/// batches passed through gradient reversal first.
pub fn discriminator_loss<T: Float, R: Rng + ?Sized>(
    disc: &Discriminator<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
    focal: FocalParams,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let grl = GradReverse::new(lambda)?;
    let (ls, lt) = side_losses(disc, source, target, grl, focal, mode, rng)?;
    half_sum(&ls, &lt)
}

/// D3, D4 and D5 with the enabled subset and the reversal strength.
pub struct DiscriminatorSet<T: Float = f32> {
    pub config: DomainConfig,
    discs: [Discriminator<T>; 3],
}

impl<T: Float> DiscriminatorSet<T> {
    /// `channels` are the widths of C3, C4 and C5. All three discriminators
    /// are built so that initialization does not depend on the subset.
    pub fn new<R: Rng + ?Sized>(config: DomainConfig, channels: [usize; 3], rng: &mut R) -> Result<Self> {
        GradReverse::new(config.lambda).map_err(|e| Error::Config(e.to_string()))?;
        let d3 = Discriminator::new(3, channels[0], config.dropout, rng)?;
        let d4 = Discriminator::new(4, channels[1], config.dropout, rng)?;
        let d5 = Discriminator::new(5, channels[2], config.dropout, rng)?;
        Ok(Self {
            config,
            discs: [d3, d4, d5],
        })
    }

    pub fn discriminator(&self, level: u8) -> Result<&Discriminator<T>> {
        Ok(&self.discs[level_index(level)?])
    }

    /// Losses of the enabled levels. Each level draws its dropout masks from
    /// its own stream of `seed`, so toggling one level leaves the others
    /// unchanged.
    pub fn domain_loss(
        &self,
        source: &FeaturePyramid<T>,
        target: &FeaturePyramid<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<DomainLoss<T>> {
        let grl = GradReverse::new(self.config.lambda)?;
        let mut out = DomainLoss::zero();
        for (i, &level) in LEVELS.iter().enumerate() {
            if !self.config.levels.contains(level) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::from(level));
            let (ls, lt) = side_losses(
                &self.discs[i],
                source.c_level(level),
                target.c_level(level),
                grl,
                self.config.focal,
                mode,
                &mut rng,
            )?;
            let l = half_sum(&ls, &lt)?;
            match level {
                3 => out.l_d3 = l,
                4 => out.l_d4 = l,
                _ => out.l_d5 = l,
            }
        }
        Ok(out)
    }
}

impl<T: Float> Module<T> for DiscriminatorSet<T> {
    fn state(&self) -> Vec<Named<T>> {
        self.discs.iter().flat_map(|d| d.state()).collect()
    }
}

/// The optimized scalar and the logged value of the objective.
pub struct Objective<T: Float = f32> {
    /// `L_class + L_box + sum L_Di`; reversal inside the graph supplies the
    /// `-lambda` on the feature side.
    pub optimized: Tensor<T>,
    /// `L_class + L_box - lambda * sum L_Di`.
    pub reported: f64,
}

pub fn total_loss<T: Float>(det: &DetLoss<T>, dom: &DomainLoss<T>, lambda: f64) -> Result<Objective<T>> {
    let [d3, d4, d5] = dom.components();
    let optimized = add_n(&[det.l_class.clone(), det.l_box.clone(), d3.clone(), d4.clone(), d5.clone()])?;
    let domain: f64 = dom.values().iter().sum();
    let reported = det.l_class.item().as_f64() + det.l_box.item().as_f64() - lambda * domain;
    Ok(Objective { optimized, reported })
}
