//! Central finite-difference gradient checks shared by the gradient tests and
//! the acceptance harness.

#![allow(dead_code)]

use adaptdet::detector::{detection_loss, BatchTargets, BoxAnnotation, Detector, DetectorConfig, LossConfig};
use adaptdet::domainadapt::{discriminator_loss, Discriminator};
use adaptdet::geometry::BBox;
use adaptdet::nn::Module;
use adaptdet::tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: u64 = 20;
/// Denominator floor, relative to the magnitude of the checked scalar, so
/// that gradients that are zero up to rounding do not register as relative
/// failures.
const FLOOR: f64 = 1e-5;
const MAX_COORDS: usize = 40;
/// A kink left undetected by this curvature ratio biases the central
/// difference by at most about the same ratio, so it sits below `TOLERANCE`.
const KINK: f64 = 5e-4;

thread_local! {
    static COUNTS: std::cell::Cell<(usize, usize)> = const { std::cell::Cell::new((0, 0)) };
}

/// `(checked, skipped)` coordinates on this thread; skipped ones straddled a
/// kink.
pub fn coordinate_counts() -> (usize, usize) {
    COUNTS.with(|k| k.get())
}

fn count(skipped: bool) {
    COUNTS.with(|k| {
        let (c, s) = k.get();
        k.set(if skipped { (c, s + 1) } else { (c + 1, s) });
    });
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Array<f64> {
    let n: usize = shape.iter().product();
    Array::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay out of the stencil.
pub fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Array<f64> {
    let n: usize = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = r.gen_range(0.05..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape, d).unwrap()
}

/// Shuffled, well separated values, so max-pool windows have no near ties.
pub fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Array<f64> {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        d.swap(i, r.gen_range(0..=i));
    }
    Array::new(shape, d).unwrap()
}

pub fn param(a: Array<f64>) -> Tensor<f64> {
    Tensor::param(a)
}

/// Scalar probe `sum(y * w)` with fixed random weights `w`.
pub fn project(y: &Tensor<f64>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let w = Tensor::constant(uniform(&y.shape(), -1.0, 1.0, r));
    sum(&mul(y, &w).unwrap())
}

/// Largest relative error between the analytic gradient of `f` and central
/// differences, over at most `MAX_COORDS` coordinates of each input.
pub fn max_rel_error(inputs: &[Tensor<f64>], f: &dyn Fn() -> Tensor<f64>, r: &mut ChaCha8Rng) -> f64 {
    rel_error_sampled(inputs, f, r, MAX_COORDS)
}

pub fn rel_error_sampled(
    inputs: &[Tensor<f64>],
    f: &dyn Fn() -> Tensor<f64>,
    r: &mut ChaCha8Rng,
    max_coords: usize,
) -> f64 {
    let weighted: Vec<(Tensor<f64>, f64)> = inputs.iter().map(|x| (x.clone(), 1.0)).collect();
    rel_error_weighted(&weighted, f, r, max_coords)
}

/// Compares each input's analytic gradient with `factor` times the central
/// difference; a factor of `-lambda` covers inputs behind a gradient reversal.
pub fn rel_error_weighted(
    inputs: &[(Tensor<f64>, f64)],
    f: &dyn Fn() -> Tensor<f64>,
    r: &mut ChaCha8Rng,
    max_coords: usize,
) -> f64 {
    for (x, _) in inputs {
        x.zero_grad();
    }
    f().backward().unwrap();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(x, _)| x.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();
    let base = f().item();
    let floor = FLOOR * base.abs().max(1.0);
    let mut worst = 0.0f64;
    for ((x, factor), g) in inputs.iter().zip(&analytic) {
        let n = x.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| r.gen_range(0..n)).collect()
        };
        for i in coords {
            let orig = x.value().data()[i];
            x.value_mut().data_mut()[i] = orig + STEP;
            let up = f().item();
            x.value_mut().data_mut()[i] = orig - STEP;
            let down = f().item();
            x.value_mut().data_mut()[i] = orig;
            // one-sided slopes that disagree mean a ReLU or max kink lies
            // inside the stencil, where no derivative exists
            if (up - 2.0 * base + down).abs() > KINK * (up - down).abs().max(2.0 * STEP * floor) {
                count(true);
                continue;
            }
            count(false);
            let numeric = factor * (up - down) / (2.0 * STEP);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

pub type Case = fn(u64) -> f64;

fn unary(seed: u64, shape: &[usize], init: fn(&[usize], &mut ChaCha8Rng) -> Array<f64>, op: fn(&Tensor<f64>) -> Tensor<f64>) -> f64 {
    let mut r = rng(seed);
    let x = param(init(shape, &mut r));
    let w = Tensor::constant(uniform(&op(&x).shape(), -1.0, 1.0, &mut r));
    max_rel_error(&[x.clone()], &|| sum(&mul(&op(&x), &w).unwrap()), &mut r)
}

fn gen(shape: &[usize], r: &mut ChaCha8Rng) -> Array<f64> {
    uniform(shape, -1.0, 1.0, r)
}

fn case_add(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = param(gen(&[2, 3, 4], &mut r));
    let b = param(gen(&[2, 3, 4], &mut r));
    let w = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let w = Tensor::constant(w);
    max_rel_error(&[a.clone(), b.clone()], &|| sum(&mul(&add(&a, &b).unwrap(), &w).unwrap()), &mut r)
}

fn case_add_n(seed: u64) -> f64 {
    let mut r = rng(seed);
    let xs: Vec<_> = (0..3).map(|_| param(gen(&[5, 2], &mut r))).collect();
    let w = Tensor::constant(gen(&[5, 2], &mut r));
    max_rel_error(&xs, &|| sum(&mul(&add_n(&xs).unwrap(), &w).unwrap()), &mut r)
}

fn case_mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = param(gen(&[3, 5], &mut r));
    let b = param(gen(&[3, 5], &mut r));
    max_rel_error(&[a.clone(), b.clone()], &|| sum(&mul(&a, &b).unwrap()), &mut r)
}

fn case_scale(seed: u64) -> f64 {
    unary(seed, &[4, 3], gen, |x| scale(x, -1.7))
}

fn case_relu(seed: u64) -> f64 {
    unary(seed, &[2, 3, 5], off_zero, relu)
}

fn case_sigmoid(seed: u64) -> f64 {
    unary(seed, &[6, 4], |s, r| uniform(s, -4.0, 4.0, r), sigmoid)
}

fn case_sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(gen(&[3, 4], &mut r));
    max_rel_error(&[x.clone()], &|| scale(&sum(&mul(&x, &x).unwrap()), 0.5), &mut r)
}

fn case_mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(gen(&[3, 7], &mut r));
    max_rel_error(&[x.clone()], &|| mean(&mul(&x, &x).unwrap()), &mut r)
}

fn case_grad_reverse(seed: u64) -> f64 {
    let mut r = rng(seed);
    let lambda = r.gen_range(0.1..2.0);
    let x = param(gen(&[4, 4], &mut r));
    let w = Tensor::constant(gen(&[4, 4], &mut r));
    rel_error_weighted(
        &[(x.clone(), -lambda)],
        &|| sum(&mul(&grad_reverse(&x, lambda).unwrap(), &w).unwrap()),
        &mut r,
        MAX_COORDS,
    )
}

fn case_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(gen(&[3, 5], &mut r));
    let w = param(gen(&[4, 5], &mut r));
    let b = param(gen(&[4], &mut r));
    let p = Tensor::constant(gen(&[3, 4], &mut r));
    max_rel_error(
        &[x.clone(), w.clone(), b.clone()],
        &|| sum(&mul(&linear(&x, &w, Some(&b)).unwrap(), &p).unwrap()),
        &mut r,
    )
}

fn case_concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = param(gen(&[1, 2, 3, 3], &mut r));
    let b = param(gen(&[2, 2, 3, 3], &mut r));
    let p = Tensor::constant(gen(&[3, 2, 3, 3], &mut r));
    max_rel_error(
        &[a.clone(), b.clone()],
        &|| sum(&mul(&concat_batch(&[a.clone(), b.clone()]).unwrap(), &p).unwrap()),
        &mut r,
    )
}

fn case_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, stride, pad) = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)][seed as usize % 4];
    let x = param(gen(&[2, 3, 7, 7], &mut r));
    let w = param(gen(&[4, 3, k, k], &mut r));
    let b = param(gen(&[4], &mut r));
    let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
    let p = Tensor::constant(gen(&y.shape(), &mut r));
    max_rel_error(
        &[x.clone(), w.clone(), b.clone()],
        &|| sum(&mul(&conv2d(&x, &w, Some(&b), stride, pad).unwrap(), &p).unwrap()),
        &mut r,
    )
}

fn case_max_pool(seed: u64) -> f64 {
    let (k, s) = [(2, 2), (3, 2), (2, 1)][seed as usize % 3];
    let mut r = rng(seed);
    let x = param(distinct(&[2, 2, 6, 6], &mut r));
    let y = max_pool2d(&x, k, s).unwrap();
    let p = Tensor::constant(gen(&y.shape(), &mut r));
    max_rel_error(&[x.clone()], &|| sum(&mul(&max_pool2d(&x, k, s).unwrap(), &p).unwrap()), &mut r)
}

fn case_upsample(seed: u64) -> f64 {
    unary(seed, &[2, 3, 3, 4], gen, |x| upsample_nearest2x(x).unwrap())
}

fn case_gap(seed: u64) -> f64 {
    unary(seed, &[3, 4, 3, 5], gen, |x| global_average_pool(x).unwrap())
}

fn case_batch_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(uniform(&[3, 4, 3, 3], -2.0, 2.0, &mut r));
    let g = param(uniform(&[4], 0.5, 1.5, &mut r));
    let b = param(gen(&[4], &mut r));
    let p = Tensor::constant(gen(&[3, 4, 3, 3], &mut r));
    let stats = RunningStats::new(4);
    max_rel_error(
        &[x.clone(), g.clone(), b.clone()],
        &|| sum(&mul(&batch_norm(&x, &g, &b, &stats, Mode::Train, 0.1, 1e-5).unwrap(), &p).unwrap()),
        &mut r,
    )
}

fn case_dropout(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = param(gen(&[4, 6], &mut r));
    let p = Tensor::constant(gen(&[4, 6], &mut r));
    max_rel_error(
        &[x.clone()],
        &|| sum(&mul(&dropout(&x, 0.5, Mode::Train, &mut rng(seed + 1)).unwrap(), &p).unwrap()),
        &mut r,
    )
}

fn case_focal(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 24;
    let x = param(uniform(&[n], -3.0, 3.0, &mut r));
    let t: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
    let m: Vec<bool> = (0..n).map(|_| r.gen_bool(0.8)).collect();
    let alpha = if seed % 2 == 0 { None } else { Some(0.25) };
    let gamma = [0.0, 1.0, 2.0][seed as usize % 3];
    let params = FocalParams::new(alpha, gamma);
    max_rel_error(&[x.clone()], &|| focal_loss(&x, &t, Some(&m), params).unwrap(), &mut r)
}

fn case_smooth_l1(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 20;
    let beta = 1.0 / 9.0;
    let target: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    // keep every residual away from the quadratic/linear switch
    let pred: Vec<f64> = target
        .iter()
        .map(|t| {
            let d: f64 = if r.gen_bool(0.5) { r.gen_range(0.0..0.08) } else { r.gen_range(0.15..1.0) };
            if r.gen_bool(0.5) {
                t + d
            } else {
                t - d
            }
        })
        .collect();
    let x = param(Array::new(&[n], pred).unwrap());
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..2.0)).collect();
    max_rel_error(&[x.clone()], &|| smooth_l1(&x, &target, &w, beta).unwrap(), &mut r)
}

pub const PRIMITIVES: &[(&str, Case)] = &[
    ("add", case_add),
    ("add_n", case_add_n),
    ("mul", case_mul),
    ("scale", case_scale),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("sum", case_sum),
    ("mean", case_mean),
    ("grad_reverse", case_grad_reverse),
    ("linear", case_linear),
    ("concat_batch", case_concat),
    ("conv2d", case_conv2d),
    ("max_pool2d", case_max_pool),
    ("upsample_nearest2x", case_upsample),
    ("global_average_pool", case_gap),
    ("batch_norm", case_batch_norm),
    ("dropout", case_dropout),
    ("focal_loss", case_focal),
    ("smooth_l1", case_smooth_l1),
];

fn case_discriminator(seed: u64) -> f64 {
    let level = [3u8, 4, 5][seed as usize % 3];
    let mut r = rng(seed);
    let (c, hw) = (3, [8, 4, 4][level as usize - 3]);
    let d = Discriminator::<f64>::new(level, c, 0.5, &mut r).unwrap();
    let src = param(gen(&[2, c, hw, hw], &mut r));
    let tgt = param(gen(&[2, c, hw, hw], &mut r));
    let lambda = r.gen_range(0.1..1.5);
    let mut inputs: Vec<(Tensor<f64>, f64)> = d.parameters().into_iter().map(|n| (n.tensor, 1.0)).collect();
    inputs.push((src.clone(), -lambda));
    inputs.push((tgt.clone(), -lambda));
    let focal = FocalParams::new(None, 2.0);
    rel_error_weighted(
        &inputs,
        &|| discriminator_loss(&d, &src, &tgt, lambda, focal, Mode::Train, &mut rng(seed + 7)).unwrap(),
        &mut r,
        MAX_COORDS,
    )
}

fn case_detector(seed: u64) -> f64 {
    let mut r = rng(seed);
    let cfg = DetectorConfig {
        num_classes: 2,
        backbone_channels: [4, 4, 6, 6],
        pyramid_channels: 4,
        head_channels: 4,
        backbone_norm: seed % 2 == 1,
        ..DetectorConfig::default()
    };
    let det = Detector::<f64>::new(cfg.clone(), &mut r);
    let s = 32;
    let x = Tensor::constant(uniform(&[1, 3, s, s], 0.0, 1.0, &mut r));
    let a = r.gen_range(0.0..12.0);
    let b = r.gen_range(0.0..12.0);
    let gts = vec![vec![BoxAnnotation {
        class_id: r.gen_range(0..2),
        bbox: BBox::new(a, b, a + r.gen_range(10.0..20.0), b + r.gen_range(10.0..20.0)),
    }]];
    let targets = BatchTargets::build(&cfg.anchors(s), 2, &gts, Default::default()).unwrap();
    let inputs: Vec<Tensor<f64>> = det.parameters().into_iter().map(|n| n.tensor).collect();
    let loss_cfg = LossConfig::default();
    rel_error_sampled(
        &inputs,
        &|| {
            let (_, out) = det.forward(&x, Mode::Train).unwrap();
            let l = detection_loss(&out, &targets, &loss_cfg).unwrap();
            add(&l.l_class, &l.l_box).unwrap()
        },
        &mut r,
        6,
    )
}

pub const COMPOSITES: &[(&str, Case)] = &[("discriminator", case_discriminator), ("detector", case_detector)];

pub struct CaseReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CaseReport {
    /// Within tolerance, with no more than a twentieth of the coordinates
    /// lost to kinks.
    pub fn passes(&self) -> bool {
        self.worst <= TOLERANCE && self.checked > 0 && self.skipped * 20 <= self.checked + self.skipped
    }
}

/// Worst error over `INSTANCES` seeded instances of a case.
pub fn run_case(case: Case) -> CaseReport {
    let (c0, s0) = coordinate_counts();
    let worst = (0..INSTANCES).map(|i| case(1000 + i)).fold(0.0, f64::max);
    let (c1, s1) = coordinate_counts();
    CaseReport {
        worst,
        checked: c1 - c0,
        skipped: s1 - s0,
    }
}

/// A small two-domain benchmark on disk: train/test splits for both domains
/// and the statistics files of both training splits.
pub fn benchmark(root: &std::path::Path, size: usize, counts: [usize; 3]) -> adaptdet::trainer::PipelinePaths {
    use adaptdet::toydomains::{compute_domain_stats, generate_dataset, read_manifest, Domain, SceneSpec, Split};
    let [train_src, train_tgt, test] = counts;
    let make = |domain, seed, split: Split, n, dir: &str| {
        let spec = SceneSpec {
            seed,
            domain,
            image_size: size,
            ..SceneSpec::default()
        };
        let d = root.join(dir);
        generate_dataset(&spec, split, n, &d).unwrap();
        d.join(split.file_name())
    };
    let source_train = make(Domain::Source, 100, Split::Train, train_src, "source_train");
    let target_train = make(Domain::Target, 101, Split::Train, train_tgt, "target_train");
    let target_test = make(Domain::Target, 102, Split::Test, test, "target_test");
    let source_test = make(Domain::Source, 102, Split::Test, test, "source_test");
    let source_stats = root.join("source_stats.json");
    let target_stats = root.join("target_stats.json");
    compute_domain_stats(&read_manifest(&source_train).unwrap()).unwrap().save(&source_stats).unwrap();
    compute_domain_stats(&read_manifest(&target_train).unwrap()).unwrap().save(&target_stats).unwrap();
    adaptdet::trainer::PipelinePaths {
        source_train,
        target_train: Some(target_train),
        target_test,
        source_test: Some(source_test),
        source_stats: Some(source_stats),
        target_stats: Some(target_stats),
        out_dir: root.join("run"),
    }
}
