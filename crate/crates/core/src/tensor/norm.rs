//! Batch normalization and dropout.

use rand::Rng;

use super::array::dims4;
use super::graph::Op;
use super::{Array, Float, Tensor, TensorError};

/// Whether layers behave as during training or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. Stored as non-trainable
/// tensors so they serialize alongside parameters.
#[derive(Clone, Debug)]
pub struct RunningStats<T: Float = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Number of train-mode updates so far, as a one-element tensor.
    pub updates: Tensor<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::constant(Array::zeros(&[channels])),
            var: Tensor::constant(Array::full(&[channels], T::one())),
            updates: Tensor::constant(Array::scalar(T::zero())),
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.updates.item() > T::zero()
    }
}

struct BatchNormOp<T: Float> {
    x: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    dims: (usize, usize, usize),
    train: bool,
}

impl<T: Float> Op<T> for BatchNormOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, g: &[T]) {
        let (b, c, area) = self.dims;
        let n = T::lit((b * area) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * area;
                for i in off..off + area {
                    sum_g[ci] = sum_g[ci] + g[i];
                    sum_gx[ci] = sum_gx[ci] + g[i] * self.xhat[i];
                }
            }
        }
        self.beta
            .accumulate(|acc| acc.iter_mut().zip(&sum_g).for_each(|(a, &s)| *a = *a + s));
        self.gamma
            .accumulate(|acc| acc.iter_mut().zip(&sum_gx).for_each(|(a, &s)| *a = *a + s));
        let gamma = self.gamma.data().to_vec();
        self.x.accumulate(|acc| {
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * area;
                    let k = gamma[ci] * self.inv_std[ci];
                    for i in off..off + area {
                        let d = if self.train {
                            k * (n * g[i] - sum_g[ci] - self.xhat[i] * sum_gx[ci]) / n
                        } else {
                            k * g[i]
                        };
                        acc[i] = acc[i] + d;
                    }
                }
            }
        });
    }
}

/// Per-channel normalization of `x [B, C, H, W]`.
///
/// Train mode normalizes with batch statistics (biased variance) and folds
/// them into `stats` with the given momentum, using the unbiased variance for
/// the running estimate. Eval mode normalizes with `stats` and fails if they
/// have never been updated.
pub fn batch_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let (b, c, h, w) = dims4("batch_norm", &x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            detail: format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        });
    }
    let area = h * w;
    let n = b * area;
    let eps_t = T::lit(eps);
    let (mean, var) = match mode {
        Mode::Train => {
            let xv = x.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for (ci, m) in mean.iter_mut().enumerate() {
                    let off = (bi * c + ci) * area;
                    *m = *m + xv[off..off + area].iter().copied().sum::<T>();
                }
            }
            let nt = T::lit(n as f64);
            mean.iter_mut().for_each(|m| *m = *m / nt);
            for bi in 0..b {
                for (ci, v) in var.iter_mut().enumerate() {
                    let off = (bi * c + ci) * area;
                    let m = mean[ci];
                    *v = *v + xv[off..off + area].iter().map(|&a| (a - m) * (a - m)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / nt);

            let mom = T::lit(momentum);
            let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
            {
                let mut rm = stats.mean.value_mut();
                for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
            }
            {
                let mut rv = stats.var.value_mut();
                for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
            }
            {
                let mut u = stats.updates.value_mut();
                u.data_mut()[0] = u.data()[0] + T::one();
            }
            (mean, var)
        }
        Mode::Eval => {
            if !stats.is_initialized() {
                return Err(TensorError::UninitializedStatistics);
            }
            (stats.mean.data().to_vec(), stats.var.data().to_vec())
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); b * c * area];
    let mut out = vec![T::zero(); b * c * area];
    {
        let xv = x.data();
        let (gv, bv) = (gamma.data(), beta.data());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * area;
                for i in off..off + area {
                    let xh = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        Array::new(&[b, c, h, w], out)?,
        BatchNormOp {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            dims: (b, c, area),
            train: mode == Mode::Train,
        },
    ))
}

struct DropoutOp<T: Float> {
    x: Tensor<T>,
    mask: Vec<T>,
}

impl<T: Float> Op<T> for DropoutOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        self.x.accumulate(|acc| {
            for ((a, &gv), &m) in acc.iter_mut().zip(g).zip(&self.mask) {
                *a = *a + gv * m;
            }
        });
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<T: Float, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_op(Array::new(&x.shape(), out)?, DropoutOp { x: x.clone(), mask }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn consts(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::param(Array::full(&[c], g)),
            Tensor::param(Array::full(&[c], b)),
        )
    }

    #[test]
    fn unit_variance_input_is_unchanged() {
        let x = Tensor::constant(Array::from_f64(&[2, 1, 1, 1], &[-1.0, 1.0]).unwrap());
        let (g, b) = consts(1, 1.0, 0.0);
        let stats = RunningStats::new(1);
        let y = batch_norm(&x, &g, &b, &stats, Mode::Train, 0.1, 1e-12).unwrap();
        for (a, e) in y.data().iter().zip([-1.0, 1.0]) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::constant(Array::full(&[2, 1, 2, 2], 3.0));
        let (g, b) = consts(1, 1.0, 5.0);
        let stats = RunningStats::new(1);
        let y = batch_norm(&x, &g, &b, &stats, Mode::Train, 0.1, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn train_statistics_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let x = Tensor::constant(Array::new(&[4, 2, 3, 3], data).unwrap());
        let (g, b) = consts(2, 1.0, 0.0);
        let stats = RunningStats::new(2);
        let y = batch_norm(&x, &g, &b, &stats, Mode::Train, 0.1, 1e-5).unwrap();
        let yv = y.data();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|bi| yv[(bi * 2 + c) * 9..(bi * 2 + c + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
        assert!(stats.is_initialized());
    }

    #[test]
    fn eval_requires_running_stats() {
        let x = Tensor::constant(Array::full(&[1, 1, 2, 2], 1.0));
        let (g, b) = consts(1, 1.0, 0.0);
        let stats = RunningStats::new(1);
        assert!(matches!(
            batch_norm(&x, &g, &b, &stats, Mode::Eval, 0.1, 1e-5),
            Err(TensorError::UninitializedStatistics)
        ));
    }

    #[test]
    fn eval_is_deterministic() {
        let x = Tensor::constant(Array::from_f64(&[2, 1, 1, 2], &[0.5, -1.0, 2.0, 0.0]).unwrap());
        let (g, b) = consts(1, 1.5, 0.2);
        let stats = RunningStats::new(1);
        batch_norm(&x, &g, &b, &stats, Mode::Train, 0.1, 1e-5).unwrap();
        let a = batch_norm(&x, &g, &b, &stats, Mode::Eval, 0.1, 1e-5).unwrap().to_array();
        let c = batch_norm(&x, &g, &b, &stats, Mode::Eval, 0.1, 1e-5).unwrap().to_array();
        assert_eq!(a, c);
        assert_eq!(stats.updates.item(), 1.0);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::constant(Array::full(&[10_000], 1.0));
        let e = dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.to_array(), x.to_array());
        let z = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(z.to_array(), x.to_array());
        let d = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let m: f64 = d.data().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!((m - 1.0).abs() < 0.05, "mean {m}");
        assert!(d.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }
}
