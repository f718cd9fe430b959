//! Parameterized layers, state registry and the optimizer.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::tensor::checkpoint::Entries;
use crate::tensor::{
    batch_norm, conv2d, dropout, linear, Array, Float, Mode, RunningStats, Tensor, TensorError,
};

/// A named state tensor. Trainable parameters have `requires_grad`; buffers
/// such as running statistics do not.
#[derive(Clone, Debug)]
pub struct Named<T: Float = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Float> Named<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

pub trait Module<T: Float> {
    /// Every state tensor in a fixed order. Names are unique.
    fn state(&self) -> Vec<Named<T>>;

    fn parameters(&self) -> Vec<Named<T>> {
        self.state()
            .into_iter()
            .filter(|n| n.tensor.requires_grad())
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("state mismatch: missing {missing:?}, unexpected {unexpected:?}, wrong shape {wrong_shape:?}")]
    Mismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
        wrong_shape: Vec<String>,
    },
}

pub fn state_entries<T: Float>(m: &dyn Module<T>) -> Entries {
    m.state()
        .into_iter()
        .map(|n| (n.name, n.tensor.value().cast::<f32>()))
        .collect()
}

/// Copies `entries` into the module's state. Names must match exactly.
pub fn load_state<T: Float>(m: &dyn Module<T>, entries: &Entries) -> Result<(), StateError> {
    let state = m.state();
    let by_name: BTreeMap<&str, &Array<f32>> = entries.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let own: BTreeSet<&str> = state.iter().map(|n| n.name.as_str()).collect();
    let missing: Vec<String> = own.iter().filter(|n| !by_name.contains_key(*n)).map(|n| n.to_string()).collect();
    let unexpected: Vec<String> = by_name.keys().filter(|n| !own.contains(*n)).map(|n| n.to_string()).collect();
    let wrong_shape: Vec<String> = state
        .iter()
        .filter(|n| by_name.get(n.name.as_str()).is_some_and(|a| a.shape() != n.tensor.shape().as_slice()))
        .map(|n| n.name.clone())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || !wrong_shape.is_empty() {
        return Err(StateError::Mismatch {
            missing,
            unexpected,
            wrong_shape,
        });
    }
    for n in &state {
        *n.tensor.value_mut() = by_name[n.name.as_str()].cast::<T>();
    }
    Ok(())
}

/// He-uniform draw: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Array<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Array::new(shape, data).expect("shape/length agree")
}

pub struct Conv2d<T: Float = f32> {
    name: String,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            name: name.to_string(),
            weight: Tensor::param(he_uniform(&[cout, cin, k, k], cin * k * k, rng)),
            bias: bias.then(|| Tensor::param(Array::zeros(&[cout]))),
            stride,
            padding,
        }
    }

    /// 3x3, padding 1.
    pub fn same3<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self::new(name, cin, cout, 3, stride, 1, true, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(name, cin, cout, 1, 1, 0, true, rng)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    /// Overwrites the bias with a constant.
    pub fn fill_bias(&self, value: f64) {
        if let Some(b) = &self.bias {
            b.value_mut().data_mut().iter_mut().for_each(|v| *v = T::lit(value));
        }
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn state(&self) -> Vec<Named<T>> {
        let mut v = vec![Named::new(format!("{}.weight", self.name), self.weight.clone())];
        if let Some(b) = &self.bias {
            v.push(Named::new(format!("{}.bias", self.name), b.clone()));
        }
        v
    }
}

pub struct Linear<T: Float = f32> {
    name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Self {
            name: name.to_string(),
            weight: Tensor::param(he_uniform(&[fout, fin], fin, rng)),
            bias: Tensor::param(Array::zeros(&[fout])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn state(&self) -> Vec<Named<T>> {
        vec![
            Named::new(format!("{}.weight", self.name), self.weight.clone()),
            Named::new(format!("{}.bias", self.name), self.bias.clone()),
        ]
    }
}

pub struct BatchNorm2d<T: Float = f32> {
    name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Tensor::param(Array::full(&[channels], T::one())),
            beta: Tensor::param(Array::zeros(&[channels])),
            stats: RunningStats::new(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        batch_norm(x, &self.gamma, &self.beta, &self.stats, mode, self.momentum, self.eps)
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn state(&self) -> Vec<Named<T>> {
        vec![
            Named::new(format!("{}.weight", self.name), self.gamma.clone()),
            Named::new(format!("{}.bias", self.name), self.beta.clone()),
            Named::new(format!("{}.running_mean", self.name), self.stats.mean.clone()),
            Named::new(format!("{}.running_var", self.name), self.stats.var.clone()),
            Named::new(format!("{}.num_updates", self.name), self.stats.updates.clone()),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn forward<T: Float, R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>, TensorError> {
        dropout(x, self.rate, mode, rng)
    }
}

pub fn zero_grad<T: Float>(params: &[Named<T>]) {
    params.iter().for_each(|p| p.tensor.zero_grad());
}

/// SGD with heavy-ball momentum, `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Named<f32>], lr: f64) {
        let mu = self.momentum as f32;
        let lr = lr as f32;
        for p in params {
            let grad = p.tensor.grad_ref();
            let Some(g) = grad.as_ref() else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut value = p.tensor.value_mut();
            for ((w, vel), &gi) in value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mu * *vel + gi;
                *w -= lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Pair {
        a: Conv2d<f32>,
        bn: BatchNorm2d<f32>,
    }

    impl Module<f32> for Pair {
        fn state(&self) -> Vec<Named<f32>> {
            let mut v = self.a.state();
            v.extend(self.bn.state());
            v
        }
    }

    fn pair(seed: u64) -> Pair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pair {
            a: Conv2d::same3("net.conv", 2, 3, 1, &mut rng),
            bn: BatchNorm2d::new("net.bn", 3),
        }
    }

    #[test]
    fn he_uniform_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conv2d::<f32>::same3("c", 4, 8, 1, &mut rng);
        let bound = (6.0f32 / 36.0).sqrt();
        assert!(c.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(c.bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn parameters_exclude_buffers() {
        let p = pair(0);
        let names: Vec<String> = p.parameters().into_iter().map(|n| n.name).collect();
        assert_eq!(names, vec!["net.conv.weight", "net.conv.bias", "net.bn.weight", "net.bn.bias"]);
        assert_eq!(p.state().len(), 7);
    }

    #[test]
    fn state_round_trip_and_mismatch() {
        let a = pair(0);
        let b = pair(1);
        let entries = state_entries(&a);
        load_state(&b, &entries).unwrap();
        assert_eq!(a.a.weight.to_array(), b.a.weight.to_array());

        let mut renamed = entries.clone();
        renamed[0].0 = "net.conv.kernel".into();
        match load_state(&b, &renamed) {
            Err(StateError::Mismatch { missing, unexpected, .. }) => {
                assert_eq!(missing, vec!["net.conv.weight"]);
                assert_eq!(unexpected, vec!["net.conv.kernel"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sgd_momentum_update() {
        let p = Named::new("w", Tensor::<f32>::param(Array::new(&[1], vec![1.0]).unwrap()));
        let mut opt = Sgd::new(0.9);
        for _ in 0..2 {
            zero_grad(std::slice::from_ref(&p));
            sum(&p.tensor).backward().unwrap();
            opt.step(std::slice::from_ref(&p), 0.1);
        }
        // v1 = 1, w = 0.9; v2 = 1.9, w = 0.71
        assert!((p.tensor.item() - 0.71).abs() < 1e-6);
    }
}
