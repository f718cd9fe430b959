//! Elementwise, reduction and dense primitives.

use super::array::dims2;
use super::graph::Op;
use super::{gemm, Array, Float, Tensor, TensorError};

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{sa:?} vs {sb:?}"),
        });
    }
    Ok(())
}

fn map<T: Float>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Array<T> {
    let v = x.value();
    let data = v.data().iter().map(|&a| f(a)).collect();
    Array::new(v.shape(), data).expect("shape preserved")
}

struct AddOp<T: Float> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Float> Op<T> for AddOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &[T]) {
        for t in [&self.a, &self.b] {
            t.accumulate(|acc| acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x));
        }
    }
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("add", a, b)?;
    let data = {
        let (va, vb) = (a.value(), b.value());
        let d = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        Array::new(va.shape(), d)?
    };
    Ok(Tensor::from_op(data, AddOp { a: a.clone(), b: b.clone() }))
}

struct AddNOp<T: Float> {
    xs: Vec<Tensor<T>>,
}

impl<T: Float> Op<T> for AddNOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        self.xs.clone()
    }
    fn backward(&self, g: &[T]) {
        for t in &self.xs {
            t.accumulate(|acc| acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x));
        }
    }
}

/// Sum of equally shaped tensors.
pub fn add_n<T: Float>(xs: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::InvalidArgument("add_n of an empty list".into()))?;
    for x in &xs[1..] {
        same_shape("add_n", first, x)?;
    }
    let mut out = first.to_array();
    for x in &xs[1..] {
        out.data_mut()
            .iter_mut()
            .zip(x.data().iter())
            .for_each(|(a, &b)| *a = *a + b);
    }
    Ok(Tensor::from_op(out, AddNOp { xs: xs.to_vec() }))
}

struct MulOp<T: Float> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Float> Op<T> for MulOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &[T]) {
        {
            let vb = self.b.value();
            self.a.accumulate(|acc| {
                for ((a, &x), &y) in acc.iter_mut().zip(g).zip(vb.data()) {
                    *a = *a + x * y;
                }
            });
        }
        let va = self.a.value();
        self.b.accumulate(|acc| {
            for ((a, &x), &y) in acc.iter_mut().zip(g).zip(va.data()) {
                *a = *a + x * y;
            }
        });
    }
}

/// Elementwise product.
pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    same_shape("mul", a, b)?;
    let data = {
        let (va, vb) = (a.value(), b.value());
        let d = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        Array::new(va.shape(), d)?
    };
    Ok(Tensor::from_op(data, MulOp { a: a.clone(), b: b.clone() }))
}

struct ScaleOp<T: Float> {
    x: Tensor<T>,
    s: T,
}

impl<T: Float> Op<T> for ScaleOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let s = self.s;
        self.x
            .accumulate(|acc| acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x * s));
    }
}

/// Multiplication by a constant scalar.
pub fn scale<T: Float>(x: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::lit(s);
    Tensor::from_op(map(x, |v| v * s), ScaleOp { x: x.clone(), s })
}

struct ReluOp<T: Float> {
    x: Tensor<T>,
}

impl<T: Float> Op<T> for ReluOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let v = self.x.value();
        self.x.accumulate(|acc| {
            for ((a, &gx), &xv) in acc.iter_mut().zip(g).zip(v.data()) {
                if xv > T::zero() {
                    *a = *a + gx;
                }
            }
        });
    }
}

/// NaN inputs stay NaN so that corrupt values reach the loss.
pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_op(map(x, |v| if v < T::zero() { T::zero() } else { v }), ReluOp { x: x.clone() })
}

struct SigmoidOp<T: Float> {
    x: Tensor<T>,
    y: Vec<T>,
}

impl<T: Float> Op<T> for SigmoidOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        self.x.accumulate(|acc| {
            for ((a, &gx), &y) in acc.iter_mut().zip(g).zip(&self.y) {
                *a = *a + gx * y * (T::one() - y);
            }
        });
    }
}

pub(crate) fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let out = map(x, sigmoid_scalar);
    let y = if x.requires_grad() { out.data().to_vec() } else { Vec::new() };
    Tensor::from_op(out, SigmoidOp { x: x.clone(), y })
}

struct SumOp<T: Float> {
    x: Tensor<T>,
    s: T,
}

impl<T: Float> Op<T> for SumOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let d = g[0] * self.s;
        self.x.accumulate(|acc| acc.iter_mut().for_each(|a| *a = *a + d));
    }
}

/// Sum of all elements, as a one-element tensor.
pub fn sum<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s: T = x.data().iter().copied().sum();
    Tensor::from_op(Array::scalar(s), SumOp { x: x.clone(), s: T::one() })
}

pub fn mean<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(x.numel() as f64);
    let s: T = x.data().iter().copied().sum();
    Tensor::from_op(Array::scalar(s / n), SumOp { x: x.clone(), s: T::one() / n })
}

/// Identity in the forward direction; multiplies incoming gradients by
/// `-lambda` on the way back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReverse {
    lambda: f64,
}

impl GradReverse {
    pub fn new(lambda: f64) -> Result<Self, TensorError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(TensorError::InvalidArgument(format!(
                "gradient reversal lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::from_op(
            x.to_array(),
            GradReverseOp {
                x: x.clone(),
                neg_lambda: T::lit(-self.lambda),
            },
        )
    }
}

struct GradReverseOp<T: Float> {
    x: Tensor<T>,
    neg_lambda: T,
}

impl<T: Float> Op<T> for GradReverseOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let s = self.neg_lambda;
        self.x
            .accumulate(|acc| acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x * s));
    }
}

pub fn grad_reverse<T: Float>(x: &Tensor<T>, lambda: f64) -> Result<Tensor<T>, TensorError> {
    Ok(GradReverse::new(lambda)?.apply(x))
}

struct LinearOp<T: Float> {
    x: Tensor<T>,
    w: Tensor<T>,
    b: Option<Tensor<T>>,
    dims: (usize, usize, usize),
}

impl<T: Float> Op<T> for LinearOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.x.clone(), self.w.clone()];
        v.extend(self.b.clone());
        v
    }
    fn backward(&self, g: &[T]) {
        let (batch, fin, fout) = self.dims;
        {
            let w = self.w.value();
            self.x
                .accumulate(|acc| gemm(false, false, batch, fin, fout, T::one(), g, w.data(), T::one(), acc));
        }
        {
            let x = self.x.value();
            self.w
                .accumulate(|acc| gemm(true, false, fout, fin, batch, T::one(), g, x.data(), T::one(), acc));
        }
        if let Some(b) = &self.b {
            b.accumulate(|acc| {
                for row in g.chunks_exact(fout) {
                    acc.iter_mut().zip(row).for_each(|(a, &x)| *a = *a + x);
                }
            });
        }
    }
}

/// `x [B, F] * weight[G, F]^T + bias[G]`.
pub fn linear<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    let (batch, fin) = dims2("linear", &x.shape())?;
    let (fout, wfin) = dims2("linear", &weight.shape())?;
    if wfin != fin {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            detail: format!("input features {fin} vs weight features {wfin}"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("bias shape {:?}, expected [{fout}]", b.shape()),
            });
        }
    }
    let mut out = vec![T::zero(); batch * fout];
    if let Some(b) = bias {
        let bv = b.data();
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(&bv);
        }
    }
    gemm(false, true, batch, fout, fin, T::one(), &x.data(), &weight.data(), T::one(), &mut out);
    Ok(Tensor::from_op(
        Array::new(&[batch, fout], out)?,
        LinearOp {
            x: x.clone(),
            w: weight.clone(),
            b: bias.cloned(),
            dims: (batch, fin, fout),
        },
    ))
}

struct ConcatOp<T: Float> {
    xs: Vec<Tensor<T>>,
}

impl<T: Float> Op<T> for ConcatOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        self.xs.clone()
    }
    fn backward(&self, g: &[T]) {
        let mut start = 0;
        for t in &self.xs {
            let n = t.numel();
            t.accumulate(|acc| acc.iter_mut().zip(&g[start..start + n]).for_each(|(a, &x)| *a = *a + x));
            start += n;
        }
    }
}

/// Concatenates along the leading (batch) axis.
pub fn concat_batch<T: Float>(xs: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::InvalidArgument("concat of an empty list".into()))?;
    let tail = first.shape()[1..].to_vec();
    let mut rows = 0;
    let mut data = Vec::new();
    for x in xs {
        let s = x.shape();
        if s[1..] != tail[..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_batch",
                detail: format!("{:?} vs {s:?}", first.shape()),
            });
        }
        rows += s[0];
        data.extend_from_slice(&x.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    Ok(Tensor::from_op(Array::new(&shape, data)?, ConcatOp { xs: xs.to_vec() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::param(Array::from_f64(shape, v).unwrap())
    }

    #[test]
    fn relu_and_sigmoid_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data().to_vec(), vec![0.0, 0.0, 2.0]);
        let z = t(&[1], &[0.0]);
        assert_eq!(sigmoid(&z).item(), 0.5);
        let n = t(&[2], &[f64::NAN, -3.0]);
        assert!(relu(&n).data()[0].is_nan());
    }

    #[test]
    fn linear_hand_example() {
        let x = t(&[1, 2], &[1.0, 1.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), vec![1, 2]);
        assert_eq!(y.data().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn linear_rejects_feature_mismatch() {
        let x = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(linear(&x, &w, None), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn quadratic_gradient() {
        let x = t(&[2], &[1.0, 2.0]);
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_passes() {
        let x = t(&[2], &[1.0, 2.0]);
        for _ in 0..2 {
            sum(&mul(&x, &x).unwrap()).backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(matches!(relu(&x).backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn grad_reverse_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let y = grad_reverse(&x, 0.5).unwrap();
        assert_eq!(y.data().to_vec(), vec![1.0, 2.0, 3.0]);

        let x = t(&[2], &[0.3, 0.7]);
        sum(&grad_reverse(&x, 0.5).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-0.5, -0.5]);

        let x = t(&[2], &[0.3, 0.7]);
        let up = Tensor::constant(Array::from_f64(&[2], &[2.0, -4.0]).unwrap());
        sum(&mul(&grad_reverse(&x, 0.0).unwrap(), &up).unwrap()).backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.0));

        let x = t(&[4], &[1.0; 4]);
        sum(&grad_reverse(&x, 1.0).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-1.0; 4]);
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        assert!(GradReverse::new(-0.1).is_err());
        assert!(GradReverse::new(f64::NAN).is_err());
    }

    #[test]
    fn double_reversal_is_identity() {
        let x = t(&[3], &[0.1, -0.2, 0.3]);
        let w = Tensor::constant(Array::from_f64(&[3], &[1.5, -2.0, 0.25]).unwrap());
        let y = grad_reverse(&grad_reverse(&x, 1.0).unwrap(), 1.0).unwrap();
        sum(&mul(&y, &w).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn constants_record_nothing() {
        let x = Tensor::<f64>::constant(Array::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = sum(&relu(&x));
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn concat_routes_gradients_back() {
        let a = Tensor::<f64>::param(Array::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = Tensor::<f64>::param(Array::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = concat_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        assert_eq!(c.to_array().to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::constant(Array::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        sum(&mul(&c, &w).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.0, 5.0, 6.0]);
        let bad = Tensor::<f64>::constant(Array::zeros(&[1, 3]));
        assert!(concat_batch(&[a, bad]).is_err());
    }
}
