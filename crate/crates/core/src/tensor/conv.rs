//! Spatial primitives over `[B, C, H, W]` tensors.

use super::array::dims4;
use super::graph::Op;
use super::{gemm, Array, Float, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.hout * self.wout
    }

    /// 1x1, stride 1, no padding: the input plane already is the column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let area = g.out_area();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let area = g.out_area();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src[oy * g.wout..(oy + 1) * g.wout].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] = drow[ix as usize] + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

struct Conv2dOp<T: Float> {
    x: Tensor<T>,
    w: Tensor<T>,
    b: Option<Tensor<T>>,
    geom: ConvGeom,
}

impl<T: Float> Op<T> for Conv2dOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.x.clone(), self.w.clone()];
        v.extend(self.b.clone());
        v
    }

    fn backward(&self, grad: &[T]) {
        let g = self.geom;
        let (area, rows) = (g.out_area(), g.cols_rows());
        let in_plane = g.cin * g.h * g.w;
        let out_plane = g.cout * area;

        if let Some(b) = &self.b {
            b.accumulate(|acc| {
                for gb in grad.chunks_exact(out_plane) {
                    for (co, a) in acc.iter_mut().enumerate() {
                        let s: T = gb[co * area..(co + 1) * area].iter().copied().sum();
                        *a = *a + s;
                    }
                }
            });
        }

        let xv = self.x.value();
        let wv = self.w.value();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * area] };

        if self.w.requires_grad() {
            self.w.accumulate(|acc| {
                for bi in 0..g.batch {
                    let xb = &xv.data()[bi * in_plane..(bi + 1) * in_plane];
                    let gb = &grad[bi * out_plane..(bi + 1) * out_plane];
                    let colsb: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(&g, xb, &mut cols);
                        &cols
                    };
                    gemm(false, true, g.cout, rows, area, T::one(), gb, colsb, T::one(), acc);
                }
            });
        }

        if self.x.requires_grad() {
            let mut dcols = vec![T::zero(); rows * area];
            self.x.accumulate(|acc| {
                for bi in 0..g.batch {
                    let gb = &grad[bi * out_plane..(bi + 1) * out_plane];
                    let dxb = &mut acc[bi * in_plane..(bi + 1) * in_plane];
                    if g.is_pointwise() {
                        gemm(true, false, rows, area, g.cout, T::one(), wv.data(), gb, T::one(), dxb);
                    } else {
                        gemm(true, false, rows, area, g.cout, T::one(), wv.data(), gb, T::zero(), &mut dcols);
                        col2im(&g, &dcols, dxb);
                    }
                }
            });
        }
    }
}

/// Cross-correlation of `x [B, Cin, H, W]` with `weight [Cout, Cin, k, k]`.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    let (batch, cin, h, w) = dims4("conv2d", &x.shape())?;
    let (cout, wcin, k, k2) = dims4("conv2d", &weight.shape())?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {cin} channels, weight expects {wcin}"),
        });
    }
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel must be square, got {k}x{k2}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("padded input {}x{} smaller than kernel {k}", h + 2 * padding, w + 2 * padding),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?}, expected [{cout}]", b.shape()),
            });
        }
    }
    let geom = ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        k,
        stride,
        pad: padding,
        hout: (h + 2 * padding - k) / stride + 1,
        wout: (w + 2 * padding - k) / stride + 1,
    };
    let (area, rows) = (geom.out_area(), geom.cols_rows());
    let in_plane = cin * h * w;
    let out_plane = cout * area;
    let mut out = vec![T::zero(); batch * out_plane];
    {
        let xv = x.value();
        let wv = weight.value();
        let bv = bias.map(|b| b.data().to_vec());
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * area] };
        for bi in 0..batch {
            let xb = &xv.data()[bi * in_plane..(bi + 1) * in_plane];
            let ob = &mut out[bi * out_plane..(bi + 1) * out_plane];
            if let Some(bv) = &bv {
                for (co, &bval) in bv.iter().enumerate() {
                    ob[co * area..(co + 1) * area].iter_mut().for_each(|v| *v = bval);
                }
            }
            let colsb: &[T] = if geom.is_pointwise() {
                xb
            } else {
                im2col(&geom, xb, &mut cols);
                &cols
            };
            gemm(false, false, cout, area, rows, T::one(), wv.data(), colsb, T::one(), ob);
        }
    }
    Ok(Tensor::from_op(
        Array::new(&[batch, cout, geom.hout, geom.wout], out)?,
        Conv2dOp {
            x: x.clone(),
            w: weight.clone(),
            b: bias.cloned(),
            geom,
        },
    ))
}

struct MaxPoolOp<T: Float> {
    x: Tensor<T>,
    argmax: Vec<usize>,
}

impl<T: Float> Op<T> for MaxPoolOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        self.x.accumulate(|acc| {
            for (&src, &gv) in self.argmax.iter().zip(g) {
                acc[src] = acc[src] + gv;
            }
        });
    }
}

/// Max pooling with a `k x k` window, no padding. Ties go to the first
/// element in row-major window order; a NaN anywhere in a window wins.
pub fn max_pool2d<T: Float>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>, TensorError> {
    let (b, c, h, w) = dims4("max_pool2d", &x.shape())?;
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(TensorError::InvalidArgument(format!(
            "max_pool2d window {k} stride {stride} on {h}x{w}"
        )));
    }
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    {
        let xv = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xv[idx] > xv[best] || xv[idx].is_nan() {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(Tensor::from_op(
        Array::new(&[b, c, ho, wo], out)?,
        MaxPoolOp { x: x.clone(), argmax },
    ))
}

struct UpsampleOp<T: Float> {
    x: Tensor<T>,
    dims: (usize, usize, usize),
}

impl<T: Float> Op<T> for UpsampleOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let (planes, h, w) = self.dims;
        self.x.accumulate(|acc| {
            for p in 0..planes {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let dst = p * h * w + (y / 2) * w + x / 2;
                        acc[dst] = acc[dst] + g[p * 4 * h * w + y * 2 * w + x];
                    }
                }
            }
        });
    }
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample_nearest2x<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (b, c, h, w) = dims4("upsample_nearest2x", &x.shape())?;
    let mut out = vec![T::zero(); b * c * 4 * h * w];
    {
        let xv = x.data();
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        Array::new(&[b, c, 2 * h, 2 * w], out)?,
        UpsampleOp {
            x: x.clone(),
            dims: (b * c, h, w),
        },
    ))
}

struct GapOp<T: Float> {
    x: Tensor<T>,
    area: usize,
}

impl<T: Float> Op<T> for GapOp<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[T]) {
        let inv = T::one() / T::lit(self.area as f64);
        self.x.accumulate(|acc| {
            for (plane, &gv) in acc.chunks_exact_mut(self.area).zip(g) {
                let d = gv * inv;
                plane.iter_mut().for_each(|a| *a = *a + d);
            }
        });
    }
}

/// `[B, C, H, W] -> [B, C]` spatial mean.
pub fn global_average_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (b, c, h, w) = dims4("global_average_pool", &x.shape())?;
    let area = h * w;
    let n = T::lit(area as f64);
    let out: Vec<T> = x
        .data()
        .chunks_exact(area)
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect();
    Ok(Tensor::from_op(Array::new(&[b, c], out)?, GapOp { x: x.clone(), area }))
}
