//! Dense row-major `f64` arrays and the numeric kernels the network is
//! built from.
//!
//! Temporal activations use a time-major layout: axis 0 is time `T`, axis 1
//! is batch `B`, followed by feature axes (`[T, B, F]` or `[T, B, C, H, W]`).
//! The reverse pass walks `t = T..1` over contiguous per-step slabs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Axis roles used by temporal tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Time,
    Batch,
    Channel,
    Spatial,
    Feature,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Axis roles for a temporal tensor of this rank.
    pub fn axis_roles(&self) -> Vec<Axis> {
        match self.rank() {
            0 => vec![],
            1 => vec![Axis::Time],
            2 => vec![Axis::Time, Axis::Batch],
            3 => vec![Axis::Time, Axis::Batch, Axis::Feature],
            r => {
                let mut roles = vec![Axis::Time, Axis::Batch, Axis::Channel];
                roles.extend(std::iter::repeat_n(Axis::Spatial, r - 3));
                roles
            }
        }
    }

    pub fn time_steps(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn batch(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    /// Elements per time step (`B * features`).
    pub fn step_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Elements per sample per step.
    pub fn feature_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let n = self.step_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.step_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_assign {:?} += {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl ElementwiseOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Div => a / b,
            ElementwiseOp::Max => a.max(b),
            ElementwiseOp::Min => a.min(b),
        }
    }
}

/// Applies `op` pointwise. `b` may have lower rank or unit extents; its axes
/// are aligned to the trailing axes of `a` and broadcast where they are 1.
/// The result always has `a`'s shape.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || {
        Error::shape(format!(
            "cannot broadcast {:?} onto {:?} for {:?}",
            b.shape, a.shape, op
        ))
    };
    if b.rank() > a.rank() {
        return Err(mismatch());
    }
    let lead = a.rank() - b.rank();
    let mut b_strides = vec![0usize; a.rank()];
    let mut stride = 1usize;
    for k in (0..b.rank()).rev() {
        let (da, db) = (a.shape[lead + k], b.shape[k]);
        if db == da {
            b_strides[lead + k] = stride;
        } else if db != 1 {
            return Err(mismatch());
        }
        stride *= db;
    }

    let mut out = Vec::with_capacity(a.len());
    if a.shape == b.shape {
        out.extend(a.data.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)));
    } else {
        let rank = a.rank();
        let mut idx = vec![0usize; rank];
        for &x in &a.data {
            let off: usize = idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum();
            out.push(op.apply(x, b.data[off]));
            for k in (0..rank).rev() {
                idx[k] += 1;
                if idx[k] < a.shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

/// Standard matrix product of two 2-D blocks.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(format!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    if n > 0 {
        exec::for_each_chunk_mut(&mut out, n * ROWS_PER_CHUNK, |off, rows| {
            let r0 = off / n;
            for (ri, row) in rows.chunks_mut(n).enumerate() {
                let arow = &a.data[(r0 + ri) * k..(r0 + ri + 1) * k];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        });
    }
    Tensor::from_vec(&[m, n], out)
}

const ROWS_PER_CHUNK: usize = 16;

/// `y[r, o] = sum_i x[r, i] * w[o, i]`; `x` is `rows x inner`, `w` is
/// `outer x inner`.
pub(crate) fn gemm_nt(x: &[f64], rows: usize, inner: usize, w: &[f64], outer: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), outer * inner);
    let mut y = vec![0.0; rows * outer];
    if outer == 0 {
        return y;
    }
    exec::for_each_chunk_mut(&mut y, outer * ROWS_PER_CHUNK, |off, block| {
        let r0 = off / outer;
        for (ri, yrow) in block.chunks_mut(outer).enumerate() {
            let xrow = &x[(r0 + ri) * inner..(r0 + ri + 1) * inner];
            if xrow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (o, yv) in yrow.iter_mut().enumerate() {
                let wrow = &w[o * inner..(o + 1) * inner];
                *yv = dot(xrow, wrow);
            }
        }
    });
    y
}

/// `dx[r, i] = sum_o dy[r, o] * w[o, i]`.
pub(crate) fn gemm_nn(dy: &[f64], rows: usize, outer: usize, w: &[f64], inner: usize) -> Vec<f64> {
    debug_assert_eq!(dy.len(), rows * outer);
    debug_assert_eq!(w.len(), outer * inner);
    let mut dx = vec![0.0; rows * inner];
    if inner == 0 {
        return dx;
    }
    exec::for_each_chunk_mut(&mut dx, inner * ROWS_PER_CHUNK, |off, block| {
        let r0 = off / inner;
        for (ri, dxrow) in block.chunks_mut(inner).enumerate() {
            let dyrow = &dy[(r0 + ri) * outer..(r0 + ri + 1) * outer];
            for (o, &g) in dyrow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wrow = &w[o * inner..(o + 1) * inner];
                for (d, &wv) in dxrow.iter_mut().zip(wrow) {
                    *d += g * wv;
                }
            }
        }
    });
    dx
}

/// `dw[o, i] = sum_r dy[r, o] * x[r, i]`, summed over rows in ascending order.
pub(crate) fn gemm_tn(dy: &[f64], x: &[f64], rows: usize, outer: usize, inner: usize) -> Vec<f64> {
    debug_assert_eq!(dy.len(), rows * outer);
    debug_assert_eq!(x.len(), rows * inner);
    let mut dw = vec![0.0; outer * inner];
    if inner == 0 {
        return dw;
    }
    exec::for_each_chunk_mut(&mut dw, inner, |off, wrow| {
        let o = off / inner;
        for r in 0..rows {
            let g = dy[r * outer + o];
            if g == 0.0 {
                continue;
            }
            let xrow = &x[r * inner..(r + 1) * inner];
            for (d, &xv) in wrow.iter_mut().zip(xrow) {
                *d += g * xv;
            }
        }
    });
    dw
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a 2-D cross-correlation over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::shape("conv2d kernel extents must be positive"));
        }
        if self.height + 2 * self.padding < self.kernel_h
            || self.width + 2 * self.padding < self.kernel_w
        {
            return Err(Error::shape(format!(
                "kernel {}x{} does not fit a {}x{} input with padding {}",
                self.kernel_h, self.kernel_w, self.height, self.width, self.padding
            )));
        }
        Ok(())
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output indices `o` along one axis for which `o * stride + k - padding`
    /// lands inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.padding as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (extent as isize - 1 - shift).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_extent as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// `input` is `[N, C, H, W]`, `kernel` is `[O, C, KH, KW]`; the result is
/// `[N, O, H', W']`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 4 || kernel.rank() != 4 || input.shape[1] != kernel.shape[1] {
        return Err(Error::shape(format!(
            "conv2d expects [N,C,H,W] and [O,C,KH,KW] with matching C, got {:?} and {:?}",
            input.shape, kernel.shape
        )));
    }
    let geo = Conv2dGeometry {
        in_channels: input.shape[1],
        out_channels: kernel.shape[0],
        height: input.shape[2],
        width: input.shape[3],
        kernel_h: kernel.shape[2],
        kernel_w: kernel.shape[3],
        stride,
        padding,
    };
    geo.validate()?;
    let n = input.shape[0];
    let out = conv2d_forward(&geo, &input.data, n, &kernel.data);
    Tensor::from_vec(&[n, geo.out_channels, geo.out_height(), geo.out_width()], out)
}

pub(crate) fn conv2d_forward(geo: &Conv2dGeometry, input: &[f64], images: usize, kernel: &[f64]) -> Vec<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height, geo.width);
    let (kh, kw, s, p) = (geo.kernel_h, geo.kernel_w, geo.stride, geo.padding);
    let in_img = geo.in_image();
    let out_img = geo.out_image();
    debug_assert_eq!(input.len(), images * in_img);
    debug_assert_eq!(kernel.len(), geo.kernel_len());
    let mut out = vec![0.0; images * out_img];
    if out_img == 0 {
        return out;
    }
    exec::for_each_chunk_mut(&mut out, out_img, |off, oimg| {
        let img = off / out_img;
        let x = &input[img * in_img..(img + 1) * in_img];
        for c in 0..geo.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            if xc.iter().all(|&v| v == 0.0) {
                continue;
            }
            for o in 0..geo.out_channels {
                let yo = &mut oimg[o * oh * ow..(o + 1) * oh * ow];
                let kbase = (o * geo.in_channels + c) * kh * kw;
                for ky in 0..kh {
                    let (y0, y1) = geo.valid_range(ky, h, oh);
                    for kx in 0..kw {
                        let wv = kernel[kbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = geo.valid_range(kx, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let xrow = &xc[iy * w..(iy + 1) * w];
                            let yrow = &mut yo[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let ix0 = x0 + kx - p;
                                for (yv, &xv) in yrow[x0..x1].iter_mut().zip(&xrow[ix0..ix0 + (x1 - x0)]) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for ox in x0..x1 {
                                    yrow[ox] += wv * xrow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of a conv2d with respect to its input.
pub(crate) fn conv2d_grad_input(geo: &Conv2dGeometry, grad_out: &[f64], images: usize, kernel: &[f64]) -> Vec<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height, geo.width);
    let (kh, kw, s, p) = (geo.kernel_h, geo.kernel_w, geo.stride, geo.padding);
    let in_img = geo.in_image();
    let out_img = geo.out_image();
    debug_assert_eq!(grad_out.len(), images * out_img);
    let mut dx = vec![0.0; images * in_img];
    if in_img == 0 {
        return dx;
    }
    exec::for_each_chunk_mut(&mut dx, in_img, |off, dimg| {
        let img = off / in_img;
        let gy = &grad_out[img * out_img..(img + 1) * out_img];
        for o in 0..geo.out_channels {
            let go = &gy[o * oh * ow..(o + 1) * oh * ow];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for c in 0..geo.in_channels {
                let dxc = &mut dimg[c * h * w..(c + 1) * h * w];
                let kbase = (o * geo.in_channels + c) * kh * kw;
                for ky in 0..kh {
                    let (y0, y1) = geo.valid_range(ky, h, oh);
                    for kx in 0..kw {
                        let wv = kernel[kbase + ky * kw + kx];
                        let (x0, x1) = geo.valid_range(kx, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            let drow = &mut dxc[iy * w..(iy + 1) * w];
                            for ox in x0..x1 {
                                drow[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

const IMAGES_PER_KERNEL_CHUNK: usize = 8;

/// Gradient of a conv2d with respect to its kernel. Images are reduced in
/// fixed groups, in order, so the result does not depend on the thread count.
pub(crate) fn conv2d_grad_kernel(geo: &Conv2dGeometry, input: &[f64], grad_out: &[f64], images: usize) -> Vec<f64> {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let (h, w) = (geo.height, geo.width);
    let (kh, kw, s, p) = (geo.kernel_h, geo.kernel_w, geo.stride, geo.padding);
    let in_img = geo.in_image();
    let out_img = geo.out_image();
    let klen = geo.kernel_len();
    let groups = images.div_ceil(IMAGES_PER_KERNEL_CHUNK);
    let partials = exec::map_range(groups, |g| {
        let mut dk = vec![0.0; klen];
        let end = ((g + 1) * IMAGES_PER_KERNEL_CHUNK).min(images);
        for img in g * IMAGES_PER_KERNEL_CHUNK..end {
            let x = &input[img * in_img..(img + 1) * in_img];
            let gy = &grad_out[img * out_img..(img + 1) * out_img];
            for o in 0..geo.out_channels {
                let go = &gy[o * oh * ow..(o + 1) * oh * ow];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for c in 0..geo.in_channels {
                    let xc = &x[c * h * w..(c + 1) * h * w];
                    let kbase = (o * geo.in_channels + c) * kh * kw;
                    for ky in 0..kh {
                        let (y0, y1) = geo.valid_range(ky, h, oh);
                        for kx in 0..kw {
                            let (x0, x1) = geo.valid_range(kx, w, ow);
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - p;
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                let xrow = &xc[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let ix0 = x0 + kx - p;
                                    acc += dot(&grow[x0..x1], &xrow[ix0..ix0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        acc += grow[ox] * xrow[ox * s + kx - p];
                                    }
                                }
                            }
                            dk[kbase + ky * kw + kx] += acc;
                        }
                    }
                }
            }
        }
        dk
    });
    let mut dk = vec![0.0; klen];
    for part in partials {
        for (d, v) in dk.iter_mut().zip(part) {
            *d += v;
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_small_vectors() {
        let r = elementwise(ElementwiseOp::Add, &t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zeros_annihilates() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]);
        let r = elementwise(ElementwiseOp::Mul, &x, &Tensor::zeros_like(&x)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_zeros_is_bit_identical() {
        let x = t(&[3], &[1.0e-300, -2.5, 3.0]);
        let r = elementwise(ElementwiseOp::Add, &x, &Tensor::zeros(&[3])).unwrap();
        for (a, b) in r.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn broadcast_along_batch_axis() {
        let a = t(&[2, 2, 3], &[0.0; 12]);
        let b = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let r = elementwise(ElementwiseOp::Add, &a, &b).unwrap();
        assert_eq!(r.shape(), &[2, 2, 3]);
        assert_eq!(&r.data()[3..6], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let err = elementwise(ElementwiseOp::Add, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn matmul_small_example() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn identity_kernel_conv() {
        let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn all_ones_counting_conv() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
        assert!(conv2d(&x, &k, 0, 1).is_err());
    }

    #[test]
    fn valid_range_matches_bounds_check() {
        for stride in 1..=3 {
            for padding in 0..=2 {
                let geo = Conv2dGeometry {
                    in_channels: 1,
                    out_channels: 1,
                    height: 7,
                    width: 7,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride,
                    padding,
                };
                let ow = geo.out_width();
                for k in 0..3 {
                    let (lo, hi) = geo.valid_range(k, 7, ow);
                    for o in 0..ow {
                        let i = (o * stride + k) as isize - padding as isize;
                        let inside = (0..7).contains(&i);
                        assert_eq!(inside, (lo..hi).contains(&o), "s={stride} p={padding} k={k} o={o}");
                    }
                }
            }
        }
    }
}
