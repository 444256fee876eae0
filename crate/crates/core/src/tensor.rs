//! Dense row-major tensors and the numeric kernels the autodiff graph is built on.
//!
//! Image-like tensors use the `[batch, channel, height, width]` layout internally;
//! conversion to the `(height, width, channel)` interface layout lives in [`crate::types`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

/// Scalar element type. Implemented for `f32` (training, checkpoints) and `f64`
/// (gradient checking).
pub trait Float:
    NumFloat
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Float> MatRef<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `out = a * b + beta * out` where `out` is row-major `a.rows x b.cols`.
fn gemm_into<T: Float>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(out.len(), a.rows * b.cols);
    a.check();
    b.check();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: bounds were checked for both views and for the output buffer.
    unsafe {
        T::gemm(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        )
    }
}

/// Kernel size, stride and zero padding of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output extent for an input extent, or `None` when the kernel does not fit.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size mismatch");
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ---- matrix ops ------------------------------------------------------

    pub fn matmul(&self, rhs: &Self) -> Self {
        let (m, k) = self.dims2();
        let (k2, n) = rhs.dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            MatRef::row_major(&self.data, m, k),
            MatRef::row_major(&rhs.data, k, n),
            T::zero(),
            &mut out,
        );
        Self::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new(vec![c, r], out)
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape[..] {
            [r, c] => (r, c),
            _ => panic!("expected a 2-d tensor, got {:?}", self.shape),
        }
    }

    // ---- convolution -----------------------------------------------------

    /// Cross-correlation of `self: [N, Ci, H, W]` with `weight: [Co, Ci, k, k]`.
    pub fn conv2d(&self, weight: &Self, geom: ConvGeom) -> Self {
        let (n, ci, h, w) = self.dims4();
        let (co, wci, kh, kw) = weight.dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert!(kh == geom.kernel && kw == geom.kernel, "conv2d kernel mismatch");
        let ho = geom.out_extent(h).expect("kernel larger than padded input");
        let wo = geom.out_extent(w).expect("kernel larger than padded input");
        let rows = ci * geom.kernel * geom.kernel;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * co * plane];
        let mut cols = vec![T::zero(); rows * plane];
        let wmat = MatRef::row_major(&weight.data, co, rows);
        for b in 0..n {
            let x = &self.data[b * ci * h * w..(b + 1) * ci * h * w];
            let y = &mut out[b * co * plane..(b + 1) * co * plane];
            if is_pointwise(geom) {
                gemm_into(wmat, MatRef::row_major(x, ci, plane), T::zero(), y);
            } else {
                im2col(x, ci, h, w, geom, ho, wo, &mut cols);
                gemm_into(wmat, MatRef::row_major(&cols, rows, plane), T::zero(), y);
            }
        }
        Self::new(vec![n, co, ho, wo], out)
    }

    /// Adjoint of [`Tensor::conv2d`] in its input: maps `self: [N, Co, Ho, Wo]` to
    /// `[N, Ci, h, w]`. Doubles as a transposed ("de-") convolution.
    pub fn conv2d_transpose(&self, weight: &Self, geom: ConvGeom, h: usize, w: usize) -> Self {
        let (n, co, ho, wo) = self.dims4();
        let (wco, ci, _, _) = weight.dims4();
        assert_eq!(co, wco, "conv2d_transpose channel mismatch");
        assert_eq!(geom.out_extent(h), Some(ho), "conv2d_transpose height mismatch");
        assert_eq!(geom.out_extent(w), Some(wo), "conv2d_transpose width mismatch");
        let rows = ci * geom.kernel * geom.kernel;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * ci * h * w];
        let mut cols = vec![T::zero(); rows * plane];
        let wmat_t = MatRef::row_major(&weight.data, co, rows).t();
        for b in 0..n {
            let g = MatRef::row_major(&self.data[b * co * plane..(b + 1) * co * plane], co, plane);
            let x = &mut out[b * ci * h * w..(b + 1) * ci * h * w];
            if is_pointwise(geom) {
                gemm_into(wmat_t, g, T::zero(), x);
            } else {
                gemm_into(wmat_t, g, T::zero(), &mut cols);
                col2im(&cols, ci, h, w, geom, ho, wo, x);
            }
        }
        Self::new(vec![n, ci, h, w], out)
    }

    /// Gradient of `<conv2d(x, W), g>` with respect to `W`, where `self` is `x` and
    /// `grad` is `g`. Result has shape `[Co, Ci, k, k]`.
    pub fn conv2d_weight_grad(&self, grad: &Self, geom: ConvGeom) -> Self {
        let (n, ci, h, w) = self.dims4();
        let (gn, co, ho, wo) = grad.dims4();
        assert_eq!(n, gn, "conv2d_weight_grad batch mismatch");
        assert_eq!(geom.out_extent(h), Some(ho), "conv2d_weight_grad height mismatch");
        assert_eq!(geom.out_extent(w), Some(wo), "conv2d_weight_grad width mismatch");
        let rows = ci * geom.kernel * geom.kernel;
        let plane = ho * wo;
        let mut out = vec![T::zero(); co * rows];
        let mut cols = vec![T::zero(); rows * plane];
        for b in 0..n {
            let x = &self.data[b * ci * h * w..(b + 1) * ci * h * w];
            let g = MatRef::row_major(&grad.data[b * co * plane..(b + 1) * co * plane], co, plane);
            let beta = if b == 0 { T::zero() } else { T::one() };
            if is_pointwise(geom) {
                gemm_into(g, MatRef::row_major(x, ci, plane).t(), beta, &mut out);
            } else {
                im2col(x, ci, h, w, geom, ho, wo, &mut cols);
                gemm_into(g, MatRef::row_major(&cols, rows, plane).t(), beta, &mut out);
            }
        }
        Self::new(vec![co, ci, geom.kernel, geom.kernel], out)
    }

    // ---- resampling ------------------------------------------------------

    /// Nearest-neighbour 2x upsampling of a `[N, C, H, W]` tensor.
    pub fn upsample2x(&self) -> Self {
        let (n, c, h, w) = self.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Self::new(vec![n, c, h2, w2], out)
    }

    /// Sum over non-overlapping 2x2 windows; the adjoint of [`Tensor::upsample2x`].
    pub fn sum_pool2x(&self) -> Self {
        let (n, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "sum_pool2x needs even extents");
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / 2) * w2 + x / 2] += src[y * w + x];
                }
            }
        }
        Self::new(vec![n, c, h2, w2], out)
    }

    // ---- broadcasting ----------------------------------------------------

    /// Expands size-1 axes to `shape`. Ranks must agree.
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        let (src, dst) = (pad4(&self.shape), pad4(shape));
        for (s, d) in src.iter().zip(&dst) {
            assert!(*s == *d || *s == 1, "cannot broadcast {:?} to {:?}", self.shape, shape);
        }
        let strides = broadcast_strides(&src);
        let mut out = Vec::with_capacity(dst.iter().product());
        for a in 0..dst[0] {
            for b in 0..dst[1] {
                for c in 0..dst[2] {
                    let base = a * strides[0] + b * strides[1] + c * strides[2];
                    if strides[3] == 0 {
                        let v = self.data[base];
                        out.extend(std::iter::repeat_n(v, dst[3]));
                    } else {
                        out.extend_from_slice(&self.data[base..base + dst[3]]);
                    }
                }
            }
        }
        Self::new(shape.to_vec(), out)
    }

    /// Sums over the axes where `shape` has extent 1; the adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        let (src, dst) = (pad4(&self.shape), pad4(shape));
        for (s, d) in src.iter().zip(&dst) {
            assert!(*s == *d || *d == 1, "cannot reduce {:?} to {:?}", self.shape, shape);
        }
        let strides = broadcast_strides(&dst);
        let mut out = vec![T::zero(); dst.iter().product()];
        let mut i = 0;
        for a in 0..src[0] {
            for b in 0..src[1] {
                for c in 0..src[2] {
                    let base = a * strides[0] + b * strides[1] + c * strides[2];
                    let row = &self.data[i..i + src[3]];
                    if strides[3] == 0 {
                        out[base] += row.iter().copied().sum::<T>();
                    } else {
                        for (o, &v) in out[base..base + src[3]].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    i += src[3];
                }
            }
        }
        Self::new(shape.to_vec(), out)
    }

    // ---- channel-axis (axis 1) slicing ------------------------------------

    pub fn concat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead = parts[0].shape[0];
        let inner: usize = parts[0].shape[2..].iter().product();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.shape[0], lead, "concat batch mismatch");
            assert_eq!(p.shape[2..], parts[0].shape[2..], "concat spatial mismatch");
            total += p.shape[1];
        }
        let mut out = Vec::with_capacity(lead * total * inner);
        for a in 0..lead {
            for p in parts {
                let block = p.shape[1] * inner;
                out.extend_from_slice(&p.data[a * block..(a + 1) * block]);
            }
        }
        let mut shape = parts[0].shape.clone();
        shape[1] = total;
        Self::new(shape, out)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let (lead, total) = (self.shape[0], self.shape[1]);
        assert!(start + len <= total, "channel slice out of range");
        let inner: usize = self.shape[2..].iter().product();
        let mut out = Vec::with_capacity(lead * len * inner);
        for a in 0..lead {
            let off = (a * total + start) * inner;
            out.extend_from_slice(&self.data[off..off + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Self::new(shape, out)
    }

    /// Places `self` at channel offset `start` inside a zero tensor with `total` channels.
    pub fn pad_channels(&self, start: usize, total: usize) -> Self {
        let (lead, len) = (self.shape[0], self.shape[1]);
        assert!(start + len <= total, "channel pad out of range");
        let inner: usize = self.shape[2..].iter().product();
        let mut out = vec![T::zero(); lead * total * inner];
        for a in 0..lead {
            let off = (a * total + start) * inner;
            out[off..off + len * inner]
                .copy_from_slice(&self.data[a * len * inner..(a + 1) * len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = total;
        Self::new(shape, out)
    }
}

fn is_pointwise(geom: ConvGeom) -> bool {
    geom.kernel == 1 && geom.stride == 1 && geom.pad == 0
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    assert!(shape.len() <= 4, "broadcasting supports rank <= 4");
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Row-major strides with zero stride on size-1 axes.
fn broadcast_strides(shape: &[usize; 4]) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let k = geom.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let k = geom.kernel;
    let plane = ho * wo;
    x.fill(T::zero());
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let ho = g.out_extent(h).unwrap();
        let wo = g.out_extent(wd).unwrap();
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for geom in [ConvGeom::new(4, 2, 1), ConvGeom::new(3, 1, 1), ConvGeom::new(1, 1, 0), ConvGeom::new(2, 1, 0)] {
            let x = random(&[2, 3, 6, 6], &mut rng);
            let w = random(&[4, 3, geom.kernel, geom.kernel], &mut rng);
            let fast = x.conv2d(&w, geom);
            let slow = naive_conv(&x, &w, geom);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_and_weight_grad_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for geom in [ConvGeom::new(4, 2, 1), ConvGeom::new(3, 1, 1), ConvGeom::new(1, 1, 0)] {
            let x = random(&[2, 3, 8, 8], &mut rng);
            let w = random(&[5, 3, geom.kernel, geom.kernel], &mut rng);
            let y = x.conv2d(&w, geom);
            let g = random(y.shape(), &mut rng);
            // <conv(x, w), g> == <x, conv_t(g, w)> == <w, wgrad(x, g)>
            let lhs = dot(&y, &g);
            let via_input = dot(&x, &g.conv2d_transpose(&w, geom, 8, 8));
            let via_weight = dot(&w, &x.conv2d_weight_grad(&g, geom));
            assert!((lhs - via_input).abs() < 1e-10);
            assert!((lhs - via_weight).abs() < 1e-10);
        }
    }

    #[test]
    fn nearest_upsample_of_two_by_two() {
        let t = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let up = t.upsample2x();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(up.sum_pool2x().data(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for small in [vec![1, 3, 1, 1], vec![2, 3, 1, 1], vec![2, 1, 4, 5], vec![1, 1, 1, 1]] {
            let a = random(&small, &mut rng);
            let big = random(&[2, 3, 4, 5], &mut rng);
            let lhs = dot(&a.broadcast_to(&[2, 3, 4, 5]), &big);
            let rhs = dot(&a, &big.sum_to(&small));
            assert!((lhs - rhs).abs() < 1e-10, "{small:?}");
        }
    }

    #[test]
    fn channel_concat_slice_pad() {
        let a = Tensor::<f64>::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::new(vec![2, 2, 1, 2], (5..13).map(f64::from).collect());
        let c = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(c.slice_channels(1, 2), b);
        let padded = a.pad_channels(0, 3);
        assert_eq!(padded.slice_channels(0, 1), a);
        assert_eq!(padded.slice_channels(1, 2).sum(), 0.0);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.transpose2();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[14.0, 32.0, 32.0, 77.0]);
    }
}
