//! Dense row-major tensors and the arithmetic every layer is built from.
//!
//! All reductions and products accumulate in a fixed order (ascending inner
//! index, starting from zero), so results are bit-reproducible for a given
//! precision and two code paths that visit the same terms in the same order
//! produce identical values.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. `f64` is the oracle / gradient-check mode,
/// `f32` the runtime mode.
pub trait Scalar:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// `e^x` for `x <= 0`, branch-free so loops over it vectorize.
    #[inline(always)]
    fn exp_nonpos(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }

    /// Range reduction `x = n ln2 + r` with `|r| <= ln2 / 2`, then
    /// `e^r = 1 + r + r^2 P(r)` with a degree-5 minimax `P` (the Cephes
    /// `expf` coefficients); within 2 ulp of the correctly rounded result.
    #[inline(always)]
    fn exp_nonpos(self) -> f32 {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        // adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits
        const SHIFTER: f32 = 12_582_912.0;
        // keeps NaN, unlike f32::max
        let x = if self < -87.0 { -87.0 } else { self };
        let shifted = x * LOG2E + SHIFTER;
        let n = shifted - SHIFTER;
        let r = (x - n * LN2_HI) - n * LN2_LO;
        let p = 1.987_569_2e-4;
        let p = p * r + 1.398_2e-3;
        let p = p * r + 8.333_452e-3;
        let p = p * r + 4.166_579_6e-2;
        let p = p * r + 1.666_666_5e-1;
        let p = p * r + 5.000_000_1e-1;
        let p = p * (r * r) + r + 1.0;
        let bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(127) << 23;
        p * f32::from_bits(bits)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "extents must be >= 1, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be >= 1, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each({
            let mut f = f;
            move |(i, v)| *v = f(i)
        });
        t
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::dim("index", index, &self.shape));
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return Err(Error::Index {
                    index: i,
                    bound: extent,
                });
            }
            flat = flat * extent + i;
        }
        Ok(flat)
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.data.len() {
            return Err(Error::Index {
                index: flat,
                bound: self.data.len(),
            });
        }
        let mut index = vec![0; self.shape.len()];
        for (slot, &extent) in index.iter_mut().zip(&self.shape).rev() {
            *slot = flat % extent;
            flat /= extent;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); self.data.len()];
        transpose_into(rows, cols, &self.data, &mut out);
        Tensor::new(vec![cols, rows], out)
    }

    /// `i`-th row of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Element type conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Largest absolute value.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(op, &self.shape, &[0, 0])),
        }
    }
}

/// `c = a · b` for rank-2 tensors. Each output entry is the sum over the inner
/// index in ascending order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;

/// Row-major `c[m×n] = a[m×k] · b[k×n]`.
///
/// Blocked over rows and columns only; every `c[i][j]` is accumulated from
/// zero with `t` ascending, which makes it bit-identical to a plain dot
/// product of row `i` with column `j`.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    c.fill(T::zero());
    if k == 0 {
        return;
    }
    if m < MR {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (t, &av) in arow.iter().enumerate() {
                let brow = &b[t * n..(t + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
        return;
    }

    // Full-width column strips are read in place; only the ragged tail is
    // packed. The inner dimension is split into blocks that stay in cache;
    // each block continues the running sums in `c`, so the order of terms
    // is unchanged.
    let full = n / NR * NR;
    let tail = n - full;
    let mut tail_pack = vec![T::zero(); if tail > 0 { KC.min(k) * NR } else { 0 }];
    let mut apack = vec![T::zero(); KC.min(k) * MR];
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        let first = k0 == 0;
        let bblock = &b[k0 * n..(k0 + kc) * n];
        if tail > 0 {
            for t in 0..kc {
                tail_pack[t * NR..t * NR + tail].copy_from_slice(&bblock[t * n + full..(t + 1) * n]);
            }
        }
        for i0 in (0..m).step_by(MR) {
            let mr = MR.min(m - i0);
            if mr < MR {
                apack.fill(T::zero());
            }
            for r in 0..mr {
                let row = &a[(i0 + r) * k + k0..(i0 + r) * k + k0 + kc];
                for (t, &v) in row.iter().enumerate() {
                    apack[t * MR + r] = v;
                }
            }
            let apack = &apack[..kc * MR];
            for j0 in (0..full).step_by(NR) {
                let mut acc = [[T::zero(); NR]; MR];
                if !first {
                    for (r, acc_row) in acc.iter_mut().enumerate().take(mr) {
                        let start = (i0 + r) * n + j0;
                        acc_row.copy_from_slice(&c[start..start + NR]);
                    }
                }
                micro_kernel(&mut acc, apack, &bblock[j0..], n, kc);
                for (r, acc_row) in acc.iter().enumerate().take(mr) {
                    let start = (i0 + r) * n + j0;
                    c[start..start + NR].copy_from_slice(acc_row);
                }
            }
            if tail > 0 {
                let mut acc = [[T::zero(); NR]; MR];
                if !first {
                    for (r, acc_row) in acc.iter_mut().enumerate().take(mr) {
                        let start = (i0 + r) * n + full;
                        acc_row[..tail].copy_from_slice(&c[start..start + tail]);
                    }
                }
                micro_kernel(&mut acc, apack, &tail_pack, NR, kc);
                for (r, acc_row) in acc.iter().enumerate().take(mr) {
                    let start = (i0 + r) * n + full;
                    c[start..start + tail].copy_from_slice(&acc_row[..tail]);
                }
            }
        }
    }
}

/// Adds `apack · b` to an `MR×NR` block, where row `t` of the strip starts at `b[t * ld]`.
#[inline(always)]
fn micro_kernel<T: Scalar>(acc: &mut [[T; NR]; MR], apack: &[T], b: &[T], ld: usize, k: usize) {
    for (t, a) in apack.chunks_exact(MR).enumerate().take(k) {
        let brow: &[T; NR] = b[t * ld..t * ld + NR].try_into().expect("strip width");
        for r in 0..MR {
            let av = a[r];
            for j in 0..NR {
                acc[r][j] = acc[r][j] + av * brow[j];
            }
        }
    }
}

pub(crate) fn transpose_into<T: Copy>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    const B: usize = 16;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral output extent: ({input} + 2*{padding} - {kernel}) / {stride} + 1"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: conv_output_extent(h, kh, stride, padding)?,
            out_w: conv_output_extent(w, kw, stride, padding)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfold one `C×H×W` image into `[C·kh·kw × H'·W']`.
    pub fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let row = (ci * self.kh + r) * self.kw + s;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + r) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + s) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-add columns back into an image.
    pub fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        image.fill(T::zero());
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let row = (ci * self.kh + r) * self.kw + s;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + r) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + s) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_kernels<T: Scalar>(kernels: &Tensor<T>, c_in: usize) -> Result<(usize, usize, usize)> {
    match kernels.shape()[..] {
        [c_out, k_in, kh, kw] if k_in == c_in => Ok((c_out, kh, kw)),
        _ => Err(Error::dim("conv2d kernels", kernels.shape(), &[0, c_in, 0, 0])),
    }
}

/// Cross-correlation of one `C_in×H×W` image with `C_out×C_in×kh×kw` kernels.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = input.shape()[..] else {
        return Err(Error::dim("conv2d input", input.shape(), &[0, 0, 0]));
    };
    let batched = Tensor::new(vec![1, c, h, w], input.data().to_vec())?;
    let out = conv2d_batch(&batched, kernels, stride, padding)?;
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape)
}

/// [`conv2d`] over a `B×C_in×H×W` batch via im2col + matmul.
pub fn conv2d_batch<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [batch, c_in, h, w] = input.shape()[..] else {
        return Err(Error::dim("conv2d input", input.shape(), &[0, 0, 0, 0]));
    };
    let (c_out, kh, kw) = check_kernels(kernels, c_in)?;
    let geo = ConvGeometry::new(c_in, h, w, kh, kw, stride, padding)?;
    let p = geo.positions();
    let mut out = vec![T::zero(); batch * c_out * p];
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); geo.patch_len() * p]
    };
    let image_len = c_in * h * w;
    for b in 0..batch {
        let image = &input.data()[b * image_len..(b + 1) * image_len];
        let dst = &mut out[b * c_out * p..(b + 1) * c_out * p];
        if geo.is_pointwise() {
            gemm(c_out, geo.patch_len(), p, kernels.data(), image, dst);
        } else {
            geo.im2col(image, &mut col);
            gemm(c_out, geo.patch_len(), p, kernels.data(), &col, dst);
        }
    }
    Tensor::new(vec![batch, c_out, geo.out_h, geo.out_w], out)
}

/// Per-column population mean and variance (divide by the batch size) of a
/// `batch × d` tensor.
pub fn reduce_mean_var<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, d) = x.dims2("reduce_mean_var")?;
    let n = T::from_usize(batch);
    let mut mean = vec![T::zero(); d];
    for r in 0..batch {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); d];
    for r in 0..batch {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let dev = v - m;
            *s += dev * dev;
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((Tensor::from_vec(mean)?, Tensor::from_vec(var)?))
}
