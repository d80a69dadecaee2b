//! Dense row-major tensors and the convolution / pooling kernels behind the
//! graph operations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(
                "Tensor::new",
                format!("dims must be a non-empty list of positive integers, got {dims:?}"),
            ));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength { dims, len: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::ZERO)
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "invalid dims {dims:?}");
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor holding `values`.
    pub fn vector(values: &[T]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.dims, dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Dot product over two equal-length slices.
///
/// Eight interleaved partial sums are combined in a fixed order, so the
/// result is reproducible while still letting the compiler vectorise.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Output side of a convolution or pooling window, or `None` if the window
/// never fits.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` for which `ox * stride + offset - pad` lands
/// inside `0..input`.
#[inline]
fn valid_range(out: usize, input: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = ox*stride + offset - pad >= 0  <=>  ox >= ceil((pad - offset) / stride)
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    // ix <= input - 1  <=>  ox <= (input - 1 + pad - offset) / stride
    let hi = if input + pad > offset {
        ((input - 1 + pad - offset) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [C_in, H, W], got {:?}", input.dims()),
        ));
    }
    if kernel.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [C_out, C_in, kh, kw], got {:?}", kernel.dims()),
        ));
    }
    let (c_in, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (c_out, kc, kh, kw) = (kernel.dims[0], kernel.dims[1], kernel.dims[2], kernel.dims[3]);
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel expects {kc} input channels but input has {c_in} (input {:?}, kernel {:?})",
                input.dims(),
                kernel.dims()
            ),
        ));
    }
    if bias.dims() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{c_out}], got {:?}", bias.dims()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    let oh = conv_output_len(h, kh, stride, pad);
    let ow = conv_output_len(w, kw, stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {:?} with pad {pad} does not fit input {:?}",
                kernel.dims(),
                input.dims()
            ),
        ));
    };
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
    })
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Tensor<T> {
    let plane = g.oh * g.ow;
    let mut out = vec![T::ZERO; g.c_out * plane];
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..g.c_in {
            let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = kernel[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let n = ox_hi - ox_lo;
                            axpy(wv, &in_row[ix0..ix0 + n], &mut out_row[ox_lo..ox_hi]);
                        } else {
                            for (k, ox) in (ox_lo..ox_hi).enumerate() {
                                out_row[ox] += wv * in_row[ix0 + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor {
        dims: vec![g.c_out, g.oh, g.ow],
        data: out,
    }
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`. The input
/// gradient is only formed when `need_input` is set.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.oh * g.ow;
    let mut d_kernel = vec![T::ZERO; kernel.len()];
    let mut d_bias = vec![T::ZERO; g.c_out];
    let mut d_input = need_input.then(|| vec![T::ZERO; input.len()]);
    let mut row_buf = vec![T::ZERO; g.ow];

    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        let mut b = T::ZERO;
        for &v in go_plane {
            b += v;
        }
        d_bias[co] = b;
        for ci in 0..g.c_in {
            let in_off = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kidx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = kernel[kidx];
                    let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let n = ox_hi - ox_lo;
                    let ix0 = ox_lo * g.stride + kx - g.pad;
                    let mut acc = T::ZERO;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_start = in_off + iy as usize * g.w;
                        let go_row = &go_plane[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                        if g.stride == 1 {
                            let in_seg = &input[row_start + ix0..row_start + ix0 + n];
                            acc += dot(go_row, in_seg);
                            if let Some(di) = d_input.as_mut() {
                                axpy(wv, go_row, &mut di[row_start + ix0..row_start + ix0 + n]);
                            }
                        } else {
                            for k in 0..n {
                                row_buf[k] = input[row_start + ix0 + k * g.stride];
                            }
                            acc += dot(go_row, &row_buf[..n]);
                            if let Some(di) = d_input.as_mut() {
                                for k in 0..n {
                                    di[row_start + ix0 + k * g.stride] += wv * go_row[k];
                                }
                            }
                        }
                    }
                    d_kernel[kidx] = acc;
                }
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output element, the flat index of the input element it came from. On
/// ties the first element in row-major window order wins.
pub(crate) fn maxpool2d_forward<T: Real>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("kernel and stride must be at least 1, got k={k}, stride={stride}"),
        ));
    }
    if input.rank() != 3 {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be [C, H, W], got {:?}", input.dims()),
        ));
    }
    let (c, h, w) = (input.dims[0], input.dims[1], input.dims[2]);
    let (Some(oh), Some(ow)) = (conv_output_len(h, k, stride, 0), conv_output_len(w, k, stride, 0)) else {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {k}x{k} does not fit input {h}x{w}"),
        ));
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (oy * stride) * w + ox * stride;
                let mut best = input.data[best_idx];
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        let v = input.data[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor {
            dims: vec![c, oh, ow],
            data: out,
        },
        argmax,
    ))
}
