//! Dense rank-4 tensors and the paired forward/backward primitives the
//! network is built from. Everything is f64 and pure; backward passes are
//! hand-derived per primitive rather than generated by an autodiff graph.

use crate::error::{Error, Result};
use rand::Rng;
use std::io::{Read, Write};

/// Dense rank-4 array, canonical layout (W fastest-varying, T slowest).
/// Dimensions: width x height x channels x time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub t: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(w: usize, h: usize, c: usize, t: usize) -> Self {
        assert!(w >= 1 && h >= 1 && c >= 1 && t >= 1, "all dims must be >= 1");
        Tensor4 {
            w,
            h,
            c,
            t,
            data: vec![0.0; w * h * c * t],
        }
    }

    pub fn from_vec(w: usize, h: usize, c: usize, t: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != w * h * c * t {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} != {}x{}x{}x{}",
                data.len(),
                w,
                h,
                c,
                t
            )));
        }
        Ok(Tensor4 { w, h, c, t, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.w, self.h, self.c, self.t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, x: usize, y: usize, c: usize, t: usize) -> usize {
        debug_assert!(x < self.w && y < self.h && c < self.c && t < self.t);
        ((t * self.c + c) * self.h + y) * self.w + x
    }

    #[inline(always)]
    pub fn get(&self, x: usize, y: usize, c: usize, t: usize) -> f64 {
        self.data[self.idx(x, y, c, t)]
    }

    #[inline(always)]
    pub fn set(&mut self, x: usize, y: usize, c: usize, t: usize, v: f64) {
        let i = self.idx(x, y, c, t);
        self.data[i] = v;
    }

    /// Extract the time slice `t` as a W x H x C x 1 tensor.
    pub fn time_slice(&self, t: usize) -> Tensor4 {
        assert!(t < self.t, "time index out of range");
        let n = self.w * self.h * self.c;
        Tensor4 {
            w: self.w,
            h: self.h,
            c: self.c,
            t: 1,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    /// Zero-pad spatially to (w, h), original content centered (for odd
    /// total padding the extra row/column goes on the right/bottom).
    pub fn pad_spatial_to(&self, w: usize, h: usize) -> Result<Tensor4> {
        if w < self.w || h < self.h {
            return Err(Error::ShapeMismatch(format!(
                "cannot pad {}x{} down to {}x{}",
                self.w, self.h, w, h
            )));
        }
        let (ox, oy) = ((w - self.w) / 2, (h - self.h) / 2);
        let mut out = Tensor4::zeros(w, h, self.c, self.t);
        for t in 0..self.t {
            for c in 0..self.c {
                for y in 0..self.h {
                    let src = self.idx(0, y, c, t);
                    let dst = out.idx(ox, y + oy, c, t);
                    out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of `pad_spatial_to`: crop the centered (w, h) window.
    pub fn crop_spatial_to(&self, w: usize, h: usize) -> Result<Tensor4> {
        if w > self.w || h > self.h {
            return Err(Error::ShapeMismatch(format!(
                "cannot crop {}x{} up to {}x{}",
                self.w, self.h, w, h
            )));
        }
        let (ox, oy) = ((self.w - w) / 2, (self.h - h) / 2);
        let mut out = Tensor4::zeros(w, h, self.c, self.t);
        for t in 0..self.t {
            for c in 0..self.c {
                for y in 0..h {
                    let src = self.idx(ox, y + oy, c, t);
                    let dst = out.idx(0, y, c, t);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rank-5 convolution kernel: kw x kh x c_in x c_out x kt, kw fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel5 {
    pub kw: usize,
    pub kh: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub data: Vec<f64>,
}

impl Kernel5 {
    pub fn zeros(kw: usize, kh: usize, c_in: usize, c_out: usize, kt: usize) -> Self {
        assert!(kt >= 1);
        Kernel5 {
            kw,
            kh,
            c_in,
            c_out,
            kt,
            data: vec![0.0; kw * kh * c_in * c_out * kt],
        }
    }

    pub fn from_vec(
        kw: usize,
        kh: usize,
        c_in: usize,
        c_out: usize,
        kt: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != kw * kh * c_in * c_out * kt {
            return Err(Error::ShapeMismatch(format!(
                "kernel data length {} != {}x{}x{}x{}x{}",
                data.len(),
                kw,
                kh,
                c_in,
                c_out,
                kt
            )));
        }
        Ok(Kernel5 {
            kw,
            kh,
            c_in,
            c_out,
            kt,
            data,
        })
    }

    #[inline(always)]
    pub fn idx(&self, kx: usize, ky: usize, ci: usize, co: usize, dt: usize) -> usize {
        debug_assert!(
            kx < self.kw && ky < self.kh && ci < self.c_in && co < self.c_out && dt < self.kt
        );
        (((dt * self.c_out + co) * self.c_in + ci) * self.kh + ky) * self.kw + kx
    }
}

/// Fully-connected layer weights: `rows x cols` matrix plus bias of length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>, // row-major
    pub bias: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseWeights {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut d = DenseWeights::zeros(n, n);
        for i in 0..n {
            d.weights[i * n + i] = 1.0;
        }
        d
    }
}

/// Output shape of a valid (unpadded) spatio-temporal convolution.
/// Temporal stride is fixed to 1.
pub fn stconv_output_dims(
    input: (usize, usize, usize, usize),
    kernel: (usize, usize, usize, usize, usize),
    stride: (usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    let (w, h, c, t) = input;
    let (kw, kh, c_in, c_out, kt) = kernel;
    let (sw, sh) = stride;
    if c_in != c {
        return Err(Error::ShapeMismatch(format!(
            "kernel c_in {c_in} != input channels {c}"
        )));
    }
    if kw > w || kh > h || kt > t {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kw}x{kh}x..x{kt} exceeds input {w}x{h}x..x{t}"
        )));
    }
    if sw == 0 || sh == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    Ok(((w - kw) / sw + 1, (h - kh) / sh + 1, c_out, t - kt + 1))
}

/// Valid spatio-temporal convolution: the kernel shifts over both spatial
/// dimensions (with stride) and the time axis (stride 1), no padding anywhere.
pub fn stconv_forward(input: &Tensor4, kernel: &Kernel5, stride: (usize, usize)) -> Result<Tensor4> {
    let (ow, oh, oc, ot) = stconv_output_dims(
        input.dims(),
        (kernel.kw, kernel.kh, kernel.c_in, kernel.c_out, kernel.kt),
        stride,
    )?;
    let (sw, sh) = stride;
    let mut out = Tensor4::zeros(ow, oh, oc, ot);
    for t_out in 0..ot {
        for co in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dt in 0..kernel.kt {
                        for ci in 0..kernel.c_in {
                            for ky in 0..kernel.kh {
                                let in_base = input.idx(ox * sw, oy * sh + ky, ci, t_out + dt);
                                let k_base = kernel.idx(0, ky, ci, co, dt);
                                for kx in 0..kernel.kw {
                                    acc += input.data[in_base + kx] * kernel.data[k_base + kx];
                                }
                            }
                        }
                    }
                    let o = out.idx(ox, oy, co, t_out);
                    out.data[o] = acc;
                }
            }
        }
    }
    debug_assert!(out.all_finite(), "stconv_forward produced non-finite output");
    Ok(out)
}

/// Gradients of `<grad_out, stconv_forward(input, kernel)>` w.r.t. input and kernel.
pub fn stconv_backward(
    input: &Tensor4,
    kernel: &Kernel5,
    stride: (usize, usize),
    grad_out: &Tensor4,
) -> Result<(Tensor4, Kernel5)> {
    let expect = stconv_output_dims(
        input.dims(),
        (kernel.kw, kernel.kh, kernel.c_in, kernel.c_out, kernel.kt),
        stride,
    )?;
    if grad_out.dims() != expect {
        return Err(Error::ShapeMismatch(format!(
            "grad_out dims {:?} != forward output dims {:?}",
            grad_out.dims(),
            expect
        )));
    }
    let (sw, sh) = stride;
    let (ow, oh, oc, ot) = expect;
    let mut grad_input = Tensor4::zeros(input.w, input.h, input.c, input.t);
    let mut grad_kernel = Kernel5::zeros(kernel.kw, kernel.kh, kernel.c_in, kernel.c_out, kernel.kt);
    for t_out in 0..ot {
        for co in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data[grad_out.idx(ox, oy, co, t_out)];
                    if g == 0.0 {
                        continue;
                    }
                    for dt in 0..kernel.kt {
                        for ci in 0..kernel.c_in {
                            for ky in 0..kernel.kh {
                                let in_base = input.idx(ox * sw, oy * sh + ky, ci, t_out + dt);
                                let k_base = kernel.idx(0, ky, ci, co, dt);
                                for kx in 0..kernel.kw {
                                    grad_input.data[in_base + kx] += g * kernel.data[k_base + kx];
                                    grad_kernel.data[k_base + kx] += g * input.data[in_base + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_kernel))
}

/// Elementwise nonlinearity kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseOp {
    Sigmoid,
    Tanh,
    Relu,
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PointwiseOp {
    #[inline(always)]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            PointwiseOp::Sigmoid => sigmoid(x),
            PointwiseOp::Tanh => x.tanh(),
            PointwiseOp::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed in terms of the forward *output* y.
    #[inline(always)]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            PointwiseOp::Sigmoid => y * (1.0 - y),
            PointwiseOp::Tanh => 1.0 - y * y,
            PointwiseOp::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn pointwise_forward(op: PointwiseOp, x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = op.apply(*v);
    }
    out
}

/// Backward of a pointwise op given the forward output `y`.
pub fn pointwise_backward(op: PointwiseOp, y: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    if y.dims() != grad_out.dims() {
        return Err(Error::ShapeMismatch("pointwise backward dims".into()));
    }
    let mut grad = grad_out.clone();
    for (g, &yv) in grad.data.iter_mut().zip(y.data.iter()) {
        *g *= op.derivative_from_output(yv);
    }
    Ok(grad)
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "hadamard dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data.iter_mut().zip(b.data.iter()) {
        *o *= bv;
    }
    Ok(out)
}

/// y = W x + b
pub fn dense_forward(w: &DenseWeights, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(Error::ShapeMismatch(format!(
            "dense input length {} != cols {}",
            x.len(),
            w.cols
        )));
    }
    let mut y = w.bias.clone();
    for r in 0..w.rows {
        let row = &w.weights[r * w.cols..(r + 1) * w.cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        y[r] += acc;
    }
    Ok(y)
}

/// Gradients of `<grad_out, W x + b>` w.r.t. weights, bias and input.
pub fn dense_backward(
    w: &DenseWeights,
    x: &[f64],
    grad_out: &[f64],
) -> Result<(DenseWeights, Vec<f64>)> {
    if x.len() != w.cols || grad_out.len() != w.rows {
        return Err(Error::ShapeMismatch("dense backward dims".into()));
    }
    let mut grad_w = DenseWeights::zeros(w.rows, w.cols);
    let mut grad_x = vec![0.0; w.cols];
    for r in 0..w.rows {
        let g = grad_out[r];
        grad_w.bias[r] = g;
        if g == 0.0 {
            continue;
        }
        let row = &w.weights[r * w.cols..(r + 1) * w.cols];
        let grow = &mut grad_w.weights[r * w.cols..(r + 1) * w.cols];
        for c in 0..w.cols {
            grow[c] = g * x[c];
            grad_x[c] += g * row[c];
        }
    }
    Ok((grad_w, grad_x))
}

/// Inverted dropout. In training mode each element is kept with probability
/// `keep_prob` and scaled by 1/keep_prob; the sampled mask is returned so
/// the backward pass is exact. Inference mode is a pass-through.
pub fn dropout_apply<R: Rng>(
    x: &Tensor4,
    keep_prob: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor4, Vec<f64>)> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!("invalid keep_prob {keep_prob}")));
    }
    if !training || keep_prob == 1.0 {
        return Ok((x.clone(), vec![1.0; x.len()]));
    }
    let mut mask = vec![0.0; x.len()];
    let scale = 1.0 / keep_prob;
    let mut out = x.clone();
    for (m, o) in mask.iter_mut().zip(out.data.iter_mut()) {
        if rng.gen::<f64>() < keep_prob {
            *m = scale;
            *o *= scale;
        } else {
            *m = 0.0;
            *o = 0.0;
        }
    }
    Ok((out, mask))
}

/// Apply a previously-sampled dropout mask (used by backward and by
/// finite-difference re-evaluation with frozen masks).
pub fn dropout_with_mask(x: &Tensor4, mask: &[f64]) -> Result<Tensor4> {
    if mask.len() != x.len() {
        return Err(Error::ShapeMismatch("dropout mask length".into()));
    }
    let mut out = x.clone();
    for (o, &m) in out.data.iter_mut().zip(mask.iter()) {
        *o *= m;
    }
    Ok(out)
}

const TENSOR_MAGIC: &[u8; 4] = b"DST4";

/// Serialize a tensor: magic "DST4", four u32-LE dims (W,H,C,T), then
/// W*H*C*T f32-LE values in canonical layout.
pub fn write_tensor<W: Write>(t: &Tensor4, out: &mut W) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    for d in [t.w, t.h, t.c, t.t] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(inp: &mut R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("tensor header: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Data("bad tensor magic".into()));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        inp.read_exact(&mut b)
            .map_err(|e| Error::Data(format!("tensor dims: {e}")))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 4];
        inp.read_exact(&mut b)
            .map_err(|e| Error::Data(format!("tensor payload: {e}")))?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Tensor4::from_vec(dims[0], dims[1], dims[2], dims[3], data)
}
