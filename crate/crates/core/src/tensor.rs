//! Dense f64 tensors and the handful of layer primitives the CNN is built from.
//!
//! There is no autodiff graph. Every primitive has a forward function and a
//! matching `*_grad` function; the model module chains them by hand.

use crate::error::{Error, Result};

/// Row-major dense array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(op, shape, &self.shape));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// 3x3 (odd, square) convolution kernels `[out_ch, in_ch, k, k]` plus bias `[out_ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvLayerParams {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        let s = kernels.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernels must be [out, in, k, k] with odd k, got {s:?}"
            )));
        }
        bias.expect_shape("conv bias", &[s[0]])?;
        Ok(ConvLayerParams { kernels, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvLayerParams {
            kernels: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

/// Fully connected layer: `weight [out_dim, in_dim]`, `bias [out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayerParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dense weight must be [out, in], got {s:?}"
            )));
        }
        bias.expect_shape("dense bias", &[s[0]])?;
        Ok(DenseLayerParams { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayerParams {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn conv_dims(input: &Tensor, params: &ConvLayerParams) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "conv2d input must be [C, H, W], got {s:?}"
        )));
    }
    if s[0] != params.in_channels() {
        return Err(Error::shape(
            "conv2d input channels",
            &[params.in_channels()],
            &[s[0]],
        ));
    }
    Ok((s[0], s[1], s[2]))
}

/// Valid output index range `[lo, hi)` for a kernel tap offset `d` on an axis of length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Stride-1 cross-correlation with zero "same" padding (`k / 2`) plus bias.
///
/// Each output element is accumulated as `bias` followed by the taps in
/// `(in_ch, ky, kx)` order, skipping taps that fall in the padding.
pub fn conv2d(input: &Tensor, params: &ConvLayerParams) -> Result<Tensor> {
    let (c_in, h, w) = conv_dims(input, params)?;
    let c_out = params.out_channels();
    let k = params.kernel_size();
    let pad = (k / 2) as isize;
    let plane = h * w;
    let x = input.data();
    let kern = params.kernels.data();
    let mut out = vec![0.0; c_out * plane];

    for co in 0..c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(params.bias.data()[co]);
        for ci in 0..c_in {
            let in_plane = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(dx, w);
                    let wgt = kern[((co * c_in + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let src = &in_plane
                            [(src_row as isize + x0 as isize + dx) as usize..][..x1 - x0];
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        for (o, i) in dst.iter_mut().zip(src) {
                            *o += wgt * i;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// Gradients of [`conv2d`] with respect to its input and parameters.
pub fn conv2d_grad(
    input: &Tensor,
    params: &ConvLayerParams,
    upstream: &Tensor,
) -> Result<(Tensor, ConvLayerParams)> {
    let grad_input = conv2d_grad_input(input, params, upstream)?;
    let grad_params = conv2d_grad_params(input, params, upstream)?;
    Ok((grad_input, grad_params))
}

pub(crate) fn conv2d_grad_input(
    input: &Tensor,
    params: &ConvLayerParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (c_in, h, w) = conv_dims(input, params)?;
    let c_out = params.out_channels();
    upstream.expect_shape("conv2d_grad upstream", &[c_out, h, w])?;
    let k = params.kernel_size();
    let pad = (k / 2) as isize;
    let plane = h * w;
    let up = upstream.data();
    let kern = params.kernels.data();
    let mut gin = vec![0.0; c_in * plane];

    for co in 0..c_out {
        let up_plane = &up[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let g_plane = &mut gin[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(dx, w);
                    let wgt = kern[((co * c_in + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let dst_start = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                        let dst = &mut g_plane[dst_start as usize..][..x1 - x0];
                        let src = &up_plane[y * w + x0..y * w + x1];
                        for (g, u) in dst.iter_mut().zip(src) {
                            *g += wgt * u;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_in, h, w], gin)
}

pub(crate) fn conv2d_grad_params(
    input: &Tensor,
    params: &ConvLayerParams,
    upstream: &Tensor,
) -> Result<ConvLayerParams> {
    let (c_in, h, w) = conv_dims(input, params)?;
    let c_out = params.out_channels();
    upstream.expect_shape("conv2d_grad upstream", &[c_out, h, w])?;
    let k = params.kernel_size();
    let pad = (k / 2) as isize;
    let plane = h * w;
    let x = input.data();
    let up = upstream.data();
    let mut gk = vec![0.0; c_out * c_in * k * k];
    let mut gb = vec![0.0; c_out];

    for co in 0..c_out {
        let up_plane = &up[co * plane..(co + 1) * plane];
        gb[co] = up_plane.iter().sum();
        for ci in 0..c_in {
            let in_plane = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = tap_range(dx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_start = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                        let src = &in_plane[src_start as usize..][..x1 - x0];
                        let u = &up_plane[y * w + x0..y * w + x1];
                        acc += u.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gk[((co * c_in + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Ok(ConvLayerParams {
        kernels: Tensor::new(vec![c_out, c_in, k, k], gk)?,
        bias: Tensor::new(vec![c_out], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes `upstream` where `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_grad(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape("relu_grad upstream", input.shape())?;
    let data = input
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape.clone(),
        data,
    })
}

/// Flat input index of the maximum of every 2x2 window, one per output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices(pub Vec<usize>);

/// 2x2 non-overlapping max pooling. Ties go to the first position in row-major
/// scan order within the window.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2 input must be [C, H, W], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, PoolIndices(idx)))
}

/// Routes each upstream value to its window's recorded argmax.
pub fn maxpool2_grad(
    input_shape: &[usize],
    indices: &PoolIndices,
    upstream: &Tensor,
) -> Result<Tensor> {
    if input_shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2_grad input shape must be [C, H, W], got {input_shape:?}"
        )));
    }
    let out_shape = [input_shape[0], input_shape[1] / 2, input_shape[2] / 2];
    upstream.expect_shape("maxpool2_grad upstream", &out_shape)?;
    if indices.0.len() != upstream.len() {
        return Err(Error::shape(
            "maxpool2_grad indices",
            &[upstream.len()],
            &[indices.0.len()],
        ));
    }
    let mut g = Tensor::zeros(input_shape);
    for (&i, &u) in indices.0.iter().zip(upstream.data()) {
        g.data[i] += u;
    }
    Ok(g)
}

/// `weight · input + bias`.
pub fn dense(input: &Tensor, params: &DenseLayerParams) -> Result<Tensor> {
    let (out_dim, in_dim) = (params.out_dim(), params.in_dim());
    if input.len() != in_dim {
        return Err(Error::shape("dense input", &[in_dim], input.shape()));
    }
    let x = input.data();
    let w = params.weight.data();
    let out = (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + params.bias.data()[o]
        })
        .collect();
    Tensor::new(vec![out_dim], out)
}

/// Gradients of [`dense`]: `Wᵀ·g` for the input, `g ⊗ x` for the weight, `g` for the bias.
pub fn dense_grad(
    input: &Tensor,
    params: &DenseLayerParams,
    upstream: &Tensor,
) -> Result<(Tensor, DenseLayerParams)> {
    let grad_input = dense_grad_input(input, params, upstream)?;
    let (out_dim, in_dim) = (params.out_dim(), params.in_dim());
    let x = input.data();
    let g = upstream.data();
    let mut gw = vec![0.0; out_dim * in_dim];
    for (o, row) in gw.chunks_exact_mut(in_dim).enumerate() {
        for (r, xi) in row.iter_mut().zip(x) {
            *r = g[o] * xi;
        }
    }
    Ok((
        grad_input,
        DenseLayerParams {
            weight: Tensor::new(vec![out_dim, in_dim], gw)?,
            bias: upstream.clone().reshape(&[out_dim])?,
        },
    ))
}

pub(crate) fn dense_grad_input(
    input: &Tensor,
    params: &DenseLayerParams,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (out_dim, in_dim) = (params.out_dim(), params.in_dim());
    if input.len() != in_dim {
        return Err(Error::shape("dense_grad input", &[in_dim], input.shape()));
    }
    if upstream.len() != out_dim {
        return Err(Error::shape(
            "dense_grad upstream",
            &[out_dim],
            upstream.shape(),
        ));
    }
    let w = params.weight.data();
    let g = upstream.data();
    let mut gin = vec![0.0; in_dim];
    for (o, &go) in g.iter().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (a, wi) in gin.iter_mut().zip(row) {
            *a += go * wi;
        }
    }
    Tensor::new(input.shape().to_vec(), gin)
}

/// Numerically stable softmax over a logit vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Tensor {
        shape: logits.shape.clone(),
        data: e.into_iter().map(|v| v / s).collect(),
    }
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let c = logits.len();
    if label >= c {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let z = logits.data();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let loss = sum_exp.ln() + m - z[label];
    let mut grad = softmax(logits);
    grad.data[label] -= 1.0;
    Ok((loss, grad))
}
