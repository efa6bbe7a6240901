//! Discrete Fourier transforms, spectrum centering and the centered low-pass filter.
//!
//! Convention: the forward transform is unnormalized, `X[k] = Σ x[n]·e^{-2πikn/N}`,
//! and the inverse carries the `1/N` (per axis) factor.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Real and imaginary planes of a transform, always of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        im.expect_shape("spectrum imaginary plane", re.shape())?;
        Ok(Spectrum { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// `|X[k]|` per coefficient.
    pub fn magnitude(&self) -> Tensor {
        let data = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(r, i)| r.hypot(*i))
            .collect();
        Tensor::new(self.re.shape().to_vec(), data).expect("same shape as re")
    }

    fn from_complex(shape: &[usize], values: &[Complex<f64>]) -> Self {
        Spectrum {
            re: Tensor::from_fn(shape, |i| values[i].re),
            im: Tensor::from_fn(shape, |i| values[i].im),
        }
    }

    fn to_complex(&self) -> Vec<Complex<f64>> {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| Complex::new(r, i))
            .collect()
    }
}

/// Side length of a square image plane for the low-pass filter; `1 ≤ b ≤ N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LpfBandwidth(usize);

impl LpfBandwidth {
    pub fn new(b: usize, side: usize) -> Result<Self> {
        if b == 0 || b > side {
            return Err(Error::InvalidArgument(format!(
                "LPF bandwidth {b} outside 1..={side}"
            )));
        }
        Ok(LpfBandwidth(b))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Direct O(N²) DFT of a real vector. Logit vectors are short, so this is the
/// path the frequency loss uses.
pub fn dft1d(signal: &[f64]) -> Spectrum {
    let n = signal.len();
    assert!(n > 0, "dft1d of an empty signal");
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (t, &x) in signal.iter().enumerate() {
            let angle = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
            re[k] += x * angle.cos();
            im[k] += x * angle.sin();
        }
    }
    Spectrum {
        re: Tensor::from_vec(re),
        im: Tensor::from_vec(im),
    }
}

/// Transpose of the real-input DFT map: `g[n] = Σ_k gre[k]·cos(2πkn/N) + gim[k]·sin(2πkn/N)`.
///
/// If `L` is a scalar function of `(Re X, Im X)` with `X = dft1d(x)`, then
/// `dft1d_adjoint(∂L/∂Re X, ∂L/∂Im X)` is `∂L/∂x`.
pub fn dft1d_adjoint(grad_re: &[f64], grad_im: &[f64]) -> Result<Vec<f64>> {
    if grad_re.len() != grad_im.len() {
        return Err(Error::shape(
            "dft1d_adjoint",
            &[grad_re.len()],
            &[grad_im.len()],
        ));
    }
    let n = grad_re.len();
    let mut g = vec![0.0; n];
    for (t, gt) in g.iter_mut().enumerate() {
        for k in 0..n {
            let angle = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            // d(Im X[k])/dx[t] = sin(-angle) = -sin(angle)
            *gt += grad_re[k] * angle.cos() - grad_im[k] * angle.sin();
        }
    }
    Ok(g)
}

fn square_side(plane: &Tensor, op: &'static str) -> Result<usize> {
    match plane.shape() {
        [h, w] if h == w => Ok(*h),
        s => Err(Error::InvalidArgument(format!(
            "{op} expects a square [N, N] plane, got {s:?}"
        ))),
    }
}

fn transform_2d(n: usize, buf: &mut [Complex<f64>], direction: FftDirection) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft(n, direction);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::default(); n];
    for c in 0..n {
        for (r, v) in col.iter_mut().enumerate() {
            *v = buf[r * n + c];
        }
        fft.process(&mut col);
        for (r, v) in col.iter().enumerate() {
            buf[r * n + c] = *v;
        }
    }
}

/// Unnormalized 2D DFT of a square real plane (rows, then columns).
pub fn fft2d(plane: &Tensor) -> Result<Spectrum> {
    let n = square_side(plane, "fft2d")?;
    let mut buf: Vec<Complex<f64>> = plane.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform_2d(n, &mut buf, FftDirection::Forward);
    Ok(Spectrum::from_complex(plane.shape(), &buf))
}

/// Inverse of [`fft2d`]. Returns the real part and the largest absolute
/// imaginary residue, which is round-off for a conjugate-symmetric spectrum.
pub fn ifft2d(spectrum: &Spectrum) -> Result<(Tensor, f64)> {
    let n = square_side(&spectrum.re, "ifft2d")?;
    let mut buf = spectrum.to_complex();
    transform_2d(n, &mut buf, FftDirection::Inverse);
    let norm = 1.0 / (n * n) as f64;
    let residue = buf.iter().fold(0.0f64, |m, c| m.max((c.im * norm).abs()));
    let real = Tensor::from_fn(spectrum.shape(), |i| buf[i].re * norm);
    Ok((real, residue))
}

fn roll2d(t: &Tensor, shift_rows: usize, shift_cols: usize) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = Tensor::zeros(t.shape());
    let dst = out.data_mut();
    for r in 0..h {
        let nr = (r + shift_rows) % h;
        for c in 0..w {
            dst[nr * w + (c + shift_cols) % w] = src[r * w + c];
        }
    }
    out
}

fn check_2d(spectrum: &Spectrum, op: &'static str) -> Result<(usize, usize)> {
    match spectrum.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidArgument(format!(
            "{op} expects 2D planes, got {s:?}"
        ))),
    }
}

/// Moves the zero-frequency bin to `(⌊H/2⌋, ⌊W/2⌋)`.
pub fn fftshift2d(spectrum: &Spectrum) -> Result<Spectrum> {
    let (h, w) = check_2d(spectrum, "fftshift2d")?;
    Ok(Spectrum {
        re: roll2d(&spectrum.re, h / 2, w / 2),
        im: roll2d(&spectrum.im, h / 2, w / 2),
    })
}

/// Exact inverse of [`fftshift2d`] for odd and even sizes.
pub fn ifftshift2d(spectrum: &Spectrum) -> Result<Spectrum> {
    let (h, w) = check_2d(spectrum, "ifftshift2d")?;
    Ok(Spectrum {
        re: roll2d(&spectrum.re, h.div_ceil(2), w.div_ceil(2)),
        im: roll2d(&spectrum.im, h.div_ceil(2), w.div_ceil(2)),
    })
}

/// Whether centered row/column `i` of an `n`-point shifted axis lies inside the
/// pass band of width `b`.
///
/// The band keeps signed frequencies `|k| ≤ ⌊b/2⌋` (where `k = i - n/2`). This is
/// the centered `b`-wide patch for odd `b`; for even `b` it also keeps the mirror
/// of the lowest row so the mask stays conjugate-symmetric. A symmetric mask is
/// what makes the filter a real-valued projection (idempotent, identity at
/// `b = n`).
pub fn lpf_passes(i: usize, n: usize, b: usize) -> bool {
    let k = i as isize - (n / 2) as isize;
    k.unsigned_abs() <= b / 2
}

/// Centered low-pass filter applied per channel to a `[C, N, N]` image,
/// followed by a clamp to `[0, 1]`.
pub fn lpf(image: &Tensor, bandwidth: LpfBandwidth) -> Result<Tensor> {
    let filtered = lpf_unclamped(image, bandwidth)?;
    let mut out = filtered;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// [`lpf`] without the final clamp.
pub fn lpf_unclamped(image: &Tensor, bandwidth: LpfBandwidth) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidArgument(format!(
            "lpf expects [C, N, N], got {s:?}"
        )));
    }
    let (c, n) = (s[0], s[1]);
    let b = bandwidth.get();
    if b > n {
        return Err(Error::InvalidArgument(format!(
            "LPF bandwidth {b} exceeds image side {n}"
        )));
    }
    let plane = n * n;
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let p = Tensor::new(vec![n, n], image.data()[ch * plane..(ch + 1) * plane].to_vec())?;
        let mut centered = fftshift2d(&fft2d(&p)?)?;
        for r in 0..n {
            for col in 0..n {
                if !(lpf_passes(r, n, b) && lpf_passes(col, n, b)) {
                    centered.re.data_mut()[r * n + col] = 0.0;
                    centered.im.data_mut()[r * n + col] = 0.0;
                }
            }
        }
        let (real, _) = ifft2d(&ifftshift2d(&centered)?)?;
        out.extend_from_slice(real.data());
    }
    Tensor::new(s.to_vec(), out)
}
