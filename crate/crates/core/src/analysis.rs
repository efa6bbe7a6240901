//! Frequency-domain analyses of trained models: low-pass filter sweeps,
//! first-layer kernel smoothness, and natural-vs-adversarial spectrum maps.

use std::path::Path;

use rand::Rng;

use crate::attacks::{self, AttackConfig};
use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::rng::{self, Stream};
use crate::spectral::{self, LpfBandwidth};
use crate::tensor::{self, Tensor};
use crate::training::{self, ordered_map};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub bandwidth: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// How adversarial inputs relate to the filter in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Attack the plain model on the unfiltered image, then filter the result.
    AttackThenFilter,
    /// Attack the composite `model ∘ lpf`, then filter (adaptive attack).
    AttackThroughFilter,
}

fn filtered(image: &Tensor, b: usize) -> Result<Tensor> {
    let side = image.shape()[1];
    if b == side {
        // Full bandwidth is no filtering at all.
        return Ok(image.clone());
    }
    spectral::lpf(image, LpfBandwidth::new(b, side)?)
}

fn check_bands(bandwidths: &[usize], side: usize) -> Result<()> {
    if bandwidths.is_empty() {
        return Err(Error::InvalidArgument("empty bandwidth list".into()));
    }
    for w in bandwidths.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::InvalidArgument(format!(
                "bandwidths must be strictly decreasing, got {bandwidths:?}"
            )));
        }
    }
    for &b in bandwidths {
        LpfBandwidth::new(b, side)?;
    }
    Ok(())
}

/// Adaptive sweep attack for image `i` at bandwidth `b` uses
/// `rng::keyed(seed, Stream::Attack, ADAPTIVE_ATTACK_KEY ^ b, i)`.
pub const ADAPTIVE_ATTACK_KEY: u64 = 0x6c70_6600_0000_0000;

/// PGD against `model ∘ clamp ∘ lpf_b`. The unclamped filter is a symmetric
/// real projection, so its adjoint is itself; pixels where the clamp binds
/// pass no gradient. Random start, step, projection and box are as in
/// [`attacks::pgd`].
pub fn pgd_through_lpf<R: Rng + ?Sized>(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    band: LpfBandwidth,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    image.expect_shape("attack input", &params.arch.input_shape())?;
    let mut adv = image.clone();
    if cfg.random_start {
        for a in adv.data_mut() {
            let u: f64 = rng.random();
            *a = (*a + cfg.epsilon * (2.0 * u - 1.0)).clamp(0.0, 1.0);
        }
    }
    for _ in 0..cfg.steps {
        let pre = spectral::lpf_unclamped(&adv, band)?;
        let mut clamped = pre.clone();
        clamped.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let (z, cache) = model::forward(params, &clamped)?;
        let (_, g_logits) = attacks::attack_loss(cfg.loss_kind, &z, label)?;
        let mut g = model::input_gradient(params, &cache, &g_logits)?;
        for (gi, &p) in g.data_mut().iter_mut().zip(pre.data()) {
            if !(0.0..=1.0).contains(&p) {
                *gi = 0.0;
            }
        }
        let g = spectral::lpf_unclamped(&g, band)?;
        for ((a, &x), &gi) in adv.data_mut().iter_mut().zip(image.data()).zip(g.data()) {
            *a = (*a + cfg.alpha * attacks::sign(gi))
                .max(x - cfg.epsilon)
                .min(x + cfg.epsilon)
                .clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

fn adaptive_example(
    params: &ModelParams,
    dataset: &Dataset,
    i: usize,
    attack: &AttackConfig,
    b: usize,
    seed: u64,
) -> Result<Tensor> {
    if b == params.arch.side {
        // Nothing to adapt to: the plain evaluation attack.
        return training::attacked_input(params, dataset, i, Some(attack), seed);
    }
    let band = LpfBandwidth::new(b, params.arch.side)?;
    let mut r = rng::keyed(seed, Stream::Attack, ADAPTIVE_ATTACK_KEY ^ b as u64, i as u64);
    pgd_through_lpf(params, &dataset.images[i], dataset.labels[i], attack, band, &mut r)
}

/// Clean and robust accuracy with inputs low-pass filtered at each bandwidth.
///
/// In [`SweepMode::AttackThenFilter`] the adversarial example for image `i` is
/// exactly the one [`training::evaluate`] would build with the same `seed`, so
/// the full-bandwidth row reproduces plain evaluation.
pub fn lpf_sweep(
    params: &ModelParams,
    dataset: &Dataset,
    bandwidths: &[usize],
    attack: &AttackConfig,
    seed: u64,
    mode: SweepMode,
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let side = params.arch.side;
    check_bands(bandwidths, side)?;
    // hits[i] = per-band (clean correct, robust correct)
    let hits: Vec<Result<Vec<(bool, bool)>>> = ordered_map(dataset.len(), workers, |i| {
        let label = dataset.labels[i];
        let image = &dataset.images[i];
        let shared_adv = match mode {
            SweepMode::AttackThenFilter => {
                Some(training::attacked_input(params, dataset, i, Some(attack), seed)?)
            }
            SweepMode::AttackThroughFilter => None,
        };
        bandwidths
            .iter()
            .map(|&b| {
                let clean = model::predict(params, &filtered(image, b)?)? == label;
                let adv = match &shared_adv {
                    Some(a) => a.clone(),
                    None => adaptive_example(params, dataset, i, attack, b, seed)?,
                };
                let robust = model::predict(params, &filtered(&adv, b)?)? == label;
                Ok((clean, robust))
            })
            .collect()
    });
    let mut clean = vec![0usize; bandwidths.len()];
    let mut robust = vec![0usize; bandwidths.len()];
    for h in hits {
        for (j, (c, r)) in h?.into_iter().enumerate() {
            clean[j] += c as usize;
            robust[j] += r as usize;
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok(bandwidths
        .iter()
        .enumerate()
        .map(|(j, &b)| SweepRow {
            bandwidth: b,
            clean_acc: clean[j] as f64 / n,
            robust_acc: robust[j] as f64 / n,
        })
        .collect())
}

/// Mean absolute difference over horizontally and vertically adjacent weights.
/// A constant kernel scores 0; a 1×1 kernel has no pairs and scores 0.
pub fn kernel_tv(kernel: &Tensor) -> Result<f64> {
    let (h, w) = match kernel.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "kernel_tv expects [kh, kw], got {s:?}"
            )))
        }
    };
    let k = kernel.data();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                total += (k[y * w + x] - k[y * w + x + 1]).abs();
                pairs += 1;
            }
            if y + 1 < h {
                total += (k[y * w + x] - k[(y + 1) * w + x]).abs();
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelScore {
    pub layer: &'static str,
    pub out_ch: usize,
    pub in_ch: usize,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSmoothness {
    pub layer: &'static str,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub scores: Vec<KernelScore>,
    pub layers: Vec<LayerSmoothness>,
}

impl SmoothnessReport {
    pub fn layer(&self, name: &str) -> Option<&LayerSmoothness> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// TV of every spatial kernel slice of both conv layers, with per-layer
/// mean and (population) standard deviation.
pub fn smoothness_report(params: &ModelParams) -> Result<SmoothnessReport> {
    let mut scores = Vec::new();
    let mut layers = Vec::new();
    for (name, conv) in [("conv1", &params.conv1), ("conv2", &params.conv2)] {
        let k = conv.kernel_size();
        let (co_n, ci_n) = (conv.out_channels(), conv.in_channels());
        let data = conv.kernels.data();
        let mut tvs = Vec::with_capacity(co_n * ci_n);
        for co in 0..co_n {
            for ci in 0..ci_n {
                let start = (co * ci_n + ci) * k * k;
                let slice = Tensor::new(vec![k, k], data[start..start + k * k].to_vec())?;
                let tv = kernel_tv(&slice)?;
                tvs.push(tv);
                scores.push(KernelScore {
                    layer: name,
                    out_ch: co,
                    in_ch: ci,
                    tv,
                });
            }
        }
        let mean = tvs.iter().sum::<f64>() / tvs.len() as f64;
        let var = tvs.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / tvs.len() as f64;
        layers.push(LayerSmoothness {
            layer: name,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(SmoothnessReport { scores, layers })
}

/// Channel-mean magnitude of the centered spectrum difference between two
/// `[C, N, N]` images, divided by its maximum (an all-zero map stays zero).
pub fn spectrum_diff(x: &Tensor, x_adv: &Tensor) -> Result<Tensor> {
    x_adv.expect_shape("spectrum_diff", x.shape())?;
    let s = x.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::InvalidArgument(format!(
            "spectrum_diff expects [C, N, N], got {s:?}"
        )));
    }
    let (c, n) = (s[0], s[1]);
    let plane = n * n;
    let mut acc = vec![0.0; plane];
    for ch in 0..c {
        let take = |t: &Tensor| Tensor::new(vec![n, n], t.data()[ch * plane..(ch + 1) * plane].to_vec());
        let a = spectral::fftshift2d(&spectral::fft2d(&take(x)?)?)?;
        let b = spectral::fftshift2d(&spectral::fft2d(&take(x_adv)?)?)?;
        for (i, v) in acc.iter_mut().enumerate() {
            let dr = a.re.data()[i] - b.re.data()[i];
            let di = a.im.data()[i] - b.im.data()[i];
            *v += dr.hypot(di);
        }
    }
    acc.iter_mut().for_each(|v| *v /= c as f64);
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::new(vec![n, n], acc)
}

/// Share of `Σ map²` inside the centered `N/2 × N/2` patch (rows and columns
/// `N/4 .. 3N/4`). A uniform map gives 0.25; an all-zero map gives 0.
pub fn low_frequency_energy_fraction(map: &Tensor) -> Result<f64> {
    let n = match map.shape() {
        [h, w] if h == w => *h,
        s => {
            return Err(Error::InvalidArgument(format!(
                "expected a square map, got {s:?}"
            )))
        }
    };
    let (lo, hi) = (n / 4, n / 4 + n / 2);
    let mut inside = 0.0;
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..n {
            let e = map.data()[r * n + c].powi(2);
            total += e;
            if (lo..hi).contains(&r) && (lo..hi).contains(&c) {
                inside += e;
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { inside / total })
}

/// Binary PGM (`P5`, maxval 255) of a `[H, W]` grid in `[0, 1]`, pixels
/// `⌊255·v + 0.5⌋`. An optional comment line goes right after the magic.
pub fn pgm_bytes(grid: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    let (h, w) = match grid.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "PGM grid must be [H, W], got {s:?}"
            )))
        }
    };
    if let Some(v) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "PGM value {v} outside [0, 1]"
        )));
    }
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    out.extend(grid.data().iter().map(|v| (255.0 * v + 0.5).floor() as u8));
    Ok(out)
}

pub fn export_pgm(grid: &Tensor, path: &Path, comment: Option<&str>) -> Result<()> {
    write_atomic(path, &pgm_bytes(grid, comment)?)
}

pub const SWEEP_HEADER: &str = "seed,bandwidth,clean_acc,robust_acc";

pub fn sweep_csv(rows: &[SweepRow], seed: u64) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{seed},{},{:.6},{:.6}\n",
            r.bandwidth, r.clean_acc, r.robust_acc
        ));
    }
    s
}

pub const SMOOTHNESS_HEADER: &str = "seed,layer,out_ch,in_ch,tv";

/// Per-kernel rows followed by per-layer `mean` and `std` rows (with empty
/// channel columns).
pub fn smoothness_csv(report: &SmoothnessReport, seed: u64) -> String {
    let mut s = format!("{SMOOTHNESS_HEADER}\n");
    for k in &report.scores {
        s.push_str(&format!("{seed},{},{},{},{:.10}\n", k.layer, k.out_ch, k.in_ch, k.tv));
    }
    for l in &report.layers {
        s.push_str(&format!("{seed},{}_mean,,,{:.10}\n", l.layer, l.mean));
        s.push_str(&format!("{seed},{}_std,,,{:.10}\n", l.layer, l.std));
    }
    s
}

/// Mean cross-entropy of `params` on filtered images; handy for sanity checks.
pub fn filtered_loss(params: &ModelParams, dataset: &Dataset, b: usize) -> Result<f64> {
    let mut total = 0.0;
    for (img, &l) in dataset.images.iter().zip(&dataset.labels) {
        let z = model::logits(params, &filtered(img, b)?)?;
        total += tensor::softmax_cross_entropy(&z, l)?.0;
    }
    Ok(total / dataset.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    #[test]
    fn tv_constant_and_checkerboard() {
        assert_eq!(kernel_tv(&Tensor::full(&[3, 3], 0.4)).unwrap(), 0.0);
        let cb = Tensor::from_fn(&[3, 3], |i| if (i / 3 + i % 3) % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(kernel_tv(&cb).unwrap(), 2.0);
        assert_eq!(kernel_tv(&Tensor::full(&[1, 1], 3.0)).unwrap(), 0.0);
        assert!(kernel_tv(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn report_shapes_and_zero_params() {
        let p = ModelParams::zeros(Architecture::CIFAR).unwrap();
        let r = smoothness_report(&p).unwrap();
        assert_eq!(r.scores.iter().filter(|s| s.layer == "conv1").count(), 48);
        assert_eq!(r.scores.iter().filter(|s| s.layer == "conv2").count(), 512);
        assert!(r.scores.iter().all(|s| s.tv == 0.0));
        assert_eq!(r.layer("conv1").unwrap().mean, 0.0);
    }

    #[test]
    fn spectrum_diff_identical_and_dc_shift() {
        let x = Tensor::from_fn(&[3, 8, 8], |i| ((i * 13) % 17) as f64 / 17.0);
        assert_eq!(spectrum_diff(&x, &x).unwrap().max_abs(), 0.0);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 0.01);
        let m = spectrum_diff(&x, &shifted).unwrap();
        assert!((m.data()[4 * 8 + 4] - 1.0).abs() < 1e-12);
        let off_center: f64 = m
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 36)
            .map(|(_, v)| v.abs())
            .sum();
        assert!(off_center < 1e-9);
    }

    #[test]
    fn energy_fraction_of_uniform_map() {
        let m = Tensor::full(&[8, 8], 0.3);
        assert!((low_frequency_energy_fraction(&m).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(low_frequency_energy_fraction(&Tensor::zeros(&[8, 8])).unwrap(), 0.0);
    }

    #[test]
    fn pgm_pixels_and_rounding() {
        let one = pgm_bytes(&Tensor::full(&[1, 1], 1.0), None).unwrap();
        assert_eq!(one, b"P5\n1 1\n255\n\xff".to_vec());
        let two = pgm_bytes(&Tensor::new(vec![1, 2], vec![0.0, 0.5]).unwrap(), None).unwrap();
        assert_eq!(&two[two.len() - 2..], &[0, 128]);
        assert!(pgm_bytes(&Tensor::full(&[1, 1], 1.01), None).is_err());
        let c = pgm_bytes(&Tensor::full(&[1, 1], 0.0), Some("seed=3")).unwrap();
        assert!(c.starts_with(b"P5\n# seed=3\n1 1\n255\n"));
    }

    #[test]
    fn band_list_validation() {
        assert!(check_bands(&[32, 24, 16, 8], 32).is_ok());
        assert!(check_bands(&[16, 24], 32).is_err());
        assert!(check_bands(&[40], 32).is_err());
        assert!(check_bands(&[], 32).is_err());
    }

    #[test]
    fn csv_layouts() {
        let rows = [SweepRow {
            bandwidth: 32,
            clean_acc: 0.5,
            robust_acc: 0.125,
        }];
        assert_eq!(
            sweep_csv(&rows, 1),
            "seed,bandwidth,clean_acc,robust_acc\n1,32,0.500000,0.125000\n"
        );
        let p = ModelParams::zeros(Architecture::CIFAR).unwrap();
        let csv = smoothness_csv(&smoothness_report(&p).unwrap(), 0);
        assert_eq!(csv.lines().filter(|l| l.contains(",conv1,")).count(), 48);
    }
}
