//! Natural training, PGD adversarial training and the frequency-regularized
//! objective, plus SGD with momentum, the step schedule and weight averaging.
//!
//! Per image, the adversarial objective is
//!
//! ```text
//! CE(f(x'), y) + λ · Σ_k |Re(D_k)| + |Im(D_k)|,   D = DFT(f(x)) − DFT(f(x'))
//! ```
//!
//! where `f` returns logits and `x'` is a PGD example. `x'` is treated as a
//! constant: no gradient flows through the attack. Both `f(x)` and `f(x')`
//! depend on the weights, so the natural branch contributes to the parameter
//! gradient as well. A batch objective is the mean over its images.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attacks::{self, AttackConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, ModelParams, ParamGrads};
use crate::rng::{self, Stream};
use crate::spectral;
use crate::tensor::{self, Tensor};

/// What the frequency term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrTarget {
    /// Pre-softmax logits (default).
    Logits,
    /// Softmax probabilities.
    Probabilities,
}

/// Sum over DFT bins of `|Re|` and `|Im|` of `dft(nat) − dft(adv)`, with
/// gradients for both arguments. `sign(0) = 0`.
pub fn fr_loss(logits_nat: &Tensor, logits_adv: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if logits_nat.shape() != logits_adv.shape() || logits_nat.shape().len() != 1 {
        return Err(Error::shape(
            "fr_loss",
            logits_nat.shape(),
            logits_adv.shape(),
        ));
    }
    // The DFT is linear, so D = dft(nat − adv).
    let diff: Vec<f64> = logits_nat
        .data()
        .iter()
        .zip(logits_adv.data())
        .map(|(a, b)| a - b)
        .collect();
    let d = spectral::dft1d(&diff);
    let loss = d
        .re
        .data()
        .iter()
        .chain(d.im.data())
        .map(|v| v.abs())
        .sum();
    let sgn = |t: &Tensor| -> Vec<f64> {
        t.data()
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let g = spectral::dft1d_adjoint(&sgn(&d.re), &sgn(&d.im))?;
    let grad_adv = Tensor::from_vec(g.iter().map(|v| -v).collect());
    let grad_nat = Tensor::from_vec(g);
    Ok((loss, grad_nat, grad_adv))
}

/// Pulls a gradient with respect to softmax probabilities back to the logits.
fn softmax_backward(logits: &Tensor, grad_probs: &Tensor) -> Tensor {
    let p = tensor::softmax(logits);
    let dot: f64 = p.data().iter().zip(grad_probs.data()).map(|(a, b)| a * b).sum();
    Tensor::from_vec(
        p.data()
            .iter()
            .zip(grad_probs.data())
            .map(|(pi, gi)| pi * (gi - dot))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// `(epoch, factor)`: from 0-based `epoch` on, the rate is multiplied by `factor`.
    pub lr_drops: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// FR coefficient λ; 0 gives plain adversarial training.
    pub lambda: f64,
    pub fr_target: FrTarget,
    /// Inner attack; `None` trains on clean images.
    pub train_attack: Option<AttackConfig>,
    /// Attack used for the per-epoch robust validation accuracy.
    pub eval_attack: AttackConfig,
    pub swa_enabled: bool,
    /// First epoch absorbed into the average; defaults to the first rate drop.
    pub swa_start: Option<usize>,
    pub augment_flip: bool,
    pub seed: u64,
    /// Worker threads for per-image work inside a batch. Results do not depend on it.
    pub workers: usize,
}

impl TrainConfig {
    /// Defaults scaled to `epochs`: rate drops to 1/10 at 75 % and 90 % of the
    /// run, PGD-10 training attack, λ = 0.1, SWA from the first drop.
    pub fn with_epochs(epochs: usize) -> Self {
        TrainConfig {
            arch: Architecture::CIFAR,
            epochs,
            batch_size: 128,
            lr0: 0.1,
            lr_drops: default_drops(epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 0.1,
            fr_target: FrTarget::Logits,
            train_attack: Some(AttackConfig::pgd(10)),
            eval_attack: AttackConfig::pgd(20),
            swa_enabled: true,
            swa_start: None,
            augment_flip: false,
            seed: 0,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let Some(a) = &self.train_attack {
            a.validate()?;
        }
        self.eval_attack.validate()?;
        self.arch.validate()
    }

    /// Epoch from which SWA absorbs checkpoints.
    pub fn swa_first_epoch(&self) -> usize {
        self.swa_start.unwrap_or_else(|| {
            self.lr_drops
                .iter()
                .map(|&(e, _)| e)
                .min()
                .unwrap_or(self.epochs)
        })
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.lr0, |lr, &(_, f)| lr * f)
    }
}

/// One-tenth drops at 75 % and 90 % of `epochs` (epochs 15 and 18 of 20).
pub fn default_drops(epochs: usize) -> Vec<(usize, f64)> {
    vec![(epochs * 3 / 4, 0.1), (epochs * 9 / 10, 0.1)]
}

/// Loss and parameter gradient for one labelled image, given its adversarial
/// counterpart. With `adv = None` this is plain cross-entropy on `image`.
pub fn objective_with_adv(
    params: &ModelParams,
    image: &Tensor,
    adv: Option<&Tensor>,
    label: usize,
    lambda: f64,
    fr_target: FrTarget,
) -> Result<(f64, ParamGrads)> {
    let Some(adv) = adv else {
        let (z, cache) = model::forward(params, image)?;
        let (loss, g) = tensor::softmax_cross_entropy(&z, label)?;
        return Ok((loss, model::backward(params, &cache, &g)?.0));
    };
    let (z_adv, cache_adv) = model::forward(params, adv)?;
    let (ce, mut g_adv) = tensor::softmax_cross_entropy(&z_adv, label)?;
    if lambda == 0.0 {
        return Ok((ce, model::backward(params, &cache_adv, &g_adv)?.0));
    }
    let (z_nat, cache_nat) = model::forward(params, image)?;
    let (fr, g_fr_nat, g_fr_adv) = match fr_target {
        FrTarget::Logits => fr_loss(&z_nat, &z_adv)?,
        FrTarget::Probabilities => {
            let (l, gn, ga) = fr_loss(&tensor::softmax(&z_nat), &tensor::softmax(&z_adv))?;
            (l, softmax_backward(&z_nat, &gn), softmax_backward(&z_adv, &ga))
        }
    };
    g_adv.axpy(lambda, &g_fr_adv);
    let mut g_nat = g_fr_nat;
    g_nat.scale(lambda);
    let (mut grads, _) = model::backward(params, &cache_adv, &g_adv)?;
    let (grads_nat, _) = model::backward(params, &cache_nat, &g_nat)?;
    grads.axpy(1.0, &grads_nat);
    Ok((ce + lambda * fr, grads))
}

/// Attacks `image` with `cfg.train_attack` (random start from `attack_rng`)
/// and evaluates the training objective on the pair.
pub fn at_objective<R: rand::Rng + ?Sized>(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    cfg: &TrainConfig,
    attack_rng: &mut R,
) -> Result<(f64, ParamGrads)> {
    let adv = match &cfg.train_attack {
        Some(a) => Some(attacks::pgd(params, image, label, a, attack_rng)?),
        None => None,
    };
    objective_with_adv(params, image, adv.as_ref(), label, cfg.lambda, cfg.fr_target)
}

/// Classical momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ParamGrads,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        SgdState {
            velocity: ParamGrads::zeros_like(params),
        }
    }
}

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let congruent = params
        .tensors()
        .iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors())
        .all(|((p, g), v)| p.shape() == g.shape() && p.shape() == v.shape());
    if !congruent {
        return Err(Error::InvalidArgument(
            "sgd_step: params, grads and momentum state differ in shape".into(),
        ));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
    {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Running arithmetic mean of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SwaState {
    pub avg: Option<ModelParams>,
    pub count: u64,
}

impl SwaState {
    pub fn new() -> Self {
        SwaState {
            avg: None,
            count: 0,
        }
    }
}

impl Default for SwaState {
    fn default() -> Self {
        Self::new()
    }
}

/// Absorbs one checkpoint: `avg ← avg + (θ − avg)/(count + 1)`, the incremental
/// form of `(avg·count + θ)/(count + 1)`. Absorbing the same weights
/// repeatedly leaves them unchanged bit for bit.
pub fn swa_update(state: &mut SwaState, checkpoint: &ModelParams) -> Result<()> {
    match &mut state.avg {
        None => {
            let mut first = checkpoint.clone();
            first.revision = 0;
            state.avg = Some(first);
        }
        Some(avg) => {
            if avg.arch != checkpoint.arch {
                return Err(Error::Architecture {
                    expected: avg.arch.tag(),
                    actual: checkpoint.arch.tag(),
                });
            }
            let n = (state.count + 1) as f64;
            for (a, c) in avg.tensors_mut().into_iter().zip(checkpoint.tensors()) {
                for (ai, ci) in a.data_mut().iter_mut().zip(c.data()) {
                    *ai += (ci - *ai) / n;
                }
            }
        }
    }
    state.count += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub standard_acc: f64,
    pub robust_acc: f64,
    /// Wall-clock time of the epoch; informational, never written to CSV.
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "seed,epoch,learning_rate,train_loss,standard_acc,robust_acc";

/// CSV of the deterministic metric columns, header first, `\n` line endings.
pub fn metrics_csv(rows: &[MetricsRow], seed: u64) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{seed},{},{:e},{:.10},{:.6},{:.6}\n",
            r.epoch, r.learning_rate, r.train_loss, r.standard_acc, r.robust_acc
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub swa_params: Option<ModelParams>,
    pub metrics: Vec<MetricsRow>,
}

/// Evaluates `f` on each index and returns the results in index order.
/// Work is spread over `workers` threads; output order never depends on it.
pub(crate) fn ordered_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

/// Training attack for image `i` in epoch `e` draws its random start from
/// `rng::keyed(seed, Stream::Attack, TRAIN_ATTACK_KEY ^ e, i)`.
pub const TRAIN_ATTACK_KEY: u64 = 0x7472_6169_6e00_0000;
/// Evaluation attack for image `i` uses `rng::keyed(seed, Stream::Attack, EVAL_ATTACK_KEY, i)`.
pub const EVAL_ATTACK_KEY: u64 = 0x6576_616c_0000_0000;

/// Trains from `ModelParams::init(cfg.arch, cfg.seed)`.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut params = ModelParams::init(cfg.arch, cfg.seed)?;
    let mut opt = SgdState::new(&params);
    let mut swa = SwaState::new();
    let mut shuffle_rng = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let swa_first = cfg.swa_first_epoch();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let key = TRAIN_ATTACK_KEY ^ epoch as u64;
            let mut grads = ParamGrads::zeros_like(&params);
            let mut batch_loss = 0.0;
            // Bounded chunks keep at most a few per-image gradients alive; the
            // reduction still runs in batch order.
            for chunk in batch.chunks(4 * cfg.workers) {
                let per_image = ordered_map(chunk.len(), cfg.workers, |j| {
                    let i = chunk[j];
                    let image = if cfg.augment_flip {
                        let mut r = rng::keyed(cfg.seed, Stream::Augment, epoch as u64, i as u64);
                        data::random_hflip(&train_set.images[i], &mut r)
                    } else {
                        train_set.images[i].clone()
                    };
                    let mut r = rng::keyed(cfg.seed, Stream::Attack, key, i as u64);
                    at_objective(&params, &image, train_set.labels[i], cfg, &mut r)
                });
                for res in per_image {
                    let (l, g) = res?;
                    batch_loss += l;
                    grads.axpy(1.0, &g);
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            loss_sum += batch_loss;
            sgd_step(&mut params, &grads, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;
        }
        if cfg.swa_enabled && epoch >= swa_first {
            swa_update(&mut swa, &params)?;
        }
        let std_eval = evaluate(&params, val_set, None, cfg.seed, cfg.workers)?;
        let rob_eval = evaluate(&params, val_set, Some(&cfg.eval_attack), cfg.seed, cfg.workers)?;
        let row = MetricsRow {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train_set.len() as f64,
            standard_acc: std_eval.accuracy,
            robust_acc: rob_eval.accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        params,
        swa_params: swa.avg,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean cross-entropy on the (possibly attacked) inputs.
    pub mean_loss: f64,
}

/// Accuracy and mean cross-entropy, attacking every image first when `attack`
/// is given. Image `i` gets its own random start, derived from `seed` and `i`.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    attack: Option<&AttackConfig>,
    seed: u64,
    workers: usize,
) -> Result<EvalResult> {
    let (correct, loss) = evaluate_each(params, dataset, attack, seed, workers)?
        .into_iter()
        .fold((0usize, 0.0), |(c, l), (ok, li)| (c + ok as usize, l + li));
    let n = dataset.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

/// Per-image `(correct, loss)` in dataset order.
pub fn evaluate_each(
    params: &ModelParams,
    dataset: &Dataset,
    attack: Option<&AttackConfig>,
    seed: u64,
    workers: usize,
) -> Result<Vec<(bool, f64)>> {
    ordered_map(dataset.len(), workers, |i| {
        let label = dataset.labels[i];
        let input = attacked_input(params, dataset, i, attack, seed)?;
        let z = model::logits(params, &input)?;
        let (loss, _) = tensor::softmax_cross_entropy(&z, label)?;
        Ok((model::argmax(z.data()) == label, loss))
    })
    .into_iter()
    .collect()
}

/// Image `i` of `dataset`, attacked with the evaluation random stream when an
/// attack is given. The same `(seed, i)` always yields the same example.
pub fn attacked_input(
    params: &ModelParams,
    dataset: &Dataset,
    i: usize,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<Tensor> {
    let image = &dataset.images[i];
    match attack {
        None => Ok(image.clone()),
        Some(cfg) => {
            let mut r = rng::keyed(seed, Stream::Attack, EVAL_ATTACK_KEY, i as u64);
            attacks::pgd(params, image, dataset.labels[i], cfg, &mut r)
        }
    }
}
