//! White-box L∞ attacks: FGSM, PGD with optional random start, and PGD on a
//! Carlini–Wagner style margin loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::tensor::{self, Tensor};

/// Loss an attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// `max_{j≠y} z_j − z_y` with zero confidence margin.
    CwMargin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius in pixel units (pixels live in `[0, 1]`).
    pub epsilon: f64,
    /// Step size, same units.
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub loss_kind: LossKind,
}

pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
pub const DEFAULT_ALPHA: f64 = 2.0 / 255.0;

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::pgd(20)
    }
}

impl AttackConfig {
    /// `steps`-step PGD with cross-entropy, ε = 8/255, α = 2/255 and random start.
    pub fn pgd(steps: usize) -> Self {
        AttackConfig {
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            steps,
            random_start: true,
            loss_kind: LossKind::CrossEntropy,
        }
    }

    /// Margin-loss PGD used for the C&W evaluation row.
    pub fn cw(steps: usize) -> Self {
        AttackConfig {
            loss_kind: LossKind::CwMargin,
            ..AttackConfig::pgd(steps)
        }
    }

    /// Single full-ε step without random start; identical to [`fgsm`].
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            loss_kind: LossKind::CrossEntropy,
        }
    }

    /// Requires `0 ≤ ε ≤ 1` and `0 < α ≤ ε` (any `α ≥ 0` is accepted when `ε = 0`).
    pub fn validate(&self) -> Result<()> {
        let ok_eps = (0.0..=1.0).contains(&self.epsilon);
        let ok_alpha = if self.epsilon == 0.0 {
            self.alpha >= 0.0 && self.alpha.is_finite()
        } else {
            self.alpha > 0.0 && self.alpha <= self.epsilon
        };
        if !ok_eps || !ok_alpha {
            return Err(Error::InvalidArgument(format!(
                "attack needs 0 <= epsilon <= 1 and 0 < alpha <= epsilon, got epsilon={} alpha={}",
                self.epsilon, self.alpha
            )));
        }
        Ok(())
    }
}

/// Margin loss `max_{j≠y} z_j − z_y` and its subgradient: +1 on the best wrong
/// class (lowest index on ties), −1 on the true class.
pub fn cw_margin_loss(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if z.len() < 2 {
        return Err(Error::InvalidArgument(
            "margin loss needs at least two classes".into(),
        ));
    }
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let mut best: Option<usize> = None;
    for (j, &v) in z.iter().enumerate() {
        if j != label && best.is_none_or(|b| v > z[b]) {
            best = Some(j);
        }
    }
    let best = best.expect("at least one wrong class");
    let mut grad = Tensor::zeros(logits.shape());
    grad.data_mut()[best] = 1.0;
    grad.data_mut()[label] = -1.0;
    Ok((z[best] - z[label], grad))
}

pub fn attack_loss(kind: LossKind, logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    match kind {
        LossKind::CrossEntropy => tensor::softmax_cross_entropy(logits, label),
        LossKind::CwMargin => cw_margin_loss(logits, label),
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_image(params: &ModelParams, image: &Tensor) -> Result<()> {
    image.expect_shape("attack input", &params.arch.input_shape())?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "attack input must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// One ascent step: move by `alpha·sign(∇)`, project onto the ε-ball around
/// `origin`, clamp to `[0, 1]`.
fn ascent_step(
    params: &ModelParams,
    origin: &Tensor,
    adv: &mut Tensor,
    label: usize,
    epsilon: f64,
    alpha: f64,
    kind: LossKind,
) -> Result<()> {
    let (z, cache) = model::forward(params, adv)?;
    let (_, g_logits) = attack_loss(kind, &z, label)?;
    let g = model::input_gradient(params, &cache, &g_logits)?;
    for ((a, &x), &gi) in adv.data_mut().iter_mut().zip(origin.data()).zip(g.data()) {
        let stepped = *a + alpha * sign(gi);
        *a = stepped.max(x - epsilon).min(x + epsilon).clamp(0.0, 1.0);
    }
    Ok(())
}

/// Fast gradient sign method: `clamp(x + ε·sign(∇ₓ CE), 0, 1)`.
pub fn fgsm(params: &ModelParams, image: &Tensor, label: usize, epsilon: f64) -> Result<Tensor> {
    check_image(params, image)?;
    let mut adv = image.clone();
    ascent_step(
        params,
        image,
        &mut adv,
        label,
        epsilon,
        epsilon,
        LossKind::CrossEntropy,
    )?;
    Ok(adv)
}

/// Projected gradient ascent in the L∞ ball. With `random_start`, every pixel
/// starts at `x + ε·(2u − 1)` for `u ~ U[0, 1)` drawn from `rng` in row-major
/// order, clamped to `[0, 1]`. Returns the final iterate.
pub fn pgd<R: Rng + ?Sized>(
    params: &ModelParams,
    image: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_image(params, image)?;
    let mut adv = image.clone();
    if cfg.random_start {
        for a in adv.data_mut() {
            let u: f64 = rng.random();
            *a = (*a + cfg.epsilon * (2.0 * u - 1.0)).clamp(0.0, 1.0);
        }
    }
    for _ in 0..cfg.steps {
        ascent_step(
            params,
            image,
            &mut adv,
            label,
            cfg.epsilon,
            cfg.alpha,
            cfg.loss_kind,
        )?;
    }
    Ok(adv)
}
