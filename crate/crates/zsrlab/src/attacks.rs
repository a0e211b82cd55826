//! L∞ projected-gradient-descent adversarial example generation against any
//! differentiable batch objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const PIXEL_LEVEL: f32 = 1.0 / 255.0;

/// Whether perturbations may take fractional values or are snapped to the
/// 1/255 pixel grid (integer image encodings admit only grid-level attacks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Fractional,
    PixelGrid,
}

/// Perturbation norm order; only L∞ is supported, the field exists so configs
/// state it explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    Inf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ radius in pixel units (e.g. 1/255).
    pub epsilon: f32,
    /// Step size.
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_norm")]
    pub norm: NormOrder,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub best_iterate: bool,
    #[serde(default = "default_step_mode")]
    pub step_mode: StepMode,
    /// Independent restarts; the best candidate across restarts wins when
    /// best_iterate is on, otherwise the last restart's final iterate.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_alpha() -> f32 {
    PIXEL_LEVEL
}
fn default_steps() -> usize {
    2
}
fn default_norm() -> NormOrder {
    NormOrder::Inf
}
fn default_step_mode() -> StepMode {
    StepMode::Fractional
}
fn default_restarts() -> usize {
    1
}

impl AttackConfig {
    /// 2-step training attack at radius 1/255.
    pub fn training_default() -> Self {
        AttackConfig {
            epsilon: PIXEL_LEVEL,
            alpha: PIXEL_LEVEL,
            steps: 2,
            norm: NormOrder::Inf,
            random_start: false,
            best_iterate: false,
            step_mode: StepMode::Fractional,
            restarts: 1,
        }
    }

    /// 100-step evaluation attack; radius matches the training radius.
    pub fn eval_default(epsilon: f32) -> Self {
        AttackConfig {
            epsilon,
            alpha: PIXEL_LEVEL,
            steps: 100,
            norm: NormOrder::Inf,
            random_start: false,
            best_iterate: true,
            step_mode: StepMode::Fractional,
            restarts: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!("attack alpha must be positive, got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::config(format!(
                "attack epsilon must be in [0, 1] (the pixel range), got {}",
                self.epsilon
            )));
        }
        if self.steps < 1 {
            return Err(Error::config("attack steps must be >= 1".to_string()));
        }
        if self.restarts < 1 {
            return Err(Error::config("attack restarts must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// One objective evaluation over a batch of flat images.
pub struct ObjectiveEval {
    /// Per-example objective terms (the attacker maximizes each).
    pub per_example: Vec<f64>,
    /// d(objective)/d(images), same layout as the image buffer; present when
    /// requested.
    pub grad: Option<Vec<f32>>,
}

/// A differentiable scalar objective of a batch of images.
pub trait BatchObjective {
    fn image_len(&self) -> usize;
    fn eval(&self, images: &[f32], want_grad: bool) -> Result<ObjectiveEval>;
}

/// Attacked batch plus its bookkeeping.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub x: Vec<f32>,
    pub x_adv: Vec<f32>,
    pub image_len: usize,
    /// Objective value per image at termination.
    pub objective: Vec<f64>,
    /// Objective value per image at the (unperturbed or random) start of the
    /// winning restart.
    pub start_objective: Vec<f64>,
}

impl AdversarialBatch {
    pub fn n(&self) -> usize {
        self.x.len() / self.image_len
    }

    pub fn delta(&self, i: usize) -> Vec<f32> {
        let o = i * self.image_len;
        (0..self.image_len).map(|j| self.x_adv[o + j] - self.x[o + j]).collect()
    }
}

/// Snap a perturbation toward zero onto the 1/255 grid. Values already on the
/// grid (within rounding slack) are kept; truncation otherwise guarantees the
/// result still satisfies both the ball and box constraints.
fn quantize_down(delta: f32) -> f32 {
    let q = delta * 255.0;
    let r = q.round();
    let k = if (q - r).abs() < 1e-3 { r } else { q.trunc() };
    k / 255.0
}

fn quantize_nearest(delta: f32, x: f32, eps: f32) -> f32 {
    let mut k = (delta * 255.0).round();
    // Back off toward zero until the grid point respects both constraints.
    loop {
        let d = k / 255.0;
        if d.abs() <= eps + 1e-7 && (0.0..=1.0).contains(&(x + d)) {
            return d;
        }
        k -= k.signum();
    }
}

/// Iterated signed-gradient ascent with projection onto the ε-ball
/// intersected with the [0,1] pixel box.
///
/// Projection order per step: gradient step, L∞ clamp, box clamp (and grid
/// snap in pixel-grid mode).
pub fn pgd_attack(
    objective: &dyn BatchObjective,
    x: &[f32],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let img_len = objective.image_len();
    if x.is_empty() || x.len() % img_len != 0 {
        return Err(Error::ShapeMismatch { op: "pgd_attack", lhs: vec![x.len()], rhs: vec![img_len] });
    }
    let n = x.len() / img_len;
    let eps = cfg.epsilon;
    let mut rng = rng_from(seed);

    let mut best_delta = vec![0.0f32; x.len()];
    let mut best_obj = vec![f64::NEG_INFINITY; n];
    let mut best_start = vec![0.0f64; n];

    for _restart in 0..cfg.restarts {
        let mut delta = vec![0.0f32; x.len()];
        if cfg.random_start {
            for (j, d) in delta.iter_mut().enumerate() {
                let raw: f32 = rng.gen_range(-eps..=eps);
                *d = match cfg.step_mode {
                    StepMode::Fractional => {
                        let lo = -x[j];
                        let hi = 1.0 - x[j];
                        raw.max(lo).min(hi)
                    }
                    StepMode::PixelGrid => quantize_nearest(raw, x[j], eps),
                };
            }
        }
        let mut start_obj: Vec<f64> = Vec::new();
        let mut last_obj: Vec<f64>;

        for it in 0..=cfg.steps {
            let xa: Vec<f32> = x.iter().zip(&delta).map(|(&xv, &dv)| xv + dv).collect();
            let ev = objective.eval(&xa, it < cfg.steps)?;
            if let Some(i) = ev.per_example.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("pgd objective at step {it}, image {i}")));
            }
            if it == 0 {
                start_obj = ev.per_example.clone();
            }
            last_obj = ev.per_example.clone();

            // Track candidates per image: every iterate (including the start)
            // when best_iterate is on, otherwise only the final one.
            for i in 0..n {
                let better = if cfg.best_iterate {
                    last_obj[i] > best_obj[i]
                } else {
                    it == cfg.steps
                };
                if better {
                    best_obj[i] = last_obj[i];
                    best_start[i] = start_obj[i];
                    let o = i * img_len;
                    best_delta[o..o + img_len].copy_from_slice(&delta[o..o + img_len]);
                }
            }
            if it == cfg.steps {
                break;
            }

            let grad = ev.grad.as_ref().ok_or_else(|| Error::invalid("pgd objective returned no gradient"))?;
            for j in 0..delta.len() {
                let s = if grad[j] > 0.0 {
                    1.0
                } else if grad[j] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let mut d = delta[j] + cfg.alpha * s;
                d = d.max(-eps).min(eps);
                d = (x[j] + d).max(0.0).min(1.0) - x[j];
                if cfg.step_mode == StepMode::PixelGrid {
                    d = quantize_down(d);
                }
                delta[j] = d;
            }
        }
    }

    let x_adv: Vec<f32> = x.iter().zip(&best_delta).map(|(&xv, &dv)| xv + dv).collect();
    Ok(AdversarialBatch { x: x.to_vec(), x_adv, image_len: img_len, objective: best_obj, start_objective: best_start })
}
