//! Mapping per-layer tail exponents to per-layer base learning rates.
//!
//! The main rule is the bounded affine map
//!
//! ```text
//! f(i) = η · ((α_i − α_min) / (α_max − α_min) · (s − 1) + 1)   ∈ [η, s·η]
//! ```
//!
//! so layers with the largest exponent (lightest tail, least trained) get the
//! largest learning rate. Ablation variants (inverse, sqrt- and log2-mean
//! normalisation) and the LARS/LAMB trust ratios used by the baselines also live here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::LayerRole;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("no layers to allocate")]
    EmptyInput,
    #[error("layer `{0}` has an infinite alpha; mean-normalised maps need finite values")]
    InfiniteAlpha(String),
    #[error("layer `{0}` has alpha <= 1; log2 assignment is undefined")]
    NonPositiveLog(String),
    #[error("assignment {0:?} is not handled by this map")]
    WrongAssignment(Assignment),
    #[error("invalid plan config: {0}")]
    InvalidConfig(String),
    #[error("LAMB trust ratio needs the update norm")]
    MissingUpdateNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    #[default]
    Linear,
    Sqrt,
    Log2,
    #[serde(rename = "linear-inv")]
    LinearInverse,
}

impl Assignment {
    pub fn tag(self) -> &'static str {
        match self {
            Assignment::Linear => "linear",
            Assignment::Sqrt => "sqrt",
            Assignment::Log2 => "log2",
            Assignment::LinearInverse => "linear-inv",
        }
    }

    fn is_bounded(self) -> bool {
        matches!(self, Assignment::Linear | Assignment::LinearInverse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Global learning rate η.
    pub eta: f64,
    /// Upper scaling ratio; learning rates live in `[η, s·η]`.
    pub s: f64,
    pub assignment: Assignment,
    /// Pin embedding and output head to the upper bound.
    pub embedding_override: bool,
    /// Whether pinned layers still contribute to `α_min`/`α_max`.
    pub extremes_include_pinned: bool,
    /// Clamp the sqrt/log2 variants to `[η, s·η]`.
    pub clamp_mean_normalized: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            s: 5.0,
            assignment: Assignment::Linear,
            embedding_override: true,
            extremes_include_pinned: true,
            clamp_mean_normalized: false,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), AllocError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(AllocError::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.s >= 1.0 && self.s.is_finite()) {
            return Err(AllocError::InvalidConfig(format!("s must be >= 1, got {}", self.s)));
        }
        Ok(())
    }

    pub fn upper(&self) -> f64 {
        self.s * self.eta
    }
}

/// A layer's fitted exponent, as fed to the allocator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAlpha {
    pub name: String,
    pub role: LayerRole,
    pub alpha: f64,
}

impl LayerAlpha {
    pub fn new(name: impl Into<String>, role: LayerRole, alpha: f64) -> Self {
        Self {
            name: name.into(),
            role,
            alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub role: LayerRole,
    pub alpha: f64,
    pub base_lr: f64,
}

/// Per-layer base learning rates computed at one recompute step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrPlan {
    pub entries: Vec<PlanEntry>,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub created_at_step: u64,
}

impl LrPlan {
    /// Every layer at `eta`; the state before any spectral measurement.
    pub fn uniform<'a>(layers: impl IntoIterator<Item = (&'a str, LayerRole)>, eta: f64) -> Self {
        Self {
            entries: layers
                .into_iter()
                .map(|(name, role)| PlanEntry {
                    name: name.to_string(),
                    role,
                    alpha: f64::NAN,
                    base_lr: eta,
                })
                .collect(),
            alpha_min: f64::NAN,
            alpha_max: f64::NAN,
            created_at_step: 0,
        }
    }

    pub fn base_lr(&self, layer: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == layer).map(|e| e.base_lr)
    }

    pub fn max_lr(&self) -> f64 {
        self.entries.iter().map(|e| e.base_lr).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

fn finite_extremes<'a>(alphas: impl Iterator<Item = &'a LayerAlpha>) -> Option<(f64, f64)> {
    alphas
        .map(|a| a.alpha)
        .filter(|a| a.is_finite())
        .fold(None, |acc, a| match acc {
            None => Some((a, a)),
            Some((lo, hi)) => Some((lo.min(a), hi.max(a))),
        })
}

fn extremes(alphas: &[LayerAlpha], cfg: &PlanConfig) -> Option<(f64, f64)> {
    if cfg.embedding_override && !cfg.extremes_include_pinned {
        let unpinned = finite_extremes(alphas.iter().filter(|a| !a.role.is_embedding_like()));
        if unpinned.is_some() {
            return unpinned;
        }
    }
    finite_extremes(alphas.iter())
}

/// Bounded affine map (`Linear`) or its mirror image (`LinearInverse`).
///
/// Does not apply the embedding override; see [`apply_embedding_override`].
/// Infinite exponents map to `s·η` (or `η` when inverted). A degenerate range
/// (`α_max = α_min`) maps every finite layer to `η`.
pub fn linear_map(alphas: &[LayerAlpha], cfg: &PlanConfig) -> Result<LrPlan, AllocError> {
    cfg.validate()?;
    let inverse = match cfg.assignment {
        Assignment::Linear => false,
        Assignment::LinearInverse => true,
        other => return Err(AllocError::WrongAssignment(other)),
    };
    if alphas.is_empty() {
        return Err(AllocError::EmptyInput);
    }
    let (lo, hi) = extremes(alphas, cfg).unwrap_or((f64::NAN, f64::NAN));
    let (eta, upper) = (cfg.eta, cfg.upper());
    let range = hi - lo;
    let entries = alphas
        .iter()
        .map(|a| {
            let base_lr = if a.alpha == f64::INFINITY {
                if inverse {
                    eta
                } else {
                    upper
                }
            } else if !(range > 0.0) {
                eta
            } else {
                let ratio = if inverse {
                    (hi - a.alpha) / range
                } else {
                    (a.alpha - lo) / range
                };
                (eta * (ratio * (cfg.s - 1.0) + 1.0)).clamp(eta, upper)
            };
            PlanEntry {
                name: a.name.clone(),
                role: a.role,
                alpha: a.alpha,
                base_lr,
            }
        })
        .collect();
    Ok(LrPlan {
        entries,
        alpha_min: lo,
        alpha_max: hi,
        created_at_step: 0,
    })
}

/// `Sqrt` and `Log2` assignment: `η · g(α_i) / mean_j g(α_j)`.
pub fn mean_normalized_map(alphas: &[LayerAlpha], cfg: &PlanConfig) -> Result<LrPlan, AllocError> {
    cfg.validate()?;
    let g: fn(f64) -> f64 = match cfg.assignment {
        Assignment::Sqrt => f64::sqrt,
        Assignment::Log2 => f64::log2,
        other => return Err(AllocError::WrongAssignment(other)),
    };
    if alphas.is_empty() {
        return Err(AllocError::EmptyInput);
    }
    for a in alphas {
        if !a.alpha.is_finite() {
            return Err(AllocError::InfiniteAlpha(a.name.clone()));
        }
        if cfg.assignment == Assignment::Log2 && a.alpha <= 1.0 {
            return Err(AllocError::NonPositiveLog(a.name.clone()));
        }
    }
    let mean = alphas.iter().map(|a| g(a.alpha)).sum::<f64>() / alphas.len() as f64;
    let (lo, hi) = finite_extremes(alphas.iter()).unwrap_or((f64::NAN, f64::NAN));
    let entries = alphas
        .iter()
        .map(|a| {
            let mut base_lr = cfg.eta * g(a.alpha) / mean;
            if cfg.clamp_mean_normalized {
                base_lr = base_lr.clamp(cfg.eta, cfg.upper());
            }
            PlanEntry {
                name: a.name.clone(),
                role: a.role,
                alpha: a.alpha,
                base_lr,
            }
        })
        .collect();
    Ok(LrPlan {
        entries,
        alpha_min: lo,
        alpha_max: hi,
        created_at_step: 0,
    })
}

/// Pin embedding/output-head layers to the upper bound (`s·η` for the bounded
/// maps, the plan maximum for the mean-normalised ones). No-op when disabled.
pub fn apply_embedding_override(mut plan: LrPlan, cfg: &PlanConfig) -> LrPlan {
    if !cfg.embedding_override {
        return plan;
    }
    let target = if cfg.assignment.is_bounded() {
        cfg.upper()
    } else {
        plan.max_lr()
    };
    for e in plan.entries.iter_mut().filter(|e| e.role.is_embedding_like()) {
        e.base_lr = target;
    }
    plan
}

/// Full allocation: the configured map followed by the embedding override.
pub fn build_plan(alphas: &[LayerAlpha], cfg: &PlanConfig, step: u64) -> Result<LrPlan, AllocError> {
    let plan = if cfg.assignment.is_bounded() {
        linear_map(alphas, cfg)?
    } else {
        mean_normalized_map(alphas, cfg)?
    };
    let mut plan = apply_embedding_override(plan, cfg);
    plan.created_at_step = step;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrustVariant {
    Lars,
    Lamb,
}

/// Layerwise learning rate of the LARS/LAMB baselines.
///
/// LARS: `η·‖w‖ / (‖g‖ + wd·‖w‖)`. LAMB: `η·‖w‖ / ‖u‖` with `u` the adaptive
/// update direction, optionally clipped to `[0, max_ratio]`. The ratio falls
/// back to 1 when `‖w‖` or the denominator is zero.
pub fn trust_ratio_lr(
    weight_norm: f64,
    grad_norm: f64,
    eta: f64,
    weight_decay: f64,
    variant: TrustVariant,
    update_norm: Option<f64>,
    max_ratio: Option<f64>,
) -> Result<f64, AllocError> {
    let denom = match variant {
        TrustVariant::Lars => grad_norm + weight_decay * weight_norm,
        TrustVariant::Lamb => update_norm.ok_or(AllocError::MissingUpdateNorm)?,
    };
    let mut ratio = if weight_norm == 0.0 || denom == 0.0 {
        1.0
    } else {
        weight_norm / denom
    };
    if let (TrustVariant::Lamb, Some(max)) = (variant, max_ratio) {
        ratio = ratio.clamp(0.0, max);
    }
    Ok(eta * ratio)
}
