//! AdamW with global-norm clipping and optional LARS/LAMB trust ratios.

use serde::{Deserialize, Serialize};

use super::tensor::l2_norm;
use super::TrainError;
use crate::allocate::{trust_ratio_lr, PlanConfig, TrustVariant};
use crate::htsr::FitConfig;
use crate::schedule::ScheduleConfig;
use crate::spectral::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "adamw-lars")]
    AdamWLars,
    #[serde(rename = "adamw-lamb")]
    AdamWLamb,
}

/// Where per-layer learning rates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrMode {
    /// One schedule for every parameter.
    #[default]
    Uniform,
    /// Spectral plans recomputed during the active phase.
    Llr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    /// Peak learning rate. Overrides `plan.eta` when training.
    pub eta: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub mode: LrMode,
    pub plan: PlanConfig,
    pub schedule: ScheduleConfig,
    pub fit: FitConfig,
    /// LAMB trust-ratio ceiling.
    pub lamb_max_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            eta: 1e-3,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            mode: LrMode::Uniform,
            plan: PlanConfig::default(),
            schedule: ScheduleConfig::default(),
            fit: FitConfig::default(),
            lamb_max_ratio: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.lamb_max_ratio > 0.0) {
            return bad("lamb_max_ratio must be positive");
        }
        PlanConfig { eta: self.eta, ..self.plan }.validate()?;
        self.schedule.validate()?;
        Ok(())
    }
}

/// First and second moments, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[WeightMatrix]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when unclipped).
    pub clip_scale: f64,
}

/// Scales all gradients by `max_norm / norm` when their joint norm exceeds `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> StepStats {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let mut scale = 1.0;
    if norm > max_norm {
        scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    StepStats {
        grad_norm: norm,
        clip_scale: scale,
    }
}

/// One optimizer step. `t` is 1-based; `lrs` holds one rate per parameter.
pub fn adamw_step(
    params: &mut [WeightMatrix],
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    t: u64,
    lrs: &[f64],
    opt: &OptimConfig,
) -> Result<StepStats, TrainError> {
    let n = params.len();
    if grads.len() != n || lrs.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "{n} params, {} grads, {} rates, {} moments",
            grads.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if grads[i].len() != p.len() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(TrainError::ShapeMismatch(format!("parameter {}", p.name)));
        }
    }
    if t == 0 {
        return Err(TrainError::InvalidConfig("optimizer step index is 1-based".into()));
    }
    let stats = clip_global_norm(grads, opt.grad_clip);
    let (b1, b2) = opt.betas;
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    let wd = opt.weight_decay;

    let mut update = Vec::new();
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        update.clear();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            update.push(mhat / (vhat.sqrt() + opt.eps));
        }
        let lr = match opt.optimizer {
            OptimizerKind::AdamW => lrs[i],
            OptimizerKind::AdamWLars => {
                trust_ratio_lr(l2_norm(p.values()), l2_norm(g), lrs[i], wd, TrustVariant::Lars, None, None)?
            }
            OptimizerKind::AdamWLamb => {
                let u_norm = p
                    .values()
                    .iter()
                    .zip(&update)
                    .map(|(w, u)| (u + wd * w).powi(2))
                    .sum::<f64>()
                    .sqrt();
                trust_ratio_lr(
                    l2_norm(p.values()),
                    l2_norm(g),
                    lrs[i],
                    wd,
                    TrustVariant::Lamb,
                    Some(u_norm),
                    Some(opt.lamb_max_ratio),
                )?
            }
        };
        let decay = 1.0 - lr * wd;
        for (w, u) in p.values_mut().iter_mut().zip(&update) {
            *w = *w * decay - lr * u;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> Vec<WeightMatrix> {
        vec![WeightMatrix::vector("w", vec![w]).unwrap()]
    }

    fn opt(wd: f64) -> OptimConfig {
        OptimConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: wd,
            grad_clip: 1e9,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn first_step_is_sign_step() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &mut [vec![1.0]], &mut st, 1, &[0.1], &opt(0.0)).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = scalar(2.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &mut [vec![0.0]], &mut st, 1, &[0.1], &opt(0.1)).unwrap();
        assert_eq!(p[0].values()[0], 2.0 * (1.0 - 0.1 * 0.1));
    }

    #[test]
    fn clipping_scales_before_moments() {
        let mut g = vec![vec![6.0, 8.0]];
        let s = clip_global_norm(&mut g, 1.0);
        assert_eq!(s.grad_norm, 10.0);
        assert_eq!(s.clip_scale, 0.1);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);

        let mut p = vec![WeightMatrix::vector("w", vec![0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let cfg = OptimConfig {
            grad_clip: 1.0,
            ..opt(0.0)
        };
        adamw_step(&mut p, &mut [vec![6.0, 8.0]], &mut st, 1, &[0.1], &cfg).unwrap();
        assert!((st.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        let r = adamw_step(&mut p, &mut [vec![1.0, 2.0]], &mut st, 1, &[0.1], &opt(0.0));
        assert!(matches!(r, Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn lamb_ratio_is_capped() {
        let mut p = scalar(1e6);
        let mut st = AdamState::new(&p);
        let cfg = OptimConfig {
            optimizer: OptimizerKind::AdamWLamb,
            ..opt(0.0)
        };
        adamw_step(&mut p, &mut [vec![1.0]], &mut st, 1, &[0.01], &cfg).unwrap();
        let step = 1e6 - p[0].values()[0];
        assert!((step - 0.1 / (1.0 + 1e-8)).abs() < 1e-6, "{step}");
    }
}
