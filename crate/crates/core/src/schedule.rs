//! Per-step, per-layer learning-rate trajectories.
//!
//! A base shape (linear warmup then cosine, or warmup-stable-decay) is evaluated
//! with each layer's own peak from the current [`LrPlan`]. Plans are recomputed
//! every `recompute_interval` steps while inside the active phase, then frozen.
//! When a plan changes a layer's peak, the layer's rate is blended linearly from
//! its value at the recompute step to the new schedule's value `t_switch` steps
//! later (soft switch), or jumps immediately (hard switch).

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocate::{build_plan, AllocError, LayerAlpha, LrPlan, PlanConfig};
use crate::io::sig17;
use crate::spectral::LayerRole;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step {t} is outside [0, {t_max}]")]
    StepOutOfRange { t: u64, t_max: u64 },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("expected step {expected}, got {got}")]
    NonMonotonicStep { expected: u64, got: u64 },
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error("no recorded schedule states")]
    EmptyHistory,
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseSchedule {
    #[default]
    #[serde(rename = "cosine")]
    CosineWarmup,
    Wsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub base: BaseSchedule,
    /// Total number of optimizer steps.
    pub t_max: u64,
    pub warmup_steps: u64,
    /// End-of-decay floor as a fraction of the peak.
    pub min_lr_fraction: f64,
    /// Steps between plan recomputes.
    pub recompute_interval: u64,
    /// Length of the soft-switch window.
    pub t_switch: u64,
    /// Fraction of training during which plans are recomputed.
    pub active_fraction: f64,
    pub switch_mode: SwitchMode,
    /// WSD only: fraction of post-warmup steps held at the peak.
    pub wsd_stable_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base: BaseSchedule::CosineWarmup,
            t_max: 1000,
            warmup_steps: 100,
            min_lr_fraction: 0.0,
            recompute_interval: 100,
            t_switch: 50,
            active_fraction: 0.2,
            switch_mode: SwitchMode::Soft,
            wsd_stable_fraction: 0.8,
        }
    }
}

impl ScheduleConfig {
    /// Defaults scaled to a run of `t_max` steps: 10% warmup, the rest unchanged.
    pub fn for_steps(t_max: u64) -> Self {
        Self {
            t_max,
            warmup_steps: t_max / 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidConfig(m));
        if self.t_max == 0 {
            return bad("t_max must be positive".into());
        }
        if self.warmup_steps >= self.t_max {
            return bad(format!("warmup_steps {} >= t_max {}", self.warmup_steps, self.t_max));
        }
        if self.recompute_interval == 0 || self.recompute_interval > self.t_max {
            return bad(format!("recompute_interval {} not in [1, t_max]", self.recompute_interval));
        }
        if self.t_switch == 0 || self.t_switch > self.recompute_interval {
            return bad(format!("t_switch {} not in [1, interval]", self.t_switch));
        }
        if !(self.active_fraction > 0.0 && self.active_fraction <= 1.0) {
            return bad(format!("active_fraction {} not in (0, 1]", self.active_fraction));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad(format!("min_lr_fraction {} not in [0, 1]", self.min_lr_fraction));
        }
        if self.base == BaseSchedule::Wsd
            && !(self.wsd_stable_fraction > 0.0 && self.wsd_stable_fraction < 1.0)
        {
            return bad(format!("wsd_stable_fraction {} not in (0, 1)", self.wsd_stable_fraction));
        }
        Ok(())
    }

    /// Last step (inclusive) at which a recompute may still happen.
    fn active_end(&self) -> f64 {
        self.active_fraction * self.t_max as f64
    }
}

/// Learning rate of the base shape with peak `peak` at step `t`.
pub fn base_lr_at(cfg: &ScheduleConfig, peak: f64, t: u64) -> Result<f64, ScheduleError> {
    if t > cfg.t_max {
        return Err(ScheduleError::StepOutOfRange { t, t_max: cfg.t_max });
    }
    let tw = cfg.warmup_steps;
    if t < tw {
        return Ok(peak * t as f64 / tw as f64);
    }
    let floor = cfg.min_lr_fraction;
    let span = (cfg.t_max - tw) as f64;
    let lr = match cfg.base {
        BaseSchedule::CosineWarmup => {
            let progress = (t - tw) as f64 / span;
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            peak * (floor + (1.0 - floor) * cosine)
        }
        BaseSchedule::Wsd => {
            let decay_start = tw + (cfg.wsd_stable_fraction * span).round() as u64;
            if t < decay_start {
                peak
            } else {
                let progress = (t - decay_start) as f64 / (cfg.t_max - decay_start).max(1) as f64;
                peak * (1.0 - (1.0 - floor) * progress)
            }
        }
    };
    Ok(lr)
}

/// Scheduler state after a given step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleState {
    /// Last step processed by [`on_step`]; `None` before the first call.
    pub step: Option<u64>,
    pub current_plan: LrPlan,
    pub previous_plan: LrPlan,
    /// Step `T` at which `current_plan` was computed.
    pub last_recompute_step: u64,
    /// End (exclusive) of the switch window opened at `T`.
    pub in_switch_until: u64,
    /// The active phase is over; the plan no longer changes.
    pub frozen: bool,
}

impl ScheduleState {
    /// Fresh state with every layer at the global learning rate.
    pub fn new<'a>(layers: impl IntoIterator<Item = (&'a str, LayerRole)>, eta: f64) -> Self {
        let plan = LrPlan::uniform(layers, eta);
        Self {
            step: None,
            current_plan: plan.clone(),
            previous_plan: plan,
            last_recompute_step: 0,
            in_switch_until: 0,
            frozen: false,
        }
    }
}

/// Learning rate of `layer` at step `t` under `state`.
///
/// Inside the switch window `[T, T + t_switch)` the rate interpolates linearly from
/// the previous plan's scheduled value at `T` to the current plan's scheduled value at
/// the window end. Layers whose peak did not change follow the base schedule directly.
pub fn layer_lr_at(
    state: &ScheduleState,
    cfg: &ScheduleConfig,
    layer: &str,
    t: u64,
) -> Result<f64, ScheduleError> {
    let peak = state
        .current_plan
        .base_lr(layer)
        .ok_or_else(|| ScheduleError::UnknownLayer(layer.to_string()))?;
    let start_step = state.last_recompute_step;
    let prev_peak = state.previous_plan.base_lr(layer).unwrap_or(peak);
    if t < start_step {
        return base_lr_at(cfg, prev_peak, t);
    }
    let end = state.in_switch_until;
    if t < end && prev_peak != peak {
        let start = base_lr_at(cfg, prev_peak, start_step)?;
        let target = base_lr_at(cfg, peak, end)?;
        let frac = (t - start_step) as f64 / (end - start_step) as f64;
        return Ok(start + (target - start) * frac);
    }
    base_lr_at(cfg, peak, t)
}

/// Whether a plan recompute happens at step `t` (given the frozen flag before `t`).
pub fn recompute_due(cfg: &ScheduleConfig, t: u64, frozen: bool) -> bool {
    !frozen
        && t < cfg.t_max
        && (t as f64) <= cfg.active_end()
        && t % cfg.recompute_interval == 0
}

/// Number of plans a full run produces.
pub fn recompute_count(cfg: &ScheduleConfig) -> usize {
    (0..cfg.t_max).filter(|&t| recompute_due(cfg, t, false)).count()
}

/// Advance the schedule to step `t`.
///
/// On a recompute step the provider is asked for fresh per-layer exponents, a new
/// plan is built and a switch window opens. Once `t` passes the active phase the
/// state freezes on its last plan.
pub fn on_step<F>(
    state: &ScheduleState,
    cfg: &ScheduleConfig,
    t: u64,
    alpha_provider: F,
    plan_cfg: &PlanConfig,
) -> Result<ScheduleState, ScheduleError>
where
    F: FnOnce(u64) -> Vec<LayerAlpha>,
{
    let expected = state.step.map_or(0, |s| s + 1);
    if t != expected {
        return Err(ScheduleError::NonMonotonicStep { expected, got: t });
    }
    let mut next = state.clone();
    next.step = Some(t);
    if !next.frozen && t as f64 > cfg.active_end() {
        next.frozen = true;
    }
    if recompute_due(cfg, t, next.frozen) {
        let plan = build_plan(&alpha_provider(t), plan_cfg, t)?;
        next.previous_plan = std::mem::replace(&mut next.current_plan, plan);
        next.last_recompute_step = t;
        next.in_switch_until = match cfg.switch_mode {
            SwitchMode::Soft => (t + cfg.t_switch).min(cfg.t_max),
            SwitchMode::Hard => t,
        };
    }
    Ok(next)
}

/// Owns a [`ScheduleState`] and keeps a snapshot after every recompute so that any
/// past step can be replayed.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub cfg: ScheduleConfig,
    pub plan_cfg: PlanConfig,
    state: ScheduleState,
    snapshots: Vec<ScheduleState>,
}

impl Scheduler {
    pub fn new<'a>(
        cfg: ScheduleConfig,
        plan_cfg: PlanConfig,
        layers: impl IntoIterator<Item = (&'a str, LayerRole)>,
    ) -> Result<Self, ScheduleError> {
        cfg.validate()?;
        plan_cfg.validate()?;
        Ok(Self {
            state: ScheduleState::new(layers, plan_cfg.eta),
            cfg,
            plan_cfg,
            snapshots: Vec::new(),
        })
    }

    /// Returns whether a new plan was computed at `t`.
    pub fn step<F>(&mut self, t: u64, alpha_provider: F) -> Result<bool, ScheduleError>
    where
        F: FnOnce(u64) -> Vec<LayerAlpha>,
    {
        let mut recomputed = false;
        let next = on_step(
            &self.state,
            &self.cfg,
            t,
            |t| {
                recomputed = true;
                alpha_provider(t)
            },
            &self.plan_cfg,
        )?;
        self.state = next;
        if recomputed {
            self.snapshots.push(self.state.clone());
        }
        Ok(recomputed)
    }

    pub fn state(&self) -> &ScheduleState {
        &self.state
    }

    pub fn snapshots(&self) -> &[ScheduleState] {
        &self.snapshots
    }

    pub fn plans(&self) -> impl Iterator<Item = &LrPlan> {
        self.snapshots.iter().map(|s| &s.current_plan)
    }

    pub fn lr(&self, layer: &str, t: u64) -> Result<f64, ScheduleError> {
        layer_lr_at(&self.state, &self.cfg, layer, t)
    }
}

/// One row of the exported timeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineRow {
    pub step: u64,
    pub layer: String,
    pub lr: f64,
}

/// Learning rate of `layer` at `t`, replayed from recorded snapshots.
pub fn replay_lr(
    snapshots: &[ScheduleState],
    cfg: &ScheduleConfig,
    layer: &str,
    t: u64,
) -> Result<f64, ScheduleError> {
    let first = snapshots.first().ok_or(ScheduleError::EmptyHistory)?;
    let state = snapshots
        .iter()
        .rev()
        .find(|s| s.last_recompute_step <= t)
        .unwrap_or(first);
    layer_lr_at(state, cfg, layer, t)
}

/// Dense step-major table of every layer's rate over `steps`.
pub fn export_timeline(
    snapshots: &[ScheduleState],
    cfg: &ScheduleConfig,
    layers: &[String],
    steps: Range<u64>,
) -> Result<Vec<TimelineRow>, ScheduleError> {
    let mut rows = Vec::with_capacity(layers.len() * (steps.end - steps.start) as usize);
    for t in steps {
        for layer in layers {
            rows.push(TimelineRow {
                step: t,
                layer: layer.clone(),
                lr: replay_lr(snapshots, cfg, layer, t)?,
            });
        }
    }
    Ok(rows)
}

/// `step,layer,lr` CSV with 17 significant digits, LF line endings.
pub fn write_timeline_csv<W: Write>(rows: &[TimelineRow], mut out: W) -> std::io::Result<()> {
    out.write_all(b"step,layer,lr\n")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.layer, sig17(r.lr))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocate::Assignment;
    use approx::assert_relative_eq;

    fn cosine(t_max: u64, warmup: u64) -> ScheduleConfig {
        ScheduleConfig {
            t_max,
            warmup_steps: warmup,
            ..ScheduleConfig::default()
        }
    }

    /// WSD without warmup: flat at the peak for the first 99% of the run.
    fn flat(t_max: u64, interval: u64, t_switch: u64, mode: SwitchMode) -> ScheduleConfig {
        ScheduleConfig {
            base: BaseSchedule::Wsd,
            t_max,
            warmup_steps: 0,
            recompute_interval: interval,
            t_switch,
            active_fraction: 1.0,
            switch_mode: mode,
            wsd_stable_fraction: 0.99,
            ..ScheduleConfig::default()
        }
    }

    fn two_layer_state(prev: f64, cur: f64, t: u64, until: u64) -> ScheduleState {
        let mk = |lr| LrPlan {
            entries: vec![crate::allocate::PlanEntry {
                name: "a".into(),
                role: LayerRole::AttQ,
                alpha: 2.0,
                base_lr: lr,
            }],
            alpha_min: 2.0,
            alpha_max: 2.0,
            created_at_step: t,
        };
        ScheduleState {
            step: Some(t),
            current_plan: mk(cur),
            previous_plan: mk(prev),
            last_recompute_step: t,
            in_switch_until: until,
            frozen: false,
        }
    }

    #[test]
    fn warmup_ends() {
        let c = cosine(1000, 100);
        assert_eq!(base_lr_at(&c, 1e-3, 0).unwrap(), 0.0);
        assert_eq!(base_lr_at(&c, 1e-3, 100).unwrap(), 1e-3);
        assert_relative_eq!(base_lr_at(&c, 1e-3, 50).unwrap(), 5e-4, max_relative = 1e-15);
        assert!(base_lr_at(&c, 1e-3, 1001).is_err());
    }

    #[test]
    fn cosine_midpoint_and_end() {
        let c = cosine(1100, 100);
        assert!((base_lr_at(&c, 1e-3, 600).unwrap() - 5e-4).abs() <= 1e-12);
        assert!(base_lr_at(&c, 1e-3, 1100).unwrap().abs() <= 1e-18);
        let floored = ScheduleConfig {
            min_lr_fraction: 0.1,
            ..c
        };
        assert_relative_eq!(base_lr_at(&floored, 1.0, 1100).unwrap(), 0.1, max_relative = 1e-12);
    }

    #[test]
    fn wsd_shape() {
        let c = ScheduleConfig {
            base: BaseSchedule::Wsd,
            ..cosine(1100, 100)
        };
        // stable for 800 of the 1000 post-warmup steps, then linear to zero
        assert_eq!(base_lr_at(&c, 2.0, 899).unwrap(), 2.0);
        assert_eq!(base_lr_at(&c, 2.0, 900).unwrap(), 2.0);
        assert_relative_eq!(base_lr_at(&c, 2.0, 1000).unwrap(), 1.0, max_relative = 1e-15);
        assert_eq!(base_lr_at(&c, 2.0, 1100).unwrap(), 0.0);
    }

    #[test]
    fn soft_switch_midpoint_and_window_end() {
        let c = flat(1000, 100, 50, SwitchMode::Soft);
        let st = two_layer_state(1e-3, 3e-3, 100, 150);
        assert_relative_eq!(layer_lr_at(&st, &c, "a", 125).unwrap(), 2e-3, max_relative = 1e-14);
        assert_eq!(layer_lr_at(&st, &c, "a", 100).unwrap(), 1e-3);
        assert_eq!(
            layer_lr_at(&st, &c, "a", 150).unwrap(),
            base_lr_at(&c, 3e-3, 150).unwrap()
        );
        assert_eq!(
            layer_lr_at(&st, &c, "zzz", 120),
            Err(ScheduleError::UnknownLayer("zzz".into()))
        );
    }

    #[test]
    fn recompute_cadence() {
        let c = ScheduleConfig {
            t_max: 1000,
            recompute_interval: 100,
            active_fraction: 0.2,
            ..ScheduleConfig::default()
        };
        assert_eq!(recompute_count(&c), 3);
        let full = ScheduleConfig {
            active_fraction: 1.0,
            ..c
        };
        assert_eq!(recompute_count(&full), 10);
    }

    #[test]
    fn scheduler_freezes_after_active_phase() {
        let c = ScheduleConfig {
            t_max: 1000,
            ..ScheduleConfig::default()
        };
        let layers = [("a", LayerRole::AttQ), ("b", LayerRole::FfnUp)];
        let mut s = Scheduler::new(c, PlanConfig::default(), layers).unwrap();
        let mut calls = vec![];
        for t in 0..1000 {
            let alpha = 2.0 + t as f64 / 1000.0;
            s.step(t, |t| {
                calls.push(t);
                vec![
                    LayerAlpha::new("a", LayerRole::AttQ, alpha),
                    LayerAlpha::new("b", LayerRole::FfnUp, 2.0 * alpha),
                ]
            })
            .unwrap();
        }
        assert_eq!(calls, vec![0, 100, 200]);
        assert_eq!(s.snapshots().len(), 3);
        assert!(s.state().frozen);
        assert_eq!(s.state().current_plan.created_at_step, 200);
    }

    #[test]
    fn non_monotonic_step_is_rejected() {
        let layers = [("a", LayerRole::AttQ)];
        let mut s = Scheduler::new(ScheduleConfig::default(), PlanConfig::default(), layers).unwrap();
        let provider = |_| vec![LayerAlpha::new("a", LayerRole::AttQ, 2.0)];
        s.step(0, provider).unwrap();
        assert_eq!(
            s.step(2, provider),
            Err(ScheduleError::NonMonotonicStep { expected: 1, got: 2 })
        );
    }

    #[test]
    fn identical_alphas_follow_base_schedule() {
        let c = ScheduleConfig {
            active_fraction: 1.0,
            ..cosine(400, 40)
        };
        let pc = PlanConfig {
            assignment: Assignment::Linear,
            ..PlanConfig::default()
        };
        let layers = [("a", LayerRole::AttQ), ("b", LayerRole::FfnUp), ("e", LayerRole::Embedding)];
        let mut s = Scheduler::new(c, pc, layers).unwrap();
        let alphas = vec![
            LayerAlpha::new("a", LayerRole::AttQ, 2.0),
            LayerAlpha::new("b", LayerRole::FfnUp, 4.0),
            LayerAlpha::new("e", LayerRole::Embedding, 3.0),
        ];
        let mut prev = None;
        let mut max_jump: f64 = 0.0;
        for t in 0..400 {
            s.step(t, |_| alphas.clone()).unwrap();
            let lr = s.lr("b", t).unwrap();
            if t > 60 {
                assert_eq!(lr, base_lr_at(&c, 5e-3, t).unwrap());
            }
            if let Some(p) = prev {
                max_jump = max_jump.max((lr - p as f64).abs());
            }
            prev = Some(lr);
        }
        let plans: Vec<_> = s.plans().map(|p| p.entries.clone()).collect();
        assert!(plans.windows(2).all(|w| w[0] == w[1]));
        // no discontinuity larger than one warmup increment of the top rate
        assert!(max_jump <= 5e-3 / 40.0 + 1e-15);
    }

    #[test]
    fn timeline_csv_format() {
        let c = flat(10, 5, 2, SwitchMode::Soft);
        let layers = [("a", LayerRole::AttQ), ("b", LayerRole::FfnUp)];
        let mut s = Scheduler::new(c, PlanConfig::default(), layers).unwrap();
        for t in 0..3 {
            s.step(t, |_| {
                vec![
                    LayerAlpha::new("a", LayerRole::AttQ, 2.0),
                    LayerAlpha::new("b", LayerRole::FfnUp, 3.0),
                ]
            })
            .unwrap();
        }
        let names = vec!["a".to_string(), "b".to_string()];
        let rows = export_timeline(s.snapshots(), &c, &names, 0..3).unwrap();
        assert_eq!(rows.len(), 6);
        let mut buf = Vec::new();
        write_timeline_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,layer,lr"));
        assert_eq!(lines.next(), Some("0,a,1.0000000000000000e-3"));
        assert_eq!(lines.next(), Some("0,b,1.0000000000000000e-3"));
        assert_eq!(lines.next(), Some("1,a,1.0000000000000000e-3"));
        assert_eq!(lines.next(), Some("1,b,3.0000000000000001e-3"));
        assert!(!text.contains('\r'));
    }
}
