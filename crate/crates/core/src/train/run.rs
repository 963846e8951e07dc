//! The training loop with periodic spectral plans.

use serde::Serialize;

use super::corpus::{BatchSampler, DataConfig};
use super::forward::{forward_loss, loss_and_grads};
use super::model::{build_model, ModelConfig};
use super::optim::{adamw_step, AdamState, LrMode, OptimConfig};
use super::TrainError;
use crate::allocate::{LayerAlpha, PlanConfig};
use crate::htsr::{alpha_std, analyze_layers, FitConfig, SpectralSummary};
use crate::schedule::{base_lr_at, recompute_due, ScheduleConfig, ScheduleState, Scheduler, TimelineRow};
use crate::spectral::WeightMatrix;

/// Telemetry of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainRun {
    /// Training loss at every completed step, measured before that step's update.
    pub losses: Vec<f64>,
    /// Rate applied to every matrix layer at every step.
    pub lr_timeline: Vec<TimelineRow>,
    /// Matrix layer names, in parameter order.
    pub layers: Vec<String>,
    pub recompute_steps: Vec<u64>,
    /// Spectral summaries at each recompute step.
    pub alpha_history: Vec<Vec<SpectralSummary>>,
    pub alpha_std_history: Vec<f64>,
    /// Scheduler state after each recompute (empty for uniform runs).
    pub schedule_snapshots: Vec<ScheduleState>,
    /// Mean loss over the held-out windows after the last step.
    pub final_loss: f64,
}

impl TrainRun {
    pub fn mean_alpha_std(&self) -> f64 {
        if self.alpha_std_history.is_empty() {
            return f64::NAN;
        }
        self.alpha_std_history.iter().sum::<f64>() / self.alpha_std_history.len() as f64
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub steps: u64,
}

fn sweep(params: &[WeightMatrix], fit: &FitConfig) -> (Vec<SpectralSummary>, Vec<LayerAlpha>) {
    let mut summaries = Vec::new();
    let mut alphas = Vec::new();
    for (w, (_, res)) in params
        .iter()
        .filter(|w| w.role.is_matrix())
        .zip(analyze_layers(params, fit))
    {
        match res {
            Ok(s) => {
                alphas.push(LayerAlpha::new(w.name.clone(), w.role, s.alpha));
                summaries.push(s);
            }
            Err(e) => {
                log::warn!("spectral fit failed for {}: {e}", w.name);
                alphas.push(LayerAlpha::new(w.name.clone(), w.role, f64::INFINITY));
            }
        }
    }
    (summaries, alphas)
}

/// Train a fresh model for `steps` steps.
///
/// `steps` sets the schedule horizon (`opt.schedule.t_max` is replaced) and `opt.eta`
/// sets the plan's base rate. In [`LrMode::Uniform`] the spectral sweep still runs at
/// every would-be recompute step, for telemetry only.
pub fn run_training(
    model_cfg: &ModelConfig,
    opt: &OptimConfig,
    data_cfg: &DataConfig,
    steps: u64,
) -> Result<TrainRun, TrainError> {
    let sched_cfg = ScheduleConfig {
        t_max: steps,
        ..opt.schedule
    };
    let plan_cfg = PlanConfig {
        eta: opt.eta,
        ..opt.plan
    };
    let opt = OptimConfig {
        schedule: sched_cfg,
        plan: plan_cfg,
        ..*opt
    };
    opt.validate()?;
    if data_cfg.vocab != model_cfg.vocab {
        return Err(TrainError::InvalidConfig(format!(
            "data vocab {} differs from model vocab {}",
            data_cfg.vocab, model_cfg.vocab
        )));
    }
    let mut model = build_model(model_cfg)?;
    let mut sampler = BatchSampler::new(data_cfg, model_cfg.context)?;
    let mut adam = AdamState::new(&model.params);
    let layers = model.matrix_layers();
    let mut scheduler = match opt.mode {
        LrMode::Llr => Some(Scheduler::new(
            sched_cfg,
            plan_cfg,
            layers.iter().map(|(n, r)| (n.as_str(), *r)),
        )?),
        LrMode::Uniform => None,
    };
    let is_matrix: Vec<bool> = model.params.iter().map(|p| p.role.is_matrix()).collect();

    let mut run = TrainRun {
        layers: layers.iter().map(|(n, _)| n.clone()).collect(),
        ..TrainRun::default()
    };
    let mut lrs = vec![0.0; model.params.len()];
    for t in 0..steps {
        let batch = sampler.next_batch();
        let (loss, mut grads) = loss_and_grads(&model, &batch, 1.0)?;
        if !loss.is_finite() {
            run.final_loss = f64::NAN;
            return Err(TrainError::DivergedLoss {
                step: t,
                partial: Box::new(run),
            });
        }
        run.losses.push(loss);

        let mut record = |summaries: Vec<SpectralSummary>| {
            run.recompute_steps.push(t);
            run.alpha_std_history.push(alpha_std(&summaries));
            run.alpha_history.push(summaries);
        };
        let base = base_lr_at(&sched_cfg, opt.eta, t)?;
        match scheduler.as_mut() {
            Some(s) => {
                let recomputed = s.step(t, |_| {
                    let (summaries, alphas) = sweep(&model.params, &opt.fit);
                    record(summaries);
                    alphas
                })?;
                if recomputed {
                    log::debug!("step {t}: new plan, max rate {}", s.state().current_plan.max_lr());
                }
                for (i, p) in model.params.iter().enumerate() {
                    lrs[i] = if is_matrix[i] { s.lr(&p.name, t)? } else { base };
                }
            }
            None => {
                if recompute_due(&sched_cfg, t, false) {
                    record(sweep(&model.params, &opt.fit).0);
                }
                lrs.fill(base);
            }
        }
        for (i, p) in model.params.iter().enumerate() {
            if is_matrix[i] {
                run.lr_timeline.push(TimelineRow {
                    step: t,
                    layer: p.name.clone(),
                    lr: lrs[i],
                });
            }
        }
        adamw_step(&mut model.params, &mut grads, &mut adam, t + 1, &lrs, &opt)?;
    }
    if let Some(s) = scheduler {
        run.schedule_snapshots = s.snapshots().to_vec();
    }

    let eval = sampler.eval_batches();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in &eval {
        total += forward_loss(&model, b)? * b.seqs as f64;
        count += b.seqs;
    }
    run.final_loss = total / count as f64;
    if !run.final_loss.is_finite() {
        return Err(TrainError::DivergedLoss {
            step: steps,
            partial: Box::new(run),
        });
    }
    Ok(run)
}

/// Independent runs, fanned out over the thread pool under the `parallel` feature.
pub fn run_many(specs: &[RunSpec]) -> Vec<Result<TrainRun, TrainError>> {
    crate::par::map(specs, |s| run_training(&s.model, &s.optim, &s.data, s.steps))
}
