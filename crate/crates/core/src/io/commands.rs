//! The work behind each CLI subcommand, usable in-process.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::json::{ser_float, ser_floats, ser_opt_float, write_json};
use super::manifest::load_manifest;
use super::IoError;
use crate::allocate::{build_plan, Assignment, LayerAlpha, LrPlan, PlanConfig};
use crate::htsr::{alpha_std, analyze_layers, FitConfig, FitMethod, SpectralSummary};
use crate::schedule::{write_timeline_csv, ScheduleConfig, Scheduler, TimelineRow};
use crate::spectral::{LayerRole, WeightMatrix};
use crate::train::{run_training, LrMode, TrainError, TrainRun};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub role: LayerRole,
    pub n_eff: Option<usize>,
    pub k_used: Option<usize>,
    #[serde(serialize_with = "ser_opt_float")]
    pub alpha: Option<f64>,
    pub lambda_max: Option<f64>,
    pub fro_norm: Option<f64>,
    pub spec_norm: Option<f64>,
    pub assigned_lr: Option<f64>,
    /// Set when this layer could not be analysed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanMeta {
    pub eta: Option<f64>,
    pub s: Option<f64>,
    pub assignment: Option<Assignment>,
    pub method: FitMethod,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
    pub alpha_std: f64,
}

/// Per-layer spectral statistics of a checkpoint, in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub layers: Vec<LayerRecord>,
    pub meta: PlanMeta,
}

fn matrices_of(path: &Path) -> Result<Vec<WeightMatrix>> {
    let all = load_manifest(path)?;
    if !all.iter().any(|w| w.role.is_matrix()) {
        return Err(IoError::NothingToAnalyze.into());
    }
    Ok(all.into_iter().filter(|w| w.role.is_matrix()).collect())
}

fn sweep(matrices: &[WeightMatrix], fit: &FitConfig) -> Vec<(WeightMatrix, std::result::Result<SpectralSummary, String>)> {
    matrices
        .iter()
        .zip(analyze_layers(matrices, fit))
        .map(|(w, (_, r))| (w.clone(), r.map_err(|e| e.to_string())))
        .collect()
}

fn plan_for(fitted: &[SpectralSummary], cfg: &PlanConfig) -> Result<LrPlan> {
    if fitted.is_empty() {
        return Err(IoError::AllLayersFailed("no layer produced an exponent".into()).into());
    }
    let alphas: Vec<LayerAlpha> = fitted
        .iter()
        .map(|s| LayerAlpha::new(s.layer_name.clone(), s.role, s.alpha))
        .collect();
    Ok(build_plan(&alphas, cfg, 0)?)
}

fn finite_range(fitted: &[SpectralSummary]) -> (Option<f64>, Option<f64>) {
    let finite = fitted.iter().map(|s| s.alpha).filter(|a| a.is_finite());
    let lo = finite.clone().reduce(f64::min);
    (lo, finite.reduce(f64::max))
}

/// Spectral sweep over every matrix of a manifest, optionally with a learning-rate plan.
///
/// A layer that fails to fit gets a record with `error` set; the others are unaffected.
/// Failed layers take no part in the plan.
pub fn cmd_analyze(manifest: &Path, fit: &FitConfig, plan: Option<&PlanConfig>) -> Result<AnalysisReport> {
    let swept = sweep(&matrices_of(manifest)?, fit);
    let fitted: Vec<SpectralSummary> = swept.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
    let lr_plan = plan.map(|cfg| plan_for(&fitted, cfg)).transpose()?;
    let layers = swept
        .iter()
        .map(|(w, r)| match r {
            Ok(s) => LayerRecord {
                name: w.name.clone(),
                role: w.role,
                n_eff: Some(s.n_eff),
                k_used: Some(s.k_used),
                alpha: Some(s.alpha),
                lambda_max: Some(s.lambda_max),
                fro_norm: Some(s.fro_norm),
                spec_norm: Some(s.spec_norm),
                assigned_lr: lr_plan.as_ref().and_then(|p| p.base_lr(&w.name)),
                error: None,
            },
            Err(e) => LayerRecord {
                name: w.name.clone(),
                role: w.role,
                n_eff: None,
                k_used: None,
                alpha: None,
                lambda_max: None,
                fro_norm: None,
                spec_norm: None,
                assigned_lr: None,
                error: Some(e.clone()),
            },
        })
        .collect();
    let (alpha_min, alpha_max) = match &lr_plan {
        Some(p) => (Some(p.alpha_min), Some(p.alpha_max)),
        None => finite_range(&fitted),
    };
    Ok(AnalysisReport {
        layers,
        meta: PlanMeta {
            eta: plan.map(|p| p.eta),
            s: plan.map(|p| p.s),
            assignment: plan.map(|p| p.assignment),
            method: fit.method,
            alpha_min,
            alpha_max,
            alpha_std: alpha_std(&fitted),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanDocumentEntry {
    pub name: String,
    pub role: LayerRole,
    #[serde(serialize_with = "ser_float")]
    pub alpha: f64,
    pub base_lr: f64,
}

/// A learning-rate plan as written by `plan`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanDocument {
    pub eta: f64,
    pub s: f64,
    pub assignment: Assignment,
    pub method: FitMethod,
    #[serde(serialize_with = "ser_float")]
    pub alpha_min: f64,
    #[serde(serialize_with = "ser_float")]
    pub alpha_max: f64,
    pub entries: Vec<PlanDocumentEntry>,
}

/// Fits every matrix and builds one plan from the successful fits.
pub fn cmd_plan(manifest: &Path, fit: &FitConfig, cfg: &PlanConfig) -> Result<PlanDocument> {
    let swept = sweep(&matrices_of(manifest)?, fit);
    for (w, r) in &swept {
        if let Err(e) = r {
            log::warn!("layer `{}` left out of the plan: {e}", w.name);
        }
    }
    let fitted: Vec<SpectralSummary> = swept.into_iter().filter_map(|(_, r)| r.ok()).collect();
    let plan = plan_for(&fitted, cfg)?;
    Ok(PlanDocument {
        eta: cfg.eta,
        s: cfg.s,
        assignment: cfg.assignment,
        method: fit.method,
        alpha_min: plan.alpha_min,
        alpha_max: plan.alpha_max,
        entries: plan
            .entries
            .into_iter()
            .map(|e| PlanDocumentEntry {
                name: e.name,
                role: e.role,
                alpha: e.alpha,
                base_lr: e.base_lr,
            })
            .collect(),
    })
}

/// Inputs of `schedule`: a hypothetical run whose exponents never change.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRequest {
    pub schedule: ScheduleConfig,
    pub plan: PlanConfig,
    pub fit: FitConfig,
    /// Without a manifest a single layer named `global` is scheduled.
    pub manifest: Option<PathBuf>,
}

/// Per-layer rate at every step of `0..t_max`.
pub fn cmd_schedule(req: &ScheduleRequest) -> Result<Vec<TimelineRow>> {
    let alphas: Vec<LayerAlpha> = match &req.manifest {
        Some(path) => sweep(&matrices_of(path)?, &req.fit)
            .into_iter()
            .map(|(w, r)| LayerAlpha::new(w.name, w.role, r.map_or(f64::INFINITY, |s| s.alpha)))
            .collect(),
        None => vec![LayerAlpha::new("global", LayerRole::Other2D, 1.0)],
    };
    let mut sched = Scheduler::new(req.schedule, req.plan, alphas.iter().map(|a| (a.name.as_str(), a.role)))?;
    let mut rows = Vec::with_capacity(alphas.len() * req.schedule.t_max as usize);
    for t in 0..req.schedule.t_max {
        sched.step(t, |_| alphas.clone())?;
        for a in &alphas {
            rows.push(TimelineRow {
                step: t,
                layer: a.name.clone(),
                lr: sched.lr(&a.name, t)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAlphaRecord {
    pub name: String,
    pub role: LayerRole,
    #[serde(serialize_with = "ser_float")]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecomputeRecord {
    pub step: u64,
    pub alpha_std: f64,
    pub layers: Vec<LayerAlphaRecord>,
}

/// The `summary.json` written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub mode: LrMode,
    pub eta: f64,
    pub s: f64,
    pub assignment: Assignment,
    /// Step at which the loss stopped being finite, if it did.
    pub diverged_at: Option<u64>,
    #[serde(serialize_with = "ser_float")]
    pub final_loss: f64,
    #[serde(serialize_with = "ser_float")]
    pub mean_alpha_std: f64,
    pub recomputes: Vec<RecomputeRecord>,
    #[serde(serialize_with = "ser_floats")]
    pub losses: Vec<f64>,
}

impl RunSummary {
    fn new(cfg: &RunConfig, run: &TrainRun, diverged_at: Option<u64>) -> Self {
        Self {
            steps: cfg.steps,
            mode: cfg.optim.mode,
            eta: cfg.optim.eta,
            s: cfg.optim.plan.s,
            assignment: cfg.optim.plan.assignment,
            diverged_at,
            final_loss: run.final_loss,
            mean_alpha_std: run.mean_alpha_std(),
            recomputes: run
                .recompute_steps
                .iter()
                .zip(&run.alpha_history)
                .zip(&run.alpha_std_history)
                .map(|((&step, hist), &std)| RecomputeRecord {
                    step,
                    alpha_std: std,
                    layers: hist
                        .iter()
                        .map(|s| LayerAlphaRecord {
                            name: s.layer_name.clone(),
                            role: s.role,
                            alpha: s.alpha,
                        })
                        .collect(),
                })
                .collect(),
            losses: run.losses.clone(),
        }
    }
}

fn write_outputs(out_dir: &Path, run: &TrainRun, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| IoError::file(out_dir, e))?;
    let csv = out_dir.join("timeline.csv");
    let f = File::create(&csv).map_err(|e| IoError::file(&csv, e))?;
    write_timeline_csv(&run.lr_timeline, BufWriter::new(f)).map_err(|e| IoError::file(&csv, e))?;
    let json = out_dir.join("summary.json");
    let f = File::create(&json).map_err(|e| IoError::file(&json, e))?;
    write_json(summary, BufWriter::new(f)).map_err(|e| IoError::file(&json, e))?;
    Ok(())
}

/// Runs training and writes `timeline.csv` and `summary.json` into `out_dir`.
///
/// A diverged run still writes its partial telemetry before the error is returned.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    match run_training(&cfg.model, &cfg.optim, &cfg.data, cfg.steps) {
        Ok(run) => {
            let summary = RunSummary::new(cfg, &run, None);
            write_outputs(out_dir, &run, &summary)?;
            Ok(summary)
        }
        Err(TrainError::DivergedLoss { step, partial }) => {
            write_outputs(out_dir, &partial, &RunSummary::new(cfg, &partial, Some(step)))?;
            Err(TrainError::DivergedLoss { step, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}
