//! Power-law tail fitting of spectral densities (`PL_Alpha_Hill`).
//!
//! The tail exponent is estimated with the Hill estimator over the top `k`
//! eigenvalues. Three ways of picking `k` are supported: the median rule
//! (`k = n/2`, the default), a histogram-peak rule ("fix-finger") and a
//! Kolmogorov–Smirnov scan ("goodness of fit").

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{self, Esd, LayerRole, SpectralError, WeightMatrix};

/// Log-sums below this are treated as a degenerate (flat) tail.
const DEGENERATE_LOG_SUM: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HtsrError {
    #[error("cutoff eigenvalue is not positive")]
    ZeroCutoff,
    #[error("k = {k} is out of range for {n} eigenvalues")]
    BadK { k: usize, n: usize },
    #[error("need at least 4 positive eigenvalues, got {0}")]
    TooFewEigenvalues(usize),
    #[error("gradient norm required for the GradNorm metric")]
    MissingGradient,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    #[default]
    Median,
    #[serde(rename = "fixfinger")]
    FixFinger,
    #[serde(rename = "gof")]
    GoodnessOfFit,
}

impl FitMethod {
    pub fn tag(self) -> &'static str {
        match self {
            FitMethod::Median => "median",
            FitMethod::FixFinger => "fixfinger",
            FitMethod::GoodnessOfFit => "gof",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Bypasses cutoff selection when set.
    pub k_override: Option<usize>,
    /// Histogram bins (log10 space) for the fix-finger rule.
    pub fix_finger_bins: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: FitMethod::Median,
            k_override: None,
            fix_finger_bins: 100,
        }
    }
}

impl FitConfig {
    pub fn with_method(method: FitMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }
}

/// Hill estimate over the top `k` of `eigs` (sorted ascending).
///
/// `1 + k / Σ_{i=1..k} ln(λ_{n-i+1} / λ_{n-k})`. A flat tail (all top-`k`
/// eigenvalues equal to the cutoff) yields `f64::INFINITY`.
pub fn hill_alpha(eigs: &[f64], k: usize) -> Result<f64, HtsrError> {
    let n = eigs.len();
    if k == 0 || k >= n {
        return Err(HtsrError::BadK { k, n });
    }
    let cutoff = eigs[n - k - 1];
    if cutoff <= 0.0 {
        return Err(HtsrError::ZeroCutoff);
    }
    let log_sum: f64 = eigs[n - k..].iter().map(|&x| (x / cutoff).ln()).sum();
    if log_sum < DEGENERATE_LOG_SUM {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 + k as f64 / log_sum)
}

/// Kolmogorov–Smirnov distance between the empirical distribution of the top
/// `k` eigenvalues and a continuous power law with exponent `alpha` starting at
/// the cutoff `λ_{n-k}`.
pub fn ks_distance(eigs: &[f64], k: usize, alpha: f64) -> Result<f64, HtsrError> {
    let n = eigs.len();
    if k == 0 || k >= n {
        return Err(HtsrError::BadK { k, n });
    }
    let xmin = eigs[n - k - 1];
    if xmin <= 0.0 {
        return Err(HtsrError::ZeroCutoff);
    }
    if !alpha.is_finite() {
        return Ok(f64::INFINITY);
    }
    let kf = k as f64;
    let d = eigs[n - k..]
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let model = 1.0 - (x / xmin).powf(1.0 - alpha);
            let above = ((j + 1) as f64 / kf - model).abs();
            let below = (j as f64 / kf - model).abs();
            above.max(below)
        })
        .fold(0.0, f64::max);
    Ok(d)
}

/// Result of a tail fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub alpha: f64,
    pub k_used: usize,
    /// Positive eigenvalues that entered the fit.
    pub n_fit: usize,
}

/// Fit the tail exponent of an arbitrary-order eigenvalue list.
///
/// Sorts internally and drops non-positive eigenvalues before fitting.
pub fn fit_alpha(eigs: &[f64], cfg: &FitConfig) -> Result<Fit, HtsrError> {
    let mut pos: Vec<f64> = eigs.iter().copied().filter(|&x| x > 0.0).collect();
    pos.sort_by(f64::total_cmp);
    let n = pos.len();
    if n < 4 {
        return Err(HtsrError::TooFewEigenvalues(n));
    }
    let k = match cfg.k_override {
        Some(k) => k,
        None => match cfg.method {
            FitMethod::Median => n / 2,
            FitMethod::FixFinger => fix_finger_k(&pos, cfg.fix_finger_bins.max(1)),
            FitMethod::GoodnessOfFit => gof_k(&pos)?,
        },
    };
    let alpha = hill_alpha(&pos, k)?;
    Ok(Fit {
        alpha,
        k_used: k,
        n_fit: n,
    })
}

/// Cutoff at the first eigenvalue inside the peak bin of the log10 histogram.
fn fix_finger_k(sorted_pos: &[f64], bins: usize) -> usize {
    let n = sorted_pos.len();
    let logs: Vec<f64> = sorted_pos.iter().map(|x| x.log10()).collect();
    let (lo, hi) = (logs[0], logs[n - 1]);
    if hi <= lo {
        return n / 2;
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |l: f64| (((l - lo) / width) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for &l in &logs {
        counts[bin_of(l)] += 1;
    }
    let peak = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best })
        .0;
    let first = logs.iter().position(|&l| bin_of(l) == peak).unwrap_or(0);
    // cutoff index `first` (0-based) corresponds to k = n - 1 - first
    (n - 1 - first).clamp(1, n - 1)
}

/// k in `[2, n-1]` minimizing the KS distance; ties go to the smaller k.
fn gof_k(sorted_pos: &[f64]) -> Result<usize, HtsrError> {
    let n = sorted_pos.len();
    let mut best = (n / 2, f64::INFINITY);
    for k in 2..n {
        let alpha = hill_alpha(sorted_pos, k)?;
        let d = ks_distance(sorted_pos, k, alpha)?;
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Per-layer spectral statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSummary {
    pub layer_name: String,
    pub role: LayerRole,
    /// `f64::INFINITY` for a flat tail.
    pub alpha: f64,
    pub k_used: usize,
    pub n_eff: usize,
    pub lambda_max: f64,
    pub fro_norm: f64,
    pub spec_norm: f64,
}

/// ESD, norms and tail fit of one layer.
pub fn summarize(w: &WeightMatrix, cfg: &FitConfig) -> Result<SpectralSummary, HtsrError> {
    let esd = spectral::esd(w)?;
    summarize_esd(w, &esd, cfg)
}

fn summarize_esd(w: &WeightMatrix, esd: &Esd, cfg: &FitConfig) -> Result<SpectralSummary, HtsrError> {
    let fit = fit_alpha(&esd.eigenvalues, cfg)?;
    let lambda_max = esd.lambda_max();
    Ok(SpectralSummary {
        layer_name: w.name.clone(),
        role: w.role,
        alpha: fit.alpha,
        k_used: fit.k_used,
        n_eff: esd.n_eff(),
        lambda_max,
        fro_norm: spectral::frobenius_norm(w)?,
        spec_norm: lambda_max.sqrt(),
    })
}

/// Summaries for every matrix layer, in input order. 1-D parameters are skipped.
///
/// Runs data-parallel under the `parallel` feature; a failing layer yields an
/// `Err` entry without affecting the others.
pub fn analyze_layers(
    layers: &[WeightMatrix],
    cfg: &FitConfig,
) -> Vec<(String, Result<SpectralSummary, HtsrError>)> {
    let matrices: Vec<&WeightMatrix> = layers.iter().filter(|w| w.role.is_matrix()).collect();
    crate::par::map(&matrices, |w| (w.name.clone(), summarize(w, cfg)))
}

/// Sequential [`analyze_layers`].
pub fn analyze_layers_seq(
    layers: &[WeightMatrix],
    cfg: &FitConfig,
) -> Vec<(String, Result<SpectralSummary, HtsrError>)> {
    layers
        .iter()
        .filter(|w| w.role.is_matrix())
        .map(|w| (w.name.clone(), summarize(w, cfg)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    PlAlphaHill,
    FrobeniusNorm,
    SpectralNorm,
    GradNorm,
}

/// Scalar per-layer metric used to drive allocation ablations.
pub fn metric_value(
    summary: &SpectralSummary,
    grad_norm: Option<f64>,
    kind: MetricKind,
) -> Result<f64, HtsrError> {
    match kind {
        MetricKind::PlAlphaHill => Ok(summary.alpha),
        MetricKind::FrobeniusNorm => Ok(summary.fro_norm),
        MetricKind::SpectralNorm => Ok(summary.spec_norm),
        MetricKind::GradNorm => grad_norm.ok_or(HtsrError::MissingGradient),
    }
}

/// Population standard deviation of the finite alphas.
pub fn alpha_std(summaries: &[SpectralSummary]) -> f64 {
    let finite: Vec<f64> = summaries
        .iter()
        .map(|s| s.alpha)
        .filter(|a| a.is_finite())
        .collect();
    if finite.is_empty() {
        return 0.0;
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    (finite.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
}
