//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use llr_core::{LayerRole, WeightMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// `WᵀW` formed with plain loops.
pub fn gram(w: &WeightMatrix) -> Vec<f64> {
    let (r, c) = (w.rows(), w.cols());
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..r {
                s += w.get(k, i) * w.get(k, j);
            }
            g[i * c + j] = s;
        }
    }
    g
}

/// Top `min(rows, cols)` eigenvalues of `WᵀW`, ascending.
pub fn esd_oracle(w: &WeightMatrix) -> Vec<f64> {
    let eig = jacobi_eigenvalues(gram(w), w.cols());
    let keep = w.rows().min(w.cols());
    eig[eig.len() - keep..].to_vec()
}

/// Hill estimator written directly from its definition with 1-based order statistics:
/// `1 + k / Σ_{i=1..k} ln(λ_{n−i+1} / λ_{n−k})`.
pub fn hill_oracle(sorted: &[f64], k: usize) -> f64 {
    let n = sorted.len();
    let lam = |i: usize| sorted[i - 1];
    let mut s = 0.0;
    let mut i = 1;
    while i <= k {
        s += (lam(n - i + 1) / lam(n - k)).ln();
        i += 1;
    }
    1.0 + k as f64 / s
}

/// Exact quantiles of a Pareto law with density exponent `a` (tail index `a − 1`).
pub fn pareto_quantiles(a: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| (1.0 - i as f64 / (n as f64 + 1.0)).powf(-1.0 / (a - 1.0)))
        .collect()
}

pub fn gaussian_matrix(name: &str, rows: usize, cols: usize, seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    WeightMatrix::new(name, LayerRole::Other2D, rows, cols, values).unwrap()
}

/// A `k×k` matrix whose ESD is exactly `eigs` (diagonal of square roots).
pub fn diag_with_esd(name: &str, role: LayerRole, eigs: &[f64]) -> WeightMatrix {
    let n = eigs.len();
    let mut v = vec![0.0; n * n];
    for (i, e) in eigs.iter().enumerate() {
        v[i * n + i] = e.sqrt();
    }
    WeightMatrix::new(name, role, n, n, v).unwrap()
}
