//! Empirical spectral density of weight matrices.
//!
//! The ESD of a layer is the multiset of eigenvalues of the correlation matrix `WᵀW`.
//! Those are the squared singular values of `W`, which is how they are computed here:
//! forming `WᵀW` explicitly squares the condition number for no benefit.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance below zero that is treated as floating-point noise and clamped.
const NEG_EIG_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("layer `{0}` contains non-finite values")]
    NonFiniteInput(String),
    #[error("layer `{0}` is a 1-D parameter and has no spectrum")]
    NotAMatrix(String),
    #[error("layer `{name}`: expected {expected} values for shape, got {got}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("layer `{0}` has an empty dimension")]
    EmptyDimension(String),
    #[error("layer `{name}`: eigenvalue {value:e} is negative beyond tolerance")]
    NegativeEigenvalue { name: String, value: f64 },
    #[error("unknown layer role `{0}`")]
    UnknownRole(String),
}

/// Functional role of a parameter inside a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerRole {
    #[serde(rename = "embed")]
    Embedding,
    #[serde(rename = "output_head")]
    OutputHead,
    #[serde(rename = "att.q")]
    AttQ,
    #[serde(rename = "att.k")]
    AttK,
    #[serde(rename = "att.v")]
    AttV,
    #[serde(rename = "att.o")]
    AttO,
    #[serde(rename = "ffn.gate")]
    FfnGate,
    #[serde(rename = "ffn.up")]
    FfnUp,
    #[serde(rename = "ffn.down")]
    FfnDown,
    #[serde(rename = "other")]
    Other2D,
    #[serde(rename = "vector")]
    NonMatrix,
}

impl LayerRole {
    pub const ALL: [LayerRole; 11] = [
        LayerRole::Embedding,
        LayerRole::OutputHead,
        LayerRole::AttQ,
        LayerRole::AttK,
        LayerRole::AttV,
        LayerRole::AttO,
        LayerRole::FfnGate,
        LayerRole::FfnUp,
        LayerRole::FfnDown,
        LayerRole::Other2D,
        LayerRole::NonMatrix,
    ];

    /// Manifest tag for this role.
    pub fn tag(self) -> &'static str {
        match self {
            LayerRole::Embedding => "embed",
            LayerRole::OutputHead => "output_head",
            LayerRole::AttQ => "att.q",
            LayerRole::AttK => "att.k",
            LayerRole::AttV => "att.v",
            LayerRole::AttO => "att.o",
            LayerRole::FfnGate => "ffn.gate",
            LayerRole::FfnUp => "ffn.up",
            LayerRole::FfnDown => "ffn.down",
            LayerRole::Other2D => "other",
            LayerRole::NonMatrix => "vector",
        }
    }

    /// Embedding and output head get the pinned upper learning rate.
    pub fn is_embedding_like(self) -> bool {
        matches!(self, LayerRole::Embedding | LayerRole::OutputHead)
    }

    pub fn is_matrix(self) -> bool {
        self != LayerRole::NonMatrix
    }
}

impl fmt::Display for LayerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for LayerRole {
    type Err = SpectralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerRole::ALL
            .iter()
            .copied()
            .find(|r| r.tag() == s)
            .ok_or_else(|| SpectralError::UnknownRole(s.to_string()))
    }
}

/// A named, role-tagged, row-major real matrix.
///
/// 1-D parameters (biases, norm gains) are stored as `1 × len` with role
/// [`LayerRole::NonMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub name: String,
    pub role: LayerRole,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(
        name: impl Into<String>,
        role: LayerRole,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Self, SpectralError> {
        let name = name.into();
        if rows == 0 || cols == 0 {
            return Err(SpectralError::EmptyDimension(name));
        }
        if values.len() != rows * cols {
            return Err(SpectralError::ShapeMismatch {
                name,
                expected: rows * cols,
                got: values.len(),
            });
        }
        Ok(Self {
            name,
            role,
            rows,
            cols,
            values,
        })
    }

    /// A 1-D parameter.
    pub fn vector(name: impl Into<String>, values: Vec<f64>) -> Result<Self, SpectralError> {
        let len = values.len();
        Self::new(name, LayerRole::NonMatrix, 1, len, values)
    }

    pub fn zeros(name: impl Into<String>, role: LayerRole, rows: usize, cols: usize) -> Self {
        Self::new(name, role, rows, cols, vec![0.0; rows * cols]).expect("nonzero shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        Self {
            name: self.name.clone(),
            role: self.role,
            rows: self.cols,
            cols: self.rows,
            values: out,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    fn check_analyzable(&self) -> Result<(), SpectralError> {
        if self.role == LayerRole::NonMatrix {
            return Err(SpectralError::NotAMatrix(self.name.clone()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::NonFiniteInput(self.name.clone()));
        }
        Ok(())
    }
}

/// Eigenvalues of `WᵀW`, ascending, one per singular value of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Esd {
    pub eigenvalues: Vec<f64>,
}

impl Esd {
    /// Number of eigenvalues kept, `min(rows, cols)`.
    pub fn n_eff(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// Empirical spectral density of `w`.
///
/// Returns the `min(rows, cols)` squared singular values sorted ascending; the
/// structural zeros of the larger Gram matrix are dropped.
pub fn esd(w: &WeightMatrix) -> Result<Esd, SpectralError> {
    w.check_analyzable()?;
    let m = DMatrix::from_row_slice(w.rows, w.cols, &w.values);
    let mut eigenvalues: Vec<f64> = m
        .singular_values()
        .iter()
        .map(|s| s * s)
        .collect::<Vec<_>>();
    for e in eigenvalues.iter_mut() {
        if *e < 0.0 {
            if *e < -NEG_EIG_TOL {
                return Err(SpectralError::NegativeEigenvalue {
                    name: w.name.clone(),
                    value: *e,
                });
            }
            *e = 0.0;
        }
    }
    eigenvalues.sort_by(f64::total_cmp);
    Ok(Esd { eigenvalues })
}

pub fn frobenius_norm(w: &WeightMatrix) -> Result<f64, SpectralError> {
    w.check_analyzable()?;
    Ok(w.values.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Largest singular value.
pub fn spectral_norm(w: &WeightMatrix) -> Result<f64, SpectralError> {
    Ok(esd(w)?.lambda_max().sqrt())
}
