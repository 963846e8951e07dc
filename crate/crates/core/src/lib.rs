//! Heavy-tail guided layerwise learning rates.
//!
//! The crate is organised bottom-up:
//!
//! - [`spectral`]: empirical spectral density (squared singular values) of weight matrices.
//! - [`htsr`]: power-law exponent fitting with the Hill estimator.
//! - [`allocate`]: mapping per-layer exponents to per-layer base learning rates.
//! - [`schedule`]: the temporal side (warmup/cosine/WSD, periodic recompute, soft switching).
//! - [`train`]: a small decoder-only transformer with hand-written gradients and AdamW.
//! - [`io`]: checkpoint manifests, reports and the command implementations behind the CLI.
//!
//! Data-parallel loops (per-layer spectral sweeps, multi-run training) go through [`par`],
//! which uses rayon when the `parallel` feature is enabled and plain iterators otherwise.
//! Results never depend on the number of worker threads.

pub mod allocate;
pub mod htsr;
pub mod io;
pub mod par;
pub mod schedule;
pub mod spectral;
pub mod train;

mod error;

pub use error::{Error, Result};
pub use spectral::{LayerRole, WeightMatrix};
