//! Desk-scale laboratory for few-step distillation of diffusion samplers.
//!
//! The crate covers the full pipeline on toy Gaussian-mixture data:
//!
//! - [`process`] — the probability-flow ODE family with `f(x,t)=0`, `g(t)=√(2t)`,
//!   analytic score/noise oracles and the exact single-Gaussian flow,
//! - [`schedule`] — polynomial-ρ time schedules and per-segment subdivision,
//! - [`solver`] — Euler/DDIM, Heun, single-step and multistep exponential
//!   integrators with NFE accounting and the analytical first step,
//! - [`model`] — a small noise-prediction MLP with time / class / step-count
//!   embeddings and hand-rolled reverse-mode gradients,
//! - [`trainer`] — denoiser pretraining, Adam, and the distillation family
//!   (local trajectory distillation, global single/variable-step distillation,
//!   second-stage one-step distillation),
//! - [`eval`] — trajectory-deviation matrices, sliced Wasserstein distance,
//!   extrapolation sweeps and PCA trajectory projection.
//!
//! Everything is `f64`, seeded, and single-threaded unless a caller opts into
//! chain-parallel sampling; identical seeds give bit-identical results.

pub mod error;
pub mod eval;
pub mod model;
pub mod process;
pub mod rng;
pub mod schedule;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
