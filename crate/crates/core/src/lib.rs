//! Local-Lipschitz uncertainty estimation and variance-based out-of-distribution
//! detection for learned image reconstruction, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: images, 2D DFT, Radon projection, filtered backprojection, seeded noise.
//! * [`models`]: small differentiable reconstruction networks, RMSProp training.
//! * [`datagen`]: synthetic phantom families and the three task pair builders.
//! * [`uncertainty`]: local Lipschitz, perturbation variance, MC dropout, deep ensembles.
//! * [`metrics`]: MAE, Spearman, ROC/AUC, referral curves and threshold selection.
//!
//! Per-sample loops run on rayon when the `parallel` feature is enabled (the
//! default) and fall back to plain iterators otherwise. Every result is a pure
//! function of its inputs and explicit seeds, so both builds agree bit for bit.

pub mod datagen;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod parallel;
pub mod seed;
pub mod uncertainty;

pub use error::{Error, Result};
pub use numerics::{Image, KSpace, NoiseKind, NoiseSpec, Sinogram};
