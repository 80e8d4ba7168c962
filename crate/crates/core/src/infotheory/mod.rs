// SPDX-License-Identifier: MIT OR Apache-2.0

//! Information-plane analysis: an HSIC proxy for mutual information between a
//! layer's activations `T`, the input representation `X` (taken from a
//! reference layer, by default the embedding output) and the labels `Y`.
//!
//! Tracking `I(T,X)` and `I(T,Y)` across checkpoints exposes a fitting phase,
//! where both rise, followed by a compression phase where `I(T,X)` falls while
//! `I(T,Y)` keeps rising. [`detect_phases`] locates the boundary.

mod hsic;
mod trace;

pub use hsic::{
    gaussian_kernel_matrix, hsic, sigma_search, Gram, HsicEstimate, Samples, DEFAULT_SIGMA_GRID,
};
pub use trace::{
    detect_phases, mi_sweep, mi_sweep_manifest, moving_average, pearson, MiPoint, MiTrace,
    PhaseReport, StepActivations, StepRange,
};
