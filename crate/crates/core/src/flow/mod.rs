//! Rectified-flow integration.
//!
//! Orientation: during editing, `t = 0` is the data side (the clean source
//! latent) and `t = 1` is the noise side (the inverted latent). Inversion
//! integrates `0 → 1`, denoising integrates `1 → 0`. The training-time
//! interpolation in [`interpolate`] and [`demo2d`] follows the usual labelling
//! `z_t = t·z1 + (1 − t)·z0` with `z0` drawn from noise and `z1` from data,
//! the only place the opposite labelling is used.
//!
//! Step indices refer to grid intervals: step `j` covers `[t_{j−1}, t_j]`.
//! Inversion visits `j = 1..=N` forward, denoising visits `j = N..=1`
//! backward, so both passes over one interval share a key.

pub mod demo2d;
mod grid;
mod solver;

pub use grid::{Schedule, TimeGrid};
pub use solver::{
    denoise, euler_step, interpolate, invert, rf_solver_step, LatentState, Observer, Phase,
    SolverProbe, SourcePath, StepController, StepKey, Velocity,
};
