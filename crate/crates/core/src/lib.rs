//! Cooperative relative localization for UAV swarms from UWB ranges.
//!
//! Each agent estimates the heading and position of its neighbors in its
//! own horizontal frame. Three schemes are provided: independent pairwise
//! filters (nCRL), one augmented filter over direct ranges (hCRL), and one
//! augmented filter that also uses neighbor-to-neighbor ranges (fCRL). Any
//! of them runs with a standard EKF or with the kernel fixed-point EKF.
//!
//! Geometry, models, filters and observability are generic over `f32`/`f64`;
//! noise, simulation and analysis work in `f64`.

pub mod analysis;
pub mod error;
pub mod filters;
pub mod geometry;
pub mod models;
pub mod noise;
pub mod observability;
pub mod scalar;
pub mod simulation;

#[cfg(test)]
mod testutil;

pub use error::{CrlError, Result};
pub use scalar::Scalar;

pub type RelativeState64 = geometry::RelativeState<f64>;
pub type RelativeState32 = geometry::RelativeState<f32>;
pub type ControlInput64 = geometry::ControlInput<f64>;
pub type ControlInput32 = geometry::ControlInput<f32>;
pub type AugmentedState64 = models::AugmentedState<f64>;
pub type AugmentedState32 = models::AugmentedState<f32>;
pub type AugmentedInput64 = models::AugmentedInput<f64>;
pub type AugmentedInput32 = models::AugmentedInput<f32>;
pub type FilterBelief64 = filters::FilterBelief<f64>;
pub type FilterBelief32 = filters::FilterBelief<f32>;
pub type KernelUpdate64 = filters::KernelUpdate<f64>;
pub type KernelUpdate32 = filters::KernelUpdate<f32>;
pub type LinearModel64 = models::LinearModel<f64>;
pub type LinearModel32 = models::LinearModel<f32>;
