//! Core algorithms for noise-robust anomaly detection on patch-feature
//! tensors.
//!
//! The training pipeline has three phases:
//!
//! 1. **Memory construction** ([`memory`]): an ensemble of `B` memory banks,
//!    each a random image-level subsample of the per-class patch pool at
//!    ratio `rho`. The anomaly score of a patch is its mean nearest-neighbor
//!    distance over the banks. Sparse subsampling widens the expected
//!    distance gap between normal and anomalous patches; [`theory`] verifies
//!    this numerically.
//! 2. **Score distillation** ([`reconstructor`]): a small per-patch
//!    bottleneck network is trained so that its reconstruction-score map
//!    matches the ensemble score map.
//! 3. **Progressive selection** ([`selection`]): the network is fine-tuned on
//!    a self-selected subset, refreshed at every epoch boundary via a
//!    class-wise median + MAD threshold on an interpolated image score.
//!
//! [`dataset`] holds the patch-feature data model and synthetic contaminated
//! datasets; [`metrics`] the ranking and segmentation metrics. Everything
//! here is deterministic given the seeds and works without `std` (with
//! `alloc`); file formats and orchestration live in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod dataset;
pub(crate) mod math;
pub mod memory;
pub mod metrics;
pub mod reconstructor;
pub mod selection;
pub mod synth;
pub mod theory;
