//! Dataset quantization over precomputed feature vectors.
//!
//! A dataset is viewed only through its embedding matrix. It is split into
//! `N` non-overlapping bins by repeatedly running greedy GraphCut selection
//! over the shrinking pool of unbinned samples, a fixed fraction of every bin
//! is drawn uniformly to form the coreset, and per-image attention maps are
//! turned into patch keep/drop masks.
//!
//! The crate is `no_std` (it needs `alloc`). Two cargo features are enabled by
//! default:
//!
//! - `std`: links the standard library.
//! - `parallel`: fans candidate gain evaluation, coverage and batch masking out
//!   over the ambient rayon pool. Results are bit-identical to the sequential
//!   path for any number of workers.
//!
//! The modules, bottom-up:
//!
//! - [`dataset`]: feature/label containers, validation and centering.
//! - [`config`]: run parameters and their defaults.
//! - [`gain`]: GraphCut gain evaluation, greedy argmax and the centroid-target
//!   reformulation of the same argmax.
//! - [`binner`]: recursive bin generation.
//! - [`sampler`]: per-bin sampling of the final coreset.
//! - [`diagnostics`]: instrumented re-runs that check the exact identities
//!   behind the method, plus radius and coverage statistics.
//! - [`patch`]: attention upsampling, patch scores and drop masks.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

pub mod binner;
pub mod config;
pub mod dataset;
pub mod diagnostics;
mod error;
pub mod gain;
mod math;
pub mod patch;
pub mod sampler;

pub use binner::{bin_radii, generate_bins, generate_bins_stratified, Bin, BinSet, Stratum};
pub use config::{PatchConfig, QuantizeConfig, SampleConfig};
pub use dataset::{center_features, validate_inputs, FeatureMatrix, LabelVector, ValidationReport, Violation};
pub use diagnostics::{coverage_stats, run_diagnostics, CoverageReport, DiagnosticsReport};
pub use error::{Error, Result};
pub use gain::{GainValue, SelectionState};
pub use math::floor_fraction_of;
pub use patch::{AttentionMap, Grid, PatchMask};
pub use sampler::{sample_coreset, CoresetManifest, SampleRng, SamplerRegistry};
