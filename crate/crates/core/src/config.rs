//! Run parameters.

use crate::error::{Error, Result};

/// Bin generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizeConfig {
    /// Number of bins `N`.
    pub num_bins: usize,
    /// Subtract the universe mean (per stratum) before selection.
    pub center_features: bool,
    /// Bin each class separately when labels are available.
    pub stratify_by_class: bool,
    /// Carried into run manifests; bin generation itself is deterministic.
    pub seed: u64,
}

impl QuantizeConfig {
    pub const DEFAULT_NUM_BINS: usize = 10;

    pub fn with_bins(num_bins: usize) -> Self {
        Self { num_bins, ..Self::default() }
    }
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self { num_bins: Self::DEFAULT_NUM_BINS, center_features: true, stratify_by_class: true, seed: 0 }
    }
}

/// Coreset sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    /// Keep ratio `ρ` in `(0, 1]`.
    pub keep_ratio: f64,
    pub seed: u64,
}

impl SampleConfig {
    pub fn new(keep_ratio: f64, seed: u64) -> Result<Self> {
        let cfg = Self { keep_ratio, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keep_ratio > 0.0 && self.keep_ratio <= 1.0 {
            Ok(())
        } else {
            Err(Error::KeepRatio(self.keep_ratio))
        }
    }
}

/// Patch dropping parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    /// Fraction `θ` of patches to drop, in `[0, 1)`.
    pub drop_ratio: f64,
}

impl PatchConfig {
    pub const DEFAULT_DROP_RATIO: f64 = 0.25;

    pub fn validate(&self) -> Result<()> {
        if !(self.drop_ratio >= 0.0 && self.drop_ratio < 1.0) {
            return Err(Error::DropRatio(self.drop_ratio));
        }
        Ok(())
    }
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_height: 16, patch_width: 16, drop_ratio: Self::DEFAULT_DROP_RATIO }
    }
}
