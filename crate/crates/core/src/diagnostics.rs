//! Instrumented selection runs and coverage statistics.
//!
//! [`diagnose`] re-runs bin generation and checks, at every greedy step, the
//! exact facts the method rests on:
//!
//! - the first pick of every bin is the pool sample nearest the pool mean;
//! - the argmax of the gain equals the extremum of `‖f(x) − δ‖²`
//!   (skipped when `2k = M_u`);
//! - with the universe re-centered at its mean and `1 ≤ k`, `2k < M_u`,
//!   `‖δ‖² ≤ (2k / (M_u − 2k))² · R²` where `R` is the largest distance of a
//!   selected sample from that mean.
//!
//! Index comparisons are exact. A mismatch whose gains agree to `1e-9`
//! relative is counted as a numerical tie rather than a failure; the
//! `*_ok` flags and [`DiagnosticsReport::exact_invariants_hold`] use that
//! tolerance, the raw match counters do not.

use alloc::vec::Vec;

use crate::binner::{bin_radii, quantize_observed, BinSet, SelectionObserver, Stratum};
use crate::config::QuantizeConfig;
use crate::dataset::{FeatureMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::gain::{distance_to_pool_mean, GainValue, SelectionState};
use crate::math::{abs, sq_dist, sqrt};
use crate::sampler::CoresetManifest;

const TIE_TOLERANCE: f64 = 1e-9;

/// Per-stratum geometry of the generated bins.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumDiagnostics {
    pub stratum: Stratum,
    pub bin_sizes: Vec<usize>,
    pub bin_radii: Vec<f64>,
    /// Mean distance from each member to its nearest other member of the same
    /// bin; 0 for single-member bins.
    pub mean_nn_distance_per_bin: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsReport {
    pub first_pick_checks: usize,
    pub first_pick_matches: usize,
    pub first_pick_ok: bool,
    /// Steps with `2k ≠ M_u`.
    pub delta_total: usize,
    pub delta_agreements: usize,
    pub delta_ties: usize,
    /// Steps with `2k = M_u`.
    pub delta_skipped: usize,
    pub delta_norm_checks: usize,
    pub delta_norm_violations: usize,
    pub statistics_checks: usize,
    pub statistics_failures: usize,
    pub strata: Vec<StratumDiagnostics>,
    /// Fraction of adjacent bin pairs (within a stratum) whose radius does not
    /// decrease; 1 when there are no pairs.
    pub radius_monotone_fraction: f64,
}

impl DiagnosticsReport {
    pub fn delta_ok(&self) -> bool {
        self.delta_agreements + self.delta_ties == self.delta_total
    }

    pub fn exact_invariants_hold(&self) -> bool {
        self.first_pick_ok && self.delta_ok() && self.delta_norm_violations == 0 && self.statistics_failures == 0
    }
}

#[derive(Default)]
struct Recorder {
    report: DiagnosticsReport,
    first_pick_failures: usize,
}

impl Recorder {
    fn first_pick(&mut self, state: &SelectionState, features: &FeatureMatrix, chosen: GainValue) {
        let r = &mut self.report;
        r.first_pick_checks += 1;
        let mut nearest = usize::MAX;
        let mut nearest_d = f64::INFINITY;
        for &i in state.pool() {
            let d = distance_to_pool_mean(state, features.row(i));
            if d < nearest_d {
                nearest = i;
                nearest_d = d;
            }
        }
        if nearest == chosen.candidate {
            r.first_pick_matches += 1;
        } else {
            let chosen_d = distance_to_pool_mean(state, features.row(chosen.candidate));
            if abs(chosen_d - nearest_d) > TIE_TOLERANCE * nearest_d.max(1.0) {
                self.first_pick_failures += 1;
            }
        }
    }

    fn delta_identity(&mut self, state: &SelectionState, features: &FeatureMatrix, chosen: GainValue) {
        let r = &mut self.report;
        match state.delta_select(features) {
            Ok(i) if i == chosen.candidate => {
                r.delta_total += 1;
                r.delta_agreements += 1;
            }
            Ok(i) => {
                r.delta_total += 1;
                let other = state.gain(i, features).map(|g| g.gain).unwrap_or(f64::NEG_INFINITY);
                if abs(other - chosen.gain) <= TIE_TOLERANCE * abs(chosen.gain).max(1.0) {
                    r.delta_ties += 1;
                }
            }
            Err(Error::DegenerateQuadratic { .. }) => r.delta_skipped += 1,
            Err(_) => r.delta_total += 1,
        }
    }

    fn delta_norm(&mut self, state: &SelectionState, features: &FeatureMatrix) {
        let k = state.selected_count();
        let universe = state.universe_size();
        if k == 0 || 2 * k >= universe {
            return;
        }
        let mean: Vec<f64> =
            state.selected_sum().iter().zip(state.pool_sum()).map(|(s, p)| (s + p) / universe as f64).collect();
        let denom = 2.0 * k as f64 - universe as f64;
        let delta_sq: f64 = state
            .selected_sum()
            .iter()
            .zip(&mean)
            .map(|(s, mu)| {
                let d = 2.0 * (s - k as f64 * mu) / denom;
                d * d
            })
            .sum();
        let radius_sq = state.selected().iter().map(|&p| sq_dist(features.row(p), &mean)).fold(0.0, f64::max);
        let ratio = 2.0 * k as f64 / (universe as f64 - 2.0 * k as f64);
        let bound = ratio * ratio * radius_sq;
        self.report.delta_norm_checks += 1;
        if delta_sq > bound * (1.0 + TIE_TOLERANCE) + f64::MIN_POSITIVE {
            self.report.delta_norm_violations += 1;
        }
    }
}

impl SelectionObserver for Recorder {
    fn on_select(&mut self, _bin: usize, state: &SelectionState, features: &FeatureMatrix, chosen: GainValue) {
        if state.selected_count() == 0 {
            self.first_pick(state, features, chosen);
        }
        self.delta_identity(state, features, chosen);
        self.delta_norm(state, features);
        self.report.statistics_checks += 1;
        if !state.statistics_consistent(features) {
            self.report.statistics_failures += 1;
        }
    }
}

/// Runs instrumented bin generation. Returns the report and the bins, which
/// are identical to what [`crate::binner::quantize`] produces.
pub fn diagnose(
    features: &FeatureMatrix,
    labels: Option<&LabelVector>,
    config: &QuantizeConfig,
) -> Result<(DiagnosticsReport, Vec<BinSet>)> {
    let mut recorder = Recorder::default();
    let sets = quantize_observed(features, labels, config, &mut recorder)?;
    let mut report = recorder.report;
    report.first_pick_ok = recorder.first_pick_failures == 0;

    let (mut pairs, mut monotone) = (0usize, 0usize);
    for set in &sets {
        let radii = bin_radii(set, features);
        for w in radii.windows(2) {
            pairs += 1;
            if w[1] >= w[0] {
                monotone += 1;
            }
        }
        report.strata.push(StratumDiagnostics {
            stratum: set.stratum,
            bin_sizes: set.bins.iter().map(|b| b.len()).collect(),
            bin_radii: radii,
            mean_nn_distance_per_bin: set.bins.iter().map(|b| mean_nn_distance(&b.members, features)).collect(),
        });
    }
    report.radius_monotone_fraction = if pairs == 0 { 1.0 } else { monotone as f64 / pairs as f64 };
    Ok((report, sets))
}

/// [`diagnose`] without the bins.
pub fn run_diagnostics(
    features: &FeatureMatrix,
    labels: Option<&LabelVector>,
    config: &QuantizeConfig,
) -> Result<DiagnosticsReport> {
    diagnose(features, labels, config).map(|(r, _)| r)
}

fn mean_nn_distance(members: &[usize], features: &FeatureMatrix) -> f64 {
    if members.len() < 2 {
        return 0.0;
    }
    let nearest = |&i: &usize| {
        let x = features.row(i);
        let d = members.iter().filter(|&&j| j != i).map(|&j| sq_dist(features.row(j), x)).fold(f64::INFINITY, f64::min);
        sqrt(d)
    };
    #[cfg(feature = "parallel")]
    let total: f64 = {
        use rayon::prelude::*;
        let d: Vec<f64> = members.par_iter().map(nearest).collect();
        d.iter().sum()
    };
    #[cfg(not(feature = "parallel"))]
    let total: f64 = members.iter().map(nearest).sum();
    total / members.len() as f64
}

/// Distance from every sample to its nearest selected sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub mean: f64,
    pub max: f64,
    pub samples: usize,
    pub selected: usize,
}

/// Coverage of the whole matrix by the manifest's samples.
pub fn coverage_stats(manifest: &CoresetManifest, features: &FeatureMatrix) -> Result<CoverageReport> {
    coverage_of(&manifest.selected_indices, features)
}

/// Coverage of the whole matrix by an index set (brute force).
pub fn coverage_of(selected: &[usize], features: &FeatureMatrix) -> Result<CoverageReport> {
    if selected.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let samples = features.num_samples();
    if let Some(&bad) = selected.iter().find(|&&i| i >= samples) {
        return Err(Error::IndexOutOfRange { index: bad, samples });
    }
    let nearest = |i: usize| {
        let x = features.row(i);
        sqrt(selected.iter().map(|&s| sq_dist(features.row(s), x)).fold(f64::INFINITY, f64::min))
    };
    #[cfg(feature = "parallel")]
    let distances: Vec<f64> = {
        use rayon::prelude::*;
        (0..samples).into_par_iter().map(nearest).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let distances: Vec<f64> = (0..samples).map(nearest).collect();
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for d in &distances {
        sum += d;
        max = max.max(*d);
    }
    Ok(CoverageReport { mean: sum / samples as f64, max, samples, selected: selected.len() })
}
