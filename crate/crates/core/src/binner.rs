//! Recursive bin generation.
//!
//! Bin `n` is filled by greedy gain maximization over every sample not yet
//! placed in bins `0..n`. Bins `0..N-1` hold `K = ⌈U/N⌉` samples and the last
//! bin takes whatever remains, also in greedy order. When that rule would
//! leave trailing bins empty (e.g. `U = 10, N = 6`), the early bins are
//! shortened just enough that every bin keeps at least one sample.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use crate::config::QuantizeConfig;
use crate::dataset::{center_features, mean_of_rows, validate_inputs, FeatureMatrix, LabelVector};
use crate::error::{Error, Result};
use crate::gain::{GainValue, SelectionState};
use crate::math::{sq_dist, sqrt};

/// Which samples a [`BinSet`] partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stratum {
    All,
    Class(i64),
}

/// One bin: members in the order they were selected, with their gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub index: usize,
    pub members: Vec<usize>,
    pub gains: Vec<f64>,
}

impl Bin {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `N` disjoint bins covering one stratum. Member indices are global rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSet {
    pub bins: Vec<Bin>,
    pub universe_size: usize,
    pub config: QuantizeConfig,
    pub stratum: Stratum,
}

impl BinSet {
    /// All members, ascending.
    pub fn universe(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.bins.iter().flat_map(|b| b.members.iter().copied()).collect();
        all.sort_unstable();
        all
    }

    /// True when bins are non-empty, pairwise disjoint and their union has
    /// `universe_size` elements.
    pub fn is_partition(&self) -> bool {
        let all = self.universe();
        all.len() == self.universe_size
            && all.windows(2).all(|w| w[0] < w[1])
            && self.bins.iter().all(|b| !b.is_empty() && b.members.len() == b.gains.len())
    }
}

/// Sizes of the `num_bins` bins for a universe of `universe` samples.
pub fn bin_sizes(universe: usize, num_bins: usize) -> Result<Vec<usize>> {
    if num_bins == 0 {
        return Err(Error::ZeroBins);
    }
    if num_bins > universe {
        return Err(Error::TooManyBins { bins: num_bins, samples: universe });
    }
    let k = universe.div_ceil(num_bins);
    let mut remaining = universe;
    let mut sizes = Vec::with_capacity(num_bins);
    for n in 0..num_bins - 1 {
        let later = num_bins - 1 - n;
        let size = k.min(remaining - later);
        sizes.push(size);
        remaining -= size;
    }
    sizes.push(remaining);
    Ok(sizes)
}

/// Hook into every greedy step, called after the winner is known and before
/// it is committed. `features` and indices are in the working coordinates of
/// the stratum (centered if configured, rows renumbered from 0).
pub trait SelectionObserver {
    fn on_select(&mut self, bin: usize, state: &SelectionState, features: &FeatureMatrix, chosen: GainValue);
}

impl SelectionObserver for () {
    #[inline]
    fn on_select(&mut self, _: usize, _: &SelectionState, _: &FeatureMatrix, _: GainValue) {}
}

/// Splits every sample into `config.num_bins` bins.
pub fn generate_bins(features: &FeatureMatrix, config: &QuantizeConfig) -> Result<BinSet> {
    validate_inputs(features, None).into_result()?;
    let universe: Vec<usize> = (0..features.num_samples()).collect();
    bin_universe(features, &universe, config, Stratum::All, &mut ())
}

/// Bins each class on its own; one [`BinSet`] per class, classes ascending.
pub fn generate_bins_stratified(
    features: &FeatureMatrix,
    labels: &LabelVector,
    config: &QuantizeConfig,
) -> Result<Vec<BinSet>> {
    validate_inputs(features, Some(labels)).into_result()?;
    let strata = checked_strata(labels, config)?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        strata
            .par_iter()
            .map(|(class, rows)| bin_universe(features, rows, config, Stratum::Class(*class), &mut ()))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    strata.iter().map(|(class, rows)| bin_universe(features, rows, config, Stratum::Class(*class), &mut ())).collect()
}

/// Stratified when labels are given and `config.stratify_by_class` is set,
/// otherwise a single [`Stratum::All`] bin set.
pub fn quantize(
    features: &FeatureMatrix,
    labels: Option<&LabelVector>,
    config: &QuantizeConfig,
) -> Result<Vec<BinSet>> {
    match labels {
        Some(labels) if config.stratify_by_class => generate_bins_stratified(features, labels, config),
        Some(labels) => {
            validate_inputs(features, Some(labels)).into_result()?;
            generate_bins(features, config).map(|b| alloc::vec![b])
        }
        None => generate_bins(features, config).map(|b| alloc::vec![b]),
    }
}

/// [`quantize`] with a [`SelectionObserver`] attached; strata run one after
/// another.
pub fn quantize_observed<O: SelectionObserver>(
    features: &FeatureMatrix,
    labels: Option<&LabelVector>,
    config: &QuantizeConfig,
    observer: &mut O,
) -> Result<Vec<BinSet>> {
    validate_inputs(features, labels).into_result()?;
    match labels {
        Some(labels) if config.stratify_by_class => checked_strata(labels, config)?
            .iter()
            .map(|(class, rows)| bin_universe(features, rows, config, Stratum::Class(*class), observer))
            .collect(),
        _ => {
            let universe: Vec<usize> = (0..features.num_samples()).collect();
            Ok(alloc::vec![bin_universe(features, &universe, config, Stratum::All, observer)?])
        }
    }
}

fn checked_strata(labels: &LabelVector, config: &QuantizeConfig) -> Result<Vec<(i64, Vec<usize>)>> {
    if config.num_bins == 0 {
        return Err(Error::ZeroBins);
    }
    let strata = labels.strata();
    for (class, rows) in &strata {
        if rows.len() < config.num_bins {
            return Err(Error::ClassTooSmall { class: *class, samples: rows.len(), bins: config.num_bins });
        }
    }
    Ok(strata)
}

/// Bins the rows listed in `universe` (ascending global indices).
fn bin_universe<O: SelectionObserver>(
    features: &FeatureMatrix,
    universe: &[usize],
    config: &QuantizeConfig,
    stratum: Stratum,
    observer: &mut O,
) -> Result<BinSet> {
    let sizes = bin_sizes(universe.len(), config.num_bins)?;
    let whole = universe.len() == features.num_samples();
    let work: Cow<'_, FeatureMatrix> = match (config.center_features, whole) {
        (false, true) => Cow::Borrowed(features),
        (false, false) => Cow::Owned(features.gather(universe)),
        (true, true) => Cow::Owned(center_features(features).0),
        (true, false) => Cow::Owned(center_features(&features.gather(universe)).0),
    };
    // working rows are 0..U; when `whole`, local and global indices coincide
    let mut state = SelectionState::new(&work, (0..universe.len()).collect::<Vec<_>>());
    let mut bins = Vec::with_capacity(sizes.len());
    for (n, &size) in sizes.iter().enumerate() {
        let mut gains = Vec::with_capacity(size);
        for _ in 0..size {
            let chosen = state.select_next(&work)?;
            observer.on_select(n, &state, &work, chosen);
            state.commit(chosen.candidate, &work)?;
            gains.push(chosen.gain);
        }
        let members = state.finish_bin(&work).into_iter().map(|local| universe[local]).collect();
        bins.push(Bin { index: n, members, gains });
    }
    Ok(BinSet { bins, universe_size: universe.len(), config: *config, stratum })
}

/// Largest distance from a bin member to the mean of the bin set's universe,
/// one value per bin.
pub fn bin_radii(bins: &BinSet, features: &FeatureMatrix) -> Vec<f64> {
    let mean = mean_of_rows(features, bins.bins.iter().flat_map(|b| b.members.iter().copied()));
    bins.bins
        .iter()
        .map(|b| b.members.iter().map(|&p| sq_dist(features.row(p), &mean)).fold(0.0, f64::max))
        .map(sqrt)
        .collect()
}
