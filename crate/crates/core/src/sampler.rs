//! Coreset sampling from bins.
//!
//! Each bin of size `K_n` contributes `c_n = ⌊ρ·K_n⌋` samples, topped up by
//! largest remainder (lower bin index first on equal remainders) until the
//! stratum total reaches `⌊ρ·U⌋`. The draw inside a bin is delegated to a
//! named sampler; `"uniform"` is the default.
//!
//! Randomness comes from a single xoshiro256++ stream seeded through
//! SplitMix64 from the configured `u64` seed. Strata and bins consume the
//! stream in order. Bounded draws use Lemire's widening-multiply rejection
//! method, and the uniform sampler is a partial Fisher–Yates shuffle of the
//! bin's members in selection order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::binner::{BinSet, Stratum};
use crate::config::SampleConfig;
use crate::error::{Error, Result};
use crate::math::{floor_fraction_of, fraction_remainder};

pub type SampleRng = Xoshiro256PlusPlus;

/// Identifier recorded in manifests for the generator and its seeding.
pub const RNG_ALGORITHM: &str = "xoshiro256++/splitmix64";

/// Draws `count` members of one bin.
pub type SamplerFn = fn(members: &[usize], count: usize, rng: &mut SampleRng) -> Vec<usize>;

pub fn seeded_rng(seed: u64) -> SampleRng {
    SampleRng::seed_from_u64(seed)
}

/// Unbiased integer in `[0, n)`; `n` must be non-zero.
pub fn uniform_below(rng: &mut SampleRng, n: u64) -> u64 {
    debug_assert!(n > 0);
    let mut wide = u128::from(rng.next_u64()) * u128::from(n);
    let mut low = wide as u64;
    if low < n {
        let threshold = n.wrapping_neg() % n;
        while low < threshold {
            wide = u128::from(rng.next_u64()) * u128::from(n);
            low = wide as u64;
        }
    }
    (wide >> 64) as u64
}

/// Uniform draw without replacement (partial Fisher–Yates).
pub fn uniform_sampler(members: &[usize], count: usize, rng: &mut SampleRng) -> Vec<usize> {
    let mut pool = members.to_vec();
    let count = count.min(pool.len());
    for i in 0..count {
        let j = i + uniform_below(rng, (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// Named bin samplers. Names are case-sensitive.
#[derive(Debug, Clone)]
pub struct SamplerRegistry {
    samplers: BTreeMap<String, SamplerFn>,
}

impl SamplerRegistry {
    pub const DEFAULT: &'static str = "uniform";

    pub fn new() -> Self {
        let mut samplers = BTreeMap::new();
        samplers.insert(Self::DEFAULT.to_string(), uniform_sampler as SamplerFn);
        Self { samplers }
    }

    pub fn register(&mut self, name: impl Into<String>, sampler: SamplerFn) {
        self.samplers.insert(name.into(), sampler);
    }

    pub fn get(&self, name: &str) -> Result<SamplerFn> {
        self.samplers.get(name).copied().ok_or_else(|| Error::UnknownSampler {
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.samplers.keys().map(String::as_str)
    }
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        Self::new()
    }
}

/// Samples drawn from one bin, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinSample {
    pub stratum: Stratum,
    pub bin: usize,
    pub indices: Vec<usize>,
}

/// The final coreset.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetManifest {
    /// Ascending global indices.
    pub selected_indices: Vec<usize>,
    pub per_bin: Vec<BinSample>,
    pub keep_ratio: f64,
    pub seed: u64,
    pub sampler: String,
    /// Total samples across all source bins.
    pub universe_size: usize,
    /// Digest of the bin file the manifest was drawn from, when known.
    pub source: Option<String>,
}

impl CoresetManifest {
    pub fn per_bin_counts(&self) -> Vec<usize> {
        self.per_bin.iter().map(|b| b.indices.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_indices.is_empty()
    }
}

/// Per-bin counts for bins of the given sizes.
pub fn bin_counts(sizes: &[usize], keep_ratio: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = floor_fraction_of(keep_ratio, total);
    let mut counts: Vec<usize> = sizes.iter().map(|&k| floor_fraction_of(keep_ratio, k)).collect();
    let assigned: usize = counts.iter().sum();
    if assigned < target {
        let mut order: Vec<usize> = (0..sizes.len()).filter(|&n| counts[n] < sizes[n]).collect();
        // stable sort keeps lower bin indices first among equal remainders
        order.sort_by(|&a, &b| {
            fraction_remainder(keep_ratio, sizes[b]).total_cmp(&fraction_remainder(keep_ratio, sizes[a]))
        });
        for n in order.into_iter().take(target - assigned) {
            counts[n] += 1;
        }
    }
    counts
}

/// Draws the coreset with the default uniform sampler.
pub fn sample_coreset(sets: &[BinSet], config: &SampleConfig) -> Result<CoresetManifest> {
    sample_coreset_with(sets, config, SamplerRegistry::DEFAULT, uniform_sampler)
}

/// Draws the coreset with an explicit sampler; `name` is recorded.
pub fn sample_coreset_with(
    sets: &[BinSet],
    config: &SampleConfig,
    name: &str,
    sampler: SamplerFn,
) -> Result<CoresetManifest> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let mut per_bin = Vec::new();
    let mut selected = Vec::new();
    let mut universe_size = 0;
    for set in sets {
        let sizes: Vec<usize> = set.bins.iter().map(|b| b.len()).collect();
        universe_size += sizes.iter().sum::<usize>();
        for (bin, count) in set.bins.iter().zip(bin_counts(&sizes, config.keep_ratio)) {
            let mut indices = sampler(&bin.members, count, &mut rng);
            indices.sort_unstable();
            selected.extend_from_slice(&indices);
            per_bin.push(BinSample { stratum: set.stratum, bin: bin.index, indices });
        }
    }
    selected.sort_unstable();
    Ok(CoresetManifest {
        selected_indices: selected,
        per_bin,
        keep_ratio: config.keep_ratio,
        seed: config.seed,
        sampler: name.to_string(),
        universe_size,
        source: None,
    })
}
