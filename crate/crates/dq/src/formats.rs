//! JSON documents: bin sets, coreset manifests, diagnostics reports and the
//! bit-packed patch mask file with its sidecar.
//!
//! Floats are written as strings. Gains and report statistics use 17
//! significant digits in scientific notation so they parse back to the
//! identical `f64`; ratios use the shortest string that round-trips.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use dq_core::sampler::{BinSample, RNG_ALGORITHM};
use dq_core::{
    Bin, BinSet, CoresetManifest, CoverageReport, DiagnosticsReport, PatchConfig, PatchMask, QuantizeConfig, Stratum,
};
use serde::{Deserialize, Serialize};

use crate::npy::{self, ArrayData, NpyArray, NpyError};

pub const BINS_VERSION: u32 = 1;
pub const CORESET_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
pub const MASKS_VERSION: u32 = 1;
pub const MASK_TIE_BREAK: &str = "drop-higher-flat-index-v1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version { kind: &'static str, found: u32, expected: u32 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FormatError::Invalid(msg.into()))
}

/// 17 significant digits, e.g. `-3.0000000000000000e0`.
pub fn float_string(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_float(s: &str) -> Result<f64> {
    s.parse().map_err(|_| FormatError::Invalid(format!("not a float: {s:?}")))
}

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// `"all"` or a class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StratumDoc {
    Class(i64),
    Name(String),
}

impl From<Stratum> for StratumDoc {
    fn from(s: Stratum) -> Self {
        match s {
            Stratum::All => StratumDoc::Name("all".into()),
            Stratum::Class(c) => StratumDoc::Class(c),
        }
    }
}

impl TryFrom<StratumDoc> for Stratum {
    type Error = FormatError;

    fn try_from(doc: StratumDoc) -> Result<Self> {
        match doc {
            StratumDoc::Class(c) => Ok(Stratum::Class(c)),
            StratumDoc::Name(n) if n == "all" => Ok(Stratum::All),
            StratumDoc::Name(n) => invalid(format!("unknown stratum {n:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizeConfigDoc {
    pub num_bins: usize,
    pub center_features: bool,
    pub stratify_by_class: bool,
    pub seed: u64,
}

impl From<&QuantizeConfig> for QuantizeConfigDoc {
    fn from(c: &QuantizeConfig) -> Self {
        Self {
            num_bins: c.num_bins,
            center_features: c.center_features,
            stratify_by_class: c.stratify_by_class,
            seed: c.seed,
        }
    }
}

impl From<&QuantizeConfigDoc> for QuantizeConfig {
    fn from(c: &QuantizeConfigDoc) -> Self {
        Self {
            num_bins: c.num_bins,
            center_features: c.center_features,
            stratify_by_class: c.stratify_by_class,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinDoc {
    pub index: usize,
    pub members: Vec<usize>,
    pub gains: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinSetDoc {
    pub stratum: StratumDoc,
    pub universe_size: usize,
    pub config: QuantizeConfigDoc,
    pub bins: Vec<BinDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinsFile {
    pub version: u32,
    pub binsets: Vec<BinSetDoc>,
}

impl BinsFile {
    pub fn from_sets(sets: &[BinSet]) -> Self {
        let binsets = sets
            .iter()
            .map(|set| BinSetDoc {
                stratum: set.stratum.into(),
                universe_size: set.universe_size,
                config: (&set.config).into(),
                bins: set
                    .bins
                    .iter()
                    .map(|b| BinDoc {
                        index: b.index,
                        members: b.members.clone(),
                        gains: b.gains.iter().map(|&g| float_string(g)).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { version: BINS_VERSION, binsets }
    }

    /// Converts back, checking that every bin set is a partition and that no
    /// sample appears in two bin sets.
    pub fn into_sets(self) -> Result<Vec<BinSet>> {
        if self.version != BINS_VERSION {
            return Err(FormatError::Version { kind: "bins", found: self.version, expected: BINS_VERSION });
        }
        if self.binsets.is_empty() {
            return invalid("no bin sets");
        }
        let mut seen = BTreeSet::new();
        let mut sets = Vec::with_capacity(self.binsets.len());
        for doc in self.binsets {
            let stratum = Stratum::try_from(doc.stratum)?;
            if doc.bins.is_empty() {
                return invalid(format!("{stratum:?}: no bins"));
            }
            let mut bins = Vec::with_capacity(doc.bins.len());
            for (n, b) in doc.bins.into_iter().enumerate() {
                if b.index != n {
                    return invalid(format!("{stratum:?}: bin {n} is labelled {}", b.index));
                }
                if b.members.is_empty() {
                    return invalid(format!("{stratum:?}: bin {n} is empty"));
                }
                if b.members.len() != b.gains.len() {
                    return invalid(format!(
                        "{stratum:?}: bin {n} has {} members and {} gains",
                        b.members.len(),
                        b.gains.len()
                    ));
                }
                if let Some(dup) = b.members.iter().find(|&&m| !seen.insert(m)) {
                    return invalid(format!("sample {dup} appears in more than one bin"));
                }
                let gains = b.gains.iter().map(|g| parse_float(g)).collect::<Result<_>>()?;
                bins.push(Bin { index: n, members: b.members, gains });
            }
            let total: usize = bins.iter().map(Bin::len).sum();
            if total != doc.universe_size {
                return invalid(format!(
                    "{stratum:?}: bins hold {total} samples, universe_size is {}",
                    doc.universe_size
                ));
            }
            sets.push(BinSet { bins, universe_size: doc.universe_size, config: (&doc.config).into(), stratum });
        }
        Ok(sets)
    }
}

pub fn write_bins(path: &Path, sets: &[BinSet]) -> Result<()> {
    write_json(path, &BinsFile::from_sets(sets))
}

pub fn read_bins(path: &Path) -> Result<Vec<BinSet>> {
    read_json::<BinsFile>(path)?.into_sets()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinSampleDoc {
    pub stratum: StratumDoc,
    pub bin: usize,
    pub count: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoresetFile {
    pub version: u32,
    pub sampler: String,
    pub rng: String,
    pub seed: u64,
    pub keep_ratio: String,
    pub universe_size: usize,
    pub total: usize,
    pub source_sha256: Option<String>,
    pub selected_indices: Vec<usize>,
    pub per_bin: Vec<BinSampleDoc>,
}

impl CoresetFile {
    pub fn from_manifest(m: &CoresetManifest) -> Self {
        Self {
            version: CORESET_VERSION,
            sampler: m.sampler.clone(),
            rng: RNG_ALGORITHM.to_string(),
            seed: m.seed,
            keep_ratio: m.keep_ratio.to_string(),
            universe_size: m.universe_size,
            total: m.len(),
            source_sha256: m.source.clone(),
            selected_indices: m.selected_indices.clone(),
            per_bin: m
                .per_bin
                .iter()
                .map(|b| BinSampleDoc {
                    stratum: b.stratum.into(),
                    bin: b.bin,
                    count: b.indices.len(),
                    indices: b.indices.clone(),
                })
                .collect(),
        }
    }

    /// Converts back, checking that indices are strictly ascending, that the
    /// per-bin counts add up and that every selected index is attributed to
    /// exactly one bin.
    pub fn into_manifest(self) -> Result<CoresetManifest> {
        if self.version != CORESET_VERSION {
            return Err(FormatError::Version { kind: "coreset", found: self.version, expected: CORESET_VERSION });
        }
        if self.rng != RNG_ALGORITHM {
            return invalid(format!("manifest was drawn with rng {:?}, this build uses {RNG_ALGORITHM:?}", self.rng));
        }
        if !self.selected_indices.windows(2).all(|w| w[0] < w[1]) {
            return invalid("selected_indices are not strictly ascending");
        }
        if self.total != self.selected_indices.len() {
            return invalid(format!("total is {} but {} indices are listed", self.total, self.selected_indices.len()));
        }
        let counted: usize = self.per_bin.iter().map(|b| b.count).sum();
        if counted != self.total {
            return invalid(format!("per-bin counts sum to {counted}, total is {}", self.total));
        }
        let mut attributed: Vec<usize> = Vec::with_capacity(self.total);
        let mut per_bin = Vec::with_capacity(self.per_bin.len());
        for b in self.per_bin {
            if b.count != b.indices.len() {
                return invalid(format!("bin {} lists {} indices but count is {}", b.bin, b.indices.len(), b.count));
            }
            attributed.extend_from_slice(&b.indices);
            per_bin.push(BinSample { stratum: b.stratum.try_into()?, bin: b.bin, indices: b.indices });
        }
        attributed.sort_unstable();
        if attributed != self.selected_indices {
            return invalid("per-bin indices do not match selected_indices");
        }
        let keep_ratio = parse_float(&self.keep_ratio)?;
        Ok(CoresetManifest {
            selected_indices: self.selected_indices,
            per_bin,
            keep_ratio,
            seed: self.seed,
            sampler: self.sampler,
            universe_size: self.universe_size,
            source: self.source_sha256,
        })
    }
}

pub fn write_coreset(path: &Path, manifest: &CoresetManifest) -> Result<()> {
    write_json(path, &CoresetFile::from_manifest(manifest))
}

pub fn read_coreset(path: &Path) -> Result<CoresetManifest> {
    read_json::<CoresetFile>(path)?.into_manifest()
}

/// Selected indices as a flat `<i8` array.
pub fn write_index_array(path: &Path, manifest: &CoresetManifest) -> Result<()> {
    let data = manifest.selected_indices.iter().map(|&i| i as i64).collect();
    npy::write_array(path, &NpyArray::new(vec![manifest.len()], ArrayData::I64(data))?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumReportDoc {
    pub stratum: StratumDoc,
    pub bin_sizes: Vec<usize>,
    pub bin_radii: Vec<String>,
    pub mean_nn_distance_per_bin: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageDoc {
    pub selected: usize,
    pub samples: usize,
    pub mean: String,
    pub max: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: u32,
    pub invariants_hold: bool,
    pub first_pick_checks: usize,
    pub first_pick_matches: usize,
    pub first_pick_ok: bool,
    pub delta_total: usize,
    pub delta_agreements: usize,
    pub delta_ties: usize,
    pub delta_skipped: usize,
    pub delta_norm_checks: usize,
    pub delta_norm_violations: usize,
    pub statistics_checks: usize,
    pub statistics_failures: usize,
    pub radius_monotone_fraction: String,
    pub strata: Vec<StratumReportDoc>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage: Option<CoverageDoc>,
}

impl ReportFile {
    pub fn new(r: &DiagnosticsReport, coverage: Option<&CoverageReport>) -> Self {
        Self {
            version: REPORT_VERSION,
            invariants_hold: r.exact_invariants_hold(),
            first_pick_checks: r.first_pick_checks,
            first_pick_matches: r.first_pick_matches,
            first_pick_ok: r.first_pick_ok,
            delta_total: r.delta_total,
            delta_agreements: r.delta_agreements,
            delta_ties: r.delta_ties,
            delta_skipped: r.delta_skipped,
            delta_norm_checks: r.delta_norm_checks,
            delta_norm_violations: r.delta_norm_violations,
            statistics_checks: r.statistics_checks,
            statistics_failures: r.statistics_failures,
            radius_monotone_fraction: float_string(r.radius_monotone_fraction),
            strata: r
                .strata
                .iter()
                .map(|s| StratumReportDoc {
                    stratum: s.stratum.into(),
                    bin_sizes: s.bin_sizes.clone(),
                    bin_radii: s.bin_radii.iter().map(|&x| float_string(x)).collect(),
                    mean_nn_distance_per_bin: s.mean_nn_distance_per_bin.iter().map(|&x| float_string(x)).collect(),
                })
                .collect(),
            coverage: coverage.map(|c| CoverageDoc {
                selected: c.selected,
                samples: c.samples,
                mean: float_string(c.mean),
                max: float_string(c.max),
            }),
        }
    }
}

pub fn write_report(path: &Path, report: &DiagnosticsReport, coverage: Option<&CoverageReport>) -> Result<()> {
    write_json(path, &ReportFile::new(report, coverage))
}

/// Sidecar describing a mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub version: u32,
    pub drop_ratio: String,
    pub patch_height: usize,
    pub patch_width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_patches: usize,
    pub bit_order: String,
    pub keep_bit: u8,
    pub tie_break: String,
    pub image_ids: Vec<usize>,
    pub dropped_counts: Vec<usize>,
}

/// Path of the sidecar for a mask file: same stem, `.json` extension.
pub fn sidecar_path(masks: &Path) -> PathBuf {
    masks.with_extension("json")
}

/// Packs `keep` flags eight to a byte, first patch in the lowest bit.
pub fn pack_bits(keep: &[bool]) -> Vec<u8> {
    keep.chunks(8).map(|chunk| chunk.iter().enumerate().fold(0u8, |byte, (i, &k)| byte | (u8::from(k) << i))).collect()
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Writes masks as a `|u1` array of shape `(n_images, ⌈P/8⌉)` plus the
/// sidecar. All masks must share one grid.
pub fn write_masks(path: &Path, masks: &[PatchMask], image_ids: &[usize], config: &PatchConfig) -> Result<()> {
    let Some(first) = masks.first() else {
        return invalid("no masks to write");
    };
    let (rows, cols) = (first.scores.rows, first.scores.cols);
    if masks.iter().any(|m| (m.scores.rows, m.scores.cols) != (rows, cols)) {
        return invalid("masks have different patch grids");
    }
    if image_ids.len() != masks.len() {
        return invalid("one image id per mask is required");
    }
    let patches = rows * cols;
    let stride = patches.div_ceil(8);
    let data: Vec<u8> = masks.iter().flat_map(|m| pack_bits(&m.keep)).collect();
    npy::write_array(path, &NpyArray::new(vec![masks.len(), stride], ArrayData::U8(data))?)?;
    let sidecar = MaskSidecar {
        version: MASKS_VERSION,
        drop_ratio: config.drop_ratio.to_string(),
        patch_height: config.patch_height,
        patch_width: config.patch_width,
        grid_rows: rows,
        grid_cols: cols,
        num_patches: patches,
        bit_order: "little".into(),
        keep_bit: 1,
        tie_break: MASK_TIE_BREAK.into(),
        image_ids: image_ids.to_vec(),
        dropped_counts: masks.iter().map(|m| m.dropped_count).collect(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// Reads a mask file and its sidecar; one keep vector per image.
pub fn read_masks(path: &Path) -> Result<(MaskSidecar, Vec<Vec<bool>>)> {
    let sidecar: MaskSidecar = read_json(&sidecar_path(path))?;
    if sidecar.version != MASKS_VERSION {
        return Err(FormatError::Version { kind: "masks", found: sidecar.version, expected: MASKS_VERSION });
    }
    if sidecar.bit_order != "little" || sidecar.keep_bit != 1 {
        return invalid(format!("unsupported bit layout {} / keep={}", sidecar.bit_order, sidecar.keep_bit));
    }
    let array = npy::read_array(path)?;
    let stride = sidecar.num_patches.div_ceil(8);
    let ArrayData::U8(bytes) = &array.data else {
        return invalid("mask array is not |u1");
    };
    if array.shape != [sidecar.image_ids.len(), stride] {
        return invalid(format!(
            "mask array has shape {:?}, sidecar implies [{}, {stride}]",
            array.shape,
            sidecar.image_ids.len()
        ));
    }
    let keeps: Vec<Vec<bool>> = bytes.chunks(stride.max(1)).map(|row| unpack_bits(row, sidecar.num_patches)).collect();
    for (i, (keep, &dropped)) in keeps.iter().zip(&sidecar.dropped_counts).enumerate() {
        if keep.iter().filter(|&&k| !k).count() != dropped {
            return invalid(format!("image {}: dropped count disagrees with mask", sidecar.image_ids[i]));
        }
    }
    Ok((sidecar, keeps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_sets() -> Vec<BinSet> {
        let cfg = QuantizeConfig::with_bins(2);
        vec![
            BinSet {
                bins: vec![
                    Bin { index: 0, members: vec![4, 0], gains: vec![-5.0, 0.1 + 0.2] },
                    Bin { index: 1, members: vec![2], gains: vec![-0.0] },
                ],
                universe_size: 3,
                config: cfg,
                stratum: Stratum::Class(0),
            },
            BinSet {
                bins: vec![
                    Bin { index: 0, members: vec![1], gains: vec![1e-300] },
                    Bin { index: 1, members: vec![3], gains: vec![f64::MAX] },
                ],
                universe_size: 2,
                config: cfg,
                stratum: Stratum::Class(3),
            },
        ]
    }

    #[test]
    fn float_strings_have_17_digits() {
        assert_eq!(float_string(-3.0), "-3.0000000000000000e0");
        assert_eq!(float_string(0.1 + 0.2), "3.0000000000000004e-1");
    }

    #[test]
    fn bins_roundtrip_is_exact() {
        let sets = sample_sets();
        let json = serde_json::to_string(&BinsFile::from_sets(&sets)).unwrap();
        let back = serde_json::from_str::<BinsFile>(&json).unwrap().into_sets().unwrap();
        assert_eq!(back, sets);
        assert!(json.contains("\"stratum\":3"));
    }

    #[test]
    fn bins_rejections() {
        let file = BinsFile::from_sets(&sample_sets());
        let mut dup = file.clone();
        dup.binsets[1].bins[0].members[0] = 0;
        assert!(dup.into_sets().unwrap_err().to_string().contains("more than one bin"));
        let mut gains = file.clone();
        gains.binsets[0].bins[0].gains.pop();
        assert!(gains.into_sets().is_err());
        let mut version = file.clone();
        version.version = 9;
        assert!(matches!(version.into_sets(), Err(FormatError::Version { found: 9, .. })));
        let mut empty = file.clone();
        empty.binsets[0].bins[1].members.clear();
        empty.binsets[0].bins[1].gains.clear();
        assert!(empty.into_sets().is_err());
        let mut stratum = file;
        stratum.binsets[0].stratum = StratumDoc::Name("dogs".into());
        assert!(stratum.into_sets().is_err());
    }

    fn manifest() -> CoresetManifest {
        CoresetManifest {
            selected_indices: vec![0, 2, 3],
            per_bin: vec![
                BinSample { stratum: Stratum::All, bin: 0, indices: vec![0, 3] },
                BinSample { stratum: Stratum::All, bin: 1, indices: vec![2] },
            ],
            keep_ratio: 0.35,
            seed: u64::MAX,
            sampler: "uniform".into(),
            universe_size: 9,
            source: Some("ab".repeat(32)),
        }
    }

    #[test]
    fn coreset_roundtrip_and_checks() {
        let file = CoresetFile::from_manifest(&manifest());
        assert_eq!(file.keep_ratio, "0.35");
        let json = serde_json::to_string(&file).unwrap();
        let back = serde_json::from_str::<CoresetFile>(&json).unwrap().into_manifest().unwrap();
        assert_eq!(back, manifest());

        let mut unsorted = file.clone();
        unsorted.selected_indices.swap(0, 1);
        assert!(unsorted.into_manifest().is_err());
        let mut miscount = file.clone();
        miscount.per_bin[1].count = 2;
        assert!(miscount.into_manifest().is_err());
        let mut stray = file.clone();
        stray.per_bin[1].indices[0] = 5;
        assert!(stray.into_manifest().unwrap_err().to_string().contains("do not match"));
        let mut rng = file;
        rng.rng = "pcg".into();
        assert!(rng.into_manifest().is_err());
    }

    #[test]
    fn mask_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.bin");
        let scores = dq_core::Grid::filled(3, 3, 1.0);
        let masks: Vec<PatchMask> =
            [0.25, 0.5].iter().map(|&t| dq_core::patch::drop_mask(&scores, t).unwrap()).collect();
        let cfg = PatchConfig { patch_height: 2, patch_width: 2, drop_ratio: 0.25 };
        write_masks(&path, &masks, &[7, 8], &cfg).unwrap();
        let (sidecar, keeps) = read_masks(&path).unwrap();
        assert_eq!(sidecar.image_ids, vec![7, 8]);
        assert_eq!(sidecar.dropped_counts, vec![2, 4]);
        assert_eq!(keeps, masks.iter().map(|m| m.keep.clone()).collect::<Vec<_>>());
        assert_eq!(npy::read_array(&path).unwrap().shape, vec![2, 2]);
    }

    proptest! {
        #[test]
        fn bits_roundtrip(keep in proptest::collection::vec(any::<bool>(), 0..80)) {
            let packed = pack_bits(&keep);
            prop_assert_eq!(packed.len(), keep.len().div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, keep.len()), keep);
        }

        #[test]
        fn float_strings_roundtrip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(parse_float(&float_string(x)).unwrap().to_bits(), x.to_bits());
        }
    }
}
