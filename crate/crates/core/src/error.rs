use alloc::string::String;

use crate::dataset::ValidationReport;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(ValidationReport),
    #[error("matrix data has {len} values, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("candidate not selectable: sample {0} is not in the pool")]
    NotInPool(usize),
    #[error("pool exhausted")]
    PoolExhausted,
    #[error("degenerate quadratic (2k = M): {selected} selected of {universe}")]
    DegenerateQuadratic { selected: usize, universe: usize },
    #[error("num_bins must be at least 1")]
    ZeroBins,
    #[error("num_bins exceeds samples: {bins} bins for {samples} samples")]
    TooManyBins { bins: usize, samples: usize },
    #[error("class {class} has {samples} samples, fewer than {bins} bins")]
    ClassTooSmall { class: i64, samples: usize, bins: usize },
    #[error("keep ratio {0} outside (0, 1]")]
    KeepRatio(f64),
    #[error("unknown sampler {name:?}; available: {available}")]
    UnknownSampler { name: String, available: String },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("sample index {index} out of range for {samples} samples")]
    IndexOutOfRange { index: usize, samples: usize },
    #[error("patch drop ratio {0} outside [0, 1)")]
    DropRatio(f64),
    #[error("patch {patch_height}x{patch_width} does not tile a {height}x{width} map")]
    PatchSize { patch_height: usize, patch_width: usize, height: usize, width: usize },
    #[error("cannot upsample {from_h}x{from_w} to smaller {to_h}x{to_w}")]
    Upsample { from_h: usize, from_w: usize, to_h: usize, to_w: usize },
    #[error("attention map must be finite and nonnegative; found {value} at ({row}, {col})")]
    Attention { row: usize, col: usize, value: f64 },
    #[error("image {image_id}: {source}")]
    Image {
        image_id: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}
