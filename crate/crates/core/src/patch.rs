//! Patch importance and drop masks from pixel attention maps.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::config::PatchConfig;
use crate::error::{Error, Result};
use crate::math::floor_fraction_of;

/// Row-major 2-D grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::Shape { rows, cols, len: values.len() });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, values: alloc::vec![value; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pixel-resolution attention for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub image_id: usize,
    pub values: Grid,
}

impl AttentionMap {
    /// Rejects empty, negative and non-finite maps.
    pub fn new(image_id: usize, values: Grid) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape { rows: values.rows, cols: values.cols, len: 0 });
        }
        if let Some(i) = values.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Attention { row: i / values.cols, col: i % values.cols, value: values.values[i] });
        }
        Ok(Self { image_id, values })
    }

    pub fn height(&self) -> usize {
        self.values.rows
    }

    pub fn width(&self) -> usize {
        self.values.cols
    }
}

/// Keep/drop decision per patch. `keep` is row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub keep: Vec<bool>,
    pub scores: Grid,
    pub dropped_count: usize,
}

impl PatchMask {
    pub fn num_patches(&self) -> usize {
        self.keep.len()
    }
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` reads the
/// source at `i · (H' − 1) / (H − 1)`.
pub fn upsample_map(low_res: &Grid, height: usize, width: usize) -> Result<Grid> {
    if low_res.is_empty() || height < low_res.rows || width < low_res.cols {
        return Err(Error::Upsample { from_h: low_res.rows, from_w: low_res.cols, to_h: height, to_w: width });
    }
    if height == low_res.rows && width == low_res.cols {
        return Ok(low_res.clone());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                if out == 1 || src == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (src - 1) as f64 / (out - 1) as f64;
                let lo = (libm::floor(pos) as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = axis(height, low_res.rows);
    let xs = axis(width, low_res.cols);
    let mut values = Vec::with_capacity(height * width);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = low_res.at(y0, x0) * (1.0 - tx) + low_res.at(y0, x1) * tx;
            let bottom = low_res.at(y1, x0) * (1.0 - tx) + low_res.at(y1, x1) * tx;
            values.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(Grid { rows: height, cols: width, values })
}

/// Mean attention of every `h x w` patch.
pub fn patch_scores(map: &AttentionMap, config: &PatchConfig) -> Result<Grid> {
    let (h, w) = (config.patch_height, config.patch_width);
    let (height, width) = (map.height(), map.width());
    if h == 0 || w == 0 || height % h != 0 || width % w != 0 {
        return Err(Error::PatchSize { patch_height: h, patch_width: w, height, width });
    }
    let (rows, cols) = (height / h, width / w);
    let mut sums = alloc::vec![0.0; rows * cols];
    for y in 0..height {
        let line = &map.values.values[y * width..(y + 1) * width];
        let base = (y / h) * cols;
        for (x, v) in line.iter().enumerate() {
            sums[base + x / w] += v;
        }
    }
    let area = (h * w) as f64;
    sums.iter_mut().for_each(|s| *s /= area);
    Ok(Grid { rows, cols, values: sums })
}

/// Drops the `⌊θ·P⌋` lowest-scoring patches. Equal scores drop the higher
/// row-major index first.
pub fn drop_mask(scores: &Grid, theta: f64) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::DropRatio(theta));
    }
    let total = scores.len();
    let dropped_count = floor_fraction_of(theta, total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| scores.values[a].total_cmp(&scores.values[b]).then(b.cmp(&a)));
    let mut keep = alloc::vec![true; total];
    for &i in &order[..dropped_count] {
        keep[i] = false;
    }
    Ok(PatchMask { keep, scores: scores.clone(), dropped_count })
}

/// Scores and masks one image.
pub fn mask_image(map: &AttentionMap, config: &PatchConfig) -> Result<PatchMask> {
    config.validate()?;
    drop_mask(&patch_scores(map, config)?, config.drop_ratio)
}

/// [`mask_image`] over a batch, preserving order. The first failing image
/// aborts the batch with its id attached.
pub fn mask_batch(maps: &[AttentionMap], config: &PatchConfig) -> Result<Vec<PatchMask>> {
    let one = |m: &AttentionMap| {
        mask_image(m, config).map_err(|e| Error::Image { image_id: m.image_id, source: Box::new(e) })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        maps.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    maps.iter().map(one).collect()
}
