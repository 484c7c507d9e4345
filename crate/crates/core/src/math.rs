//! Float helpers that work without `std`.

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// Squared Euclidean distance, accumulated in column order.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Dot product accumulated in column order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `floor(fraction * count)` for a user-supplied decimal fraction.
///
/// Products that land within `1e-9` (relative) of an integer are snapped to it,
/// so `0.29 * 100` yields 29 rather than the 28 a bare `floor` gives for
/// `28.999999999999996`.
pub fn floor_fraction_of(fraction: f64, count: usize) -> usize {
    let exact = fraction * count as f64;
    let nearest = libm::round(exact);
    let snapped = if abs(exact - nearest) <= 1e-9 * nearest.max(1.0) { nearest } else { libm::floor(exact) };
    (snapped.max(0.0) as usize).min(count)
}

/// Fractional part left over by [`floor_fraction_of`].
pub(crate) fn fraction_remainder(fraction: f64, count: usize) -> f64 {
    let rem = fraction * count as f64 - floor_fraction_of(fraction, count) as f64;
    if rem < 0.0 {
        0.0
    } else {
        rem
    }
}
