//! GraphCut gain evaluation and greedy selection.
//!
//! For a candidate `x`, selected set `S` and remaining pool `P` (which still
//! contains `x`), the gain is
//!
//! ```text
//! gain(x) = Σ_{p∈S} ‖f(p) − f(x)‖²  −  Σ_{p∈P} ‖f(p) − f(x)‖²
//! ```
//!
//! Three routes compute or use it:
//!
//! - [`gain_direct`] evaluates the two sums literally. It is the reference.
//! - [`SelectionState::gain`] expands each sum as
//!   `n‖f(x)‖² − 2 sumᵀf(x) + Σ‖f(p)‖²` using running statistics, so one
//!   candidate costs `O(m)`.
//! - [`SelectionState::delta_select`] uses the closed form
//!   `gain(x) = (2k − M_u)‖f(x) − δ‖² + const` with
//!   `δ = (2·Σ_S f − Σ_{S∪P} f) / (2k − M_u)`, `k = |S|`, `M_u = |S| + |P|`.
//!   When `2k < M_u` the argmax of the gain is the pool point nearest `δ`;
//!   when `2k > M_u` it is the farthest.
//!
//! Every argmax breaks ties toward the lowest sample index. The fast routes
//! round differently from the literal sums, so candidates whose gains come
//! within [`TIE_WINDOW`] (relative to the magnitude of the sums) of the best
//! are settled by [`gain_direct`]. Candidate gains are independent of each
//! other and the reduction is over a total order, so the winner does not
//! depend on how the pool is split across workers.

use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::math::{abs, sq_dist};

/// Gain of one candidate at selection time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainValue {
    pub candidate: usize,
    pub gain: f64,
}

impl GainValue {
    /// Larger gain wins; equal gains go to the lower index.
    #[inline]
    fn max(self, other: GainValue) -> GainValue {
        if other.gain > self.gain || (other.gain == self.gain && other.candidate < self.candidate) {
            other
        } else {
            self
        }
    }
}

/// Relative width of the window in which fast-route gains count as tied.
/// Far above the rounding error of an `m`-term dot product for any
/// realistic `m`, far below the gain gaps of non-degenerate data.
pub const TIE_WINDOW: f64 = 1e-10;

/// The two best candidates seen so far under the [`GainValue::max`] order.
#[derive(Debug, Clone, Copy)]
struct Leaders {
    best: GainValue,
    runner_up: Option<GainValue>,
}

impl Leaders {
    fn offer(self, g: GainValue) -> Self {
        if self.best.max(g).candidate == g.candidate {
            Leaders { best: g, runner_up: Some(self.best) }
        } else {
            Leaders { best: self.best, runner_up: Some(self.runner_up.map_or(g, |r| r.max(g))) }
        }
    }

    #[cfg(any(feature = "parallel", test))]
    fn merge(self, other: Leaders) -> Self {
        let merged = self.offer(other.best);
        match other.runner_up {
            Some(r) => merged.offer(r),
            None => merged,
        }
    }
}

/// Sufficient statistics for the current partial bin and the remaining pool.
///
/// Indices refer to rows of the [`FeatureMatrix`] the state was built from;
/// every method taking a matrix must be given that same matrix.
#[derive(Debug, Clone)]
pub struct SelectionState {
    selected: Vec<usize>,
    selected_sum: Vec<f64>,
    selected_sqsum: f64,
    /// Ascending.
    pool: Vec<usize>,
    pool_sum: Vec<f64>,
    pool_sqsum: f64,
    sq_norms: Vec<f64>,
    max_sq_norm: f64,
}

/// Pool sizes below this are scanned on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_MIN_POOL: usize = 2048;

impl SelectionState {
    /// Starts with an empty selection over `pool` (deduplicated and sorted).
    ///
    /// # Panics
    ///
    /// If a pool index is not a row of `features`.
    pub fn new(features: &FeatureMatrix, pool: impl Into<Vec<usize>>) -> Self {
        let mut pool = pool.into();
        pool.sort_unstable();
        pool.dedup();
        if let Some(&last) = pool.last() {
            assert!(last < features.num_samples(), "pool index {last} out of range");
        }
        let sq_norms = features.squared_norms();
        let max_sq_norm = pool.iter().map(|&i| sq_norms[i]).fold(0.0, f64::max);
        let mut state = Self {
            selected: Vec::new(),
            selected_sum: vec![0.0; features.dim()],
            selected_sqsum: 0.0,
            pool,
            pool_sum: vec![0.0; features.dim()],
            pool_sqsum: 0.0,
            sq_norms,
            max_sq_norm,
        };
        state.refresh_pool_statistics(features);
        state
    }

    /// Every row of `features` in the pool.
    pub fn over_all(features: &FeatureMatrix) -> Self {
        Self::new(features, (0..features.num_samples()).collect::<Vec<_>>())
    }

    /// Selected samples of the current bin, in selection order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Remaining candidates, ascending.
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn selected_count(&self) -> usize {
        self.selected.len()
    }

    pub fn pool_count(&self) -> usize {
        self.pool.len()
    }

    /// `|S| + |P|`: size of the universe the current bin is drawn from.
    pub fn universe_size(&self) -> usize {
        self.selected.len() + self.pool.len()
    }

    pub fn selected_sum(&self) -> &[f64] {
        &self.selected_sum
    }

    pub fn pool_sum(&self) -> &[f64] {
        &self.pool_sum
    }

    pub fn selected_sqsum(&self) -> f64 {
        self.selected_sqsum
    }

    pub fn pool_sqsum(&self) -> f64 {
        self.pool_sqsum
    }

    /// Cached `‖f(x_i)‖²` for every row.
    pub fn sq_norms(&self) -> &[f64] {
        &self.sq_norms
    }

    #[inline]
    pub fn in_pool(&self, index: usize) -> bool {
        self.pool.binary_search(&index).is_ok()
    }

    /// `C1 − C2` from the running statistics.
    #[inline]
    fn gain_unchecked(&self, x: &[f64], sq: f64) -> f64 {
        let mut to_selected = 0.0;
        let mut to_pool = 0.0;
        for ((s, p), v) in self.selected_sum.iter().zip(&self.pool_sum).zip(x) {
            to_selected += s * v;
            to_pool += p * v;
        }
        let c1 = self.selected.len() as f64 * sq - 2.0 * to_selected + self.selected_sqsum;
        let c2 = self.pool.len() as f64 * sq - 2.0 * to_pool + self.pool_sqsum;
        c1 - c2
    }

    /// Gain of one pool candidate in `O(m)`.
    pub fn gain(&self, candidate: usize, features: &FeatureMatrix) -> Result<GainValue> {
        if !self.in_pool(candidate) {
            return Err(Error::NotInPool(candidate));
        }
        Ok(GainValue { candidate, gain: self.gain_unchecked(features.row(candidate), self.sq_norms[candidate]) })
    }

    fn gain_at(&self, candidate: usize, features: &FeatureMatrix) -> GainValue {
        GainValue { candidate, gain: self.gain_unchecked(features.row(candidate), self.sq_norms[candidate]) }
    }

    /// Best two of a run of candidates. Four rows are walked together so
    /// their accumulation chains overlap; each row still sums in column
    /// order, so every gain is bit-identical to
    /// [`gain_unchecked`](Self::gain_unchecked).
    fn leaders_of(&self, candidates: &[usize], features: &FeatureMatrix) -> Option<Leaders> {
        let dim = features.dim();
        let mut leaders: Option<Leaders> = None;
        let mut offer = |g: GainValue| {
            leaders = Some(leaders.map_or(Leaders { best: g, runner_up: None }, |l| l.offer(g)));
        };
        let mut quads = candidates.chunks_exact(4);
        for quad in &mut quads {
            let rows = [quad[0], quad[1], quad[2], quad[3]].map(|i| &features.row(i)[..dim]);
            let mut to_selected = [0.0f64; 4];
            let mut to_pool = [0.0f64; 4];
            let sums = self.selected_sum[..dim].iter().zip(&self.pool_sum[..dim]);
            for (j, (s, p)) in sums.enumerate() {
                for r in 0..4 {
                    let v = rows[r][j];
                    to_selected[r] += s * v;
                    to_pool[r] += p * v;
                }
            }
            for r in 0..4 {
                let sq = self.sq_norms[quad[r]];
                let c1 = self.selected.len() as f64 * sq - 2.0 * to_selected[r] + self.selected_sqsum;
                let c2 = self.pool.len() as f64 * sq - 2.0 * to_pool[r] + self.pool_sqsum;
                offer(GainValue { candidate: quad[r], gain: c1 - c2 });
            }
        }
        for &i in quads.remainder() {
            offer(self.gain_at(i, features));
        }
        leaders
    }

    /// Bound on how far a fast-route gain may sit from the literal sums.
    fn gain_tolerance(&self) -> f64 {
        let magnitude = self.universe_size() as f64 * self.max_sq_norm + self.selected_sqsum + self.pool_sqsum;
        TIE_WINDOW * magnitude
    }

    /// The pool candidate with the largest gain (lowest index on ties).
    pub fn select_next(&self, features: &FeatureMatrix) -> Result<GainValue> {
        let first = *self.pool.first().ok_or(Error::PoolExhausted)?;
        if self.pool.len() == 1 {
            return Ok(self.gain_at(first, features));
        }
        let leaders = self.scan(features);
        let tolerance = self.gain_tolerance();
        match leaders.runner_up {
            Some(r) if leaders.best.gain - r.gain <= tolerance => {
                let floor = leaders.best.gain - tolerance;
                let window: Vec<usize> =
                    self.pool.iter().copied().filter(|&i| self.gain_at(i, features).gain >= floor).collect();
                Ok(self.gain_at(self.settle(&window, features), features))
            }
            _ => Ok(leaders.best),
        }
    }

    fn scan(&self, features: &FeatureMatrix) -> Leaders {
        #[cfg(feature = "parallel")]
        if self.pool.len() >= PARALLEL_MIN_POOL {
            use rayon::prelude::*;
            return self
                .pool
                .par_chunks(256)
                .filter_map(|chunk| self.leaders_of(chunk, features))
                .reduce_with(Leaders::merge)
                .expect("non-empty pool");
        }
        self.leaders_of(&self.pool, features).expect("non-empty pool")
    }

    /// Largest literal-sum gain among `window` (ascending), lowest index on
    /// exact ties.
    fn settle(&self, window: &[usize], features: &FeatureMatrix) -> usize {
        window
            .iter()
            .map(|&i| GainValue { candidate: i, gain: direct_unchecked(self, i, features) })
            .reduce(GainValue::max)
            .expect("window holds the best candidate")
            .candidate
    }

    /// Target point and curvature of the closed-form gain.
    pub fn delta_target(&self) -> Result<DeltaTarget> {
        let k = self.selected.len();
        let universe = self.universe_size();
        if 2 * k == universe {
            return Err(Error::DegenerateQuadratic { selected: k, universe });
        }
        let curvature = 2.0 * k as f64 - universe as f64;
        let point =
            self.selected_sum.iter().zip(&self.pool_sum).map(|(s, p)| (2.0 * s - (s + p)) / curvature).collect();
        Ok(DeltaTarget { point, curvature })
    }

    /// Argmax of the gain computed through [`DeltaTarget`] instead of the
    /// gain itself: nearest to the target while `2k < M_u`, farthest while
    /// `2k > M_u`. Candidates whose distance is within the tie window of the
    /// best are settled by the literal sums, as in
    /// [`select_next`](Self::select_next), so the two agree whenever
    /// `2k ≠ M_u`.
    pub fn delta_select(&self, features: &FeatureMatrix) -> Result<usize> {
        if self.pool.is_empty() {
            return Err(Error::PoolExhausted);
        }
        let target = self.delta_target()?;
        let nearest = target.curvature < 0.0;
        let distances: Vec<f64> = self.pool.iter().map(|&i| sq_dist(features.row(i), &target.point)).collect();
        let (mut best, mut best_dist) = (0, distances[0]);
        for (at, &d) in distances.iter().enumerate().skip(1) {
            if (nearest && d < best_dist) || (!nearest && d > best_dist) {
                best = at;
                best_dist = d;
            }
        }
        // a gain gap g is a distance gap g / |2k − M_u|; the target's own
        // rounding grows with its norm
        let target_sq: f64 = target.point.iter().map(|v| v * v).sum();
        let tolerance =
            (self.gain_tolerance() / abs(target.curvature)).max(TIE_WINDOW * (self.max_sq_norm + target_sq));
        let window: Vec<usize> = self
            .pool
            .iter()
            .zip(&distances)
            .filter(|&(_, &d)| abs(d - best_dist) <= tolerance)
            .map(|(&i, _)| i)
            .collect();
        if window.len() == 1 {
            return Ok(self.pool[best]);
        }
        Ok(self.settle(&window, features))
    }

    /// Moves `chosen` from the pool into the current bin.
    pub fn commit(&mut self, chosen: usize, features: &FeatureMatrix) -> Result<()> {
        let at = self.pool.binary_search(&chosen).map_err(|_| Error::NotInPool(chosen))?;
        self.pool.remove(at);
        self.selected.push(chosen);
        for ((s, p), v) in self.selected_sum.iter_mut().zip(self.pool_sum.iter_mut()).zip(features.row(chosen)) {
            *s += v;
            *p -= v;
        }
        let sq = self.sq_norms[chosen];
        self.selected_sqsum += sq;
        self.pool_sqsum -= sq;
        Ok(())
    }

    /// Closes the current bin: returns its members in selection order and
    /// starts an empty one over the remaining pool. Pool statistics are
    /// recomputed from scratch so incremental drift does not carry over.
    pub fn finish_bin(&mut self, features: &FeatureMatrix) -> Vec<usize> {
        let members = core::mem::take(&mut self.selected);
        self.selected_sum.iter_mut().for_each(|s| *s = 0.0);
        self.selected_sqsum = 0.0;
        self.refresh_pool_statistics(features);
        members
    }

    fn refresh_pool_statistics(&mut self, features: &FeatureMatrix) {
        self.pool_sum.iter_mut().for_each(|s| *s = 0.0);
        self.pool_sqsum = 0.0;
        for &i in &self.pool {
            for (s, v) in self.pool_sum.iter_mut().zip(features.row(i)) {
                *s += v;
            }
            self.pool_sqsum += self.sq_norms[i];
        }
    }

    /// Checks the running sums against a recomputation over the index sets.
    ///
    /// Each coordinate may deviate by `1e-6 · (1 + Σ|f(p)_j|)`; scaling by the
    /// absolute sum keeps the check meaningful for centered data, whose sums
    /// are near zero.
    pub fn statistics_consistent(&self, features: &FeatureMatrix) -> bool {
        let check = |indices: &[usize], sum: &[f64], sqsum: f64| {
            let mut exact = vec![0.0; features.dim()];
            let mut scale = vec![1.0; features.dim()];
            let mut exact_sq = 0.0;
            for &i in indices {
                for ((e, s), v) in exact.iter_mut().zip(scale.iter_mut()).zip(features.row(i)) {
                    *e += v;
                    *s += abs(*v);
                }
                exact_sq += self.sq_norms[i];
            }
            let sums_ok = exact.iter().zip(sum).zip(&scale).all(|((e, s), sc)| abs(e - s) <= 1e-6 * sc);
            sums_ok && abs(exact_sq - sqsum) <= 1e-6 * (1.0 + exact_sq)
        };
        let disjoint = self.selected.iter().all(|i| !self.in_pool(*i));
        disjoint
            && check(&self.selected, &self.selected_sum, self.selected_sqsum)
            && check(&self.pool, &self.pool_sum, self.pool_sqsum)
    }
}

/// Closed form of the gain: `gain(x) = curvature · ‖f(x) − point‖² + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTarget {
    pub point: Vec<f64>,
    /// `2k − M_u`. Negative while fewer than half the universe is selected.
    pub curvature: f64,
}

/// Reference gain by the literal double sum, `O((|S| + |P|) · m)`.
pub fn gain_direct(state: &SelectionState, candidate: usize, features: &FeatureMatrix) -> Result<GainValue> {
    if !state.in_pool(candidate) {
        return Err(Error::NotInPool(candidate));
    }
    Ok(GainValue { candidate, gain: direct_unchecked(state, candidate, features) })
}

fn direct_unchecked(state: &SelectionState, candidate: usize, features: &FeatureMatrix) -> f64 {
    let x = features.row(candidate);
    let c1: f64 = state.selected().iter().map(|&p| sq_dist(features.row(p), x)).sum();
    let c2: f64 = state.pool().iter().map(|&p| sq_dist(features.row(p), x)).sum();
    c1 - c2
}

/// Squared distance from `x` to the mean of the pool, used for the first
/// pick of every bin.
pub fn distance_to_pool_mean(state: &SelectionState, x: &[f64]) -> f64 {
    let n = state.pool_count() as f64;
    let mut acc = 0.0;
    for (v, s) in x.iter().zip(state.pool_sum()) {
        let d = v - s / n;
        acc += d * d;
    }
    acc
}
