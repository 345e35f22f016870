//! Interval algebra over one-dimensional action spaces.
//!
//! An [`ActionSpace`] is a closed range `[min, max]` of angles in degrees. Per-step
//! restrictions are a [`RestrictionSet`] of open intervals; removing them from the
//! action space leaves an [`IntervalSet`] of sorted, disjoint, closed intervals.
//!
//! The "concatenated coordinate" of an interval set lays its intervals end to end on
//! `[0, total_length]`. Segments are left-closed/right-open, except the last one which
//! is closed, so every position maps to exactly one action.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intervals shorter than this are treated as numerical dust and dropped.
pub const DUST: f64 = 1e-9;

/// Default zero-padding capacity for restriction-augmented observations.
pub const PAD_CAPACITY: usize = 8;

/// A closed, bounded, one-dimensional action range in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub min: f64,
    pub max: f64,
}

impl ActionSpace {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::InvalidArgument(format!(
                "action space requires finite min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    #[inline]
    pub fn contains(&self, a: f64) -> bool {
        a >= self.min && a <= self.max
    }

    #[inline]
    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.min, self.max)
    }

    pub fn as_interval(&self) -> Interval {
        Interval {
            low: self.min,
            high: self.max,
        }
    }

    /// The unrestricted allowed set `{[min, max]}`.
    pub fn full_set(&self) -> IntervalSet {
        IntervalSet {
            intervals: vec![self.as_interval()],
        }
    }
}

/// An interval `[low, high]`. Whether the endpoints belong to it depends on the
/// container: [`IntervalSet`] holds closed intervals, [`RestrictionSet`] open ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Interval { low: v[0], high: v[1] }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.low, i.high]
    }
}

impl Interval {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && low <= high) {
            return Err(Error::InvalidArgument(format!(
                "interval requires finite low <= high, got [{low}, {high}]"
            )));
        }
        Ok(Self { low, high })
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.high - self.low
    }

    #[inline]
    pub fn contains_closed(&self, a: f64) -> bool {
        a >= self.low && a <= self.high
    }

    #[inline]
    pub fn contains_open(&self, a: f64) -> bool {
        a > self.low && a < self.high
    }

    #[inline]
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

/// Length statistics of an allowed set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMeasure {
    pub total_length: f64,
    pub count: usize,
    pub min_len: f64,
    pub max_len: f64,
    pub mean_len: f64,
    /// Population variance of the interval lengths.
    pub variance_len: f64,
}

/// Sorted, pairwise disjoint closed intervals with strict gaps between them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Interval>", into = "Vec<Interval>")]
pub struct IntervalSet {
    intervals: Vec<Interval>,
}

impl TryFrom<Vec<Interval>> for IntervalSet {
    type Error = Error;

    fn try_from(v: Vec<Interval>) -> Result<Self> {
        IntervalSet::new(v)
    }
}

impl From<IntervalSet> for Vec<Interval> {
    fn from(s: IntervalSet) -> Self {
        s.intervals
    }
}

impl IntervalSet {
    /// Builds a set from intervals that already satisfy the invariants.
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        for iv in &intervals {
            if !(iv.low.is_finite() && iv.high.is_finite()) || iv.length() < DUST {
                return Err(Error::InvalidArgument(format!(
                    "invalid interval [{}, {}] in allowed set",
                    iv.low, iv.high
                )));
            }
        }
        for w in intervals.windows(2) {
            if !(w[0].high < w[1].low) {
                return Err(Error::InvalidArgument(
                    "allowed set intervals must be sorted with strict gaps".into(),
                ));
            }
        }
        Ok(Self { intervals })
    }

    /// Normalizes arbitrary closed intervals into a valid set (sort, merge, drop dust).
    pub fn from_unsorted(intervals: impl IntoIterator<Item = Interval>) -> Self {
        let mut v: Vec<Interval> = intervals.into_iter().collect();
        v.sort_by(|a, b| a.low.total_cmp(&b.low));
        let mut merged: Vec<Interval> = Vec::with_capacity(v.len());
        for iv in v {
            match merged.last_mut() {
                Some(last) if iv.low <= last.high => last.high = last.high.max(iv.high),
                _ => merged.push(iv),
            }
        }
        merged.retain(|iv| iv.length() >= DUST);
        Self { intervals: merged }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interval> {
        self.intervals.iter()
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(Interval::length).sum()
    }

    /// True iff `a` lies in some closed interval of the set.
    pub fn contains(&self, a: f64) -> bool {
        // Sets are small (a handful of intervals), a scan beats a binary search here.
        self.intervals.iter().any(|iv| iv.contains_closed(a))
    }

    /// True iff the whole closed interval lies inside one allowed interval (up to `DUST`).
    pub fn contains_interval(&self, target: &Interval) -> bool {
        self.intervals
            .iter()
            .any(|iv| iv.low <= target.low + DUST && target.high <= iv.high + DUST)
    }

    pub fn measure(&self) -> SetMeasure {
        let count = self.intervals.len();
        if count == 0 {
            return SetMeasure {
                total_length: 0.0,
                count: 0,
                min_len: 0.0,
                max_len: 0.0,
                mean_len: 0.0,
                variance_len: 0.0,
            };
        }
        let lens: Vec<f64> = self.intervals.iter().map(Interval::length).collect();
        let total: f64 = lens.iter().sum();
        let mean = total / count as f64;
        let variance = lens.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / count as f64;
        SetMeasure {
            total_length: total,
            count,
            min_len: lens.iter().copied().fold(f64::INFINITY, f64::min),
            max_len: lens.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_len: mean,
            variance_len: variance,
        }
    }

    /// Maps a concatenated-coordinate position `u ∈ [0, total_length]` to an action.
    ///
    /// Positions outside the range are clamped.
    pub fn locate(&self, u: f64) -> Result<f64> {
        let last = self.intervals.len().checked_sub(1).ok_or(Error::EmptyAllowedSet)?;
        let mut offset = 0.0;
        for (i, iv) in self.intervals.iter().enumerate() {
            let len = iv.length();
            // `low + len` can overshoot `high` by an ulp.
            if i == last {
                return Ok((iv.low + (u - offset).clamp(0.0, len)).min(iv.high));
            }
            if u < offset + len {
                return Ok((iv.low + (u - offset).max(0.0)).min(iv.high));
            }
            offset += len;
        }
        unreachable!("loop returns on the last interval")
    }

    /// Draws an action uniformly over the union of the intervals.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let total = self.total_length();
        if self.is_empty() || total <= 0.0 {
            return Err(Error::EmptyAllowedSet);
        }
        let u: f64 = rng.random::<f64>() * total;
        self.locate(u)
    }

    /// Nearest allowed action under a p-norm (`p >= 1`); ties go to the smaller value.
    ///
    /// For scalar actions every p-norm is a monotone function of `|a - x|`, so the
    /// minimizer is `a` itself when contained and otherwise the nearest endpoint.
    pub fn project(&self, a: f64, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::InvalidArgument(format!("norm order must be >= 1, got {p}")));
        }
        let mut best: Option<(f64, f64)> = None;
        for iv in &self.intervals {
            let candidate = a.clamp(iv.low, iv.high);
            let dist = (a - candidate).abs().powf(p);
            match best {
                // Ascending iteration plus strict comparison keeps the smaller value on ties.
                Some((_, d)) if dist >= d => {}
                _ => best = Some((candidate, dist)),
            }
        }
        best.map(|(x, _)| x).ok_or(Error::EmptyAllowedSet)
    }

    /// Flat `(low_1, high_1, ..., low_n, high_n, 0, ..., 0)` of length `2 * capacity`.
    pub fn zero_pad(&self, capacity: usize) -> Result<Vec<f64>> {
        if self.intervals.len() > capacity {
            return Err(Error::PaddingCapacityExceeded {
                count: self.intervals.len(),
                capacity,
            });
        }
        let mut out = vec![0.0; 2 * capacity];
        for (i, iv) in self.intervals.iter().enumerate() {
            out[2 * i] = iv.low;
            out[2 * i + 1] = iv.high;
        }
        Ok(out)
    }

    /// Inverse of [`IntervalSet::zero_pad`]; `(0, 0)` pairs are padding.
    pub fn from_padded(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "padded interval vector must have even length".into(),
            ));
        }
        let intervals = values
            .chunks_exact(2)
            .filter(|c| !(c[0] == 0.0 && c[1] == 0.0))
            .map(|c| Interval::new(c[0], c[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(intervals)
    }
}

/// Sorted, disjoint open intervals `(l_1, u_1), ..., (l_n, u_n)` with `l_1 < u_1 < l_2 < ...`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RestrictionSet {
    intervals: Vec<Interval>,
}

impl RestrictionSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts and merges overlapping or touching open intervals; empty ones are dropped.
    pub fn from_unsorted(intervals: impl IntoIterator<Item = Interval>) -> Self {
        let mut v: Vec<Interval> = intervals.into_iter().filter(|iv| iv.high > iv.low).collect();
        v.sort_by(|a, b| a.low.total_cmp(&b.low));
        let mut merged: Vec<Interval> = Vec::with_capacity(v.len());
        for iv in v {
            match merged.last_mut() {
                // Touching open intervals leave a single allowed point, which would be
                // dropped as dust anyway.
                Some(last) if iv.low <= last.high => last.high = last.high.max(iv.high),
                _ => merged.push(iv),
            }
        }
        Self { intervals: merged }
    }

    pub fn union(&self, other: &RestrictionSet) -> RestrictionSet {
        Self::from_unsorted(self.intervals.iter().chain(other.intervals.iter()).copied())
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    /// True iff `a` lies strictly inside one of the open intervals.
    pub fn contains(&self, a: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains_open(a))
    }

    /// `|C ∩ A|`, the restricted length inside the action space.
    pub fn measure_within(&self, space: &ActionSpace) -> f64 {
        self.intervals
            .iter()
            .map(|iv| (iv.high.min(space.max) - iv.low.max(space.min)).max(0.0))
            .sum()
    }
}

/// `A − C`: the allowed closed intervals left after removing the restrictions.
pub fn difference(space: &ActionSpace, restrictions: &RestrictionSet) -> IntervalSet {
    let mut out = Vec::new();
    let mut cursor = space.min;
    for r in restrictions.intervals() {
        if r.high <= cursor {
            continue;
        }
        if r.low >= space.max {
            break;
        }
        if r.low > cursor {
            out.push(Interval {
                low: cursor,
                high: r.low,
            });
        }
        cursor = cursor.max(r.high);
    }
    if cursor <= space.max {
        out.push(Interval {
            low: cursor,
            high: space.max,
        });
    }
    out.retain(|iv| iv.length() >= DUST);
    IntervalSet { intervals: out }
}

/// Scales a full-space action onto the concatenated allowed intervals.
///
/// `a' = (a − min) · |A^φ| / (max − min)` is located in the concatenated coordinate and
/// shifted back to its interval. The map is piecewise linear with constant slope
/// [`scaling_slope`], order-preserving, and sends `min`/`max` to the first low and the
/// last high. Actions outside the space are clamped first.
pub fn scale_to_allowed(space: &ActionSpace, set: &IntervalSet, a: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyAllowedSet);
    }
    if !space.contains(a) {
        log::debug!(
            "scale_to_allowed: action {a} outside [{}, {}], clamped",
            space.min,
            space.max
        );
    }
    let a = space.clamp(a);
    let position = (a - space.min) * set.total_length() / space.width();
    set.locate(position)
}

/// Single-interval scaling `a^φ = (a − min) · len(I) / (max − min) + low(I)`.
pub fn scale_to_interval(space: &ActionSpace, interval: &Interval, a: f64) -> f64 {
    let a = space.clamp(a);
    (interval.low + (a - space.min) * interval.length() / space.width()).min(interval.high)
}

/// Derivative of [`scale_to_allowed`] with respect to the raw action.
pub fn scaling_slope(space: &ActionSpace, set: &IntervalSet) -> f64 {
    set.total_length() / space.width()
}

/// `k` equally spaced atomic actions `min + i · (max − min) / (k − 1)`.
pub fn discretize(space: &ActionSpace, k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("discretization needs k >= 2, got {k}")));
    }
    let step = space.width() / (k - 1) as f64;
    let mut actions: Vec<f64> = (0..k).map(|i| space.min + i as f64 * step).collect();
    actions[k - 1] = space.max;
    Ok(actions)
}

/// `mask_i = set.contains(actions_i)`.
pub fn discrete_mask(actions: &[f64], set: &IntervalSet) -> Vec<bool> {
    actions.iter().map(|&a| set.contains(a)).collect()
}

/// `k` equal-width contiguous bins covering the action space.
pub fn bin_partition(space: &ActionSpace, k: usize) -> Result<Vec<Interval>> {
    if k < 1 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    let width = space.width() / k as f64;
    Ok((0..k)
        .map(|i| Interval {
            low: space.min + i as f64 * width,
            high: if i + 1 == k {
                space.max
            } else {
                space.min + (i + 1) as f64 * width
            },
        })
        .collect())
}

/// A bin is available iff it lies entirely inside the allowed set.
pub fn bin_mask(bins: &[Interval], set: &IntervalSet) -> Vec<bool> {
    bins.iter().map(|b| set.contains_interval(b)).collect()
}
