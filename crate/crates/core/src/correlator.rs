//! Normalized coincidence estimator over bit-packed traces.
//!
//! For a lag `l` and every series the overlap is truncated to the `N - |l|`
//! bins where both `n` and `n + l` fall inside the window. Coincidences are
//! counted with shifted word ANDs and popcounts, visiting only the nonzero
//! words of the leading operand.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlogram::{Correlogram, CorrelogramKind};
use crate::trace::{popcount, popcount_range, EventTraceSet};

#[derive(Debug, Error, PartialEq)]
pub enum CorrelatorError {
    #[error("invalid lag range: {0}")]
    InvalidLagRange(String),
    #[error("lag {lag} leaves no overlap in a window of {window} bins")]
    EmptyOverlap { lag: i64, window: usize },
    #[error("channel {0} out of range ({1} channels)")]
    ChannelOutOfRange(usize, usize),
}

/// Inclusive lag grid `min, min + stride, ..., <= max` in bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagRange {
    pub min: i64,
    pub max: i64,
    #[serde(default = "one")]
    pub stride: u64,
}

fn one() -> u64 {
    1
}

impl LagRange {
    pub fn new(min: i64, max: i64, stride: u64) -> Result<Self, CorrelatorError> {
        let r = LagRange { min, max, stride };
        r.validate()?;
        Ok(r)
    }

    /// `-k..=k` with unit stride.
    pub fn symmetric(k: i64) -> Self {
        LagRange {
            min: -k.abs(),
            max: k.abs(),
            stride: 1,
        }
    }

    pub fn single(lag: i64) -> Self {
        LagRange {
            min: lag,
            max: lag,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<(), CorrelatorError> {
        if self.min > self.max {
            return Err(CorrelatorError::InvalidLagRange(format!("min {} > max {}", self.min, self.max)));
        }
        if self.stride == 0 {
            return Err(CorrelatorError::InvalidLagRange("stride must be positive".into()));
        }
        Ok(())
    }

    /// Checks that every lag overlaps a window of `n` bins.
    pub fn check_window(&self, n: usize) -> Result<(), CorrelatorError> {
        self.validate()?;
        for lag in [self.min, self.max] {
            if lag.unsigned_abs() >= n as u64 {
                return Err(CorrelatorError::EmptyOverlap { lag, window: n });
            }
        }
        Ok(())
    }

    pub fn lags(&self) -> Vec<i64> {
        let mut out = Vec::new();
        let mut l = self.min;
        while l <= self.max {
            out.push(l);
            match l.checked_add(self.stride as i64) {
                Some(next) => l = next,
                None => break,
            }
        }
        out
    }

    /// Largest absolute lag.
    pub fn reach(&self) -> u64 {
        self.min.unsigned_abs().max(self.max.unsigned_abs())
    }
}

impl fmt::Display for LagRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.min, self.max, self.stride)
    }
}

impl FromStr for LagRange {
    type Err = CorrelatorError;

    /// Parses `MIN:MAX` or `MIN:MAX:STRIDE`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorrelatorError::InvalidLagRange(format!("expected MIN:MAX[:STRIDE], got `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad());
        }
        let min = parts[0].trim().parse().map_err(|_| bad())?;
        let max = parts[1].trim().parse().map_err(|_| bad())?;
        let stride = match parts.get(2) {
            Some(p) => p.trim().parse().map_err(|_| bad())?,
            None => 1,
        };
        LagRange::new(min, max, stride)
    }
}

#[derive(Debug, Clone)]
struct Tally {
    c: Vec<u64>,
    ki: Vec<u64>,
    kj: Vec<u64>,
    series: u64,
}

impl Tally {
    fn new(k: usize) -> Self {
        Tally {
            c: vec![0; k],
            ki: vec![0; k],
            kj: vec![0; k],
            series: 0,
        }
    }

    fn add(mut self, other: Tally) -> Tally {
        for i in 0..self.c.len() {
            self.c[i] += other.c[i];
            self.ki[i] += other.ki[i];
            self.kj[i] += other.kj[i];
        }
        self.series += other.series;
        self
    }
}

/// Word `w` of `b` shifted down by `s` bits, i.e. bit `k` holds bin `64w + k + s`.
#[inline(always)]
fn shifted_word(b: &[u64], w: usize, s: usize) -> u64 {
    let q = w + (s >> 6);
    let r = s & 63;
    if q >= b.len() {
        return 0;
    }
    if r == 0 {
        b[q]
    } else {
        let hi = if q + 1 < b.len() { b[q + 1] << (64 - r) } else { 0 };
        (b[q] >> r) | hi
    }
}

/// Coincidences `sum_n a(n) b(n + s)` for `s >= 0`, given the nonzero words of `a`.
#[inline]
fn coincidences(a: &[u64], nz_a: &[u32], b: &[u64], s: usize) -> u64 {
    let mut total = 0u64;
    for &w in nz_a {
        let w = w as usize;
        total += (a[w] & shifted_word(b, w, s)).count_ones() as u64;
    }
    total
}

fn nonzero_words(words: &[u64], out: &mut Vec<u32>) {
    out.clear();
    out.extend(words.iter().enumerate().filter(|(_, &w)| w != 0).map(|(i, _)| i as u32));
}

struct Scratch {
    nz_a: Vec<u32>,
    nz_b: Vec<u32>,
}

fn accumulate_series(a: &[u64], b: &[u64], n: usize, lags: &[i64], t: &mut Tally, scratch: &mut Scratch) {
    nonzero_words(a, &mut scratch.nz_a);
    nonzero_words(b, &mut scratch.nz_b);
    t.series += 1;
    if scratch.nz_a.is_empty() && scratch.nz_b.is_empty() {
        return;
    }
    let tot_a = popcount(a);
    let tot_b = popcount(b);
    for (k, &l) in lags.iter().enumerate() {
        let s = l.unsigned_abs() as usize;
        if l >= 0 {
            if !scratch.nz_b.is_empty() {
                t.c[k] += coincidences(a, &scratch.nz_a, b, s);
            }
            t.ki[k] += tot_a - popcount_range(a, n - s, n);
            t.kj[k] += tot_b - popcount_range(b, 0, s);
        } else {
            if !scratch.nz_a.is_empty() {
                t.c[k] += coincidences(b, &scratch.nz_b, a, s);
            }
            t.ki[k] += tot_a - popcount_range(a, 0, s);
            t.kj[k] += tot_b - popcount_range(b, n - s, n);
        }
    }
}

fn check_channel(traces: &EventTraceSet, ch: usize) -> Result<(), CorrelatorError> {
    if ch >= traces.channel_count() {
        return Err(CorrelatorError::ChannelOutOfRange(ch, traces.channel_count()));
    }
    Ok(())
}

fn build(traces: &EventTraceSet, i: usize, j: usize, lags: Vec<i64>, t: Tally, kind: CorrelogramKind) -> Correlogram {
    let n = traces.spec().window_bins as u64;
    let valid: Vec<u64> = lags.iter().map(|&l| t.series * (n - l.unsigned_abs())).collect();
    Correlogram::from_tallies(
        (i, j),
        kind,
        traces.spec().bin_width,
        traces.spec().window_bins,
        t.series,
        lags,
        t.c,
        t.ki,
        t.kj,
        valid,
    )
    .expect("tally vectors share the lag grid")
}

fn tally_sequential(traces: &EventTraceSet, i: usize, j: usize, lags: &[i64]) -> Tally {
    let n = traces.spec().window_bins;
    let mut t = Tally::new(lags.len());
    let mut scratch = Scratch {
        nz_a: Vec::new(),
        nz_b: Vec::new(),
    };
    for s in 0..traces.series_count() {
        accumulate_series(traces.series_words(i, s), traces.series_words(j, s), n, lags, &mut t, &mut scratch);
    }
    t
}

fn tally_parallel(traces: &EventTraceSet, i: usize, j: usize, lags: &[i64]) -> Tally {
    let n = traces.spec().window_bins;
    let k = lags.len();
    (0..traces.series_count())
        .into_par_iter()
        .with_min_len(64)
        .fold(
            || {
                (
                    Tally::new(k),
                    Scratch {
                        nz_a: Vec::new(),
                        nz_b: Vec::new(),
                    },
                )
            },
            |(mut t, mut scratch), s| {
                accumulate_series(traces.series_words(i, s), traces.series_words(j, s), n, lags, &mut t, &mut scratch);
                (t, scratch)
            },
        )
        .map(|(t, _)| t)
        .reduce(|| Tally::new(k), Tally::add)
}

/// Cross-correlogram of channels `i` and `j` (`i == j` yields an autocorrelogram).
pub fn correlate_pair(traces: &EventTraceSet, i: usize, j: usize, lags: LagRange) -> Result<Correlogram, CorrelatorError> {
    if i == j {
        return autocorrelate(traces, i, lags);
    }
    check_channel(traces, i)?;
    check_channel(traces, j)?;
    lags.check_window(traces.spec().window_bins)?;
    let grid = lags.lags();
    let t = tally_parallel(traces, i, j, &grid);
    Ok(build(traces, i, j, grid, t, CorrelogramKind::Raw))
}

/// Autocorrelogram of channel `i`.
pub fn autocorrelate(traces: &EventTraceSet, i: usize, lags: LagRange) -> Result<Correlogram, CorrelatorError> {
    check_channel(traces, i)?;
    lags.check_window(traces.spec().window_bins)?;
    let grid = lags.lags();
    let t = tally_parallel(traces, i, i, &grid);
    Ok(build(traces, i, i, grid, t, CorrelogramKind::Autocorrelation))
}

/// Correlograms for the listed pairs, computed in parallel over pairs.
pub fn correlate_pairs(
    traces: &EventTraceSet,
    pairs: &[(usize, usize)],
    lags: LagRange,
) -> Result<BTreeMap<(usize, usize), Correlogram>, CorrelatorError> {
    lags.check_window(traces.spec().window_bins)?;
    for &(i, j) in pairs {
        check_channel(traces, i)?;
        check_channel(traces, j)?;
    }
    let grid = lags.lags();
    let kind = |i: usize, j: usize| {
        if i == j {
            CorrelogramKind::Autocorrelation
        } else {
            CorrelogramKind::Raw
        }
    };
    // Few pairs: spread the series over the workers instead.
    let results: Vec<((usize, usize), Correlogram)> = if pairs.len() < rayon::current_num_threads() {
        pairs
            .iter()
            .map(|&(i, j)| ((i, j), build(traces, i, j, grid.clone(), tally_parallel(traces, i, j, &grid), kind(i, j))))
            .collect()
    } else {
        pairs
            .par_iter()
            .map(|&(i, j)| ((i, j), build(traces, i, j, grid.clone(), tally_sequential(traces, i, j, &grid), kind(i, j))))
            .collect()
    };
    Ok(results.into_iter().collect())
}

/// All pairs `i < j` in lexicographic order.
pub fn all_pairs(channels: usize) -> Vec<(usize, usize)> {
    (0..channels).flat_map(|i| (i + 1..channels).map(move |j| (i, j))).collect()
}

/// Cross-correlograms for every pair `i < j`.
pub fn correlate_all_pairs(traces: &EventTraceSet, lags: LagRange) -> Result<BTreeMap<(usize, usize), Correlogram>, CorrelatorError> {
    correlate_pairs(traces, &all_pairs(traces.channel_count()), lags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bins::BinSpec;
    use crate::trace::pack_traces;

    fn toy() -> EventTraceSet {
        pack_traces(&[vec![1, 0, 1], vec![0, 1, 1]], BinSpec::new(1e-9, 3, 1).unwrap()).unwrap()
    }

    #[test]
    fn three_bin_toy() {
        let c = correlate_pair(&toy(), 0, 1, LagRange::new(-2, 2, 1).unwrap()).unwrap();
        let i0 = c.index_of(0).unwrap();
        assert_eq!((c.coincidences()[i0], c.ki()[i0], c.kj()[i0], c.valid_bins()[i0]), (1, 2, 2, 3));
        assert_eq!(c.value_at(0), Some(0.75));
        // l = +1: pairs (n, n+1) over n in {0, 1}: X_i(0)X_j(1) = 1, X_i(1)X_j(2) = 0.
        let i1 = c.index_of(1).unwrap();
        assert_eq!((c.coincidences()[i1], c.ki()[i1], c.kj()[i1], c.valid_bins()[i1]), (1, 1, 2, 2));
        assert_eq!(c.value_at(1), Some(1.0));
        // l = -2: X_i(2)X_j(0) = 0; K_i over [2, 3) = 1, K_j over [0, 1) = 0.
        assert_eq!(c.value_at(-2), None);
    }

    #[test]
    fn single_event_autocorrelation_is_window_length() {
        let mut bins = vec![0u8; 100];
        bins[40] = 1;
        let t = pack_traces(&[bins], BinSpec::new(1e-9, 100, 1).unwrap()).unwrap();
        let c = autocorrelate(&t, 0, LagRange::single(0)).unwrap();
        assert_eq!(c.value_at(0), Some(100.0));
        assert_eq!(c.kind(), CorrelogramKind::Autocorrelation);
    }

    #[test]
    fn lag_range_parsing_and_bounds() {
        assert_eq!("-5:5".parse::<LagRange>().unwrap().lags().len(), 11);
        assert_eq!("0:10:5".parse::<LagRange>().unwrap().lags(), vec![0, 5, 10]);
        assert!("5:-5".parse::<LagRange>().is_err());
        assert!("1:2:0".parse::<LagRange>().is_err());
        assert!("x".parse::<LagRange>().is_err());
        assert_eq!(
            correlate_pair(&toy(), 0, 1, LagRange::single(3)),
            Err(CorrelatorError::EmptyOverlap { lag: 3, window: 3 })
        );
        assert!(correlate_pair(&toy(), 0, 2, LagRange::single(0)).is_err());
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(all_pairs(16).len(), 120);
        assert_eq!(all_pairs(2), vec![(0, 1)]);
    }
}
