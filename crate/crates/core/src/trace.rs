//! Bit-packed binary detection traces.
//!
//! Each (channel, series) pair owns `ceil(N / 64)` little-endian words; bin
//! `n` lives in bit `n % 64` of word `n / 64`. Bits at or beyond `N` are
//! always zero, which the correlator kernel relies on to avoid masking
//! shifted words.

use thiserror::Error;

use crate::bins::BinSpec;
use crate::geometry::ArrayGeometry;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("invalid bin spec: {0}")]
    InvalidSpec(String),
    #[error("channel {channel}: expected {expected} bins, got {found}")]
    LengthMismatch {
        channel: usize,
        expected: usize,
        found: usize,
    },
    #[error("channel {channel} bin {bin}: value {value} is not 0 or 1")]
    ValueOutOfRange { channel: usize, bin: usize, value: u8 },
    #[error("trace set needs at least one channel")]
    NoChannels,
    #[error("channel {0} out of range ({1} channels)")]
    ChannelOutOfRange(usize, usize),
    #[error("geometry has {pixels} pixels but trace set has {channels} channels")]
    GeometryMismatch { pixels: usize, channels: usize },
    #[error("cannot append traces with different binning or channel count")]
    AppendMismatch,
}

/// Binary detection bins for every channel and series of a measurement.
///
/// Immutable once built; share it freely across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTraceSet {
    spec: BinSpec,
    channels: usize,
    words_per_series: usize,
    words: Vec<u64>,
    geometry: Option<ArrayGeometry>,
}

impl EventTraceSet {
    /// All-zero trace set.
    pub fn zeros(spec: BinSpec, channels: usize) -> Result<Self, TraceError> {
        spec.validate()?;
        if channels == 0 {
            return Err(TraceError::NoChannels);
        }
        let words_per_series = spec.words_per_series();
        Ok(EventTraceSet {
            spec,
            channels,
            words_per_series,
            words: vec![0; channels * spec.series_count * words_per_series],
            geometry: None,
        })
    }

    /// Builds a set from per-(channel, series) lists of occupied bins.
    ///
    /// Bins outside the window are ignored; duplicates collapse to one event.
    pub fn from_events<'a, F>(spec: BinSpec, channels: usize, mut events: F) -> Result<Self, TraceError>
    where
        F: FnMut(usize, usize) -> &'a [u32],
    {
        let mut set = EventTraceSet::zeros(spec, channels)?;
        let n = spec.window_bins as u32;
        for ch in 0..channels {
            for s in 0..spec.series_count {
                let words = set.series_words_mut(ch, s);
                for &bin in events(ch, s) {
                    if bin < n {
                        words[(bin / 64) as usize] |= 1u64 << (bin % 64);
                    }
                }
            }
        }
        Ok(set)
    }

    /// Builds a set from raw packed words laid out channel-major, then series.
    pub(crate) fn from_words(spec: BinSpec, channels: usize, mut words: Vec<u64>) -> Result<Self, TraceError> {
        spec.validate()?;
        if channels == 0 {
            return Err(TraceError::NoChannels);
        }
        let wps = spec.words_per_series();
        let expected = channels * spec.series_count * wps;
        if words.len() != expected {
            return Err(TraceError::LengthMismatch {
                channel: 0,
                expected,
                found: words.len(),
            });
        }
        let tail = spec.window_bins % 64;
        if tail != 0 {
            let mask = (1u64 << tail) - 1;
            for chunk in words.chunks_exact_mut(wps) {
                chunk[wps - 1] &= mask;
            }
        }
        Ok(EventTraceSet {
            spec,
            channels,
            words_per_series: wps,
            words,
            geometry: None,
        })
    }

    pub fn with_geometry(mut self, geometry: ArrayGeometry) -> Result<Self, TraceError> {
        if geometry.pixel_count() != self.channels {
            return Err(TraceError::GeometryMismatch {
                pixels: geometry.pixel_count(),
                channels: self.channels,
            });
        }
        self.geometry = Some(geometry);
        Ok(self)
    }

    pub fn spec(&self) -> &BinSpec {
        &self.spec
    }

    pub fn channel_count(&self) -> usize {
        self.channels
    }

    pub fn series_count(&self) -> usize {
        self.spec.series_count
    }

    pub fn geometry(&self) -> Option<&ArrayGeometry> {
        self.geometry.as_ref()
    }

    pub fn words_per_series(&self) -> usize {
        self.words_per_series
    }

    fn offset(&self, channel: usize, series: usize) -> usize {
        (channel * self.spec.series_count + series) * self.words_per_series
    }

    pub fn series_words(&self, channel: usize, series: usize) -> &[u64] {
        let start = self.offset(channel, series);
        &self.words[start..start + self.words_per_series]
    }

    fn series_words_mut(&mut self, channel: usize, series: usize) -> &mut [u64] {
        let start = self.offset(channel, series);
        let wps = self.words_per_series;
        &mut self.words[start..start + wps]
    }

    pub fn get(&self, channel: usize, series: usize, bin: usize) -> bool {
        debug_assert!(bin < self.spec.window_bins);
        self.series_words(channel, series)[bin / 64] >> (bin % 64) & 1 == 1
    }

    /// Number of events of one channel in one series.
    pub fn popcount(&self, channel: usize, series: usize) -> u64 {
        popcount(self.series_words(channel, series))
    }

    /// Total events of one channel over all series.
    pub fn channel_total(&self, channel: usize) -> u64 {
        let start = self.offset(channel, 0);
        let len = self.spec.series_count * self.words_per_series;
        popcount(&self.words[start..start + len])
    }

    /// Occupied bins of one channel in one series, ascending.
    pub fn events(&self, channel: usize, series: usize) -> Vec<u32> {
        let mut out = Vec::new();
        for (w, &word) in self.series_words(channel, series).iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros();
                out.push(w as u32 * 64 + b);
                bits &= bits - 1;
            }
        }
        out
    }

    /// Dense 0/1 view of one channel, series concatenated.
    pub fn unpack_channel(&self, channel: usize) -> Vec<u8> {
        let n = self.spec.window_bins;
        let mut out = Vec::with_capacity(n * self.spec.series_count);
        for s in 0..self.spec.series_count {
            let words = self.series_words(channel, s);
            out.extend((0..n).map(|b| (words[b / 64] >> (b % 64) & 1) as u8));
        }
        out
    }

    /// Dense 0/1 arrays for all channels; inverse of [`pack_traces`].
    pub fn unpack(&self) -> Vec<Vec<u8>> {
        (0..self.channels).map(|c| self.unpack_channel(c)).collect()
    }

    /// Appends the series of `other` after those of `self`.
    pub fn append_series(&mut self, other: &EventTraceSet) -> Result<(), TraceError> {
        if !self.spec.same_binning(&other.spec) || self.channels != other.channels {
            return Err(TraceError::AppendMismatch);
        }
        let m1 = self.spec.series_count;
        let m2 = other.spec.series_count;
        let wps = self.words_per_series;
        let mut words = Vec::with_capacity(self.words.len() + other.words.len());
        for ch in 0..self.channels {
            words.extend_from_slice(&self.words[ch * m1 * wps..(ch + 1) * m1 * wps]);
            words.extend_from_slice(&other.words[ch * m2 * wps..(ch + 1) * m2 * wps]);
        }
        self.words = words;
        self.spec.series_count = m1 + m2;
        Ok(())
    }

    /// A copy holding only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<EventTraceSet, TraceError> {
        let mut words = Vec::with_capacity(channels.len() * self.spec.series_count * self.words_per_series);
        for &ch in channels {
            if ch >= self.channels {
                return Err(TraceError::ChannelOutOfRange(ch, self.channels));
            }
            let start = self.offset(ch, 0);
            words.extend_from_slice(&self.words[start..start + self.spec.series_count * self.words_per_series]);
        }
        EventTraceSet::from_words(self.spec, channels.len(), words)
    }
}

/// Packs dense per-channel 0/1 arrays (length `N * M`, series concatenated).
pub fn pack_traces(dense: &[Vec<u8>], spec: BinSpec) -> Result<EventTraceSet, TraceError> {
    spec.validate()?;
    let expected = spec.window_bins * spec.series_count;
    for (ch, bins) in dense.iter().enumerate() {
        if bins.len() != expected {
            return Err(TraceError::LengthMismatch {
                channel: ch,
                expected,
                found: bins.len(),
            });
        }
        if let Some((bin, &value)) = bins.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(TraceError::ValueOutOfRange { channel: ch, bin, value });
        }
    }
    let mut set = EventTraceSet::zeros(spec, dense.len())?;
    let n = spec.window_bins;
    for (ch, bins) in dense.iter().enumerate() {
        for (s, series) in bins.chunks_exact(n).enumerate() {
            let words = set.series_words_mut(ch, s);
            for (b, _) in series.iter().enumerate().filter(|(_, &v)| v == 1) {
                words[b / 64] |= 1u64 << (b % 64);
            }
        }
    }
    Ok(set)
}

pub(crate) fn popcount(words: &[u64]) -> u64 {
    words.iter().map(|w| w.count_ones() as u64).sum()
}

/// Number of set bits in `[start, end)`.
pub(crate) fn popcount_range(words: &[u64], start: usize, end: usize) -> u64 {
    if start >= end {
        return 0;
    }
    let (w0, b0) = (start / 64, start % 64);
    let (w1, b1) = (end / 64, end % 64);
    if w0 == w1 {
        let mask = (!0u64 << b0) & ((1u64 << b1) - 1);
        return (words[w0] & mask).count_ones() as u64;
    }
    let mut total = (words[w0] & (!0u64 << b0)).count_ones() as u64;
    total += popcount(&words[w0 + 1..w1]);
    if b1 != 0 {
        total += (words[w1] & ((1u64 << b1) - 1)).count_ones() as u64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn spec(n: usize, m: usize) -> BinSpec {
        BinSpec::new(1e-9, n, m).unwrap()
    }

    #[test]
    fn all_zero_has_no_events() {
        let set = pack_traces(&[vec![0; 64]], spec(64, 1)).unwrap();
        assert_eq!(set.popcount(0, 0), 0);
    }

    #[test]
    fn alternating_pattern_popcount() {
        let bins: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let set = pack_traces(&[bins], spec(64, 1)).unwrap();
        assert_eq!(set.popcount(0, 0), 32);
    }

    #[test]
    fn bernoulli_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, m) = (5000, 100);
        let dense: Vec<Vec<u8>> = (0..2)
            .map(|_| (0..n * m).map(|_| rng.random_bool(0.01) as u8).collect())
            .collect();
        let set = pack_traces(&dense, spec(n, m)).unwrap();
        assert_eq!(set.unpack(), dense);
    }

    #[test]
    fn pack_errors() {
        assert_eq!(
            pack_traces(&[vec![0; 10]], spec(8, 1)),
            Err(TraceError::LengthMismatch {
                channel: 0,
                expected: 8,
                found: 10
            })
        );
        assert_eq!(
            pack_traces(&[vec![0, 0, 2, 0]], spec(4, 1)),
            Err(TraceError::ValueOutOfRange {
                channel: 0,
                bin: 2,
                value: 2
            })
        );
        assert_eq!(pack_traces(&[], spec(4, 1)), Err(TraceError::NoChannels));
    }

    #[test]
    fn large_round_trip() {
        // N = 1e6 on a single series, M = 1e3 on short series.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let events: Vec<u32> = (0..n as u32).filter(|_| rng.random_bool(0.003)).collect();
        let set = EventTraceSet::from_events(spec(n, 1), 1, |_, _| &events).unwrap();
        assert_eq!(set.events(0, 0), events);
        let dense = set.unpack();
        assert_eq!(pack_traces(&dense, spec(n, 1)).unwrap(), set);

        let m = 1000;
        let dense: Vec<Vec<u8>> = vec![(0..100 * m).map(|_| rng.random_bool(0.1) as u8).collect()];
        let set = pack_traces(&dense, spec(100, m)).unwrap();
        assert_eq!(set.unpack(), dense);
    }

    #[test]
    fn append_and_select() {
        let a = pack_traces(&[vec![1, 0, 0], vec![0, 1, 0]], spec(3, 1)).unwrap();
        let b = pack_traces(&[vec![0, 0, 1], vec![1, 1, 1]], spec(3, 1)).unwrap();
        let mut ab = a.clone();
        ab.append_series(&b).unwrap();
        assert_eq!(ab.unpack(), vec![vec![1, 0, 0, 0, 0, 1], vec![0, 1, 0, 1, 1, 1]]);
        let sel = ab.select_channels(&[1]).unwrap();
        assert_eq!(sel.unpack(), vec![vec![0, 1, 0, 1, 1, 1]]);
    }

    proptest! {
        #[test]
        fn pack_unpack_lossless(n in 2usize..300, m in 1usize..6, seed in any::<u64>(), p in 0.0f64..1.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dense: Vec<Vec<u8>> = (0..3).map(|_| (0..n * m).map(|_| rng.random_bool(p) as u8).collect()).collect();
            let set = pack_traces(&dense, spec(n, m)).unwrap();
            prop_assert_eq!(set.unpack(), dense.clone());
            for (ch, bins) in dense.iter().enumerate() {
                for s in 0..m {
                    let expect = bins[s * n..(s + 1) * n].iter().map(|&v| v as u64).sum::<u64>();
                    prop_assert_eq!(set.popcount(ch, s), expect);
                }
            }
        }

        #[test]
        fn range_popcount_matches_naive(n in 2usize..400, seed in any::<u64>(), a in 0usize..400, b in 0usize..400) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bins: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
            let set = pack_traces(std::slice::from_ref(&bins), spec(n, 1)).unwrap();
            let (start, end) = (a.min(n), b.min(n));
            let naive: u64 = if start < end { bins[start..end].iter().map(|&v| v as u64).sum() } else { 0 };
            prop_assert_eq!(popcount_range(set.series_words(0, 0), start, end), naive);
        }
    }
}
