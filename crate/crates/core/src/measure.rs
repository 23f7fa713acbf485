//! Chunked source -> detector -> correlator runs.
//!
//! Series are generated, detected and correlated in chunks whose partial
//! correlograms are merged, so memory stays bounded for any series count.
//! Every stage draws from per-series random streams; the result does not
//! depend on the chunk size.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bins::BinSpec;
use crate::correlator::{correlate_pairs, correlate_all_pairs, CorrelatorError, LagRange};
use crate::correlogram::{Correlogram, CorrelogramError, CorrelogramKind};
use crate::geometry::ArrayGeometry;
use crate::rng::derive_seed;
use crate::sources::{generate_range, LightKind, SourceError, SourceModel};
use crate::spad::{detect_with_stats, merge_stats, DetectStats, SpadError, SpadModel};
use crate::trace::EventTraceSet;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("source: {0}")]
    Source(#[from] SourceError),
    #[error("detector: {0}")]
    Detector(#[from] SpadError),
    #[error("correlator: {0}")]
    Correlator(#[from] CorrelatorError),
    #[error("merge: {0}")]
    Merge(#[from] CorrelogramError),
}

/// What to simulate and which correlograms to accumulate.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub source: SourceModel,
    /// `None` correlates the ideal photon bins directly.
    pub detector: Option<SpadModel>,
    pub geometry: ArrayGeometry,
    pub spec: BinSpec,
    pub seed: u64,
    /// Channel pairs; `(i, i)` yields an autocorrelogram.
    pub pairs: Vec<(usize, usize)>,
    pub lags: LagRange,
    /// Series per chunk; 0 picks a size from the trace footprint.
    pub chunk_series: usize,
    /// Number of leading series to keep as a trace sample.
    pub keep_series: usize,
}

#[derive(Debug, Clone)]
pub struct MeasurementResult {
    pub correlograms: BTreeMap<(usize, usize), Correlogram>,
    pub stats: DetectStats,
    /// Recorded events per channel over all series.
    pub channel_counts: Vec<u64>,
    pub sample: Option<EventTraceSet>,
    pub spec: BinSpec,
}

impl MeasurementResult {
    /// Mean recorded rate per channel in 1/s.
    pub fn rates(&self) -> Vec<f64> {
        let dur = self.spec.window_duration() * self.spec.series_count as f64;
        self.channel_counts.iter().map(|&c| c as f64 / dur).collect()
    }
}

fn auto_chunk(spec: &BinSpec, channels: usize) -> usize {
    const WORD_BUDGET: usize = 4 << 20;
    (WORD_BUDGET / (channels * spec.words_per_series()).max(1)).clamp(1, 1 << 16)
}

impl Measurement {
    pub fn new(source: SourceModel, detector: Option<SpadModel>, geometry: ArrayGeometry, spec: BinSpec, seed: u64, lags: LagRange) -> Self {
        Measurement {
            source,
            detector,
            geometry,
            spec,
            seed,
            pairs: Vec::new(),
            lags,
            chunk_series: 0,
            keep_series: 0,
        }
    }

    pub fn with_pairs(mut self, pairs: Vec<(usize, usize)>) -> Self {
        self.pairs = pairs;
        self
    }

    pub fn with_all_pairs(mut self) -> Self {
        self.pairs = crate::correlator::all_pairs(self.geometry.pixel_count());
        self
    }

    pub fn run(&self) -> Result<MeasurementResult, MeasureError> {
        self.run_with_progress(|_, _| {})
    }

    /// Runs all chunks, calling `progress(done, total)` after each.
    pub fn run_with_progress<F: FnMut(usize, usize)>(&self, mut progress: F) -> Result<MeasurementResult, MeasureError> {
        self.source.validate_for(&self.spec)?;
        if let Some(d) = &self.detector {
            d.validate()?;
        }
        self.lags.check_window(self.spec.window_bins)?;
        let channels = self.geometry.pixel_count();
        let total = self.spec.series_count;
        let chunk = if self.chunk_series == 0 {
            auto_chunk(&self.spec, channels)
        } else {
            self.chunk_series
        };
        let mut acc: Option<BTreeMap<(usize, usize), Correlogram>> = None;
        let mut stats = DetectStats::default();
        let mut counts = vec![0u64; channels];
        let mut sample: Option<EventTraceSet> = None;
        let mut first = 0usize;
        while first < total {
            let count = chunk.min(total - first);
            let ideal = generate_range(&self.source, &self.spec, &self.geometry, self.seed, first as u64, count)?;
            let traces = match &self.detector {
                Some(d) => {
                    let (t, s) = detect_with_stats(&ideal, d, &self.geometry, self.seed, first as u64)?;
                    stats = merge_stats(stats, s);
                    t
                }
                None => ideal,
            };
            for (c, n) in counts.iter_mut().enumerate() {
                *n += traces.channel_total(c);
            }
            if first < self.keep_series {
                let keep = (self.keep_series - first).min(count);
                let part = subset_series(&traces, keep);
                match &mut sample {
                    Some(s) => s.append_series(&part).expect("same binning"),
                    None => sample = Some(part),
                }
            }
            let part = if self.pairs.is_empty() {
                correlate_all_pairs(&traces, self.lags)?
            } else {
                correlate_pairs(&traces, &self.pairs, self.lags)?
            };
            acc = Some(match acc {
                None => part,
                Some(mut a) => {
                    for (k, v) in a.iter_mut() {
                        v.merge(&part[k])?;
                    }
                    a
                }
            });
            first += count;
            progress(first, total);
        }
        Ok(MeasurementResult {
            correlograms: acc.unwrap_or_default(),
            stats,
            channel_counts: counts,
            sample: sample.map(|s| s.with_geometry(self.geometry.clone()).expect("geometry matches")),
            spec: self.spec,
        })
    }
}

fn subset_series(traces: &EventTraceSet, keep: usize) -> EventTraceSet {
    let spec = traces.spec().with_series(keep);
    let channels = traces.channel_count();
    let events: Vec<Vec<Vec<u32>>> = (0..channels).map(|c| (0..keep).map(|s| traces.events(c, s)).collect()).collect();
    EventTraceSet::from_events(spec, channels, |c, s| &events[c][s]).expect("valid subset")
}

/// Salt separating background runs from the main run of the same seed.
pub const BACKGROUND_SALT: u64 = 0x6267;

/// Background correlograms: the detector under incoherent light of the
/// given incident `rate`, every pair `i < j`, tagged as background.
pub fn measure_background(
    model: &SpadModel,
    geometry: &ArrayGeometry,
    spec: &BinSpec,
    rate: f64,
    seed: u64,
    lags: LagRange,
) -> Result<BTreeMap<(usize, usize), Correlogram>, MeasureError> {
    measure_background_pairs(model, geometry, spec, rate, seed, lags, crate::correlator::all_pairs(geometry.pixel_count()))
}

/// Like [`measure_background`] for a chosen set of pairs.
pub fn measure_background_pairs(
    model: &SpadModel,
    geometry: &ArrayGeometry,
    spec: &BinSpec,
    rate: f64,
    seed: u64,
    lags: LagRange,
    pairs: Vec<(usize, usize)>,
) -> Result<BTreeMap<(usize, usize), Correlogram>, MeasureError> {
    let run = Measurement::new(
        SourceModel::new(rate, LightKind::Incoherent),
        Some(model.clone()),
        geometry.clone(),
        *spec,
        derive_seed(seed, BACKGROUND_SALT),
        lags,
    )
    .with_pairs(pairs)
    .run()?;
    run.correlograms
        .into_iter()
        .map(|(k, c)| {
            let kind = if c.kind() == CorrelogramKind::Autocorrelation {
                CorrelogramKind::Autocorrelation
            } else {
                CorrelogramKind::Background
            };
            Ok((k, c.with_kind(kind)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_does_not_change_results() {
        let spec = BinSpec::new(1e-9, 800, 12).unwrap();
        let g = ArrayGeometry::row_of(3);
        let src = SourceModel::new(
            3e7,
            LightKind::Thermal {
                coherence_time: 4e-9,
                polarized: false,
                spatial: None,
            },
        );
        let mut m = Measurement::new(src, Some(SpadModel::default()), g, spec, 5, LagRange::symmetric(20)).with_pairs(vec![(0, 1), (0, 2), (1, 1)]);
        m.keep_series = 3;
        m.chunk_series = 12;
        let whole = m.run().unwrap();
        m.chunk_series = 5;
        let parts = m.run().unwrap();
        assert_eq!(whole.correlograms, parts.correlograms);
        assert_eq!(whole.stats, parts.stats);
        assert_eq!(whole.sample, parts.sample);
        assert_eq!(whole.sample.unwrap().series_count(), 3);
    }

    #[test]
    fn null_instrument_background_is_flat() {
        let spec = BinSpec::new(1e-9, 2000, 400).unwrap();
        let g = ArrayGeometry::row_of(3);
        let model = SpadModel::default().without_crosstalk();
        let bg = measure_background(&model, &g, &spec, 8e7, 1, LagRange::symmetric(5)).unwrap();
        assert_eq!(bg.len(), 3);
        for c in bg.values() {
            assert_eq!(c.kind(), CorrelogramKind::Background);
            for (g2, s) in c.g2().iter().zip(c.sigma()) {
                assert!((g2.unwrap() - 1.0).abs() < 4.0 * s.unwrap());
            }
        }
    }
}
