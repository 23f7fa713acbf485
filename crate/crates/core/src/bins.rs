use serde::{Deserialize, Serialize};

use crate::trace::TraceError;

/// Binning geometry shared by every series of a measurement.
///
/// `bin_width` is the temporal resolution `T` in seconds, `window_bins` the
/// number of bins `N` per series and `series_count` the number of
/// independent series `M`. A lag of `l` bins corresponds to `l * T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub bin_width: f64,
    pub window_bins: usize,
    pub series_count: usize,
}

impl BinSpec {
    pub fn new(bin_width: f64, window_bins: usize, series_count: usize) -> Result<Self, TraceError> {
        let spec = BinSpec {
            bin_width,
            window_bins,
            series_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.bin_width.is_finite() && self.bin_width > 0.0) {
            return Err(TraceError::InvalidSpec(format!(
                "bin width must be positive and finite, got {}",
                self.bin_width
            )));
        }
        if self.window_bins < 2 {
            return Err(TraceError::InvalidSpec(format!(
                "window must hold at least 2 bins, got {}",
                self.window_bins
            )));
        }
        if self.window_bins > u32::MAX as usize {
            return Err(TraceError::InvalidSpec(format!(
                "window of {} bins exceeds the u32 bin index range",
                self.window_bins
            )));
        }
        if self.series_count < 1 {
            return Err(TraceError::InvalidSpec("series count must be at least 1".into()));
        }
        if !self.window_duration().is_finite() {
            return Err(TraceError::InvalidSpec("window duration overflows".into()));
        }
        Ok(())
    }

    /// Duration `N * T` of one series in seconds.
    pub fn window_duration(&self) -> f64 {
        self.window_bins as f64 * self.bin_width
    }

    /// Number of 64-bit words needed to hold one series.
    pub fn words_per_series(&self) -> usize {
        self.window_bins.div_ceil(64)
    }

    pub fn lag_seconds(&self, lag: i64) -> f64 {
        lag as f64 * self.bin_width
    }

    /// Number of whole bins covering `duration` seconds, rounded up.
    ///
    /// A small relative slack absorbs representation error so that, e.g.,
    /// 13 ns at 1 ns resolution maps to 13 bins rather than 14.
    pub fn bins_ceil(&self, duration: f64) -> usize {
        let ratio = duration / self.bin_width;
        let nearest = ratio.round();
        if (ratio - nearest).abs() <= 1e-9 * ratio.abs().max(1.0) {
            nearest as usize
        } else {
            ratio.ceil() as usize
        }
    }

    /// Same binning with a different number of series.
    pub fn with_series(&self, series_count: usize) -> BinSpec {
        BinSpec {
            series_count,
            ..*self
        }
    }

    /// Two specs describe the same per-series binning (series counts may differ).
    pub fn same_binning(&self, other: &BinSpec) -> bool {
        self.bin_width == other.bin_width && self.window_bins == other.window_bins
    }
}
