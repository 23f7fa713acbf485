//! Removal of detector bias from measured correlograms.
//!
//! Afterpulses of a detector show up in its autocorrelation as
//! `g~_ii(tau) = 1 + p_A(|tau|) / ((1 + eps)^2 mu)` beyond the dead time,
//! where `mu` is the rate of photon and dark triggers and `p_A` the
//! afterpulse density. Between two detectors afterpulses dilute the photon
//! correlation by `(1 + eps)^-2`, and the electrical background adds on top:
//! `g~_ij = 1 + (g_ij - 1) / (1 + eps)^2 + (g~_bg - 1)`.

use thiserror::Error;

use crate::correlogram::{Correlogram, CorrelogramKind};

use super::fit::{fit_exponential, ExponentialFit, FitError};

#[derive(Debug, Error, PartialEq)]
pub enum CorrectionError {
    #[error("lag {lag} ({seconds:e} s) lies inside the dead band")]
    InsideDeadBand { lag: i64, seconds: f64 },
    #[error("correlograms do not share the lag grid, binning or channel pair")]
    GridMismatch,
    #[error("rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("afterpulse probability must lie in [0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("cross-correlation correction needs two distinct channels")]
    SameChannel,
    #[error("mixture components need positive intensities")]
    InvalidIntensity,
}

/// Afterpulse density recovered from an autocorrelogram.
#[derive(Debug, Clone, PartialEq)]
pub struct AfterpulseProfile {
    pub lags: Vec<i64>,
    /// Delay of each lag in seconds.
    pub tau: Vec<f64>,
    /// `p_A(tau)` in 1/s; `None` where the autocorrelogram is undefined.
    pub density: Vec<Option<f64>>,
    pub sigma: Vec<Option<f64>>,
    /// Trapezoidal integral of the density over the available lags.
    pub epsilon_hat: f64,
}

impl AfterpulseProfile {
    /// Exponential fit `A exp(-tau / tau_A)` of the density.
    pub fn fit_decay(&self) -> Result<ExponentialFit, FitError> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut s = Vec::new();
        for i in 0..self.lags.len() {
            if let (Some(d), Some(e)) = (self.density[i], self.sigma[i]) {
                if e > 0.0 {
                    x.push(self.tau[i]);
                    y.push(d);
                    s.push(e);
                }
            }
        }
        fit_exponential(&x, &y, &s)
    }
}

/// Afterpulse density `p_A(tau) = (g~_ii(tau) - 1) (1 + eps)^2 mu` from an
/// autocorrelogram restricted to positive lags at or beyond `dead_time`.
///
/// `mu` is the rate of photon and dark triggers, i.e. the recorded rate
/// divided by `1 + eps`.
pub fn correct_auto(auto: &Correlogram, mu: f64, eps: f64, dead_time: f64) -> Result<AfterpulseProfile, CorrectionError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(CorrectionError::InvalidRate(mu));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(CorrectionError::InvalidEpsilon(eps));
    }
    let t = auto.bin_width();
    for &l in auto.lags() {
        let seconds = l as f64 * t;
        if seconds < dead_time * (1.0 - 1e-9) {
            return Err(CorrectionError::InsideDeadBand { lag: l, seconds });
        }
    }
    let k = (1.0 + eps) * (1.0 + eps) * mu;
    let density: Vec<Option<f64>> = auto.g2().iter().map(|g| g.map(|g| (g - 1.0) * k)).collect();
    let sigma: Vec<Option<f64>> = auto.sigma().iter().map(|s| s.map(|s| s * k)).collect();
    let tau = auto.lag_seconds();
    let mut epsilon_hat = 0.0;
    for i in 1..tau.len() {
        if let (Some(a), Some(b)) = (density[i - 1], density[i]) {
            epsilon_hat += 0.5 * (a + b) * (tau[i] - tau[i - 1]);
        }
    }
    Ok(AfterpulseProfile {
        lags: auto.lags().to_vec(),
        tau,
        density,
        sigma,
        epsilon_hat,
    })
}

/// Ideal-detector correlation `1 + (1 + eps)^2 (g~_ij - g~_bg)`.
///
/// Errors of the two inputs are combined in quadrature. Values that the
/// subtraction would push below zero are clamped at zero.
pub fn correct_cross(measured: &Correlogram, background: &Correlogram, eps: f64) -> Result<Correlogram, CorrectionError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(CorrectionError::InvalidEpsilon(eps));
    }
    let (i, j) = measured.channels();
    if i == j {
        return Err(CorrectionError::SameChannel);
    }
    if measured.lags() != background.lags()
        || measured.bin_width() != background.bin_width()
        || measured.window_bins() != background.window_bins()
        || measured.channels() != background.channels()
    {
        return Err(CorrectionError::GridMismatch);
    }
    let k = (1.0 + eps) * (1.0 + eps);
    let mut g2 = Vec::with_capacity(measured.len());
    let mut sigma = Vec::with_capacity(measured.len());
    for l in 0..measured.len() {
        match (measured.g2()[l], background.g2()[l]) {
            (Some(m), Some(b)) => {
                g2.push(Some((1.0 + k * (m - b)).max(0.0)));
                sigma.push(match (measured.sigma()[l], background.sigma()[l]) {
                    (Some(sm), Some(sb)) => Some(k * sm.hypot(sb)),
                    _ => None,
                });
            }
            _ => {
                g2.push(None);
                sigma.push(None);
            }
        }
    }
    Ok(measured.derived(CorrelogramKind::Corrected, g2, sigma))
}

/// One uncorrelated component of a superposition: its own correlation and
/// its mean intensities at the two detectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixComponent {
    pub g2: f64,
    pub intensity_i: f64,
    pub intensity_j: f64,
}

/// Correlation of a superposition of mutually uncorrelated fields,
/// `1 + sum_a (g2_a - 1) I_a,i I_a,j / (I_i I_j)`.
pub fn mix_g2(components: &[MixComponent]) -> Result<f64, CorrectionError> {
    if components.iter().any(|c| !(c.intensity_i > 0.0 && c.intensity_j > 0.0)) || components.is_empty() {
        return Err(CorrectionError::InvalidIntensity);
    }
    let ii: f64 = components.iter().map(|c| c.intensity_i).sum();
    let ij: f64 = components.iter().map(|c| c.intensity_j).sum();
    Ok(1.0 + components.iter().map(|c| (c.g2 - 1.0) * c.intensity_i * c.intensity_j).sum::<f64>() / (ii * ij))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(channels: (usize, usize), kind: CorrelogramKind, lags: Vec<i64>, c: Vec<u64>) -> Correlogram {
        let n = lags.len();
        Correlogram::from_tallies(channels, kind, 1e-9, 1000, 1, lags, c, vec![1000; n], vec![1000; n], vec![10_000; n]).unwrap()
    }

    #[test]
    fn pure_background_corrects_to_one() {
        let m = corr((0, 1), CorrelogramKind::Raw, vec![-1, 0, 1], vec![90, 130, 100]);
        let b = corr((0, 1), CorrelogramKind::Background, vec![-1, 0, 1], vec![90, 130, 100]);
        let c = correct_cross(&m, &b, 0.07).unwrap();
        assert_eq!(c.kind(), CorrelogramKind::Corrected);
        assert!(c.g2().iter().all(|g| (g.unwrap() - 1.0).abs() < 1e-12));
        let s = c.sigma()[1].unwrap();
        let single = m.sigma()[1].unwrap();
        assert!((s - 1.07f64.powi(2) * single * 2f64.sqrt()).abs() < 1e-12);
        let shifted = corr((0, 1), CorrelogramKind::Background, vec![-2, 0, 1], vec![90, 130, 100]);
        assert_eq!(correct_cross(&m, &shifted, 0.07), Err(CorrectionError::GridMismatch));
    }

    #[test]
    fn flat_tail_has_no_afterpulses() {
        let lags: Vec<i64> = (20..40).collect();
        let a = corr((0, 0), CorrelogramKind::Autocorrelation, lags, vec![100; 20]);
        let p = correct_auto(&a, 1e6, 0.07, 13e-9).unwrap();
        assert!(p.density.iter().all(|d| d.unwrap().abs() < 1e-9));
        assert!(p.epsilon_hat.abs() < 1e-12);
        let inside = corr((0, 0), CorrelogramKind::Autocorrelation, vec![5, 20], vec![1, 100]);
        assert!(matches!(correct_auto(&inside, 1e6, 0.07, 13e-9), Err(CorrectionError::InsideDeadBand { lag: 5, .. })));
    }

    #[test]
    fn mixture_law() {
        let single = MixComponent {
            g2: 1.8,
            intensity_i: 2.0,
            intensity_j: 3.0,
        };
        assert!((mix_g2(&[single]).unwrap() - 1.8).abs() < 1e-15);
        // 6.8 kHz of 17.8 kHz modulated, the rest flat, equal channel rates.
        let hg = MixComponent {
            g2: 1.5,
            intensity_i: 6.8,
            intensity_j: 6.8,
        };
        let flat = MixComponent {
            g2: 1.0,
            intensity_i: 11.0,
            intensity_j: 11.0,
        };
        let g = mix_g2(&[hg, flat]).unwrap();
        assert!((g - 1.0 - 0.5 * (6.8f64 / 17.8).powi(2)).abs() < 1e-12);
        // Afterpulses as an uncorrelated fraction eps / (1 + eps) of the counts.
        let eps = 0.07;
        let photons = MixComponent {
            g2: 2.0,
            intensity_i: 1.0,
            intensity_j: 1.0,
        };
        let ap = MixComponent {
            g2: 1.0,
            intensity_i: eps,
            intensity_j: eps,
        };
        let g = mix_g2(&[photons, ap]).unwrap();
        assert!((g - (1.0 + 1.0 / (1.0 + eps) / (1.0 + eps))).abs() < 1e-12);
        assert!(mix_g2(&[]).is_err());
    }
}
