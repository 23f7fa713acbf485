//! Least-squares fits of measured correlations.
//!
//! `fit_near_field` recovers the main radial harmonic of a near-field
//! profile from zero-delay maxima measured at several Fresnel numbers.
//! The model is multimodal in `Omega`, so the solver is started from a grid.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use super::lm::{levenberg_marquardt, LmOptions, LmResult};
use super::vcz::cosine_visibility;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} usable points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("input arrays differ in length")]
    LengthMismatch,
    #[error("invalid fit parameter: {0}")]
    InvalidParameter(String),
    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// One measured zero-delay maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub fresnel: f64,
    pub g2max: f64,
    /// Standard error; non-positive values are treated as unit weight.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearFieldOptions {
    /// Zero-delay excess of a fully coherent pair: 0.5 for unpolarized light.
    pub excess_scale: f64,
    /// Number of `Omega` starting points spread over `[pi/w, 5 pi/w]`.
    pub starts: usize,
    /// Confidence level of the F test against the uniform profile.
    pub confidence: f64,
    pub lm: LmOptions,
}

impl Default for NearFieldOptions {
    fn default() -> Self {
        NearFieldOptions {
            excess_scale: 0.5,
            starts: 8,
            confidence: 0.99,
            lm: LmOptions::default(),
        }
    }
}

/// Outcome of [`fit_near_field`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub gamma: f64,
    /// Spatial frequency in rad per unit of `width`.
    pub omega: f64,
    pub width: f64,
    /// `sqrt(chi2)` of the weighted residuals.
    pub residual_norm: f64,
    pub chi2: f64,
    pub dof: usize,
    /// Covariance of `(gamma, omega)`, scaled by the reduced chi-square.
    pub covariance: Option<[[f64; 2]; 2]>,
    pub converged: bool,
    /// chi2 of the uniform profile (`gamma = 0`) on the same points.
    pub uniform_chi2: f64,
    /// `((chi2_0 - chi2) / 2) / (chi2 / dof)`.
    pub f_ratio: f64,
    pub f_critical: f64,
    pub uniform_rejected: bool,
}

impl FitResult {
    pub fn gamma_sigma(&self) -> Option<f64> {
        self.covariance.map(|c| c[0][0].max(0.0).sqrt())
    }

    pub fn omega_sigma(&self) -> Option<f64> {
        self.covariance.map(|c| c[1][1].max(0.0).sqrt())
    }

    /// `Omega` in units of `pi / w`.
    pub fn omega_reduced(&self) -> f64 {
        self.omega * self.width / PI
    }

    /// Structured text summary (TOML).
    pub fn to_summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[near_field_fit]");
        let _ = writeln!(s, "gamma = {:e}", self.gamma);
        let _ = writeln!(s, "omega = {:e}", self.omega);
        let _ = writeln!(s, "omega_pi_over_w = {:e}", self.omega_reduced());
        let _ = writeln!(s, "width = {:e}", self.width);
        if let (Some(g), Some(o)) = (self.gamma_sigma(), self.omega_sigma()) {
            let _ = writeln!(s, "gamma_sigma = {g:e}");
            let _ = writeln!(s, "omega_sigma = {o:e}");
        }
        let _ = writeln!(s, "residual_norm = {:e}", self.residual_norm);
        let _ = writeln!(s, "chi2 = {:e}", self.chi2);
        let _ = writeln!(s, "dof = {}", self.dof);
        let _ = writeln!(s, "converged = {}", self.converged);
        let _ = writeln!(s, "uniform_chi2 = {:e}", self.uniform_chi2);
        let _ = writeln!(s, "f_ratio = {:e}", self.f_ratio);
        let _ = writeln!(s, "f_critical = {:e}", self.f_critical);
        let _ = writeln!(s, "uniform_rejected = {}", self.uniform_rejected);
        s
    }
}

fn weight(sigma: f64) -> f64 {
    if sigma > 0.0 && sigma.is_finite() {
        1.0 / sigma
    } else {
        1.0
    }
}

fn near_field_model(fresnel: f64, gamma: f64, beta: f64, scale: f64) -> f64 {
    let v = cosine_visibility(fresnel, gamma, beta);
    1.0 + scale * v * v
}

/// Fits `1 + s V^2(FN; gamma, Omega w / 2)` to zero-delay maxima.
///
/// The result is the best of all starts. The F test compares it with the
/// uniform profile, which has no free parameter once `s` is fixed.
pub fn fit_near_field(points: &[FitPoint], width: f64, opts: &NearFieldOptions) -> Result<FitResult, FitError> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(FitError::InvalidParameter(format!("width {width}")));
    }
    if opts.excess_scale.is_nan() || opts.excess_scale <= 0.0 || opts.starts == 0 || !(opts.confidence > 0.0 && opts.confidence < 1.0) {
        return Err(FitError::InvalidParameter("options".into()));
    }
    let pts: Vec<FitPoint> = points.iter().copied().filter(|p| p.fresnel.is_finite() && p.g2max.is_finite()).collect();
    if pts.len() < 4 {
        return Err(FitError::TooFewPoints { needed: 4, got: pts.len() });
    }
    let s = opts.excess_scale;
    let residuals = |p: &[f64]| -> Vec<f64> {
        pts.iter()
            .map(|q| (q.g2max - near_field_model(q.fresnel, p[0], p[1], s)) * weight(q.sigma))
            .collect()
    };
    let mut best: Option<LmResult> = None;
    for k in 0..opts.starts {
        let frac = if opts.starts == 1 { 0.5 } else { k as f64 / (opts.starts - 1) as f64 };
        let beta0 = 0.5 * PI + 2.0 * PI * frac;
        for gamma0 in [-0.25, 0.25] {
            let r = levenberg_marquardt(residuals, &[gamma0, beta0], &opts.lm);
            if !r.chi2.is_finite() || r.params[0].abs() > 1.0 {
                continue;
            }
            if best.as_ref().is_none_or(|b| r.chi2 < b.chi2) {
                best = Some(r);
            }
        }
    }
    let uniform_chi2: f64 = residuals(&[0.0, PI]).iter().map(|r| r * r).sum();
    let dof = pts.len() - 2;
    let f_critical = FisherSnedecor::new(2.0, dof as f64)
        .map(|d| d.inverse_cdf(opts.confidence))
        .unwrap_or(f64::INFINITY);
    let Some(best) = best else {
        return Ok(FitResult {
            gamma: 0.0,
            omega: 0.0,
            width,
            residual_norm: uniform_chi2.sqrt(),
            chi2: uniform_chi2,
            dof,
            covariance: None,
            converged: false,
            uniform_chi2,
            f_ratio: 0.0,
            f_critical,
            uniform_rejected: false,
        });
    };
    let gamma = best.params[0];
    let beta = best.params[1].abs();
    let omega = 2.0 * beta / width;
    let covariance = best.covariance().map(|c| {
        let d = 2.0 / width;
        [[c[(0, 0)], c[(0, 1)] * d], [c[(1, 0)] * d, c[(1, 1)] * d * d]]
    });
    let reduced = best.chi2 / dof as f64;
    let f_ratio = if reduced > 0.0 {
        ((uniform_chi2 - best.chi2) / 2.0 / reduced).max(0.0)
    } else if uniform_chi2 > best.chi2 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(FitResult {
        gamma,
        omega,
        width,
        residual_norm: best.residual_norm(),
        chi2: best.chi2,
        dof,
        covariance,
        converged: best.converged && gamma.abs() <= 1.0 && omega > 0.0,
        uniform_chi2,
        f_ratio,
        f_critical,
        uniform_rejected: f_ratio > f_critical,
    })
}

pub const FIT_CSV_HEADER: &str = "fresnel,g2max,sigma";

/// Parses `fresnel,g2max[,sigma]` rows; a header line and `#` comments are skipped.
pub fn parse_fit_points(text: &str) -> Result<Vec<FitPoint>, FitError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if out.is_empty() && cols.first().is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        if cols.len() < 2 || cols.len() > 3 {
            return Err(FitError::Csv {
                line: n + 1,
                reason: format!("expected 2 or 3 columns, got {}", cols.len()),
            });
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| FitError::Csv {
                line: n + 1,
                reason: format!("{s:?}: {e}"),
            })
        };
        out.push(FitPoint {
            fresnel: num(cols[0])?,
            g2max: num(cols[1])?,
            sigma: if cols.len() == 3 { num(cols[2])? } else { 0.0 },
        });
    }
    Ok(out)
}

pub fn write_fit_points(points: &[FitPoint]) -> String {
    let mut s = String::from(FIT_CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{:e},{:e},{:e}", p.fresnel, p.g2max, p.sigma);
    }
    s
}

/// `1 + a cos(2 pi tau / P)` fitted to a correlogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineFit {
    pub amplitude: f64,
    pub period: f64,
    pub amplitude_sigma: Option<f64>,
    pub period_sigma: Option<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
}

fn check_lengths(x: &[f64], y: &[f64], s: &[f64], needed: usize) -> Result<(), FitError> {
    if x.len() != y.len() || x.len() != s.len() {
        return Err(FitError::LengthMismatch);
    }
    if x.len() < needed {
        return Err(FitError::TooFewPoints { needed, got: x.len() });
    }
    Ok(())
}

/// Scans periods in `[period_min, period_max]` with the amplitude solved in
/// closed form, then refines both by least squares.
pub fn fit_cosine(tau: &[f64], g2: &[f64], sigma: &[f64], period_min: f64, period_max: f64) -> Result<CosineFit, FitError> {
    check_lengths(tau, g2, sigma, 3)?;
    if !(0.0 < period_min && period_min < period_max) {
        return Err(FitError::InvalidParameter(format!("period range {period_min}..{period_max}")));
    }
    let amplitude_for = |p: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..tau.len() {
            let w = weight(sigma[i]).powi(2);
            let c = (2.0 * PI * tau[i] / p).cos();
            num += w * c * (g2[i] - 1.0);
            den += w * c * c;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let residuals = |q: &[f64]| -> Vec<f64> {
        (0..tau.len())
            .map(|i| (g2[i] - 1.0 - q[0] * (2.0 * PI * tau[i] / q[1]).cos()) * weight(sigma[i]))
            .collect()
    };
    let chi2 = |q: &[f64]| residuals(q).iter().map(|r| r * r).sum::<f64>();
    // The scan step must resolve a phase change of the outermost point.
    let reach = tau.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let steps = ((reach / period_min) * (period_max / period_min).ln() * 40.0).ceil().clamp(200.0, 200_000.0) as usize;
    let mut start = (f64::INFINITY, 0.0, period_min);
    for k in 0..=steps {
        let p = period_min * (period_max / period_min).powf(k as f64 / steps as f64);
        let a = amplitude_for(p);
        let c = chi2(&[a, p]);
        if c < start.0 {
            start = (c, a, p);
        }
    }
    let r = levenberg_marquardt(residuals, &[start.1, start.2], &LmOptions::default());
    let cov = r.covariance();
    Ok(CosineFit {
        amplitude: r.params[0],
        period: r.params[1],
        amplitude_sigma: cov.as_ref().map(|c| c[(0, 0)].max(0.0).sqrt()),
        period_sigma: cov.as_ref().map(|c| c[(1, 1)].max(0.0).sqrt()),
        chi2: r.chi2,
        dof: r.dof,
        converged: r.converged,
    })
}

/// `A exp(-x / tau)` fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExponentialFit {
    pub amplitude: f64,
    pub decay: f64,
    pub amplitude_sigma: Option<f64>,
    pub decay_sigma: Option<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
}

impl ExponentialFit {
    /// Area `A tau` under the curve from `x0` to infinity, times `exp(-x0 / tau)`.
    pub fn integral_from(&self, x0: f64) -> f64 {
        self.amplitude * self.decay * (-x0 / self.decay).exp()
    }
}

/// Starts from a weighted log-linear fit of the positive points.
pub fn fit_exponential(x: &[f64], y: &[f64], sigma: &[f64]) -> Result<ExponentialFit, FitError> {
    check_lengths(x, y, sigma, 3)?;
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        if y[i] > 0.0 {
            // Weight of ln y is (y / sigma)^2.
            let w = (y[i] * weight(sigma[i])).powi(2);
            let ly = y[i].ln();
            sw += w;
            sx += w * x[i];
            sy += w * ly;
            sxx += w * x[i] * x[i];
            sxy += w * x[i] * ly;
        }
    }
    let det = sw * sxx - sx * sx;
    let span = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut a0, mut d0) = (y.iter().cloned().fold(0.0, f64::max), span.max(f64::MIN_POSITIVE) / 3.0);
    if det > 0.0 {
        let slope = (sw * sxy - sx * sy) / det;
        if slope < 0.0 {
            d0 = -1.0 / slope;
            a0 = ((sy - slope * sx) / sw).exp();
        }
    }
    // Fit in natural units of the data so the Jacobian is well scaled.
    let residuals = |p: &[f64]| -> Vec<f64> {
        (0..x.len())
            .map(|i| (y[i] - p[0] * a0 * (-x[i] / (p[1] * d0)).exp()) * weight(sigma[i]))
            .collect()
    };
    let r = levenberg_marquardt(residuals, &[1.0, 1.0], &LmOptions::default());
    let cov = r.covariance();
    Ok(ExponentialFit {
        amplitude: r.params[0] * a0,
        decay: r.params[1] * d0,
        amplitude_sigma: cov.as_ref().map(|c| c[(0, 0)].max(0.0).sqrt() * a0),
        decay_sigma: cov.as_ref().map(|c| c[(1, 1)].max(0.0).sqrt() * d0),
        chi2: r.chi2,
        dof: r.dof,
        converged: r.converged && r.params[1] > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const W: f64 = 200e-6;

    fn synthetic(gamma: f64, omega_reduced: f64, noise: f64, n: usize, seed: u64) -> Vec<FitPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = 0.5 * omega_reduced * PI;
        (0..n)
            .map(|k| {
                let f = 1.5 * k as f64 / (n - 1) as f64;
                let g = near_field_model(f, gamma, beta, 0.5);
                let s = noise * g;
                FitPoint {
                    fresnel: f,
                    g2max: g + Normal::new(0.0, s).unwrap().sample(&mut rng),
                    sigma: s,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_harmonic() {
        let pts = synthetic(-0.3, 2.8, 0.0, 8, 0);
        let r = fit_near_field(&pts, W, &NearFieldOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.gamma + 0.3).abs() < 1e-6, "{r:?}");
        assert!((r.omega_reduced() - 2.8).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn uniform_data_gives_no_modulation() {
        let pts = synthetic(0.0, 2.8, 0.0, 10, 0);
        let r = fit_near_field(&pts, W, &NearFieldOptions::default()).unwrap();
        assert!(r.gamma.abs() < 1e-6, "{r:?}");
        assert!(!r.uniform_rejected);
    }

    #[test]
    fn suppressed_revival_rejects_uniform() {
        let pts = synthetic(-0.3, 2.8, 0.003, 12, 4);
        let r = fit_near_field(&pts, W, &NearFieldOptions::default()).unwrap();
        assert!(r.uniform_rejected, "F = {} vs {}", r.f_ratio, r.f_critical);
        assert!(r.f_critical > 1.0 && r.f_critical.is_finite());
    }

    #[test]
    fn argmin_invariant_under_excess_rescaling() {
        let pts = synthetic(-0.3, 2.8, 0.01, 8, 9);
        let a = fit_near_field(&pts, W, &NearFieldOptions::default()).unwrap();
        let c = 0.37;
        let scaled: Vec<FitPoint> = pts
            .iter()
            .map(|p| FitPoint {
                fresnel: p.fresnel,
                g2max: 1.0 + c * (p.g2max - 1.0),
                sigma: c * p.sigma,
            })
            .collect();
        let opts = NearFieldOptions {
            excess_scale: 0.5 * c,
            ..Default::default()
        };
        let b = fit_near_field(&scaled, W, &opts).unwrap();
        assert!((a.gamma - b.gamma).abs() < 1e-6 && (a.omega - b.omega).abs() < 1e-6 * a.omega);
        assert!((a.chi2 - b.chi2).abs() < 1e-6 * a.chi2.max(1e-12));
    }

    #[test]
    fn too_few_points() {
        let pts = synthetic(0.0, 2.0, 0.0, 3, 0);
        assert_eq!(
            fit_near_field(&pts, W, &NearFieldOptions::default()),
            Err(FitError::TooFewPoints { needed: 4, got: 3 })
        );
    }

    #[test]
    fn csv_round_trip() {
        let pts = synthetic(-0.3, 2.8, 0.01, 5, 1);
        let back = parse_fit_points(&write_fit_points(&pts)).unwrap();
        assert_eq!(pts, back);
        let two = parse_fit_points("# comment\n0.1, 1.4\n0.2,1.3\n").unwrap();
        assert_eq!(two[1].sigma, 0.0);
        assert!(matches!(parse_fit_points("0.1,1.4\n0.2\n"), Err(FitError::Csv { line: 2, .. })));
    }

    #[test]
    fn summary_is_toml() {
        let pts = synthetic(-0.3, 2.8, 0.01, 8, 2);
        let r = fit_near_field(&pts, W, &NearFieldOptions::default()).unwrap();
        let v: toml::Table = r.to_summary().parse().unwrap();
        let t = v["near_field_fit"].as_table().unwrap();
        assert_eq!(t["gamma"].as_float().unwrap(), r.gamma);
        assert_eq!(t["converged"].as_bool().unwrap(), r.converged);
    }

    #[test]
    fn cosine_recovery() {
        let tau: Vec<f64> = (-100..=100).map(|l| l as f64 * 50e-12).collect();
        let g: Vec<f64> = tau.iter().map(|t| 1.0 + 0.2 * (2.0 * PI * t / 1.4e-9).cos()).collect();
        let s = vec![0.01; tau.len()];
        let r = fit_cosine(&tau, &g, &s, 0.5e-9, 5e-9).unwrap();
        assert!((r.period - 1.4e-9).abs() < 1e-15 && (r.amplitude - 0.2).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn exponential_recovery() {
        let x: Vec<f64> = (13..200).map(|k| k as f64 * 1e-9).collect();
        let y: Vec<f64> = x.iter().map(|t| 2e6 * (-t / 40e-9).exp()).collect();
        let s = vec![1e3; x.len()];
        let r = fit_exponential(&x, &y, &s).unwrap();
        assert!(r.converged);
        assert!((r.decay - 40e-9).abs() < 1e-15 && (r.amplitude / 2e6 - 1.0).abs() < 1e-9, "{r:?}");
    }
}
