//! Monte-Carlo light sources.
//!
//! Every source is a Cox process: bin `n` of channel `i` holds a photon with
//! probability `rate * T * I_i(n)`, where the latent intensity `I_i` has unit
//! mean and restarts independently in every series. Latent processes:
//!
//! * coherent / incoherent: `I = 1` (Poisson counts);
//! * multimode coherent: `I = 1 + m cos(2 pi t / T_rt + phi)` with a random
//!   phase per series and `m = sqrt(2a)`, so that `g2(tau) = 1 + a cos(2 pi tau / T_rt)`;
//! * thermal: `I = sum_pol |E|^2 / p` for filtered complex Gaussian fields
//!   whose first-order coherence has a Gaussian envelope of width `tau_c`;
//! * modulated thermal: a deterministic waveform with random phase,
//!   standing in for a broadband lamp whose own bunching is far below the
//!   bin width;
//! * mixture: intensity-weighted sum of independent component intensities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::bins::BinSpec;
use crate::geometry::ArrayGeometry;
use crate::physics::quadrature::adaptive_simpson;
use crate::physics::vcz::{temporal_factor, vcz_visibility, CosineModulated};
use crate::rng::{bernoulli_positions, geometric_gap, substream, Stage};
use crate::trace::{EventTraceSet, TraceError};

#[derive(Debug, Error, PartialEq)]
pub enum SourceError {
    #[error("invalid source parameter: {0}")]
    InvalidParameter(String),
    #[error("mean photon probability per bin {0} exceeds 0.5; binary bins would distort the statistics")]
    RateTooHigh(f64),
    #[error("spatial correlation {0} outside [0, 1]")]
    CorrelationOutOfRange(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Modulation waveform of an intensity-modulated lamp.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Waveform {
    #[default]
    Cosine,
    RectifiedSine,
}

/// Near-field geometry of an extended thermal source seen by the array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialProfile {
    /// Source width `w` in metres.
    pub near_field_width: f64,
    pub wavelength: f64,
    /// Source-to-array distance `L` in metres.
    pub distance: f64,
    /// Near-field modulation depth `gamma` of `1 + gamma cos(Omega x)`.
    #[serde(default)]
    pub modulation_depth: f64,
    /// `Omega` in rad per metre.
    #[serde(default)]
    pub spatial_freq: f64,
}

impl SpatialProfile {
    pub fn uniform(near_field_width: f64, wavelength: f64, distance: f64) -> Self {
        SpatialProfile {
            near_field_width,
            wavelength,
            distance,
            modulation_depth: 0.0,
            spatial_freq: 0.0,
        }
    }

    pub fn fresnel(&self, baseline: f64) -> f64 {
        self.near_field_width * baseline / (self.wavelength * self.distance)
    }

    pub fn near_field(&self) -> CosineModulated {
        CosineModulated {
            width: self.near_field_width,
            gamma: self.modulation_depth,
            omega: self.spatial_freq,
        }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        for (name, v) in [
            ("near_field_width", self.near_field_width),
            ("wavelength", self.wavelength),
            ("distance", self.distance),
        ] {
            positive(name, v)?;
        }
        if !(-1.0..=1.0).contains(&self.modulation_depth) {
            return Err(SourceError::InvalidParameter(format!(
                "modulation_depth {} outside [-1, 1]",
                self.modulation_depth
            )));
        }
        if !(self.spatial_freq.is_finite() && self.spatial_freq >= 0.0) {
            return Err(SourceError::InvalidParameter("spatial_freq must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Real (signed) degree of spatial coherence at `baseline`.
    fn signed_correlation(&self, baseline: f64) -> f64 {
        vcz_visibility(&self.near_field(), baseline, self.wavelength, self.distance)
            .map(|(re, _)| re)
            .unwrap_or(0.0)
    }
}

/// Spatial correlation `c` of the fields reaching two detectors `baseline` apart.
pub fn spatial_correlation_from_profile(profile: &SpatialProfile, baseline: f64) -> f64 {
    profile.signed_correlation(baseline.abs()).abs().min(1.0)
}

/// One intensity component of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    /// Share of the mean intensity carried by this component.
    pub fraction: f64,
    pub light: LightKind,
}

/// Statistics of a light state, independent of its brightness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LightKind {
    Coherent,
    Incoherent,
    MultimodeCoherent {
        roundtrip_time: f64,
        beat_amplitude: f64,
    },
    Thermal {
        coherence_time: f64,
        #[serde(default)]
        polarized: bool,
        #[serde(default)]
        spatial: Option<SpatialProfile>,
    },
    ModulatedThermal {
        mod_freq: f64,
        mod_depth: f64,
        #[serde(default)]
        waveform: Waveform,
        /// Exponent `kappa` of `|sin|^kappa` for the rectified waveform.
        #[serde(default = "default_exponent")]
        exponent: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

fn default_exponent() -> f64 {
    2.0
}

/// A light state together with its mean photon rate per detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    /// Mean incident photon rate per detector in 1/s.
    pub rate: f64,
    pub light: LightKind,
}

fn positive(name: &str, v: f64) -> Result<(), SourceError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SourceError::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

fn unit_interval(name: &str, v: f64) -> Result<(), SourceError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(SourceError::InvalidParameter(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl LightKind {
    pub fn validate(&self) -> Result<(), SourceError> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, nested: bool) -> Result<(), SourceError> {
        match self {
            LightKind::Coherent | LightKind::Incoherent => Ok(()),
            LightKind::MultimodeCoherent {
                roundtrip_time,
                beat_amplitude,
            } => {
                positive("roundtrip_time", *roundtrip_time)?;
                unit_interval("beat_amplitude", *beat_amplitude)?;
                if *beat_amplitude > 0.5 {
                    return Err(SourceError::InvalidParameter(format!(
                        "beat_amplitude {beat_amplitude} above 0.5 needs a negative intensity"
                    )));
                }
                Ok(())
            }
            LightKind::Thermal {
                coherence_time, spatial, ..
            } => {
                positive("coherence_time", *coherence_time)?;
                if let Some(p) = spatial {
                    p.validate()?;
                }
                Ok(())
            }
            LightKind::ModulatedThermal {
                mod_freq,
                mod_depth,
                exponent,
                ..
            } => {
                positive("mod_freq", *mod_freq)?;
                unit_interval("mod_depth", *mod_depth)?;
                positive("exponent", *exponent)
            }
            LightKind::Mixture { components } => {
                if nested {
                    return Err(SourceError::InvalidParameter("mixtures cannot be nested".into()));
                }
                if components.is_empty() {
                    return Err(SourceError::InvalidParameter("mixture has no components".into()));
                }
                let mut sum = 0.0;
                for c in components {
                    if !(c.fraction.is_finite() && c.fraction >= 0.0) {
                        return Err(SourceError::InvalidParameter(format!(
                            "mixture fraction {} must be non-negative",
                            c.fraction
                        )));
                    }
                    sum += c.fraction;
                    c.light.validate_inner(true)?;
                }
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(SourceError::InvalidParameter(format!("mixture fractions sum to {sum}, not 1")));
                }
                Ok(())
            }
        }
    }

    /// Model intensity correlation `g2(tau)` between two detectors whose
    /// fields have spatial correlation `c` (ignored by non-thermal states).
    pub fn analytic_g2(&self, tau: f64, c: f64) -> f64 {
        match self {
            LightKind::Coherent | LightKind::Incoherent => 1.0,
            LightKind::MultimodeCoherent {
                roundtrip_time,
                beat_amplitude,
            } => 1.0 + beat_amplitude * (2.0 * PI * tau / roundtrip_time).cos(),
            LightKind::Thermal {
                coherence_time,
                polarized,
                ..
            } => {
                let p = if *polarized { 1.0 } else { 2.0 };
                1.0 + c * c / p * temporal_factor(tau, *coherence_time)
            }
            LightKind::ModulatedThermal {
                mod_freq,
                mod_depth,
                waveform,
                exponent,
            } => {
                let w = Modulation::new(*waveform, *mod_depth, *exponent, 2.0 * PI * mod_freq, 0.0);
                match waveform {
                    Waveform::Cosine => 1.0 + 0.5 * mod_depth * mod_depth * (2.0 * PI * mod_freq * tau).cos(),
                    Waveform::RectifiedSine => {
                        // Average of I(t) I(t + tau) over one period.
                        let period = 1.0 / mod_freq;
                        let f = |t: f64| w.value(t) * w.value(t + tau);
                        adaptive_simpson(&f, 0.0, period, 1e-10) / period
                    }
                }
            }
            LightKind::Mixture { components } => {
                1.0 + components
                    .iter()
                    .map(|m| m.fraction * m.fraction * (m.light.analytic_g2(tau, c) - 1.0))
                    .sum::<f64>()
            }
        }
    }
}

impl SourceModel {
    pub fn new(rate: f64, light: LightKind) -> Self {
        SourceModel { rate, light }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        positive("rate", self.rate)?;
        self.light.validate()
    }

    /// Checks the model against a binning and warns about undersampling.
    pub fn validate_for(&self, spec: &BinSpec) -> Result<(), SourceError> {
        self.validate()?;
        spec.validate()?;
        let p = self.rate * spec.bin_width;
        if p > 0.5 {
            return Err(SourceError::RateTooHigh(p));
        }
        for_each_kind(&self.light, &mut |k| {
            if let LightKind::Thermal { coherence_time, .. } = k {
                if *coherence_time < 2.0 * spec.bin_width {
                    log::warn!(
                        "coherence time {coherence_time:e} s is below twice the bin width {:e} s; bunching is undersampled",
                        spec.bin_width
                    );
                }
            }
        });
        Ok(())
    }
}

fn for_each_kind(k: &LightKind, f: &mut dyn FnMut(&LightKind)) {
    if let LightKind::Mixture { components } = k {
        for c in components {
            for_each_kind(&c.light, f);
        }
    } else {
        f(k);
    }
}

/// Periodic waveform with unit mean over a period.
#[derive(Debug, Clone, Copy)]
struct Modulation {
    waveform: Waveform,
    depth: f64,
    exponent: f64,
    /// Mean of `|sin|^exponent` over a period.
    norm: f64,
    /// Angular frequency in rad per unit of the time argument.
    omega: f64,
    phase: f64,
}

impl Modulation {
    fn new(waveform: Waveform, depth: f64, exponent: f64, omega: f64, phase: f64) -> Self {
        let norm = match waveform {
            Waveform::Cosine => 1.0,
            Waveform::RectifiedSine => {
                (ln_gamma(0.5 * (exponent + 1.0)) - ln_gamma(0.5 * exponent + 1.0)).exp() / PI.sqrt()
            }
        };
        Modulation {
            waveform,
            depth,
            exponent,
            norm,
            omega,
            phase,
        }
    }

    fn value(&self, t: f64) -> f64 {
        match self.waveform {
            Waveform::Cosine => 1.0 + self.depth * (self.omega * t + self.phase).cos(),
            Waveform::RectifiedSine => {
                let s = (0.5 * self.omega * t + self.phase).sin().abs().powf(self.exponent);
                1.0 - self.depth + self.depth * s / self.norm
            }
        }
    }

    fn max(&self) -> f64 {
        match self.waveform {
            Waveform::Cosine => 1.0 + self.depth,
            Waveform::RectifiedSine => 1.0 - self.depth + self.depth / self.norm,
        }
    }
}

/// Precomputed filter and channel mixing for thermal components.
#[derive(Debug, Clone)]
struct ThermalPlan {
    kernel: Vec<f64>,
    /// Channels x modes; row `i` has unit norm.
    mixing: DMatrix<f64>,
    polarizations: usize,
}

impl ThermalPlan {
    fn new(coherence_time: f64, polarized: bool, bin_width: f64, correlation: &DMatrix<f64>) -> Self {
        let sigma = coherence_time / (bin_width * (2.0 * PI).sqrt());
        let half = (5.0 * sigma).ceil() as i64;
        let mut kernel: Vec<f64> = (-half..=half)
            .map(|k| {
                let t = k as f64 * bin_width;
                (-PI * t * t / (coherence_time * coherence_time)).exp()
            })
            .collect();
        let norm = kernel.iter().map(|h| h * h).sum::<f64>().sqrt();
        kernel.iter_mut().for_each(|h| *h /= norm);
        ThermalPlan {
            kernel,
            mixing: mixing_matrix(correlation),
            polarizations: if polarized { 1 } else { 2 },
        }
    }

    fn half(&self) -> usize {
        self.kernel.len() / 2
    }

    /// Per-channel unit-mean intensities for one series of `n` bins.
    fn intensities(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let channels = self.mixing.nrows();
        let modes = self.mixing.ncols();
        let half = self.half();
        let mut out = vec![vec![0.0; n]; channels];
        let mut white_re = vec![0.0; n + 2 * half];
        let mut white_im = vec![0.0; n + 2 * half];
        let mut field_re = vec![vec![0.0; n]; modes];
        let mut field_im = vec![vec![0.0; n]; modes];
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        for _ in 0..self.polarizations {
            for k in 0..modes {
                for v in white_re.iter_mut().chain(white_im.iter_mut()) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = scale * z;
                }
                filter(&self.kernel, &white_re, &mut field_re[k]);
                filter(&self.kernel, &white_im, &mut field_im[k]);
            }
            for (ch, intensity) in out.iter_mut().enumerate() {
                for b in 0..n {
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for k in 0..modes {
                        let l = self.mixing[(ch, k)];
                        re += l * field_re[k][b];
                        im += l * field_im[k][b];
                    }
                    intensity[b] += re * re + im * im;
                }
            }
        }
        let p = self.polarizations as f64;
        for intensity in &mut out {
            intensity.iter_mut().for_each(|v| *v /= p);
        }
        out
    }
}

fn filter(kernel: &[f64], input: &[f64], out: &mut [f64]) {
    for (b, o) in out.iter_mut().enumerate() {
        *o = kernel.iter().zip(&input[b..]).map(|(h, x)| h * x).sum();
    }
}

/// Factor `L` with `L L^T` the nearest PSD matrix to `correlation`
/// (negative eigenvalues clipped, unit diagonal restored).
fn mixing_matrix(correlation: &DMatrix<f64>) -> DMatrix<f64> {
    let n = correlation.nrows();
    let eig = SymmetricEigen::new(correlation.clone());
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-10 * lmax.max(1e-300)).collect();
    let mut l = DMatrix::zeros(n, keep.len().max(1));
    for (col, &k) in keep.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for row in 0..n {
            l[(row, col)] = eig.eigenvectors[(row, k)] * s;
        }
    }
    for row in 0..n {
        let norm = l.row(row).norm();
        if norm > 0.0 {
            l.row_mut(row).scale_mut(1.0 / norm);
        } else {
            l[(row, 0)] = 1.0;
        }
    }
    l
}

fn correlation_matrix(geometry: &ArrayGeometry, spatial: Option<&SpatialProfile>) -> DMatrix<f64> {
    let n = geometry.pixel_count();
    DMatrix::from_fn(n, n, |i, j| match spatial {
        _ if i == j => 1.0,
        None => 1.0,
        Some(p) => p.signed_correlation(geometry.baseline(i, j)).clamp(-1.0, 1.0),
    })
}

/// Per-call preparation of one light component.
#[derive(Debug, Clone)]
enum Plan {
    Flat,
    Modulated {
        waveform: Waveform,
        depth: f64,
        exponent: f64,
        omega_per_bin: f64,
    },
    Thermal(ThermalPlan),
}

/// Latent intensity of one component in one series.
enum Latent {
    Flat,
    Modulated(Modulation),
    Field(Vec<Vec<f64>>),
}

impl Latent {
    fn at(&self, ch: usize, n: usize) -> f64 {
        match self {
            Latent::Flat => 1.0,
            Latent::Modulated(m) => m.value(n as f64),
            Latent::Field(f) => f[ch][n],
        }
    }
}

struct Prepared {
    per_bin: f64,
    components: Vec<(f64, Plan)>,
    window: usize,
    channels: usize,
}

fn plan_for(light: &LightKind, spec: &BinSpec, geometry: &ArrayGeometry) -> Plan {
    match light {
        LightKind::Coherent | LightKind::Incoherent => Plan::Flat,
        LightKind::MultimodeCoherent {
            roundtrip_time,
            beat_amplitude,
        } => Plan::Modulated {
            waveform: Waveform::Cosine,
            depth: (2.0 * beat_amplitude).sqrt(),
            exponent: 1.0,
            omega_per_bin: 2.0 * PI * spec.bin_width / roundtrip_time,
        },
        LightKind::ModulatedThermal {
            mod_freq,
            mod_depth,
            waveform,
            exponent,
        } => Plan::Modulated {
            waveform: *waveform,
            depth: *mod_depth,
            exponent: *exponent,
            omega_per_bin: 2.0 * PI * mod_freq * spec.bin_width,
        },
        LightKind::Thermal {
            coherence_time,
            polarized,
            spatial,
        } => Plan::Thermal(ThermalPlan::new(
            *coherence_time,
            *polarized,
            spec.bin_width,
            &correlation_matrix(geometry, spatial.as_ref()),
        )),
        LightKind::Mixture { .. } => unreachable!("mixtures are flattened before planning"),
    }
}

impl Prepared {
    fn new(source: &SourceModel, spec: &BinSpec, geometry: &ArrayGeometry) -> Result<Self, SourceError> {
        source.validate_for(spec)?;
        let components = match &source.light {
            LightKind::Mixture { components } => components
                .iter()
                .filter(|c| c.fraction > 0.0)
                .map(|c| (c.fraction, plan_for(&c.light, spec, geometry)))
                .collect(),
            other => vec![(1.0, plan_for(other, spec, geometry))],
        };
        Ok(Prepared {
            per_bin: source.rate * spec.bin_width,
            components,
            window: spec.window_bins,
            channels: geometry.pixel_count(),
        })
    }

    fn latents(&self, rng: &mut ChaCha8Rng) -> Vec<(f64, Latent)> {
        self.components
            .iter()
            .map(|(f, plan)| {
                let latent = match plan {
                    Plan::Flat => Latent::Flat,
                    Plan::Modulated {
                        waveform,
                        depth,
                        exponent,
                        omega_per_bin,
                    } => {
                        let phase = 2.0 * PI * rng.random::<f64>();
                        Latent::Modulated(Modulation::new(*waveform, *depth, *exponent, *omega_per_bin, phase))
                    }
                    Plan::Thermal(t) => Latent::Field(t.intensities(self.window, rng)),
                };
                (*f, latent)
            })
            .collect()
    }

    fn intensity(&self, latents: &[(f64, Latent)], ch: usize) -> Vec<f64> {
        (0..self.window)
            .map(|n| latents.iter().map(|(f, l)| f * l.at(ch, n)).sum())
            .collect()
    }

    /// Photon bins of every channel for one series, plus the number of bins
    /// whose probability exceeded 0.5.
    fn series(&self, seed: u64, series: u64) -> (Vec<Vec<u32>>, u64) {
        let mut rng = substream(seed, Stage::Source, series);
        let latents = self.latents(&mut rng);
        let n = self.window;
        let mut clamped = 0u64;
        let mut out = Vec::with_capacity(self.channels);
        let all_flat = latents.iter().all(|(_, l)| matches!(l, Latent::Flat));
        let has_field = latents.iter().any(|(_, l)| matches!(l, Latent::Field(_)));
        for ch in 0..self.channels {
            let mut events = Vec::new();
            if all_flat {
                bernoulli_positions(&mut rng, self.per_bin, n, &mut events);
            } else if !has_field {
                let imax: f64 = latents
                    .iter()
                    .map(|(f, l)| match l {
                        Latent::Modulated(m) => f * m.max(),
                        _ => *f,
                    })
                    .sum();
                let pmax = self.per_bin * imax;
                if pmax <= 0.5 {
                    thin(&mut rng, pmax, n, |b| latents.iter().map(|(f, l)| f * l.at(ch, b)).sum::<f64>() / imax, &mut events);
                } else {
                    clamped += per_bin_draws(&mut rng, self.per_bin, &self.intensity(&latents, ch), &mut events);
                }
            } else {
                let intensity = self.intensity(&latents, ch);
                let imax = intensity.iter().cloned().fold(0.0, f64::max);
                let pmax = self.per_bin * imax;
                if pmax < 0.05 {
                    thin(&mut rng, pmax, n, |b| intensity[b] / imax, &mut events);
                } else {
                    clamped += per_bin_draws(&mut rng, self.per_bin, &intensity, &mut events);
                }
            }
            out.push(events);
        }
        (out, clamped)
    }
}

/// Candidates at rate `pmax` kept with probability `accept(bin)`.
fn thin<F: Fn(usize) -> f64>(rng: &mut ChaCha8Rng, pmax: f64, n: usize, accept: F, out: &mut Vec<u32>) {
    if pmax <= 0.0 {
        return;
    }
    let ln_q = (-pmax).ln_1p();
    let mut pos: u64 = 0;
    loop {
        pos = pos.saturating_add(geometric_gap(rng, ln_q));
        if pos >= n as u64 {
            break;
        }
        if rng.random::<f64>() < accept(pos as usize) {
            out.push(pos as u32);
        }
        pos += 1;
    }
}

fn per_bin_draws(rng: &mut ChaCha8Rng, per_bin: f64, intensity: &[f64], out: &mut Vec<u32>) -> u64 {
    let mut clamped = 0;
    for (b, &i) in intensity.iter().enumerate() {
        let p = per_bin * i;
        if p > 0.5 {
            clamped += 1;
        }
        if rng.random::<f64>() < p.clamp(0.0, 1.0) {
            out.push(b as u32);
        }
    }
    clamped
}

/// Ideal photon bins (before any detector effect) for all series of `spec`.
pub fn generate(source: &SourceModel, spec: &BinSpec, geometry: &ArrayGeometry, seed: u64) -> Result<EventTraceSet, SourceError> {
    generate_range(source, spec, geometry, seed, 0, spec.series_count)
}

/// Series `first .. first + count` of the run described by `spec`; the
/// result is bit-identical to the same slice of a full [`generate`] call.
pub fn generate_range(
    source: &SourceModel,
    spec: &BinSpec,
    geometry: &ArrayGeometry,
    seed: u64,
    first: u64,
    count: usize,
) -> Result<EventTraceSet, SourceError> {
    let chunk = spec.with_series(count);
    let prepared = Prepared::new(source, &chunk, geometry)?;
    let results: Vec<(Vec<Vec<u32>>, u64)> = (0..count as u64)
        .into_par_iter()
        .map(|s| prepared.series(seed, first + s))
        .collect();
    let clamped: u64 = results.iter().map(|r| r.1).sum();
    if clamped > 0 {
        log::warn!("{clamped} bins had photon probability above 0.5 and were clamped at 1 where needed");
    }
    let set = EventTraceSet::from_events(chunk, prepared.channels, |ch, s| &results[s].0[ch])?;
    Ok(set.with_geometry(geometry.clone())?)
}

/// Unit-mean latent intensity of every channel in one series, drawn from
/// the same random stream that [`generate`] uses for that series.
pub fn intensity_series(
    source: &SourceModel,
    spec: &BinSpec,
    geometry: &ArrayGeometry,
    seed: u64,
    series: u64,
) -> Result<Vec<Vec<f64>>, SourceError> {
    let prepared = Prepared::new(source, spec, geometry)?;
    let mut rng = substream(seed, Stage::Source, series);
    let latents = prepared.latents(&mut rng);
    Ok((0..prepared.channels).map(|ch| prepared.intensity(&latents, ch)).collect())
}

/// Intensities of two detectors illuminated by thermal light whose fields
/// have correlation `c`; each output concatenates all series.
pub fn thermal_field_pair(
    coherence_time: f64,
    c: f64,
    polarized: bool,
    spec: &BinSpec,
    seed: u64,
) -> Result<[Vec<f64>; 2], SourceError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(SourceError::CorrelationOutOfRange(c));
    }
    positive("coherence_time", coherence_time)?;
    spec.validate()?;
    let corr = DMatrix::from_row_slice(2, 2, &[1.0, c, c, 1.0]);
    let plan = ThermalPlan::new(coherence_time, polarized, spec.bin_width, &corr);
    let mut a = Vec::with_capacity(spec.window_bins * spec.series_count);
    let mut b = Vec::with_capacity(spec.window_bins * spec.series_count);
    for s in 0..spec.series_count {
        let mut rng = substream(seed, Stage::Source, s as u64);
        let mut i = plan.intensities(spec.window_bins, &mut rng);
        b.append(&mut i[1]);
        a.append(&mut i[0]);
    }
    Ok([a, b])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: f64, n: usize, m: usize) -> BinSpec {
        BinSpec::new(t, n, m).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = spec(1e-9, 100, 1);
        let g = ArrayGeometry::row_of(2);
        let too_bright = SourceModel::new(6e8, LightKind::Coherent);
        assert!(matches!(generate(&too_bright, &s, &g, 0), Err(SourceError::RateTooHigh(_))));
        let bad_mix = SourceModel::new(
            1e6,
            LightKind::Mixture {
                components: vec![MixtureComponent {
                    fraction: 0.7,
                    light: LightKind::Incoherent,
                }],
            },
        );
        assert!(bad_mix.validate().is_err());
        let beat = LightKind::MultimodeCoherent {
            roundtrip_time: 1.4e-9,
            beat_amplitude: 0.6,
        };
        assert!(beat.validate().is_err());
        assert_eq!(
            thermal_field_pair(1e-9, 1.2, true, &s, 0),
            Err(SourceError::CorrelationOutOfRange(1.2))
        );
    }

    #[test]
    fn deterministic_and_chunk_invariant() {
        let src = SourceModel::new(
            5e7,
            LightKind::Thermal {
                coherence_time: 3e-9,
                polarized: false,
                spatial: None,
            },
        );
        let s = spec(1e-9, 300, 6);
        let g = ArrayGeometry::row_of(3);
        let full = generate(&src, &s, &g, 42).unwrap();
        assert_eq!(full, generate(&src, &s, &g, 42).unwrap());
        let mut parts = generate_range(&src, &s, &g, 42, 0, 2).unwrap();
        parts.append_series(&generate_range(&src, &s, &g, 42, 2, 4).unwrap()).unwrap();
        assert_eq!(parts.unpack(), full.unpack());
        assert_ne!(full, generate(&src, &s, &g, 43).unwrap());
    }

    #[test]
    fn rectified_sine_has_unit_mean() {
        for k in [1.0, 2.0, 3.5] {
            let m = Modulation::new(Waveform::RectifiedSine, 0.8, k, 2.0 * PI, 0.3);
            let mean = adaptive_simpson(&|t| m.value(t), 0.0, 1.0, 1e-12);
            assert!((mean - 1.0).abs() < 1e-9, "{k}: {mean}");
            assert!(m.max() >= m.value(0.25));
        }
    }

    #[test]
    fn analytic_targets() {
        let cos = LightKind::ModulatedThermal {
            mod_freq: 60e3,
            mod_depth: 1.0,
            waveform: Waveform::Cosine,
            exponent: 2.0,
        };
        assert!((cos.analytic_g2(0.0, 1.0) - 1.5).abs() < 1e-12);
        assert!((cos.analytic_g2(0.5 / 60e3, 1.0) - 0.5).abs() < 1e-12);
        // |sin|^2 = (1 - cos) / 2 reduces to the cosine waveform.
        let rect = LightKind::ModulatedThermal {
            mod_freq: 60e3,
            mod_depth: 1.0,
            waveform: Waveform::RectifiedSine,
            exponent: 2.0,
        };
        assert!((rect.analytic_g2(0.0, 1.0) - 1.5).abs() < 1e-8);
        assert!((rect.analytic_g2(0.3 / 60e3, 1.0) - cos.analytic_g2(0.3 / 60e3, 1.0)).abs() < 1e-8);
        let th = LightKind::Thermal {
            coherence_time: 1e-9,
            polarized: true,
            spatial: None,
        };
        assert_eq!(th.analytic_g2(0.0, 1.0), 2.0);
    }

    #[test]
    fn mixing_matrix_reproduces_correlations() {
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, -0.2, 0.6, 1.0, 0.1, -0.2, 0.1, 1.0]);
        let l = mixing_matrix(&c);
        let back = &l * l.transpose();
        assert!((back - c).abs().max() < 1e-12);
        let ones = DMatrix::from_element(4, 4, 1.0);
        let l = mixing_matrix(&ones);
        assert_eq!(l.ncols(), 1);
    }

    #[test]
    fn thermal_field_statistics() {
        // Zero-lag moments of the intensities: <I> = 1, <I_a I_b> = 1 + c^2 / p.
        let s = spec(1e-9, 2000, 60);
        for (c, polarized, want) in [(1.0, true, 2.0), (1.0, false, 1.5), (0.0, false, 1.0), (0.6, true, 1.36)] {
            let [a, b] = thermal_field_pair(4e-9, c, polarized, &s, 9).unwrap();
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cross = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n;
            let g = cross / (ma * mb);
            assert!((ma - 1.0).abs() < 0.05 && (mb - 1.0).abs() < 0.05, "{ma} {mb}");
            assert!((g - want).abs() < 0.08, "c={c} polarized={polarized}: {g} vs {want}");
        }
    }

    #[test]
    fn spatial_correlation_limits() {
        let p = SpatialProfile::uniform(200e-6, 546e-9, 0.02);
        assert!((spatial_correlation_from_profile(&p, 0.0) - 1.0).abs() < 1e-12);
        let x_fn1 = 546e-9 * 0.02 / 200e-6;
        assert!(spatial_correlation_from_profile(&p, x_fn1) < 1e-9);
    }

    #[test]
    fn toml_schema() {
        let src: SourceModel = toml::from_str(
            r#"
rate = 2e6
[light]
kind = "mixture"
components = [
  { fraction = 0.62, light = { kind = "incoherent" } },
  { fraction = 0.38, light = { kind = "modulated_thermal", mod_freq = 60e3, mod_depth = 1.0 } },
]
"#,
        )
        .unwrap();
        src.validate().unwrap();
        let back: SourceModel = toml::from_str(&toml::to_string(&src).unwrap()).unwrap();
        assert_eq!(back, src);
    }
}
