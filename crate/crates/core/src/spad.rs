//! SPAD detector response.
//!
//! Per channel and series the detector
//!
//! 1. keeps each photon with probability `pdp` and gives it a uniform
//!    arrival time inside its bin,
//! 2. adds dark counts (Poisson at `dcr`, binarized per bin),
//! 3. enforces a non-paralyzable dead time of `ceil(tau_D / T)` bins: an
//!    event is recorded only if it falls at least that many bins after the
//!    previous recorded event,
//! 4. lets every recorded photon or dark count trigger, with probability
//!    `eps`, one afterpulse delayed by `tau_D + Exp(tau_A)`; afterpulses
//!    obey the dead time but never trigger further afterpulses.
//!
//! Two electrical artifacts then couple channels within a series:
//!
//! * bond-wire crosstalk between wire-adjacent channels: of every pair of
//!   events within `pull_window` of each other, with probability
//!   `wire_injection_prob` one is retimed onto the other plus Gaussian
//!   jitter, which builds a coincidence peak whose height does not depend
//!   on the photon flux;
//! * cable reflections between channels two or more wires apart: for every
//!   pair of events with separation `dt` the later one is deleted with
//!   probability `cable_dip_depth * d(dt)`, with
//!   `d(t) = exp(-|t| / damping) cos^(2k)(pi t / period)` and `k` chosen so
//!   the central dip has full width `cable_dip_width`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bins::BinSpec;
use crate::geometry::ArrayGeometry;
use crate::rng::{geometric_gap, substream, Stage};
use crate::trace::{EventTraceSet, TraceError};

#[derive(Debug, Error, PartialEq)]
pub enum SpadError {
    #[error("invalid detector parameter: {0}")]
    InvalidParameter(String),
    #[error("geometry has {pixels} pixels but the traces have {channels} channels")]
    GeometryMismatch { pixels: usize, channels: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Peak retiming probability for wire-adjacent event pairs. Calibrated so
/// that at T = 1 ns and 6 MHz detected rate the adjacent-pair background
/// peaks at 1.3.
pub const DEFAULT_WIRE_INJECTION_PROB: f64 = 0.0096;

/// Peak deletion probability of the cable dip. Calibrated so that at
/// T = 1 ns the background of pairs two or more wires apart bottoms out at
/// 0.85.
pub const DEFAULT_CABLE_DIP_DEPTH: f64 = 0.19;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrosstalkModel {
    pub wire_injection_prob: f64,
    pub injection_jitter_fwhm: f64,
    /// Largest separation of two events that crosstalk can pull together.
    pub pull_window: f64,
    pub cable_dip_depth: f64,
    pub cable_dip_width: f64,
    pub cable_ring_period: f64,
    pub cable_ring_damping: f64,
    /// Largest event separation at which the dip is evaluated.
    pub cable_dip_extent: f64,
}

impl Default for CrosstalkModel {
    fn default() -> Self {
        CrosstalkModel {
            wire_injection_prob: DEFAULT_WIRE_INJECTION_PROB,
            injection_jitter_fwhm: 320e-12,
            pull_window: 20e-9,
            cable_dip_depth: DEFAULT_CABLE_DIP_DEPTH,
            cable_dip_width: 2e-9,
            cable_ring_period: 4e-9,
            cable_ring_damping: 2e-9,
            cable_dip_extent: 16e-9,
        }
    }
}

impl CrosstalkModel {
    pub fn disabled() -> Self {
        CrosstalkModel {
            wire_injection_prob: 0.0,
            cable_dip_depth: 0.0,
            ..CrosstalkModel::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.wire_injection_prob == 0.0 && self.cable_dip_depth == 0.0
    }

    pub fn validate(&self) -> Result<(), SpadError> {
        let bad = |m: String| Err(SpadError::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.wire_injection_prob) {
            return bad(format!("wire_injection_prob {} outside [0, 1]", self.wire_injection_prob));
        }
        if !(0.0..=1.0).contains(&self.cable_dip_depth) {
            return bad(format!("cable_dip_depth {} outside [0, 1]", self.cable_dip_depth));
        }
        for (name, v) in [
            ("injection_jitter_fwhm", self.injection_jitter_fwhm),
            ("pull_window", self.pull_window),
            ("cable_dip_extent", self.cable_dip_extent),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("cable_dip_width", self.cable_dip_width),
            ("cable_ring_period", self.cable_ring_period),
            ("cable_ring_damping", self.cable_ring_damping),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.cable_dip_width >= self.cable_ring_period {
            return bad("cable_dip_width must be shorter than cable_ring_period".into());
        }
        Ok(())
    }

    fn dip_exponent(&self) -> f64 {
        let half = (PI * self.cable_dip_width / (2.0 * self.cable_ring_period)).cos();
        0.5f64.ln() / (2.0 * half.ln())
    }

    /// Dip shape `d(dt)`, equal to 1 at zero separation.
    pub fn dip_shape(&self, dt: f64) -> f64 {
        if dt.abs() > self.cable_dip_extent {
            return 0.0;
        }
        let c = (PI * dt / self.cable_ring_period).cos();
        (-dt.abs() / self.cable_ring_damping).exp() * (c * c).powf(self.dip_exponent())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpadModel {
    pub pdp: f64,
    pub dead_time: f64,
    pub afterpulse_prob: f64,
    pub afterpulse_decay: f64,
    pub dcr: f64,
    pub crosstalk: CrosstalkModel,
}

impl Default for SpadModel {
    fn default() -> Self {
        SpadModel {
            pdp: 0.25,
            dead_time: 13e-9,
            afterpulse_prob: 0.07,
            afterpulse_decay: 40e-9,
            dcr: 7.0,
            crosstalk: CrosstalkModel::default(),
        }
    }
}

impl SpadModel {
    /// Unit efficiency, no afterpulsing, no dark counts, no artifacts.
    pub fn ideal(dead_time: f64) -> Self {
        SpadModel {
            pdp: 1.0,
            dead_time,
            afterpulse_prob: 0.0,
            afterpulse_decay: 40e-9,
            dcr: 0.0,
            crosstalk: CrosstalkModel::disabled(),
        }
    }

    pub fn without_crosstalk(mut self) -> Self {
        self.crosstalk = CrosstalkModel::disabled();
        self
    }

    pub fn validate(&self) -> Result<(), SpadError> {
        let bad = |m: String| Err(SpadError::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.pdp) {
            return bad(format!("pdp {} outside [0, 1]", self.pdp));
        }
        if !(self.dead_time.is_finite() && self.dead_time > 0.0) {
            return bad(format!("dead_time must be positive, got {}", self.dead_time));
        }
        if !(0.0..1.0).contains(&self.afterpulse_prob) {
            return bad(format!("afterpulse_prob {} outside [0, 1)", self.afterpulse_prob));
        }
        if !(self.afterpulse_decay.is_finite() && self.afterpulse_decay > 0.0) {
            return bad(format!("afterpulse_decay must be positive, got {}", self.afterpulse_decay));
        }
        if !(self.dcr.is_finite() && self.dcr >= 0.0) {
            return bad(format!("dcr must be non-negative, got {}", self.dcr));
        }
        self.crosstalk.validate()
    }

    /// Dead time in whole bins at resolution `bin_width`.
    pub fn dead_bins(&self, spec: &BinSpec) -> usize {
        spec.bins_ceil(self.dead_time).max(1)
    }

    /// Expected recorded rate for an incident photon rate, treating the
    /// dead time as continuous and afterpulses as extra primaries.
    pub fn detected_rate(&self, incident: f64, spec: &BinSpec) -> f64 {
        let tau = self.dead_bins(spec) as f64 * spec.bin_width;
        let r = self.pdp * incident * (1.0 + self.afterpulse_prob) + self.dcr;
        r / (1.0 + r * tau)
    }

    /// Inverse of [`SpadModel::detected_rate`].
    pub fn incident_rate_for(&self, detected: f64, spec: &BinSpec) -> f64 {
        let tau = self.dead_bins(spec) as f64 * spec.bin_width;
        let r = detected / (1.0 - detected * tau);
        ((r - self.dcr) / (self.pdp * (1.0 + self.afterpulse_prob))).max(0.0)
    }
}

/// Event counts gathered while detecting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectStats {
    pub incident_photons: u64,
    /// Photon and dark events recorded by the detector.
    pub triggers: u64,
    pub dark_counts: u64,
    pub afterpulses_scheduled: u64,
    pub afterpulses: u64,
    /// Photon, dark or afterpulse events lost to the dead time.
    pub dead_time_losses: u64,
    pub crosstalk_moves: u64,
    pub dip_deletions: u64,
}

impl DetectStats {
    fn add(mut self, o: DetectStats) -> Self {
        self.incident_photons += o.incident_photons;
        self.triggers += o.triggers;
        self.dark_counts += o.dark_counts;
        self.afterpulses_scheduled += o.afterpulses_scheduled;
        self.afterpulses += o.afterpulses;
        self.dead_time_losses += o.dead_time_losses;
        self.crosstalk_moves += o.crosstalk_moves;
        self.dip_deletions += o.dip_deletions;
        self
    }

    /// Recorded afterpulses per recorded photon or dark event.
    pub fn afterpulse_fraction(&self) -> f64 {
        self.afterpulses as f64 / self.triggers as f64
    }
}

/// Event time in bin units: integer bin plus offset in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Event {
    bin: u32,
    frac: f64,
}

impl Event {
    fn time(&self) -> f64 {
        self.bin as f64 + self.frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Origin {
    Photon,
    Dark,
    Afterpulse,
}

struct Params {
    pdp: f64,
    dead_bins: u32,
    eps: f64,
    ap_delay_bins: f64,
    ap_decay: Option<Exp<f64>>,
    dark_ln_q: Option<f64>,
    window: u32,
    q_pull: f64,
    pull_bins: f64,
    jitter: Option<Normal<f64>>,
    dip_depth: f64,
    dip_extent_bins: f64,
    crosstalk: CrosstalkModel,
    bin_width: f64,
    adjacent: Vec<(usize, usize)>,
    distant: Vec<(usize, usize)>,
}

impl Params {
    fn new(model: &SpadModel, spec: &BinSpec, geometry: &ArrayGeometry) -> Self {
        let t = spec.bin_width;
        let n = geometry.pixel_count();
        let mut adjacent = Vec::new();
        let mut distant = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if geometry.wire_adjacent(i, j) {
                    adjacent.push((i, j));
                } else {
                    distant.push((i, j));
                }
            }
        }
        let p_dark = -(-model.dcr * t).exp_m1();
        let sigma = model.crosstalk.injection_jitter_fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt()) / t;
        Params {
            pdp: model.pdp,
            dead_bins: model.dead_bins(spec) as u32,
            eps: model.afterpulse_prob,
            ap_delay_bins: model.dead_time / t,
            ap_decay: Exp::new(t / model.afterpulse_decay).ok(),
            dark_ln_q: (p_dark > 0.0).then(|| (-p_dark).ln_1p()),
            window: spec.window_bins as u32,
            q_pull: model.crosstalk.wire_injection_prob,
            pull_bins: model.crosstalk.pull_window / t,
            jitter: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite jitter")),
            dip_depth: model.crosstalk.cable_dip_depth,
            dip_extent_bins: model.crosstalk.cable_dip_extent / t,
            crosstalk: model.crosstalk.clone(),
            bin_width: t,
            adjacent,
            distant,
        }
    }

    /// One channel through efficiency, dark counts, dead time and afterpulsing.
    fn channel(&self, photons: &[u32], rng: &mut ChaCha8Rng, stats: &mut DetectStats) -> Vec<Event> {
        stats.incident_photons += photons.len() as u64;
        let mut heap: BinaryHeap<Reverse<(u32, u64, Origin)>> = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<_>, e: Event, o: Origin| heap.push(Reverse((e.bin, e.frac.to_bits(), o)));
        for &b in photons {
            if rng.random::<f64>() < self.pdp {
                push(&mut heap, Event { bin: b, frac: rng.random() }, Origin::Photon);
            }
        }
        if let Some(ln_q) = self.dark_ln_q {
            let mut pos: u64 = 0;
            loop {
                pos = pos.saturating_add(geometric_gap(rng, ln_q));
                if pos >= self.window as u64 {
                    break;
                }
                push(&mut heap, Event { bin: pos as u32, frac: rng.random() }, Origin::Dark);
                pos += 1;
            }
        }
        let mut out: Vec<Event> = Vec::new();
        let mut next_free: u64 = 0;
        while let Some(Reverse((bin, bits, origin))) = heap.pop() {
            let e = Event {
                bin,
                frac: f64::from_bits(bits),
            };
            if (bin as u64) < next_free {
                stats.dead_time_losses += 1;
                continue;
            }
            out.push(e);
            next_free = bin as u64 + self.dead_bins as u64;
            match origin {
                Origin::Afterpulse => stats.afterpulses += 1,
                Origin::Dark => {
                    stats.dark_counts += 1;
                    stats.triggers += 1;
                }
                Origin::Photon => stats.triggers += 1,
            }
            if origin != Origin::Afterpulse && self.eps > 0.0 && rng.random::<f64>() < self.eps {
                stats.afterpulses_scheduled += 1;
                let decay = self.ap_decay.map(|d| d.sample(rng)).unwrap_or(0.0);
                let t = e.time() + self.ap_delay_bins + decay;
                let ap_bin = (t.floor() as u64).max(bin as u64 + self.dead_bins as u64);
                if ap_bin < self.window as u64 {
                    let frac = if ap_bin as f64 > t.floor() { 0.0 } else { t - t.floor() };
                    push(&mut heap, Event { bin: ap_bin as u32, frac }, Origin::Afterpulse);
                }
            }
        }
        out
    }

    fn fits_dead_time(&self, events: &[Event], skip: usize, bin: u32) -> bool {
        let d = self.dead_bins;
        let k = events.partition_point(|e| e.bin < bin);
        let near = |idx: usize| idx != skip && events[idx].bin.abs_diff(bin) < d;
        !(k < events.len() && near(k)) && !(k > 0 && near(k - 1)) && !(k + 1 < events.len() && near(k + 1)) && !(k >= 2 && near(k - 2))
    }

    fn crosstalk(&self, chans: &mut [Vec<Event>], rng: &mut ChaCha8Rng, stats: &mut DetectStats) {
        if self.q_pull > 0.0 {
            for &(i, j) in &self.adjacent {
                self.pull_pair(chans, i, j, rng, stats);
            }
        }
        if self.dip_depth > 0.0 {
            for &(i, j) in &self.distant {
                self.dip_pair(chans, i, j, rng, stats);
            }
        }
    }

    fn pull_pair(&self, chans: &mut [Vec<Event>], i: usize, j: usize, rng: &mut ChaCha8Rng, stats: &mut DetectStats) {
        if chans[i].is_empty() || chans[j].is_empty() {
            return;
        }
        let mut used_i = vec![false; chans[i].len()];
        let mut used_j = vec![false; chans[j].len()];
        let mut moves: Vec<(usize, usize, f64)> = Vec::new();
        let mut lo = 0;
        for (a, ea) in chans[i].iter().enumerate() {
            let ta = ea.time();
            while lo < chans[j].len() && chans[j][lo].time() < ta - self.pull_bins {
                lo += 1;
            }
            let mut b = lo;
            while b < chans[j].len() && chans[j][b].time() <= ta + self.pull_bins {
                if !used_i[a] && !used_j[b] && rng.random::<f64>() < self.q_pull {
                    used_i[a] = true;
                    used_j[b] = true;
                    let jitter = self.jitter.map(|n| n.sample(rng)).unwrap_or(0.0);
                    if rng.random::<bool>() {
                        moves.push((j, b, ta + jitter));
                    } else {
                        moves.push((i, a, chans[j][b].time() + jitter));
                    }
                }
                b += 1;
            }
        }
        // Later moves index into lists that earlier moves may have reordered,
        // so track events by their original time.
        let originals: Vec<(usize, Event)> = moves.iter().map(|&(c, k, _)| (c, chans[c][k])).collect();
        for ((c, _, t), (_, orig)) in moves.into_iter().zip(originals) {
            if t < 0.0 || t >= self.window as f64 {
                continue;
            }
            let list = &mut chans[c];
            let Some(k) = list.iter().position(|e| *e == orig) else {
                continue;
            };
            let bin = t.floor() as u32;
            if !self.fits_dead_time(list, k, bin) {
                continue;
            }
            list.remove(k);
            let e = Event {
                bin,
                frac: t - t.floor(),
            };
            let at = list.partition_point(|x| x.bin < bin);
            list.insert(at, e);
            stats.crosstalk_moves += 1;
        }
    }

    fn dip_pair(&self, chans: &mut [Vec<Event>], i: usize, j: usize, rng: &mut ChaCha8Rng, stats: &mut DetectStats) {
        if chans[i].is_empty() || chans[j].is_empty() {
            return;
        }
        let mut del_i = vec![false; chans[i].len()];
        let mut del_j = vec![false; chans[j].len()];
        let mut lo = 0;
        for (a, ea) in chans[i].iter().enumerate() {
            let ta = ea.time();
            while lo < chans[j].len() && chans[j][lo].time() < ta - self.dip_extent_bins {
                lo += 1;
            }
            let mut b = lo;
            while b < chans[j].len() && chans[j][b].time() <= ta + self.dip_extent_bins {
                if !del_i[a] && !del_j[b] {
                    let dt = (chans[j][b].time() - ta) * self.bin_width;
                    let p = self.dip_depth * self.crosstalk.dip_shape(dt);
                    if p > 0.0 && rng.random::<f64>() < p {
                        if dt >= 0.0 {
                            del_j[b] = true;
                        } else {
                            del_i[a] = true;
                        }
                        stats.dip_deletions += 1;
                    }
                }
                b += 1;
            }
        }
        let mut k = 0;
        chans[i].retain(|_| {
            k += 1;
            !del_i[k - 1]
        });
        let mut k = 0;
        chans[j].retain(|_| {
            k += 1;
            !del_j[k - 1]
        });
    }

    fn series(&self, photons: &[Vec<u32>], seed: u64, series: u64) -> (Vec<Vec<u32>>, DetectStats) {
        let mut rng = substream(seed, Stage::Detector, series);
        let mut stats = DetectStats::default();
        let mut chans: Vec<Vec<Event>> = photons.iter().map(|p| self.channel(p, &mut rng, &mut stats)).collect();
        self.crosstalk(&mut chans, &mut rng, &mut stats);
        let bins = chans.into_iter().map(|c| c.into_iter().map(|e| e.bin).collect()).collect();
        (bins, stats)
    }
}

/// Detector output for ideal photon bins; series are numbered from zero.
pub fn detect(ideal: &EventTraceSet, model: &SpadModel, geometry: &ArrayGeometry, seed: u64) -> Result<EventTraceSet, SpadError> {
    detect_with_stats(ideal, model, geometry, seed, 0).map(|(t, _)| t)
}

/// Detector output and event statistics; `first_series` is the global index
/// of the first series in `ideal`, which selects its random stream.
pub fn detect_with_stats(
    ideal: &EventTraceSet,
    model: &SpadModel,
    geometry: &ArrayGeometry,
    seed: u64,
    first_series: u64,
) -> Result<(EventTraceSet, DetectStats), SpadError> {
    model.validate()?;
    if geometry.pixel_count() != ideal.channel_count() {
        return Err(SpadError::GeometryMismatch {
            pixels: geometry.pixel_count(),
            channels: ideal.channel_count(),
        });
    }
    let spec = *ideal.spec();
    let params = Params::new(model, &spec, geometry);
    let channels = ideal.channel_count();
    let results: Vec<(Vec<Vec<u32>>, DetectStats)> = (0..spec.series_count)
        .into_par_iter()
        .map(|s| {
            let photons: Vec<Vec<u32>> = (0..channels).map(|c| ideal.events(c, s)).collect();
            params.series(&photons, seed, first_series + s as u64)
        })
        .collect();
    let stats = results.iter().fold(DetectStats::default(), |acc, r| acc.add(r.1));
    let set = EventTraceSet::from_events(spec, channels, |c, s| &results[s].0[c])?.with_geometry(geometry.clone())?;
    Ok((set, stats))
}

pub(crate) fn merge_stats(a: DetectStats, b: DetectStats) -> DetectStats {
    a.add(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::{generate, LightKind, SourceModel};

    fn spec(t: f64, n: usize, m: usize) -> BinSpec {
        BinSpec::new(t, n, m).unwrap()
    }

    #[test]
    fn identity_configuration() {
        let s = spec(1e-9, 200, 1);
        let g = ArrayGeometry::row_of(2);
        let a: Vec<u32> = vec![3, 30, 90, 150];
        let b: Vec<u32> = vec![0, 17, 199];
        let lists = [a, b];
        let ideal = EventTraceSet::from_events(s, 2, |c, _| &lists[c]).unwrap();
        let out = detect(&ideal, &SpadModel::ideal(13e-9), &g, 1).unwrap();
        assert_eq!(out.unpack(), ideal.unpack());
    }

    #[test]
    fn dead_time_and_saturation() {
        let s = spec(1e-9, 3000, 20);
        let g = ArrayGeometry::row_of(3);
        let bright = SourceModel::new(4e8, LightKind::Incoherent);
        let ideal = generate(&bright, &s, &g, 3).unwrap();
        let model = SpadModel {
            pdp: 1.0,
            ..SpadModel::default()
        };
        let out = detect(&ideal, &model, &g, 3).unwrap();
        let d = model.dead_bins(&s) as u32;
        for c in 0..3 {
            for m in 0..20 {
                let ev = out.events(c, m);
                assert!(ev.windows(2).all(|w| w[1] - w[0] >= d));
                assert!(ev.len() as f64 <= 3000.0 / d as f64 + 1.0);
            }
        }
    }

    #[test]
    fn dip_shape_profile() {
        let x = CrosstalkModel::default();
        assert!((x.dip_exponent() - 1.0).abs() < 1e-12);
        assert_eq!(x.dip_shape(0.0), 1.0);
        // Half maximum of the cosine lobe at half the width, before damping.
        let half = x.dip_shape(1e-9) / (-0.5f64).exp();
        assert!((half - 0.5).abs() < 1e-12);
        assert!(x.dip_shape(2e-9) < 1e-12);
        assert_eq!(x.dip_shape(20e-9), 0.0);
    }

    #[test]
    fn rate_inversion_round_trip() {
        let s = spec(1e-9, 5000, 1);
        let m = SpadModel::default();
        let inc = m.incident_rate_for(6e6, &s);
        assert!((m.detected_rate(inc, &s) - 6e6).abs() < 1e-3);
    }

    #[test]
    fn model_toml() {
        let m: SpadModel = toml::from_str("pdp = 0.3\n[crosstalk]\ncable_dip_depth = 0.0\n").unwrap();
        assert_eq!(m.pdp, 0.3);
        assert_eq!(m.dead_time, 13e-9);
        assert_eq!(m.crosstalk.cable_dip_depth, 0.0);
        assert_eq!(m.crosstalk.wire_injection_prob, DEFAULT_WIRE_INJECTION_PROB);
        assert!(SpadModel {
            pdp: 1.5,
            ..SpadModel::default()
        }
        .validate()
        .is_err());
    }
}
