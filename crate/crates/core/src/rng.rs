//! Deterministic random substreams.
//!
//! Every stochastic stage draws from a ChaCha8 stream keyed by
//! `(seed, stage)` and selected by the global series index, so a series is
//! reproduced bit-for-bit no matter how the run is chunked or scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stage tags keep the streams of different pipeline stages apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Source,
    Detector,
    Background,
    Custom(u64),
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Source => 0x736f_7572_6365,
            Stage::Detector => 0x6465_7465_6374,
            Stage::Background => 0x62_6772_6e64,
            Stage::Custom(t) => t.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x6375_7374,
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed, e.g. for the background run of a scenario.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Random stream for one series of one stage.
pub fn substream(seed: u64, stage: Stage, series: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stage.tag())));
    rng.set_stream(series);
    rng
}

/// Number of failures before the first success of a Bernoulli(p) sequence,
/// given `ln_q = ln(1 - p)`.
pub(crate) fn geometric_gap<R: Rng>(rng: &mut R, ln_q: f64) -> u64 {
    // 1 - u lies in (0, 1], so the log is finite.
    let u: f64 = 1.0 - rng.random::<f64>();
    let g = (u.ln() / ln_q).floor();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        g as u64
    }
}

/// Ascending positions in `[0, n)` of a Bernoulli(p) process, sampled by
/// geometric skipping.
pub(crate) fn bernoulli_positions<R: Rng>(rng: &mut R, p: f64, n: usize, out: &mut Vec<u32>) {
    if p <= 0.0 {
        return;
    }
    if p >= 1.0 {
        out.extend(0..n as u32);
        return;
    }
    let ln_q = (-p).ln_1p();
    let mut pos: u64 = 0;
    loop {
        pos = pos.saturating_add(geometric_gap(rng, ln_q));
        if pos >= n as u64 {
            break;
        }
        out.push(pos as u32);
        pos += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(substream(1, Stage::Source, 7), |r, _: u64| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(substream(1, Stage::Source, 7), |r, _: u64| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(substream(1, Stage::Source, 8), |r, _: u64| Some(r.random())).collect();
        let d: Vec<u64> = (0..4).map(|_| 0).scan(substream(1, Stage::Detector, 7), |r, _: u64| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn bernoulli_skipping_rate() {
        let mut rng = substream(3, Stage::Custom(1), 0);
        let mut out = Vec::new();
        let n = 2_000_000;
        let p = 0.01;
        bernoulli_positions(&mut rng, p, n, &mut out);
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((out.len() as f64 - mean).abs() < 4.0 * sd, "{} vs {}", out.len(), mean);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
    }
}
