use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorrelogramError {
    #[error("correlograms are not compatible: {0}")]
    Mismatch(String),
    #[error("{0} correlograms carry derived values and cannot be merged")]
    NotMergeable(CorrelogramKind),
    #[error("malformed correlogram CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Provenance of a correlogram's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelogramKind {
    Raw,
    Background,
    Corrected,
    Autocorrelation,
}

impl CorrelogramKind {
    /// Kinds whose g2 is a pure function of the integer tallies.
    pub fn is_tally(self) -> bool {
        !matches!(self, CorrelogramKind::Corrected)
    }
}

impl fmt::Display for CorrelogramKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrelogramKind::Raw => "raw",
            CorrelogramKind::Background => "background",
            CorrelogramKind::Corrected => "corrected",
            CorrelogramKind::Autocorrelation => "autocorrelation",
        })
    }
}

impl FromStr for CorrelogramKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(CorrelogramKind::Raw),
            "background" => Ok(CorrelogramKind::Background),
            "corrected" => Ok(CorrelogramKind::Corrected),
            "autocorrelation" => Ok(CorrelogramKind::Autocorrelation),
            other => Err(format!("unknown correlogram kind `{other}`")),
        }
    }
}

pub const CSV_HEADER: &str = "lag_bins,lag_seconds,g2,coincidences,ki,kj,valid_bins,kind";

/// Normalized coincidence estimate per lag together with the integer
/// tallies it was computed from.
///
/// For tally kinds `g2[l] = valid_bins[l] * coincidences[l] / (ki[l] * kj[l])`
/// exactly, and a lag with a zero denominator has no value at all.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlogram {
    channels: (usize, usize),
    kind: CorrelogramKind,
    bin_width: f64,
    window_bins: usize,
    series: u64,
    lags: Vec<i64>,
    coincidences: Vec<u64>,
    ki: Vec<u64>,
    kj: Vec<u64>,
    valid_bins: Vec<u64>,
    g2: Vec<Option<f64>>,
    sigma: Vec<Option<f64>>,
}

/// Tally-derived estimate; `None` when either channel has no counts.
pub fn g2_from_tallies(coincidences: u64, ki: u64, kj: u64, valid_bins: u64) -> Option<f64> {
    let den = ki as u128 * kj as u128;
    if den == 0 {
        return None;
    }
    let num = valid_bins as u128 * coincidences as u128;
    Some(num as f64 / den as f64)
}

/// Poisson error on the coincidence tally; one-count scale when empty.
fn sigma_from_tallies(coincidences: u64, ki: u64, kj: u64, valid_bins: u64) -> Option<f64> {
    let one = g2_from_tallies(1, ki, kj, valid_bins)?;
    Some(one * (coincidences.max(1) as f64).sqrt())
}

impl Correlogram {
    /// Zero-tally correlogram: the identity element of [`merge_partial`].
    pub fn empty(channels: (usize, usize), kind: CorrelogramKind, bin_width: f64, window_bins: usize, lags: Vec<i64>) -> Self {
        let n = lags.len();
        Correlogram {
            channels,
            kind,
            bin_width,
            window_bins,
            series: 0,
            lags,
            coincidences: vec![0; n],
            ki: vec![0; n],
            kj: vec![0; n],
            valid_bins: vec![0; n],
            g2: vec![None; n],
            sigma: vec![None; n],
        }
    }

    /// Correlogram whose values are computed from the given tallies.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tallies(
        channels: (usize, usize),
        kind: CorrelogramKind,
        bin_width: f64,
        window_bins: usize,
        series: u64,
        lags: Vec<i64>,
        coincidences: Vec<u64>,
        ki: Vec<u64>,
        kj: Vec<u64>,
        valid_bins: Vec<u64>,
    ) -> Result<Self, CorrelogramError> {
        if !kind.is_tally() {
            return Err(CorrelogramError::Mismatch(format!("{kind} values are not tally-derived")));
        }
        let n = lags.len();
        if [coincidences.len(), ki.len(), kj.len(), valid_bins.len()].iter().any(|&l| l != n) {
            return Err(CorrelogramError::Mismatch("tally vectors differ in length".into()));
        }
        let mut c = Correlogram {
            channels,
            kind,
            bin_width,
            window_bins,
            series,
            lags,
            coincidences,
            ki,
            kj,
            valid_bins,
            g2: Vec::new(),
            sigma: Vec::new(),
        };
        c.recompute();
        Ok(c)
    }

    /// Same lags and tallies with explicitly supplied values.
    pub(crate) fn derived(&self, kind: CorrelogramKind, g2: Vec<Option<f64>>, sigma: Vec<Option<f64>>) -> Self {
        debug_assert_eq!(g2.len(), self.lags.len());
        Correlogram {
            kind,
            g2,
            sigma,
            ..self.clone()
        }
    }

    /// Relabels a tally correlogram, e.g. a raw run used as background.
    pub fn with_kind(mut self, kind: CorrelogramKind) -> Result<Self, CorrelogramError> {
        if !(self.kind.is_tally() && kind.is_tally()) {
            return Err(CorrelogramError::NotMergeable(CorrelogramKind::Corrected));
        }
        self.kind = kind;
        Ok(self)
    }

    fn recompute(&mut self) {
        let n = self.lags.len();
        self.g2 = (0..n)
            .map(|l| g2_from_tallies(self.coincidences[l], self.ki[l], self.kj[l], self.valid_bins[l]))
            .collect();
        self.sigma = (0..n)
            .map(|l| sigma_from_tallies(self.coincidences[l], self.ki[l], self.kj[l], self.valid_bins[l]))
            .collect();
    }

    pub fn channels(&self) -> (usize, usize) {
        self.channels
    }

    pub fn kind(&self) -> CorrelogramKind {
        self.kind
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn window_bins(&self) -> usize {
        self.window_bins
    }

    /// Number of series accumulated.
    pub fn series(&self) -> u64 {
        self.series
    }

    pub fn lags(&self) -> &[i64] {
        &self.lags
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn coincidences(&self) -> &[u64] {
        &self.coincidences
    }

    pub fn ki(&self) -> &[u64] {
        &self.ki
    }

    pub fn kj(&self) -> &[u64] {
        &self.kj
    }

    pub fn valid_bins(&self) -> &[u64] {
        &self.valid_bins
    }

    pub fn g2(&self) -> &[Option<f64>] {
        &self.g2
    }

    /// One-standard-deviation statistical error per lag.
    pub fn sigma(&self) -> &[Option<f64>] {
        &self.sigma
    }

    pub fn lag_seconds(&self) -> Vec<f64> {
        self.lags.iter().map(|&l| l as f64 * self.bin_width).collect()
    }

    pub fn index_of(&self, lag: i64) -> Option<usize> {
        self.lags.iter().position(|&l| l == lag)
    }

    pub fn value_at(&self, lag: i64) -> Option<f64> {
        self.index_of(lag).and_then(|i| self.g2[i])
    }

    pub fn sigma_at(&self, lag: i64) -> Option<f64> {
        self.index_of(lag).and_then(|i| self.sigma[i])
    }

    /// Lags flagged as undefined (zero denominator).
    pub fn missing_lags(&self) -> Vec<i64> {
        self.lags.iter().zip(&self.g2).filter(|(_, g)| g.is_none()).map(|(&l, _)| l).collect()
    }

    /// Keeps only the lags accepted by `keep`.
    pub fn restrict<F: Fn(i64) -> bool>(&self, keep: F) -> Correlogram {
        let idx: Vec<usize> = (0..self.lags.len()).filter(|&i| keep(self.lags[i])).collect();
        let pick_u = |v: &[u64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_f = |v: &[Option<f64>]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Correlogram {
            channels: self.channels,
            kind: self.kind,
            bin_width: self.bin_width,
            window_bins: self.window_bins,
            series: self.series,
            lags: idx.iter().map(|&i| self.lags[i]).collect(),
            coincidences: pick_u(&self.coincidences),
            ki: pick_u(&self.ki),
            kj: pick_u(&self.kj),
            valid_bins: pick_u(&self.valid_bins),
            g2: pick_f(&self.g2),
            sigma: pick_f(&self.sigma),
        }
    }

    pub(crate) fn check_compatible(&self, other: &Correlogram) -> Result<(), CorrelogramError> {
        if self.channels != other.channels {
            return Err(CorrelogramError::Mismatch(format!(
                "channel pairs {:?} and {:?}",
                self.channels, other.channels
            )));
        }
        if self.bin_width != other.bin_width || self.window_bins != other.window_bins {
            return Err(CorrelogramError::Mismatch("binning differs".into()));
        }
        if self.lags != other.lags {
            return Err(CorrelogramError::Mismatch("lag grids differ".into()));
        }
        Ok(())
    }

    /// Adds the tallies of `other` into `self`.
    pub fn merge(&mut self, other: &Correlogram) -> Result<(), CorrelogramError> {
        if !self.kind.is_tally() {
            return Err(CorrelogramError::NotMergeable(self.kind));
        }
        if self.kind != other.kind {
            return Err(CorrelogramError::Mismatch(format!("kinds {} and {}", self.kind, other.kind)));
        }
        self.check_compatible(other)?;
        for i in 0..self.lags.len() {
            self.coincidences[i] += other.coincidences[i];
            self.ki[i] += other.ki[i];
            self.kj[i] += other.kj[i];
            self.valid_bins[i] += other.valid_bins[i];
        }
        self.series += other.series;
        self.recompute();
        Ok(())
    }

    /// Writes the CSV table (header plus one row per lag).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for i in 0..self.lags.len() {
            let g2 = match self.g2[i] {
                Some(v) => v.to_string(),
                None => "NaN".to_string(),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.lags[i],
                self.lags[i] as f64 * self.bin_width,
                g2,
                self.coincidences[i],
                self.ki[i],
                self.kj[i],
                self.valid_bins[i],
                self.kind
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Parses a table written by [`Correlogram::write_csv`].
    ///
    /// The channel pair, window length and series count are not part of the
    /// table and must be supplied.
    pub fn from_csv(text: &str, channels: (usize, usize), window_bins: usize, series: u64) -> Result<Self, CorrelogramError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(CorrelogramError::Csv {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
        let mut lags = Vec::new();
        let mut secs = Vec::new();
        let mut g2 = Vec::new();
        let (mut c, mut ki, mut kj, mut v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut kind = None;
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| CorrelogramError::Csv { line: n + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(format!("expected 8 fields, got {}", f.len())));
            }
            let int = |s: &str| s.trim().parse::<u64>().map_err(|e| err(e.to_string()));
            lags.push(f[0].trim().parse::<i64>().map_err(|e| err(e.to_string()))?);
            secs.push(f[1].trim().parse::<f64>().map_err(|e| err(e.to_string()))?);
            let g: f64 = f[2].trim().parse().map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
            g2.push(if g.is_nan() { None } else { Some(g) });
            c.push(int(f[3])?);
            ki.push(int(f[4])?);
            kj.push(int(f[5])?);
            v.push(int(f[6])?);
            let k: CorrelogramKind = f[7].trim().parse().map_err(err)?;
            match kind {
                None => kind = Some(k),
                Some(prev) if prev != k => return Err(err("mixed kinds".into())),
                _ => {}
            }
        }
        let kind = kind.unwrap_or(CorrelogramKind::Raw);
        let bin_width = lags
            .iter()
            .zip(&secs)
            .find(|(&l, _)| l != 0)
            .map(|(&l, &s)| s / l as f64)
            .unwrap_or(f64::NAN);
        let n = lags.len();
        let mut out = Correlogram {
            channels,
            kind,
            bin_width,
            window_bins,
            series,
            lags,
            coincidences: c,
            ki,
            kj,
            valid_bins: v,
            g2,
            sigma: vec![None; n],
        };
        if kind.is_tally() {
            out.recompute();
        }
        Ok(out)
    }
}

/// Component-wise sum of two partial correlograms.
pub fn merge_partial(a: &Correlogram, b: &Correlogram) -> Result<Correlogram, CorrelogramError> {
    let mut out = a.clone();
    out.merge(b)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tallies(seed: &[(u64, u64, u64, u64)]) -> Correlogram {
        let lags: Vec<i64> = (0..seed.len() as i64).map(|l| l - 1).collect();
        Correlogram::from_tallies(
            (0, 1),
            CorrelogramKind::Raw,
            1e-9,
            100,
            1,
            lags,
            seed.iter().map(|t| t.0).collect(),
            seed.iter().map(|t| t.1).collect(),
            seed.iter().map(|t| t.2).collect(),
            seed.iter().map(|t| t.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_denominator_is_missing() {
        let c = tallies(&[(0, 0, 5, 99), (1, 2, 2, 3)]);
        assert_eq!(c.g2()[0], None);
        assert_eq!(c.g2()[1], Some(0.75));
        assert_eq!(c.missing_lags(), vec![-1]);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let c = tallies(&[(3, 10, 12, 99), (1, 2, 2, 3)]);
        let e = Correlogram::empty((0, 1), CorrelogramKind::Raw, 1e-9, 100, c.lags().to_vec());
        assert_eq!(merge_partial(&c, &e).unwrap(), c);
        assert_eq!(merge_partial(&e, &c).unwrap(), c);
    }

    #[test]
    fn merge_rejects_mismatch() {
        let a = tallies(&[(1, 1, 1, 1)]);
        let mut b = a.clone();
        b.channels = (0, 2);
        assert!(matches!(merge_partial(&a, &b), Err(CorrelogramError::Mismatch(_))));
        let mut c = a.clone();
        c.kind = CorrelogramKind::Background;
        assert!(merge_partial(&a, &c).is_err());
        let d = a.derived(CorrelogramKind::Corrected, vec![Some(1.0)], vec![None]);
        assert_eq!(merge_partial(&d, &d), Err(CorrelogramError::NotMergeable(CorrelogramKind::Corrected)));
    }

    #[test]
    fn csv_round_trip() {
        let c = tallies(&[(3, 10, 12, 99), (0, 0, 2, 3), (7, 8, 9, 10)]);
        let text = c.to_csv_string();
        assert!(text.starts_with(CSV_HEADER));
        assert!(text.contains(",NaN,"));
        let back = Correlogram::from_csv(&text, (0, 1), 100, 1).unwrap();
        assert_eq!(back, c);
    }

    fn arb_tallies(n: usize) -> impl Strategy<Value = Vec<(u64, u64, u64, u64)>> {
        proptest::collection::vec((0u64..1000, 0u64..1000, 0u64..1000, 0u64..100_000), n)
    }

    proptest! {
        #[test]
        fn merge_is_commutative_and_associative(a in arb_tallies(4), b in arb_tallies(4), c in arb_tallies(4)) {
            let (a, b, c) = (tallies(&a), tallies(&b), tallies(&c));
            prop_assert_eq!(merge_partial(&a, &b).unwrap(), merge_partial(&b, &a).unwrap());
            let left = merge_partial(&merge_partial(&a, &b).unwrap(), &c).unwrap();
            let right = merge_partial(&a, &merge_partial(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn g2_is_nonnegative(a in arb_tallies(6)) {
            let c = tallies(&a);
            prop_assert!(c.g2().iter().flatten().all(|&g| g >= 0.0));
        }
    }
}
