//! Binary trace file format.
//!
//! Little-endian layout: magic `G2TR`, version `u16`, channel count `u16`,
//! `N` as `u32`, `M` as `u32`, bin width in femtoseconds as `u64`, followed
//! by `ceil(N / 8)` bytes per (channel, series), channel-major, bins packed
//! LSB-first.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::bins::BinSpec;
use crate::trace::{EventTraceSet, TraceError};

pub const MAGIC: &[u8; 4] = b"G2TR";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum TraceFileError {
    #[error("corrupt trace header: {0}")]
    CorruptHeader(String),
    #[error("truncated trace payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("unsupported trace file version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("trace file has {0} trailing bytes after the payload")]
    TrailingData(u64),
    #[error("trace set cannot be written: {0}")]
    Unrepresentable(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn bytes_per_series(n: usize) -> usize {
    n.div_ceil(8)
}

/// Serializes a trace set into the binary format.
pub fn encode(traces: &EventTraceSet) -> Result<Vec<u8>, TraceFileError> {
    let spec = traces.spec();
    let channels = u16::try_from(traces.channel_count())
        .map_err(|_| TraceFileError::Unrepresentable("more than 65535 channels".into()))?;
    let n = u32::try_from(spec.window_bins).map_err(|_| TraceFileError::Unrepresentable("window too long".into()))?;
    let m = u32::try_from(spec.series_count).map_err(|_| TraceFileError::Unrepresentable("too many series".into()))?;
    let fs = (spec.bin_width * 1e15).round();
    if !(fs >= 1.0 && fs < u64::MAX as f64) {
        return Err(TraceFileError::Unrepresentable(format!(
            "bin width {} s is not a positive whole number of femtoseconds",
            spec.bin_width
        )));
    }
    let bps = bytes_per_series(spec.window_bins);
    let mut out = Vec::with_capacity(HEADER_LEN + traces.channel_count() * spec.series_count * bps);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&(fs as u64).to_le_bytes());
    for ch in 0..traces.channel_count() {
        for s in 0..spec.series_count {
            let bytes = traces.series_words(ch, s).iter().flat_map(|w| w.to_le_bytes());
            out.extend(bytes.take(bps));
        }
    }
    Ok(out)
}

/// Parses the binary format; the whole buffer must be consumed.
pub fn decode(bytes: &[u8]) -> Result<EventTraceSet, TraceFileError> {
    if bytes.len() < HEADER_LEN {
        return Err(TraceFileError::CorruptHeader(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(TraceFileError::CorruptHeader("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != VERSION {
        return Err(TraceFileError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let channels = u16_at(6) as usize;
    let n = u32_at(8) as usize;
    let m = u32_at(12) as usize;
    let fs = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if channels == 0 {
        return Err(TraceFileError::CorruptHeader("zero channels".into()));
    }
    if fs == 0 {
        return Err(TraceFileError::CorruptHeader("zero bin width".into()));
    }
    let spec = BinSpec::new(fs as f64 / 1e15, n, m).map_err(|e| TraceFileError::CorruptHeader(e.to_string()))?;
    let bps = bytes_per_series(n);
    let expected = (channels as u64) * (m as u64) * (bps as u64);
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(TraceFileError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(TraceFileError::TrailingData(found - expected));
    }
    let wps = spec.words_per_series();
    let mut words = Vec::with_capacity(channels * m * wps);
    for chunk in bytes[HEADER_LEN..].chunks_exact(bps) {
        let mut buf = [0u8; 8];
        for w in 0..wps {
            let lo = w * 8;
            let hi = (lo + 8).min(bps);
            buf.fill(0);
            buf[..hi - lo].copy_from_slice(&chunk[lo..hi]);
            words.push(u64::from_le_bytes(buf));
        }
    }
    Ok(EventTraceSet::from_words(spec, channels, words)?)
}

pub fn write_trace_file(path: &Path, traces: &EventTraceSet) -> Result<(), TraceFileError> {
    let bytes = encode(traces)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_trace_file(path: &Path) -> Result<EventTraceSet, TraceFileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::pack_traces;

    fn sample() -> EventTraceSet {
        let spec = BinSpec::new(1e-10, 13, 2).unwrap();
        let a: Vec<u8> = (0..26).map(|i| (i % 3 == 0) as u8).collect();
        let b: Vec<u8> = (0..26).map(|i| (i % 5 == 1) as u8).collect();
        pack_traces(&[a, b], spec).unwrap()
    }

    #[test]
    fn round_trip() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 2 * 2);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.spec().bin_width, 1e-10);
    }

    #[test]
    fn hand_built_fixture() {
        // Two channels, N = 10, M = 1, T = 1 ns.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"G2TR");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&10u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1_000_000u64.to_le_bytes());
        bytes.extend_from_slice(&[0b0000_0101, 0b10]);
        // Padding bits beyond N are ignored.
        bytes.extend_from_slice(&[0b1000_0000, 0b1111_1100]);
        let t = decode(&bytes).unwrap();
        assert_eq!(t.events(0, 0), vec![0, 2, 9]);
        assert_eq!(t.events(1, 0), vec![7]);
        assert_eq!(t.spec().bin_width, 1e-9);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(TraceFileError::TruncatedPayload { .. })
        ));
        assert!(matches!(decode(&bytes[..10]), Err(TraceFileError::CorruptHeader(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(TraceFileError::CorruptHeader(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode(&v2),
            Err(TraceFileError::VersionMismatch { found: 2, expected: 1 })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(TraceFileError::TrailingData(1))));
    }
}
