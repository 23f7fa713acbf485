//! Simulation and analysis of second-order photon correlations measured
//! with SPAD arrays.
//!
//! The pipeline is: a [`sources::SourceModel`] generates ideal photon bins,
//! [`spad::SpadModel`] turns them into realistic detector output, the
//! [`correlator`] computes normalized correlograms, and [`physics`] holds the
//! analytic references, bias corrections and fits. [`scenario`] strings the
//! stages together for batch runs.

pub mod bins;
pub mod correlator;
pub mod correlogram;
pub mod geometry;
pub mod measure;
pub mod physics;
pub mod rng;
pub mod scenario;
pub mod sources;
pub mod spad;
pub mod trace;
pub mod tracefile;

pub use bins::BinSpec;
pub use correlator::{autocorrelate, correlate_all_pairs, correlate_pair, correlate_pairs, LagRange};
pub use correlogram::{merge_partial, Correlogram, CorrelogramKind};
pub use geometry::ArrayGeometry;
pub use trace::{pack_traces, EventTraceSet, TraceError};
