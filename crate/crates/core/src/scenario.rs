//! Batch experiment runs from a TOML description.
//!
//! A scenario names the pipeline to run, the source, detector, binning and
//! lag grid, and writes an artifact directory:
//!
//! - `traces.g2tr`: the first `keep_series` detector series
//! - `correlograms/`: one CSV per pair and kind, plus `index.csv`
//! - `summary.csv`: zero-lag and peak values of the final correlograms
//! - scenario tables (`mixture.csv`, `vcz_pairs.csv`, ...) and `fit.toml`
//! - `manifest.toml`: config hash, seed, version and artifact hashes
//!
//! The manifest is written last through a rename, so a directory without
//! one holds an incomplete run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bins::BinSpec;
use crate::correlator::{all_pairs, LagRange};
use crate::correlogram::{Correlogram, CorrelogramKind};
use crate::geometry::ArrayGeometry;
use crate::measure::{measure_background_pairs, Measurement, MeasurementResult};
use crate::physics::corrections::correct_cross;
use crate::physics::fit::{fit_cosine, fit_near_field, write_fit_points, CosineFit, FitError, FitPoint, FitResult, NearFieldOptions};
use crate::physics::vcz::cosine_visibility;
use crate::rng::derive_seed;
use crate::sources::{LightKind, MixtureComponent, SourceModel};
use crate::spad::{DetectStats, SpadModel};
use crate::trace::EventTraceSet;
use crate::tracefile::{read_trace_file, write_trace_file, TraceFileError, VERSION as TRACE_VERSION};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    TraceFile { path: PathBuf, source: TraceFileError },
}

impl ScenarioError {
    pub fn is_config(&self) -> bool {
        matches!(self, ScenarioError::Config(_))
    }
}

fn config<E: std::fmt::Display>(e: E) -> ScenarioError {
    ScenarioError::Config(e.to_string())
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> ScenarioError {
    move |e| ScenarioError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Detector response to flat light on every pair.
    BackgroundMap,
    /// Longitudinal-mode beating of a multimode laser, cosine fit.
    MultimodeBeat,
    /// Externally modulated chaotic light.
    ModulatedThermal,
    /// Chaotic light diluted by flat light at several fractions.
    MixtureSweep,
    /// Zero-lag maxima over the array baselines and a near-field fit.
    VczSweep,
    /// The measurement pipeline without figure-specific outputs.
    Custom,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::BackgroundMap => "background_map",
            ScenarioKind::MultimodeBeat => "multimode_beat",
            ScenarioKind::ModulatedThermal => "modulated_thermal",
            ScenarioKind::MixtureSweep => "mixture_sweep",
            ScenarioKind::VczSweep => "vcz_sweep",
            ScenarioKind::Custom => "custom",
        }
    }
}

fn default_keep() -> usize {
    8
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.38, 0.5, 0.75, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioOptions {
    /// Channel pairs; the default depends on the scenario.
    pub pairs: Option<Vec<[usize; 2]>>,
    /// Correlate the photon bins directly, without a detector model.
    pub ideal_detector: bool,
    /// Measure a background and correct cross pairs; on by default unless
    /// the detector is ideal or the scenario is `background_map`.
    pub correct: Option<bool>,
    /// Incident rate of the background run; defaults to the source rate.
    pub background_rate: Option<f64>,
    pub background_series: Option<usize>,
    #[serde(default = "default_keep")]
    pub keep_series: usize,
    /// Chaotic intensity fractions of `mixture_sweep`.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Period search range in seconds for the cosine fit.
    pub period_range: Option<[f64; 2]>,
    /// Zero-delay excess of a fully coherent pair used by the near-field
    /// fit; defaults to 0.5 for unpolarized and 1 for polarized light.
    pub fit_excess_scale: Option<f64>,
    /// Second binning for `modulated_thermal`; the zero-lag value of both
    /// runs is reported side by side.
    pub compare_bins: Option<BinSpec>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            pairs: None,
            ideal_detector: false,
            correct: None,
            background_rate: None,
            background_series: None,
            keep_series: default_keep(),
            fractions: default_fractions(),
            period_range: None,
            fit_excess_scale: None,
            compare_bins: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    pub bins: BinSpec,
    pub lags: LagRange,
    #[serde(default)]
    pub geometry: ArrayGeometry,
    pub source: SourceModel,
    /// Detector model; the default SPAD when absent.
    #[serde(default)]
    pub spad: Option<SpadModel>,
    #[serde(default)]
    pub options: ScenarioOptions,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    /// Paths relative to `out_dir`, manifest last.
    pub artifacts: Vec<String>,
    /// False when any fit failed to converge; artifacts are still written.
    pub converged: bool,
    pub messages: Vec<String>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(config)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Scenario::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn detector(&self) -> Option<SpadModel> {
        if self.options.ideal_detector {
            None
        } else {
            Some(self.spad.clone().unwrap_or_default())
        }
    }

    fn corrects(&self) -> bool {
        self.detector().is_some() && self.options.correct.unwrap_or(self.name != ScenarioKind::BackgroundMap)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        if let Some(p) = &self.options.pairs {
            return p.iter().map(|&[i, j]| (i, j)).collect();
        }
        match self.name {
            ScenarioKind::BackgroundMap | ScenarioKind::VczSweep | ScenarioKind::Custom => all_pairs(self.geometry.pixel_count()),
            ScenarioKind::MultimodeBeat => {
                let n = self.geometry.pixel_count();
                if n >= 3 {
                    vec![(0, 1), (0, 2)]
                } else {
                    vec![(0, 1)]
                }
            }
            ScenarioKind::ModulatedThermal | ScenarioKind::MixtureSweep => vec![(0, 1)],
        }
    }

    /// Checks every referenced config before anything is computed.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.bins.validate().map_err(config)?;
        self.lags.check_window(self.bins.window_bins).map_err(config)?;
        self.source.validate_for(&self.bins).map_err(config)?;
        if let Some(d) = &self.spad {
            d.validate().map_err(config)?;
        }
        let n = self.geometry.pixel_count();
        let pairs = self.pairs();
        if pairs.is_empty() {
            return Err(config("no channel pairs to correlate"));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(config(format!("pair ({i}, {j}) outside the {n}-pixel array")));
        }
        if let Some(r) = self.options.background_rate {
            if !(r.is_finite() && r > 0.0) {
                return Err(config(format!("background_rate must be positive, got {r}")));
            }
        }
        if self.options.background_series == Some(0) {
            return Err(config("background_series must be at least 1"));
        }
        if let Some([a, b]) = self.options.period_range {
            if !(0.0 < a && a < b) {
                return Err(config(format!("period_range must be increasing and positive, got [{a}, {b}]")));
            }
        }
        if let Some(b) = &self.options.compare_bins {
            b.validate().map_err(config)?;
            self.lags.check_window(b.window_bins).map_err(config)?;
            self.source.validate_for(b).map_err(config)?;
        }
        if let Some(s) = self.options.fit_excess_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config(format!("fit_excess_scale must be positive, got {s}")));
            }
        }
        match self.name {
            ScenarioKind::MultimodeBeat => {
                if self.options.period_range.is_none() && !matches!(self.source.light, LightKind::MultimodeCoherent { .. }) {
                    return Err(config("multimode_beat needs a multimode_coherent source or options.period_range"));
                }
            }
            ScenarioKind::MixtureSweep => {
                if matches!(self.source.light, LightKind::Mixture { .. }) {
                    return Err(config("mixture_sweep takes the chaotic component as its source, not a mixture"));
                }
                if self.options.fractions.is_empty() {
                    return Err(config("mixture_sweep needs at least one fraction"));
                }
                if let Some(f) = self.options.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                    return Err(config(format!("fraction {f} outside [0, 1]")));
                }
                for (k, _) in self.options.fractions.iter().enumerate() {
                    self.mixture_source(k).validate_for(&self.bins).map_err(config)?;
                }
            }
            ScenarioKind::VczSweep => {
                if !matches!(self.source.light, LightKind::Thermal { spatial: Some(_), .. }) {
                    return Err(config("vcz_sweep needs a thermal source with a spatial profile"));
                }
                if !self.lags.lags().contains(&0) {
                    return Err(config("vcz_sweep needs lag 0 in the lag range"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn mixture_source(&self, k: usize) -> SourceModel {
        let f = self.options.fractions[k];
        let light = if f == 0.0 {
            LightKind::Incoherent
        } else if f == 1.0 {
            self.source.light.clone()
        } else {
            LightKind::Mixture {
                components: vec![
                    MixtureComponent {
                        fraction: f,
                        light: self.source.light.clone(),
                    },
                    MixtureComponent {
                        fraction: 1.0 - f,
                        light: LightKind::Incoherent,
                    },
                ],
            }
        };
        SourceModel::new(self.source.rate, light)
    }
}

/// Raw, background and corrected correlograms of one measurement.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub result: MeasurementResult,
    pub background: Option<BTreeMap<(usize, usize), Correlogram>>,
    pub corrected: Option<BTreeMap<(usize, usize), Correlogram>>,
}

impl PairSet {
    /// Corrected correlogram where one exists, else the raw one.
    pub fn best(&self, pair: (usize, usize)) -> Option<&Correlogram> {
        self.corrected
            .as_ref()
            .and_then(|c| c.get(&pair))
            .or_else(|| self.result.correlograms.get(&pair))
    }

    pub fn final_map(&self) -> BTreeMap<(usize, usize), &Correlogram> {
        self.result.correlograms.keys().filter_map(|&k| self.best(k).map(|c| (k, c))).collect()
    }
}

fn measure(s: &Scenario, source: &SourceModel, seed: u64) -> Result<PairSet, ScenarioError> {
    let pairs = s.pairs();
    let detector = s.detector();
    let mut m = Measurement::new(source.clone(), detector.clone(), s.geometry.clone(), s.bins, seed, s.lags).with_pairs(pairs.clone());
    m.keep_series = s.options.keep_series.min(s.bins.series_count);
    let mut result = m.run().map_err(stage("measure"))?;
    if s.name == ScenarioKind::BackgroundMap {
        for c in result.correlograms.values_mut() {
            if c.kind() == CorrelogramKind::Raw {
                *c = c.clone().with_kind(CorrelogramKind::Background).map_err(stage("measure"))?;
            }
        }
    }
    let (background, corrected) = match (detector, s.corrects()) {
        (Some(d), true) => {
            let cross: Vec<(usize, usize)> = pairs.iter().copied().filter(|(i, j)| i != j).collect();
            if cross.is_empty() {
                (None, None)
            } else {
                let spec = s.bins.with_series(s.options.background_series.unwrap_or(s.bins.series_count));
                let rate = s.options.background_rate.unwrap_or(source.rate);
                let bg = measure_background_pairs(&d, &s.geometry, &spec, rate, seed, s.lags, cross.clone()).map_err(stage("background"))?;
                let mut corrected = BTreeMap::new();
                for p in cross {
                    let c = correct_cross(&result.correlograms[&p], &bg[&p], d.afterpulse_prob).map_err(stage("correct"))?;
                    corrected.insert(p, c);
                }
                (Some(bg), Some(corrected))
            }
        }
        _ => (None, None),
    };
    Ok(PairSet {
        result,
        background,
        corrected,
    })
}

struct Writer {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self, ScenarioError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let manifest = root.join(MANIFEST);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(io_err(&manifest))?;
        }
        Ok(Writer {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), ScenarioError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.artifacts.push(rel.to_string());
        Ok(())
    }

    fn write_traces(&mut self, rel: &str, traces: &EventTraceSet) -> Result<(), ScenarioError> {
        let path = self.root.join(rel);
        write_trace_file(&path, traces).map_err(|source| ScenarioError::TraceFile { path, source })?;
        self.artifacts.push(rel.to_string());
        Ok(())
    }

    fn write_correlograms<'a, I>(&mut self, dir: &str, maps: I) -> Result<(), ScenarioError>
    where
        I: IntoIterator<Item = &'a Correlogram>,
    {
        let mut index = String::from("file,kind,i,j,series\n");
        for c in maps {
            let (i, j) = c.channels();
            let name = format!("{}_{i}_{j}.csv", c.kind());
            self.write(&format!("{dir}/{name}"), c.to_csv_string().as_bytes())?;
            let _ = writeln!(index, "{name},{},{i},{j},{}", c.kind(), c.series());
        }
        self.write(&format!("{dir}/index.csv"), index.as_bytes())
    }

    /// Writes the manifest through a temporary file and a rename.
    fn finish(mut self, scenario: &str, seed: u64, config_hash: String) -> Result<Vec<String>, ScenarioError> {
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for rel in &self.artifacts {
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            artifacts.push(ManifestArtifact {
                path: rel.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            scenario: scenario.to_string(),
            seed,
            config_sha256: config_hash,
            g2lab_version: env!("CARGO_PKG_VERSION").to_string(),
            trace_format_version: TRACE_VERSION,
            artifacts,
        };
        let text = toml::to_string(&manifest).map_err(stage("manifest"))?;
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        let dst = self.root.join(MANIFEST);
        fs::rename(&tmp, &dst).map_err(io_err(&dst))?;
        self.artifacts.push(MANIFEST.to_string());
        Ok(self.artifacts)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestArtifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub seed: u64,
    pub config_sha256: String,
    pub g2lab_version: String,
    pub trace_format_version: u16,
    pub artifacts: Vec<ManifestArtifact>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ScenarioError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text).map_err(config)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |v| format!("{v:e}"))
}

/// Value with the largest deviation from 1 and its lag.
fn peak(c: &Correlogram) -> (Option<f64>, Option<i64>) {
    let mut best: Option<(f64, i64)> = None;
    for (k, g) in c.g2().iter().enumerate() {
        if let Some(g) = *g {
            if best.is_none_or(|(b, _)| (g - 1.0).abs() > (b - 1.0).abs()) {
                best = Some((g, c.lags()[k]));
            }
        }
    }
    (best.map(|b| b.0), best.map(|b| b.1))
}

fn summary_table(geometry: &ArrayGeometry, map: &BTreeMap<(usize, usize), &Correlogram>) -> String {
    let mut s = String::from("i,j,kind,baseline_m,wire_distance,g2_zero,sigma_zero,g2_peak,lag_peak\n");
    for (&(i, j), c) in map {
        let (p, l) = peak(c);
        let _ = writeln!(
            s,
            "{i},{j},{},{:e},{},{},{},{},{}",
            c.kind(),
            geometry.baseline(i, j),
            geometry.wire_distance(i, j),
            fmt_opt(c.value_at(0)),
            fmt_opt(c.sigma_at(0)),
            fmt_opt(p),
            l.map_or_else(|| "NaN".to_string(), |l| l.to_string())
        );
    }
    s
}

fn stats_toml(stats: &DetectStats) -> String {
    toml::to_string(stats).unwrap_or_default()
}

/// Line through the origin `y = k x` fitted by weighted least squares, with
/// the centered coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OriginLine {
    pub slope: f64,
    pub slope_sigma: f64,
    pub r_squared: f64,
}

pub fn fit_origin_line(x: &[f64], y: &[f64], sigma: &[f64]) -> OriginLine {
    let w: Vec<f64> = sigma.iter().map(|s| if *s > 0.0 && s.is_finite() { 1.0 / (s * s) } else { 1.0 }).collect();
    let sxx: f64 = (0..x.len()).map(|i| w[i] * x[i] * x[i]).sum();
    let sxy: f64 = (0..x.len()).map(|i| w[i] * x[i] * y[i]).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sw: f64 = w.iter().sum();
    let ybar = (0..y.len()).map(|i| w[i] * y[i]).sum::<f64>() / sw;
    let ss_res: f64 = (0..x.len()).map(|i| w[i] * (y[i] - slope * x[i]).powi(2)).sum();
    let ss_tot: f64 = (0..y.len()).map(|i| w[i] * (y[i] - ybar).powi(2)).sum();
    OriginLine {
        slope,
        slope_sigma: if sxx > 0.0 { sxx.powf(-0.5) } else { f64::INFINITY },
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
    }
}

/// Inverse-variance mean of the zero-lag values of `pairs`.
fn zero_lag_mean(set: &PairSet, pairs: &[(usize, usize)]) -> (f64, f64) {
    let (mut sw, mut swg) = (0.0, 0.0);
    for &p in pairs {
        if let Some(c) = set.best(p) {
            if let (Some(g), Some(s)) = (c.value_at(0), c.sigma_at(0)) {
                let w = if s > 0.0 { 1.0 / (s * s) } else { 1.0 };
                sw += w;
                swg += w * g;
            }
        }
    }
    if sw > 0.0 {
        (swg / sw, sw.powf(-0.5))
    } else {
        (f64::NAN, f64::NAN)
    }
}

type PairFits = Vec<((usize, usize), CosineFit)>;

fn cosine_fits(s: &Scenario, set: &PairSet, messages: &mut Vec<String>) -> Result<(PairFits, bool), ScenarioError> {
    let [pmin, pmax] = s.options.period_range.unwrap_or_else(|| match s.source.light {
        LightKind::MultimodeCoherent { roundtrip_time, .. } => [0.5 * roundtrip_time, 2.0 * roundtrip_time],
        _ => unreachable!("validated"),
    });
    let mut fits = Vec::new();
    let mut ok = true;
    for (&p, c) in &set.final_map() {
        if p.0 == p.1 {
            continue;
        }
        let (mut x, mut y, mut e) = (Vec::new(), Vec::new(), Vec::new());
        for (k, t) in c.lag_seconds().iter().enumerate() {
            if let (Some(g), Some(sg)) = (c.g2()[k], c.sigma()[k]) {
                x.push(*t);
                y.push(g);
                e.push(sg);
            }
        }
        let f = match fit_cosine(&x, &y, &e, pmin, pmax) {
            Ok(f) => f,
            Err(err) => {
                ok = false;
                messages.push(format!("cosine fit of pair {p:?}: {err}"));
                continue;
            }
        };
        if !f.converged {
            ok = false;
            messages.push(format!("cosine fit of pair {p:?} did not converge"));
        }
        fits.push((p, f));
    }
    Ok((fits, ok))
}

/// Runs a validated scenario into `out`.
pub fn run(s: &Scenario, out: &Path) -> Result<RunReport, ScenarioError> {
    s.validate()?;
    let mut w = Writer::new(out)?;
    let mut messages = Vec::new();
    let mut converged = true;
    w.write("scenario.toml", s.to_toml().as_bytes())?;

    if s.name == ScenarioKind::MixtureSweep {
        let pairs = s.pairs();
        let mut table = String::from("fraction,fraction_sq,excess,sigma,analytic_excess\n");
        let (mut x, mut y, mut e) = (Vec::new(), Vec::new(), Vec::new());
        for (k, &f) in s.options.fractions.iter().enumerate() {
            let src = s.mixture_source(k);
            let set = measure(s, &src, derive_seed(s.seed, k as u64))?;
            let dir = format!("fraction_{k}");
            w.write_correlograms(&format!("{dir}/correlograms"), all_correlograms(&set))?;
            w.write(&format!("{dir}/summary.csv"), summary_table(&s.geometry, &set.final_map()).as_bytes())?;
            if k == 0 {
                if let Some(t) = &set.result.sample {
                    w.write_traces("traces.g2tr", t)?;
                }
            }
            let (g, sg) = zero_lag_mean(&set, &pairs);
            let analytic = src.light.analytic_g2(0.0, 1.0) - 1.0;
            let _ = writeln!(table, "{f:e},{:e},{:e},{sg:e},{analytic:e}", f * f, g - 1.0);
            if g.is_finite() {
                x.push(f * f);
                y.push(g - 1.0);
                e.push(sg);
            }
        }
        w.write("mixture.csv", table.as_bytes())?;
        let line = fit_origin_line(&x, &y, &e);
        let text = format!(
            "[origin_line]\nslope = {:e}\nslope_sigma = {:e}\nr_squared = {:e}\npoints = {}\n",
            line.slope,
            line.slope_sigma,
            line.r_squared,
            x.len()
        );
        w.write("fit.toml", text.as_bytes())?;
    } else {
        let set = measure(s, &s.source, s.seed)?;
        if let Some(t) = &set.result.sample {
            w.write_traces("traces.g2tr", t)?;
        }
        w.write_correlograms("correlograms", all_correlograms(&set))?;
        let final_map = set.final_map();
        w.write("summary.csv", summary_table(&s.geometry, &final_map).as_bytes())?;
        if s.detector().is_some() {
            w.write("detector_stats.toml", stats_toml(&set.result.stats).as_bytes())?;
        }
        match s.name {
            ScenarioKind::MultimodeBeat => {
                let (fits, ok) = cosine_fits(s, &set, &mut messages)?;
                converged &= ok;
                let mut text = String::new();
                for ((i, j), f) in fits {
                    let _ = writeln!(text, "[[cosine_fit]]\ni = {i}\nj = {j}");
                    let _ = writeln!(text, "amplitude = {:e}\nperiod = {:e}", f.amplitude, f.period);
                    let _ = writeln!(text, "amplitude_sigma = {}\nperiod_sigma = {}", fmt_opt(f.amplitude_sigma).to_lowercase(), fmt_opt(f.period_sigma).to_lowercase());
                    let _ = writeln!(text, "chi2 = {:e}\ndof = {}\nconverged = {}\n", f.chi2, f.dof, f.converged);
                }
                w.write("fit.toml", text.as_bytes())?;
            }
            ScenarioKind::ModulatedThermal => {
                let (g, sg) = zero_lag_mean(&set, &s.pairs());
                let analytic = s.source.light.analytic_g2(0.0, 1.0);
                let mut text = format!("[zero_lag]\ng2 = {g:e}\nsigma = {sg:e}\nanalytic = {analytic:e}\nbin_width = {:e}\nwindow_bins = {}\n", s.bins.bin_width, s.bins.window_bins);
                if let Some(b) = s.options.compare_bins {
                    let alt = Scenario { bins: b, ..s.clone() };
                    let other = measure(&alt, &s.source, derive_seed(s.seed, 1))?;
                    w.write_correlograms("compare/correlograms", all_correlograms(&other))?;
                    let (g2, sg2) = zero_lag_mean(&other, &s.pairs());
                    let _ = write!(
                        text,
                        "\n[compare]\ng2 = {g2:e}\nsigma = {sg2:e}\nbin_width = {:e}\nwindow_bins = {}\ndifference_in_sigma = {:e}\n",
                        b.bin_width,
                        b.window_bins,
                        (g - g2).abs() / sg.hypot(sg2)
                    );
                }
                w.write("zero_lag.toml", text.as_bytes())?;
            }
            ScenarioKind::VczSweep => {
                let (fit, table, points) = vcz_outputs(s, &set);
                w.write("vcz_pairs.csv", table.as_bytes())?;
                w.write("vcz_points.csv", write_fit_points(&points).as_bytes())?;
                match fit {
                    Ok(fit) => {
                        w.write("fit.toml", fit.to_summary().as_bytes())?;
                        if !fit.converged {
                            converged = false;
                            messages.push("near-field fit did not converge".into());
                        }
                    }
                    Err(err) => {
                        converged = false;
                        messages.push(format!("near-field fit: {err}"));
                    }
                }
            }
            ScenarioKind::BackgroundMap | ScenarioKind::Custom | ScenarioKind::MixtureSweep => {}
        }
    }
    let artifacts = w.finish(s.name.as_str(), s.seed, s.config_hash())?;
    Ok(RunReport {
        out_dir: out.to_path_buf(),
        artifacts,
        converged,
        messages,
    })
}

fn all_correlograms(set: &PairSet) -> Vec<&Correlogram> {
    let mut v: Vec<&Correlogram> = set.result.correlograms.values().collect();
    if let Some(b) = &set.background {
        v.extend(b.values());
    }
    if let Some(c) = &set.corrected {
        v.extend(c.values());
    }
    v
}

/// Per-pair table, points grouped by Fresnel number, and the fit.
fn vcz_outputs(s: &Scenario, set: &PairSet) -> (Result<FitResult, FitError>, String, Vec<FitPoint>) {
    let LightKind::Thermal {
        polarized,
        spatial: Some(profile),
        ..
    } = &s.source.light
    else {
        unreachable!("validated")
    };
    let scale = s.options.fit_excess_scale.unwrap_or(if *polarized { 1.0 } else { 0.5 });
    let beta = 0.5 * profile.spatial_freq * profile.near_field_width;
    let mut table = String::from("i,j,row_i,col_i,row_j,col_j,baseline_m,fresnel,g2max,sigma,analytic\n");
    let mut groups: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
    let cols = s.geometry.cols();
    for (&(i, j), c) in &set.final_map() {
        if i == j {
            continue;
        }
        let x = s.geometry.baseline(i, j);
        let fresnel = profile.fresnel(x);
        let v = cosine_visibility(fresnel, profile.modulation_depth, beta);
        let analytic = 1.0 + scale * v * v;
        let (g, e) = (c.value_at(0), c.sigma_at(0));
        let _ = writeln!(
            table,
            "{i},{j},{},{},{},{},{x:e},{fresnel:e},{},{},{analytic:e}",
            i / cols,
            i % cols,
            j / cols,
            j % cols,
            fmt_opt(g),
            fmt_opt(e)
        );
        if let (Some(g), Some(e)) = (g, e) {
            let wgt = if e > 0.0 { 1.0 / (e * e) } else { 1.0 };
            let key = (fresnel * 1e9).round() as i64;
            let entry = groups.entry(key).or_insert((fresnel, 0.0, 0.0));
            entry.1 += wgt;
            entry.2 += wgt * g;
        }
    }
    let points: Vec<FitPoint> = groups
        .values()
        .map(|&(f, sw, swg)| FitPoint {
            fresnel: f,
            g2max: swg / sw,
            sigma: sw.powf(-0.5),
        })
        .collect();
    let opts = NearFieldOptions {
        excess_scale: scale,
        ..Default::default()
    };
    let fit = fit_near_field(&points, profile.near_field_width, &opts);
    (fit, table, points)
}

/// Reads a trace file written by [`run`] or an external producer.
pub fn ingest_traces(path: &Path) -> Result<EventTraceSet, ScenarioError> {
    read_trace_file(path).map_err(|source| ScenarioError::TraceFile {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes one CSV per correlogram, an index and a manifest into `dir`.
pub fn export_correlograms<'a, I>(correlograms: I, dir: &Path, seed: u64, config_hash: &str) -> Result<Vec<String>, ScenarioError>
where
    I: IntoIterator<Item = &'a Correlogram>,
{
    let mut w = Writer::new(dir)?;
    w.write_correlograms(".", correlograms)?;
    w.finish("correlate", seed, config_hash.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MULTIMODE: &str = r#"
name = "multimode_beat"
seed = 3
[bins]
bin_width = 1e-10
window_bins = 2000
series_count = 60
[lags]
min = -30
max = 30
[geometry]
rows = 1
cols = 3
[source]
rate = 2e8
light = { kind = "multimode_coherent", roundtrip_time = 1.4e-9, beat_amplitude = 0.2 }
[options]
keep_series = 4
"#;

    #[test]
    fn schema_errors_are_config_errors() {
        let bad = MULTIMODE.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(Scenario::from_toml_str(&bad).unwrap_err().is_config());
        let bad = MULTIMODE.replace("rate = 2e8", "rate = 9e9");
        assert!(Scenario::from_toml_str(&bad).unwrap_err().is_config());
        let bad = MULTIMODE.replace("keep_series = 4", "pairs = [[0, 7]]");
        assert!(Scenario::from_toml_str(&bad).unwrap_err().is_config());
        let bad = MULTIMODE.replace("max = 30", "max = 5000");
        assert!(Scenario::from_toml_str(&bad).unwrap_err().is_config());
    }

    #[test]
    fn rerun_is_byte_identical() {
        let s = Scenario::from_toml_str(MULTIMODE).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run(&s, a.path()).unwrap();
        run(&s, b.path()).unwrap();
        assert_eq!(ra.artifacts.last().unwrap(), MANIFEST);
        for rel in &ra.artifacts {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        let m = read_manifest(a.path()).unwrap();
        assert_eq!(m.config_sha256, s.config_hash());
        assert_eq!(m.artifacts.len() + 1, ra.artifacts.len());
        assert!(ra.artifacts.iter().any(|p| p == "correlograms/corrected_0_2.csv"));
        let t = ingest_traces(&a.path().join("traces.g2tr")).unwrap();
        assert_eq!(t.series_count(), 4);
    }

    #[test]
    fn stale_manifest_is_removed_before_running() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "stale").unwrap();
        let bad = Scenario {
            lags: LagRange::symmetric(5000),
            ..Scenario::from_toml_str(MULTIMODE).unwrap()
        };
        assert!(run(&bad, dir.path()).is_err());
        let mut s = Scenario::from_toml_str(MULTIMODE).unwrap();
        s.source.rate = 1e10;
        // Fails in validation before the directory is touched.
        assert!(run(&s, dir.path()).unwrap_err().is_config());
        s.source.rate = 2e8;
        s.options.background_rate = Some(1e10);
        // Fails inside the background stage, after the stale manifest was cleared.
        let err = run(&s, dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("background:"), "{err}");
        assert!(!dir.path().join(MANIFEST).exists());
    }

    #[test]
    fn origin_line() {
        let x = [0.0, 0.25, 0.5, 1.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        let l = fit_origin_line(&x, &y, &[0.01; 4]);
        assert!((l.slope - 0.5).abs() < 1e-12 && (l.r_squared - 1.0).abs() < 1e-12);
    }
}
