use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use g2lab::correlator::{all_pairs, correlate_pairs, LagRange};
use g2lab::physics::fit::{fit_near_field, parse_fit_points, FitError, NearFieldOptions};
use g2lab::scenario::{export_correlograms, ingest_traces, run, sha256_hex, Scenario, ScenarioError};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_NO_CONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "g2lab", version, about = "Photon-correlation simulation and analysis")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its artifact directory.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Correlate channel pairs of a trace file.
    Correlate {
        #[arg(long)]
        traces: PathBuf,
        /// Channel indices taken two at a time (`0,1,2,3` is pairs 0-1 and
        /// 2-3), or `all` for every pair.
        #[arg(long)]
        pairs: String,
        /// Lag grid in bins, `MIN:MAX[:STRIDE]`.
        #[arg(long, allow_hyphen_values = true)]
        lags: LagRange,
        /// Output directory; CSV goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the near-field harmonic to `fresnel,g2max,sigma` rows.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Source width `w` in the length unit of the fitted frequency.
        #[arg(long)]
        w: f64,
        /// Zero-delay excess of a fully coherent pair.
        #[arg(long, default_value_t = 0.5)]
        excess_scale: f64,
        /// Directory for `fit.toml`; the summary goes to stdout regardless.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        if e.is_config() {
            Failure::config(e.to_string())
        } else {
            Failure::runtime(e.to_string())
        }
    }
}

fn parse_pairs(spec: &str, channels: usize) -> Result<Vec<(usize, usize)>, Failure> {
    if spec.trim() == "all" {
        return Ok(all_pairs(channels));
    }
    let idx: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| Failure::config(format!("pairs: {s:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if idx.is_empty() || !idx.len().is_multiple_of(2) {
        return Err(Failure::config(format!("pairs: expected an even number of channel indices, got {}", idx.len())));
    }
    let pairs: Vec<(usize, usize)> = idx.chunks(2).map(|c| (c[0], c[1])).collect();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= channels || j >= channels) {
        return Err(Failure::config(format!("pair ({i}, {j}) outside the {channels} channels of the trace file")));
    }
    Ok(pairs)
}

fn cmd_run(scenario: &Path, out: &Path, seed: Option<u64>) -> Result<bool, Failure> {
    let mut s = Scenario::load(scenario)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    log::info!("running {} into {}", s.name.as_str(), out.display());
    let report = run(&s, out)?;
    for m in &report.messages {
        log::warn!("{m}");
    }
    for a in &report.artifacts {
        println!("{}", out.join(a).display());
    }
    Ok(report.converged)
}

fn cmd_correlate(traces: &Path, pairs: &str, lags: LagRange, out: Option<&Path>) -> Result<bool, Failure> {
    lags.validate().map_err(|e| Failure::config(e.to_string()))?;
    let set = ingest_traces(traces).map_err(|e| Failure::runtime(e.to_string()))?;
    let pairs = parse_pairs(pairs, set.channel_count())?;
    lags.check_window(set.spec().window_bins).map_err(|e| Failure::config(e.to_string()))?;
    let map = correlate_pairs(&set, &pairs, lags).map_err(|e| Failure::runtime(e.to_string()))?;
    match out {
        Some(dir) => {
            // Identifies the input bytes and the request, not the file name.
            let mut key = fs::read(traces).map_err(|e| Failure::runtime(format!("{}: {e}", traces.display())))?;
            key.extend_from_slice(format!("\npairs={pairs:?}\nlags={lags}\n").as_bytes());
            let hash = sha256_hex(&key);
            let files = export_correlograms(map.values(), dir, 0, &hash)?;
            for f in files {
                println!("{}", dir.join(f).display());
            }
        }
        None => {
            for ((i, j), c) in &map {
                println!("# channels {i} {j}");
                print!("{}", c.to_csv_string());
            }
        }
    }
    Ok(true)
}

fn cmd_fit(data: &Path, w: f64, excess_scale: f64, out: Option<&Path>) -> Result<bool, Failure> {
    let text = fs::read_to_string(data).map_err(|e| Failure::runtime(format!("{}: {e}", data.display())))?;
    let points = parse_fit_points(&text).map_err(|e| Failure::config(format!("{}: {e}", data.display())))?;
    let opts = NearFieldOptions {
        excess_scale,
        ..Default::default()
    };
    let fit = fit_near_field(&points, w, &opts).map_err(|e| match e {
        FitError::TooFewPoints { .. } | FitError::InvalidParameter(_) | FitError::Csv { .. } => Failure::config(e.to_string()),
        FitError::LengthMismatch => Failure::runtime(e.to_string()),
    })?;
    let summary = fit.to_summary();
    print!("{summary}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("fit.toml");
        fs::write(&path, &summary).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    }
    if !fit.converged {
        log::warn!("near-field fit did not converge; best candidate reported");
    }
    Ok(fit.converged)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let result = match &cli.command {
        Command::Run { scenario, out, seed } => cmd_run(scenario, out, *seed),
        Command::Correlate { traces, pairs, lags, out } => cmd_correlate(traces, pairs, *lags, out.as_deref()),
        Command::Fit { data, w, excess_scale, out } => cmd_fit(data, *w, *excess_scale, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NO_CONVERGENCE),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
