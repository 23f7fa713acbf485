use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use g2lab::correlator::{correlate_pair, LagRange};
use g2lab::tracefile::read_trace_file;
use tempfile::TempDir;

const NULL_BACKGROUND: &str = r#"
name = "background_map"
seed = 2

[bins]
bin_width = 1e-9
window_bins = 2000
series_count = 600

[lags]
min = -5
max = 5

[geometry]
rows = 2
cols = 2

[source]
rate = 2e7
light = { kind = "incoherent" }

[spad.crosstalk]
wire_injection_prob = 0.0
cable_dip_depth = 0.0

[options]
keep_series = 3
"#;

fn g2lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g2lab")).args(args).output().expect("spawn g2lab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_null(tmp: &TempDir) -> std::path::PathBuf {
    let cfg = write(tmp.path(), "bg.toml", NULL_BACKGROUND);
    let out = tmp.path().join("out");
    let o = g2lab(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn null_instrument_background_map_is_flat() {
    let tmp = TempDir::new().unwrap();
    let out = run_null(&tmp);
    for f in ["manifest.toml", "scenario.toml", "summary.csv", "traces.g2tr", "correlograms/index.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (g, s) = (col("g2_zero"), col("sigma_zero"));
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let (g, s): (f64, f64) = (f[g].parse().unwrap(), f[s].parse().unwrap());
        assert!((g - 1.0).abs() <= 3.0 * s, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 6);
}

#[test]
fn reruns_are_byte_identical_and_seed_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bg.toml", NULL_BACKGROUND);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        assert_eq!(code(&g2lab(&["run", &cfg, "--out", dir.to_str().unwrap(), "--seed", seed, "--threads", "1"])), 0);
    }
    let read = |d: &Path| fs::read(d.join("manifest.toml")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let bad = write(tmp.path(), "bad.toml", &NULL_BACKGROUND.replace("seed = 2", "seed = 2\ncolour = 3"));
    let out = tmp.path().join("out");
    let o = g2lab(&["run", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert_eq!(code(&g2lab(&["run", "--out", "x"])), 2);
    assert_eq!(code(&g2lab(&["fit", "--data", "x.csv", "--w", "1e-4", "--threads", "0"])), 2);

    let traces = run_null(&tmp).join("traces.g2tr");
    let t = traces.to_str().unwrap();
    assert_eq!(code(&g2lab(&["correlate", "--traces", t, "--pairs", "0,1", "--lags", "5:-5"])), 2);
    assert_eq!(code(&g2lab(&["correlate", "--traces", t, "--pairs", "0,1,2", "--lags", "-5:5"])), 2);
    assert_eq!(code(&g2lab(&["correlate", "--traces", t, "--pairs", "0,9", "--lags", "-5:5"])), 2);
    assert_eq!(code(&g2lab(&["correlate", "--traces", t, "--pairs", "0,1", "--lags", "-5000:5"])), 2);
}

#[test]
fn runtime_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("none.g2tr");
    assert_eq!(code(&g2lab(&["correlate", "--traces", missing.to_str().unwrap(), "--pairs", "all", "--lags", "0:3"])), 3);
    let junk = write(tmp.path(), "junk.g2tr", "not a trace file");
    assert_eq!(code(&g2lab(&["correlate", "--traces", &junk, "--pairs", "all", "--lags", "0:3"])), 3);
    let cfg = write(tmp.path(), "bg.toml", NULL_BACKGROUND);
    let blocker = write(tmp.path(), "blocker", "");
    assert_eq!(code(&g2lab(&["run", &cfg, "--out", &format!("{blocker}/out")])), 3);
}

#[test]
fn correlate_matches_library() {
    let tmp = TempDir::new().unwrap();
    let traces = run_null(&tmp).join("traces.g2tr");
    let t = traces.to_str().unwrap();
    let o = g2lab(&["correlate", "--traces", t, "--pairs", "0,1,2,3", "--lags", "-4:4:2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let set = read_trace_file(&traces).unwrap();
    let lags: LagRange = "-4:4:2".parse().unwrap();
    let expected: String = [(0, 1), (2, 3)]
        .iter()
        .map(|&(i, j)| format!("# channels {i} {j}\n{}", correlate_pair(&set, i, j, lags).unwrap().to_csv_string()))
        .collect();
    assert_eq!(stdout, expected);

    let dir = tmp.path().join("corr");
    let o = g2lab(&["correlate", "--traces", t, "--pairs", "all", "--lags", "-3:3", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(dir.join("manifest.toml").is_file());
    let index = fs::read_to_string(dir.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 7);
}

#[test]
fn fit_recovers_parameters_and_flags_non_convergence() {
    let tmp = TempDir::new().unwrap();
    let w = 2e-4;
    let mut csv = String::from("fresnel,g2max,sigma\n");
    for k in 0..8 {
        let f = 1.5 * k as f64 / 7.0;
        let v = g2lab::physics::vcz::cosine_visibility(f, -0.3, 1.4 * std::f64::consts::PI);
        let g = 1.0 + 0.5 * v * v;
        csv.push_str(&format!("{f},{g},{}\n", 0.001 * g));
    }
    let data = write(tmp.path(), "points.csv", &csv);
    let out = tmp.path().join("fit");
    let o = g2lab(&["fit", "--data", &data, "--w", &w.to_string(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t: toml::Table = fs::read_to_string(out.join("fit.toml")).unwrap().parse().unwrap();
    let fit = t["near_field_fit"].as_table().unwrap();
    assert!((fit["gamma"].as_float().unwrap() + 0.3).abs() < 1e-3);
    assert!((fit["omega_pi_over_w"].as_float().unwrap() - 2.8).abs() < 1e-2);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), fs::read_to_string(out.join("fit.toml")).unwrap());

    // Maxima no physical near field can produce.
    let wild = write(tmp.path(), "wild.csv", "0,50,0.1\n0.2,50,0.1\n0.4,50,0.1\n0.6,50,0.1\n0.8,50,0.1\n1.0,50,0.1\n");
    assert_eq!(code(&g2lab(&["fit", "--data", &wild, "--w", "1e-4"])), 4);
    let few = write(tmp.path(), "few.csv", "0,1.5\n0.5,1.2\n");
    assert_eq!(code(&g2lab(&["fit", "--data", &few, "--w", "1e-4"])), 2);
}
