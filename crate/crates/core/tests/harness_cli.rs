use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use local_kalman::harness::{
    metrics_csv, parse_config, parse_config_str, read_metrics, rows_bitwise_equal, run_experiment, ConfigError, FilterKind,
    MetricsRow, METRICS_HEADER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BASE: &str = r#"
seed = 12
horizon = 3000
runs = 3
filter = "rpe_scalar"

[model]
n = 2
p = 1
F = [[0.9, 0.1], [0.0, 0.9]]
H = [[1.0, 0.0]]
Pi = [[0.1, 0.0], [0.0, 0.1]]
Sigma = [[1.0]]

[rpe]
stability_guard = false
lambda_guard = false

[k0]
kind = "scaled_optimal"
c = 0.5
"#;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("local-kalman-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_local-kalman")).args(args).output().unwrap()
}

fn config_path(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).to_string_lossy().into_owned()
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}

#[test]
fn filters_share_the_trajectory() {
    let rpe = parse_config_str(BASE, Path::new("a.toml")).unwrap();
    let mut classic = rpe.clone();
    classic.filter = FilterKind::Classic;
    let a = run_experiment(&rpe).unwrap();
    let b = run_experiment(&classic).unwrap();
    for (ra, rb) in a.rows().zip(b.rows()) {
        assert_eq!(ra.mse_classic.to_bits(), rb.mse_classic.to_bits());
    }
}

#[test]
fn network_filter_reproduces_dense_filter() {
    let dense = parse_config_str(BASE, Path::new("a.toml")).unwrap();
    let mut graph = dense.clone();
    graph.filter = FilterKind::Netgraph;
    let a = run_experiment(&dense).unwrap();
    let b = run_experiment(&graph).unwrap();
    for (ra, rb) in a.rows().zip(b.rows()) {
        assert!((ra.mse_rpe - rb.mse_rpe).abs() < 1e-9 * ra.mse_rpe.max(1.0));
        assert!((ra.theta - rb.theta).abs() < 1e-10);
    }
}

#[test]
fn exact_filter_is_never_beaten_on_average() {
    let cfg = parse_config_str(&BASE.replace("runs = 3", "runs = 8"), Path::new("a.toml")).unwrap();
    let result = run_experiment(&cfg).unwrap();
    let classic = result.summary["mse_classic_mean"].as_f64().unwrap();
    let rpe = result.summary["mse_rpe_mean"].as_f64().unwrap();
    assert!(classic <= rpe + 0.01 * classic, "classic {classic}, adaptive {rpe}");
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = parse_config_str(BASE, Path::new("a.toml")).unwrap();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(metrics_csv(a.rows()), metrics_csv(b.rows()));
    assert_eq!(a.summary, b.summary);
}

#[test]
fn large_metrics_files_round_trip_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flags = ["", "theta_clamped", "stability_rejected|lambda_projected"];
    let rows: Vec<MetricsRow> = (0..10_000)
        .map(|t| MetricsRow {
            t,
            mse_classic: rng.gen::<f64>() * 10f64.powi(rng.gen_range(-300..300)),
            mse_rpe: f64::from_bits(rng.gen::<u64>() >> 2),
            gain_err: rng.gen(),
            theta: rng.gen_range(-10.0..10.0),
            lambda_cond: if t % 7 == 0 { f64::NAN } else { 1.0 / rng.gen::<f64>() },
            flags: flags[t as usize % 3].to_string(),
        })
        .collect();
    let text = metrics_csv(&rows);
    assert!(text.starts_with(METRICS_HEADER));
    let back = read_metrics(&text).unwrap();
    assert!(rows_bitwise_equal(&rows, &back));
}

#[test]
fn parse_errors_carry_position_and_field() {
    let err = parse_config_str(&BASE.replace("horizon = 3000", "horizon = \"long\""), Path::new("x.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Parse { line: Some(3), .. }), "{err:?}");
    let err = parse_config_str(&format!("{BASE}\nverbose = true\n"), Path::new("x.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::UnknownKey { ref key, .. } if key == "verbose"), "{err:?}");
    let err = parse_config_str(&BASE.replace("c = 0.5", "c = -1.0"), Path::new("x.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Validation { ref field, .. } if field == "k0.c"), "{err:?}");
    let err = parse_config_str(&BASE.replace("filter = \"rpe_scalar\"", "filter = \"kalman\""), Path::new("x.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Parse { .. }), "{err:?}");
}

#[test]
fn cli_exit_codes() {
    let dir = scratch("exit-codes");
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, format!("{BASE}\nextra = 1\n")).unwrap();
    assert_eq!(cli(&["run", bad.to_str().unwrap(), "--quiet"]).status.code(), Some(2));
    assert_eq!(cli(&["run", dir.join("missing.toml").to_str().unwrap()]).status.code(), Some(2));

    let good = dir.join("good.toml");
    std::fs::write(&good, format!("{BASE}\n[outputs]\nmetrics_csv = \"m.csv\"\n")).unwrap();
    let blocker = dir.join("blocker");
    std::fs::write(&blocker, "not a directory").unwrap();
    let out = cli(&["run", good.to_str().unwrap(), "--quiet", "--out-dir", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let out_dir = dir.join("out");
    let out = cli(&["run", good.to_str().unwrap(), "--quiet", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(out_dir.join("m.csv")).unwrap();
    assert_eq!(text.lines().count(), 3 * 3000 + 1);
}

#[test]
fn cli_seed_flag_changes_output() {
    let dir = scratch("seed-flag");
    let cfg = config_path("quick.toml");
    for seed in ["1", "2"] {
        let out = cli(&["run", &cfg, "--seed", seed, "--quiet", "--out-dir", dir.join(seed).to_str().unwrap()]);
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.join("1/metrics.csv")).unwrap();
    let b = std::fs::read(dir.join("2/metrics.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn cli_steady_state_prints_all_matrices() {
    let out = cli(&["steady-state", &config_path("recovery.toml")]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for label in ["K* (filter gain)", "F K* (prediction gain)", "M*", "N*"] {
        assert!(text.contains(label), "{text}");
    }
}

#[test]
fn cli_audit_reports_clean_network_and_flags_exact_filter() {
    let dir = scratch("audit");
    let out = cli(&["audit", &config_path("netgraph.toml"), "--out-dir", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let network = text.split("exact kalman step").next().unwrap();
    assert!(network.contains("violations: 0"), "{text}");
    assert!(text.contains("inverse of H M_t"), "{text}");
    assert!(dir.join("edges.csv").exists());
}

#[test]
fn cli_selftest_passes() {
    let out = cli(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}
