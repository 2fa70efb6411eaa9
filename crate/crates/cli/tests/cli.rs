use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_overlay-rl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const TINY_DRL: &str = r#"
[drl.network]
subnet1_channels = [2, 2]
hidden = 4

[drl.train]
max_iterations = 3
batch_size = 2
episode_length = 30
"#;

fn tiny_ablation() -> String {
    format!(
        r#"
models = ["drl"]

[data.synthetic]
scenario = "two_regime"
rows = 260

[schedule]
train_fraction = 0.8
test_span = {{ months = 3 }}

[ablation]
{TINY_DRL}"#
    )
}

#[test]
fn validate_accepts_the_shipped_configs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["two_regime.toml", "ablation.toml"] {
        let out = run(&["validate", "--config", root.join(name).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn validate_rejects_lag_three_and_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[backtest]\naction_lag = 3\n[data]\n");
    let out = run(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lag 3"), "{err}");
    assert!(err.contains("no data source"), "{err}");
    assert_eq!(err.lines().count(), 2);
}

#[test]
fn unknown_keys_and_missing_files_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "typo.toml", "modles = [\"drl\"]\n");
    assert_eq!(run(&["validate", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(run(&["run", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    let cfg = write(dir.path(), "csv.toml", "[data]\ncsv = \"missing.csv\"\n");
    let out = run(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("strategies") && err.contains("missing.csv"), "{err}");
}

#[test]
fn malformed_csv_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "prices.csv", "date,risky,a,b\n2020-01-01,100,oops,1\n");
    let cfg = write(
        dir.path(),
        "cfg.toml",
        "models = [\"risky_only\"]\n[data]\ncsv = \"prices.csv\"\nstrategies = 2\n",
    );
    let out_dir = dir.path().join("out");
    let out = run(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablation_run_writes_32_rows_with_difference_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ablation.toml", &tiny_ablation());
    let out_dir = dir.path().join("out");
    let out = run(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(out_dir.join("ablation_summary.csv")).unwrap();
    let header = rd.headers().unwrap().clone();
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 32);
    let perf = |label: &str| -> f64 {
        let r = rows.iter().find(|r| &r[col("model")] == label).unwrap();
        r[col("annualized_return")].parse().unwrap()
    };
    for r in &rows {
        let m = &r[col("model")];
        let lag: f64 = r[col("lag_impact")].parse().unwrap();
        let ctx: f64 = r[col("context_impact")].parse().unwrap();
        assert_eq!(lag, perf(&m.replace("_lag0", "_lag1")) - perf(&m.replace("_lag1", "_lag0")));
        assert_eq!(ctx, perf(&m.replace("_noctx_", "_ctx_")) - perf(&m.replace("_ctx_", "_noctx_")));
    }
    let lag_rows = fs::read_to_string(out_dir.join("lag_summary.csv")).unwrap();
    assert_eq!(lag_rows.lines().count(), 17);
    assert_eq!(fs::read_dir(out_dir.join("plots")).unwrap().count(), 32);
}

#[test]
fn risky_only_path_matches_normalized_levels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "risky.toml",
        "models = [\"risky_only\"]\n[data.synthetic]\nrows = 300\n[schedule]\ntrain_fraction = 0.5\n",
    );
    let out_dir = dir.path().join("out");
    let out = run(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut data = csv::Reader::from_path(out_dir.join("data.csv")).unwrap();
    let risky: Vec<(String, f64)> = data
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    let mut path = csv::Reader::from_path(out_dir.join("paths/risky_only.csv")).unwrap();
    let rows: Vec<(String, f64)> = path
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    let start = risky.iter().position(|(d, _)| *d == rows[0].0).unwrap();
    assert_eq!(rows.len(), risky.len() - start);
    for (k, (d, v)) in rows.iter().enumerate() {
        let (rd, rv) = &risky[start + k];
        assert_eq!(d, rd);
        assert!((v - rv / risky[start].1).abs() < 1e-12, "{d}: {v} vs {}", rv / risky[start].1);
    }
}

#[test]
fn reruns_with_a_seed_override_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "drl.toml",
        &format!(
            "models = [\"drl\", \"follow_winner\"]\n[data.synthetic]\nrows = 380\n[schedule]\ntrain_fraction = 0.75\n{TINY_DRL}"
        ),
    );
    let mut outputs = Vec::new();
    for (name, seed) in [("a", "4"), ("b", "4"), ("c", "5")] {
        let out_dir = dir.path().join(name);
        let out = run(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", seed]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read(out_dir.join("paths/drl.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn synthesize_writes_the_requested_series() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("syn");
    let cfg = write(dir.path(), "s.toml", "[scenario]\nscenario = \"dominant\"\nrows = 120\n");
    let out = run(&["synthesize", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 121);
    assert!(text.starts_with("date,risky,strategy_0,strategy_1,strategy_2,context_0"));

    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/regime.toml");
    let out = run(&["synthesize", "--config", root.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(out_dir.join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 501);

    let both = write(dir.path(), "both.toml", "[scenario]\nrows = 10\n[regime]\nstart = \"2020-01-01\"\nstrategies = 1\nseed = 1\nassets = []\n");
    assert_eq!(run(&["synthesize", "--config", &both]).status.code(), Some(1));
}
