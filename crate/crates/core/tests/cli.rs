use std::path::Path;
use std::process::Command;

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dem-ncm")).args(args).output().unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(cli(&["simulate", "--seed", "5", "--out-dir", out]).status.success());
    let data = dir.path().join("dataset_seed5.csv");
    assert!(header(&data).starts_with("t,"));
    for est in ["dem", "vbm"] {
        let run = cli(&["estimate", "--data", data.to_str().unwrap(), "--estimator", est, "--out-dir", out]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
        let trace = dir.path().join(format!("trace_{est}_seed5.csv"));
        assert!(header(&trace).starts_with("t,lambda_1,lambda_2,x_hat_1,x_hat_2"));
    }
    assert!(std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap().contains("config_sha256"));
}

#[test]
fn bench_writes_tables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("bench.toml");
    std::fs::write(&cfg, "trials = 2\nhorizon = 8.0\n").unwrap();
    let run = cli(&[
        "bench", "--mode", "table1", "--config", cfg.to_str().unwrap(), "--out-dir", out, "--logdet-mode", "half",
        "--mean-field", "off",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["table1_trials.csv", "table1_summary.csv", "table1_trace.csv", "manifest.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("logdet_mode = \"half\""));
    assert!(manifest.contains("use_mean_field = false"));
}

#[test]
fn sweep_accepts_a_custom_grid() {
    let dir = tempfile::tempdir().unwrap();
    let run = cli(&[
        "sweep", "--over", "s", "--grid", "0.3,0.6", "--trials", "1", "--estimators", "dem", "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = std::fs::read_to_string(dir.path().join("sweep_s_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn rejects_bad_input() {
    assert!(!cli(&["bench", "--mode", "bogus"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_field = 1\n").unwrap();
    assert!(!cli(&["simulate", "--config", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn selfcheck_passes() {
    let run = cli(&["selfcheck"]);
    assert!(run.status.success());
    let text = String::from_utf8_lossy(&run.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}
