//! CSV and TOML persistence for datasets, traces and batch reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value reads back bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::batch::BatchReport;
use crate::harness::config::{BatchMode, BenchConfig, EstimatorKind};
use crate::harness::trial::EstimateTrace;
use crate::plant::{lambda_at, Dataset, LambdaSegment, SystemModel};

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("ragged matrix in dataset metadata".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    dt: f64,
    s_true: f64,
    seed: String,
    x0: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    lambda_schedule: Vec<LambdaSegment>,
}

/// Path of the metadata file stored next to a dataset CSV.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.toml")
}

fn header(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// Write `t, u_*, y_*, x_*` rows plus a `.meta.toml` sidecar with the model.
pub fn write_dataset(data: &Dataset, csv_path: &Path) -> Result<()> {
    let (n, m, r) = (data.model.n(), data.model.m(), data.model.r_dim());
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut head = vec!["t".to_string()];
    head.extend(header("u", r));
    head.extend(header("y", m));
    head.extend(header("x", n));
    w.write_record(&head)?;
    for k in 0..data.len() {
        let mut rec = vec![data.times[k].to_string()];
        rec.extend(data.u.row(k).iter().map(|v| v.to_string()));
        rec.extend(data.y.row(k).iter().map(|v| v.to_string()));
        rec.extend(data.x.row(k).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        dt: data.model.dt,
        s_true: data.s_true,
        seed: data.seed.to_string(),
        x0: data.x0.iter().copied().collect(),
        a: rows(&data.model.a),
        b: rows(&data.model.b),
        c: rows(&data.model.c),
        q: rows(&data.model.q),
        r: rows(&data.model.r),
        lambda_schedule: data.lambda_schedule.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(meta_path(csv_path), text)?;
    Ok(())
}

pub fn read_dataset(csv_path: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = toml::from_str(&fs::read_to_string(meta_path(csv_path))?)
        .map_err(|e| Error::Config(e.to_string()))?;
    let n = meta.x0.len();
    let a = from_rows(&meta.a, n)?;
    let b_cols = meta.b.first().map_or(0, |r| r.len());
    let b = from_rows(&meta.b, b_cols)?;
    let c = from_rows(&meta.c, n)?;
    let m = c.nrows();
    let model = SystemModel {
        a,
        b,
        c,
        q: from_rows(&meta.q, n)?,
        r: from_rows(&meta.r, m)?,
        dt: meta.dt,
    };
    model.validate()?;
    let r = model.r_dim();

    let mut reader = csv::Reader::from_path(csv_path)?;
    let width = 1 + r + m + n;
    let mut values: Vec<Vec<f64>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::Config(format!("dataset row has {} fields, expected {width}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Config(format!("bad number '{f}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    let len = values.len();
    let block = |offset: usize, cols: usize| DMatrix::from_fn(len, cols, |k, j| values[k][offset + j]);
    Ok(Dataset {
        times: values.iter().map(|v| v[0]).collect(),
        u: block(1, r),
        y: block(1 + r, m),
        x: block(1 + r + m, n),
        model,
        x0: DVector::from_vec(meta.x0),
        s_true: meta.s_true,
        seed: meta
            .seed
            .parse()
            .map_err(|e| Error::Config(format!("bad seed '{}': {e}", meta.seed)))?,
        lambda_schedule: meta.lambda_schedule,
    })
}

/// Write `t, lambda_*, x_hat_*, <diagnostics>, diverged` rows.
pub fn write_trace(trace: &EstimateTrace, path: &Path) -> Result<()> {
    let (m, n) = (trace.lambda.ncols(), trace.x_hat.ncols());
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["t".to_string()];
    head.extend(header("lambda", m));
    head.extend(header("x_hat", n));
    head.extend(trace.diagnostic_names.iter().cloned());
    head.push("diverged".into());
    w.write_record(&head)?;
    for (k, t) in trace.times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(trace.lambda.row(k).iter().map(|v| v.to_string()));
        rec.extend(trace.x_hat.row(k).iter().map(|v| v.to_string()));
        rec.extend(trace.diagnostics.row(k).iter().map(|v| v.to_string()));
        rec.push(u8::from(trace.diverged).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 of the configuration's TOML form.
pub fn config_hash(cfg: &BenchConfig) -> Result<String> {
    let digest = Sha256::digest(cfg.to_toml_string()?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_manifest(dir: &Path, cfg: &BenchConfig, what: &str, files: &[PathBuf]) -> Result<PathBuf> {
    let path = dir.join("manifest.txt");
    let mut text = format!(
        "tool = {} {}\nrun = {what}\nconfig_sha256 = {}\nseed_base = {}\ntrials = {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        config_hash(cfg)?,
        cfg.seed_base,
        cfg.trials
    );
    for f in files {
        text.push_str(&format!("output = {}\n", f.file_name().unwrap_or_default().to_string_lossy()));
    }
    text.push_str("\n[config]\n");
    text.push_str(&cfg.to_toml_string()?);
    fs::write(&path, text)?;
    Ok(path)
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// Write `<mode>_trials.csv`, `<mode>_summary.csv`, the mode's plot data and
/// the manifest. Returns the paths written.
pub fn write_batch(report: &BatchReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mode = report.mode.name();
    let mut written = Vec::new();

    let trials_path = dir.join(format!("{mode}_trials.csv"));
    let mut w = csv::Writer::from_path(&trials_path)?;
    w.write_record([
        "group",
        "seed",
        "estimator",
        "mean_field",
        "s",
        "model_a",
        "lambda_true",
        "lambda_hat",
        "r_hat",
        "sse_r",
        "sse_x",
        "lambda_error",
        "settling_error",
        "stable",
        "wall_time",
    ])?;
    for r in &report.records {
        w.write_record(&[
            r.group.to_string(),
            r.seed.to_string(),
            r.estimator.name().to_string(),
            r.mean_field.to_string(),
            r.s.to_string(),
            list(&r.model_a),
            list(&r.lambda_true),
            list(&r.lambda_hat),
            list(&r.r_hat),
            r.sse_r.to_string(),
            r.sse_x.to_string(),
            r.lambda_error.to_string(),
            r.settling_error.to_string(),
            r.stable.to_string(),
            format!("{:.6}", r.wall_time),
        ])?;
    }
    w.flush()?;
    written.push(trials_path);

    let summary_path = dir.join(format!("{mode}_summary.csv"));
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record([
        "group",
        "estimator",
        "mean_field",
        "trials",
        "sse_r_mean",
        "sse_r_std",
        "sse_r_median",
        "sse_r_median_all",
        "sse_x_mean",
        "sse_x_std",
        "sse_x_median",
        "lambda_error_mean",
        "settling_error_mean",
        "stability_pct",
    ])?;
    for s in &report.summaries {
        w.write_record(&[
            s.group.to_string(),
            s.estimator.name().to_string(),
            s.mean_field.to_string(),
            s.trials.to_string(),
            s.sse_r.mean.to_string(),
            s.sse_r.std.to_string(),
            s.sse_r.median.to_string(),
            s.sse_r_median_all.to_string(),
            s.sse_x.mean.to_string(),
            s.sse_x.std.to_string(),
            s.sse_x.median.to_string(),
            s.lambda_error.mean.to_string(),
            s.settling_error.mean.to_string(),
            s.stability_pct.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(summary_path);

    if let Some(path) = write_mean_traces(report, dir)? {
        written.push(path);
    }
    let manifest = write_manifest(dir, &report.config, &format!("bench {mode}"), &written)?;
    written.push(manifest);
    Ok(written)
}

/// Mean `λ̂(t)` per variant next to the true `λ(t)` of the first trial.
fn write_mean_traces(report: &BatchReport, dir: &Path) -> Result<Option<PathBuf>> {
    let Some(first) = report.records.first() else {
        return Ok(None);
    };
    let mut variants: Vec<(String, DMatrix<f64>)> = Vec::new();
    let mut seen: Vec<(EstimatorKind, bool)> = Vec::new();
    for r in &report.records {
        let key = (r.estimator, r.mean_field);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        if let Some(mean) = report.mean_lambda_trace(key.0, key.1) {
            let label = match (key.0, key.1) {
                (EstimatorKind::Dem, false) => "dem_nomf".to_string(),
                (k, _) => k.name().to_string(),
            };
            variants.push((label, mean));
        }
    }
    let path = dir.join(format!("{}_trace.csv", report.mode.name()));
    let cfg = BenchConfig {
        s: first.s,
        ..report.config.clone()
    };
    let truth = match report.mode {
        BatchMode::Transient => BenchConfig {
            schedule: cfg.transient_schedule(),
            ..cfg.clone()
        },
        _ => BenchConfig {
            lambda_true: first.lambda_true.clone(),
            ..cfg.clone()
        },
    }
    .lambda_schedule();
    let m = first.lambda_true.len();
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["t".to_string()];
    head.extend(header("lambda_true", m));
    for (label, _) in &variants {
        head.extend(header(&format!("{label}_lambda"), m));
    }
    w.write_record(&head)?;
    for (k, t) in first.trace.times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(lambda_at(&truth, *t).iter().map(|v| v.to_string()));
        for (_, mean) in &variants {
            rec.extend(mean.row(k).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(Some(path))
}
