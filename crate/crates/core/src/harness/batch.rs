//! Trial grids for every experiment, run serially or on a worker pool.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::harness::config::{BatchMode, BenchConfig, EstimatorKind};
use crate::harness::metrics::{median_with_inf, stability_rate, summarize, Summary};
use crate::harness::trial::{run_on_dataset, TrialRecord};
use crate::plant::make_dataset;

/// One dataset and the estimator variants evaluated on it.
#[derive(Debug, Clone)]
pub struct TrialJob {
    pub group: f64,
    pub seed: u64,
    pub cfg: BenchConfig,
    /// `(estimator, mean-field)` pairs.
    pub variants: Vec<(EstimatorKind, bool)>,
}

/// Per-trial `λ` for the noise-level sweep, drawn from a stream independent of
/// the dataset's own randomness.
fn draw_lambda(cfg: &BenchConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let [lo, hi] = cfg.lambda_range;
    (0..cfg.m)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

/// Expand a mode into its trial jobs, seeds `seed_base + k`.
pub fn plan(cfg: &BenchConfig, mode: BatchMode) -> Vec<TrialJob> {
    let variants: Vec<(EstimatorKind, bool)> = match mode {
        BatchMode::AblateMf => {
            let mut v = vec![(EstimatorKind::Dem, true), (EstimatorKind::Dem, false)];
            if cfg.estimators.contains(&EstimatorKind::Vbm) {
                v.push((EstimatorKind::Vbm, false));
            }
            v
        }
        _ => cfg
            .estimators
            .iter()
            .map(|e| (*e, *e == EstimatorKind::Dem && cfg.use_mean_field))
            .collect(),
    };
    let seeds = (0..cfg.trials as u64).map(|k| cfg.seed_base + k);
    let job = |group: f64, seed: u64, cfg: BenchConfig| TrialJob {
        group,
        seed,
        cfg,
        variants: variants.clone(),
    };
    match mode {
        BatchMode::Table1 | BatchMode::Table2 | BatchMode::AblateMf => {
            seeds.map(|seed| job(f64::NAN, seed, cfg.clone())).collect()
        }
        BatchMode::SweepS | BatchMode::StateSseSweep => cfg
            .s_grid
            .iter()
            .flat_map(|&s| {
                let cell = BenchConfig { s, ..cfg.clone() };
                seeds.clone().map(move |seed| job(s, seed, cell.clone()))
            })
            .collect(),
        BatchMode::SweepLambda => seeds
            .map(|seed| {
                let lambda_true = draw_lambda(cfg, seed);
                job(f64::NAN, seed, BenchConfig { lambda_true, schedule: Vec::new(), ..cfg.clone() })
            })
            .collect(),
        BatchMode::Transient => {
            let schedule = cfg.transient_schedule();
            seeds
                .map(|seed| job(f64::NAN, seed, BenchConfig { schedule: schedule.clone(), ..cfg.clone() }))
                .collect()
        }
    }
}

/// Evaluate every variant of a job on one shared dataset.
pub fn run_job(job: &TrialJob) -> Result<Vec<TrialRecord>> {
    let data = make_dataset(&job.cfg.dataset_config(), job.seed)?;
    job.variants
        .iter()
        .map(|&(estimator, mean_field)| {
            let cfg = BenchConfig {
                use_mean_field: mean_field,
                ..job.cfg.clone()
            };
            run_on_dataset(&cfg, &data, estimator, job.group)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub group: f64,
    pub estimator: EstimatorKind,
    pub mean_field: bool,
    pub trials: usize,
    pub sse_r: Summary,
    /// Median over every trial with unstable ones counted as `+∞`.
    pub sse_r_median_all: f64,
    pub sse_x: Summary,
    pub lambda_error: Summary,
    pub settling_error: Summary,
    pub stability_pct: f64,
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub mode: BatchMode,
    pub config: BenchConfig,
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<GroupSummary>,
}

impl BatchReport {
    pub fn summary(&self, estimator: EstimatorKind, mean_field: bool) -> Vec<&GroupSummary> {
        self.summaries
            .iter()
            .filter(|s| s.estimator == estimator && (estimator != EstimatorKind::Dem || s.mean_field == mean_field))
            .collect()
    }

    /// Mean `λ̂(t)` over stable trials of one variant (rows: samples, columns: channels).
    pub fn mean_lambda_trace(&self, estimator: EstimatorKind, mean_field: bool) -> Option<DMatrix<f64>> {
        let traces: Vec<&DMatrix<f64>> = self
            .records
            .iter()
            .filter(|r| r.stable && r.estimator == estimator && r.mean_field == mean_field)
            .map(|r| &r.trace.lambda)
            .collect();
        let first = traces.first()?;
        let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
        for t in &traces {
            acc += *t;
        }
        Some(acc / traces.len() as f64)
    }
}

fn same_group(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// Aggregate records per `(group, estimator, mean-field)` in first-seen order.
pub fn summarize_records(records: &[TrialRecord]) -> Result<Vec<GroupSummary>> {
    let mut keys: Vec<(f64, EstimatorKind, bool)> = Vec::new();
    for r in records {
        if !keys
            .iter()
            .any(|k| same_group(k.0, r.group) && k.1 == r.estimator && k.2 == r.mean_field)
        {
            keys.push((r.group, r.estimator, r.mean_field));
        }
    }
    keys.into_iter()
        .map(|(group, estimator, mean_field)| {
            let cell: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| same_group(r.group, group) && r.estimator == estimator && r.mean_field == mean_field)
                .collect();
            let col = |f: fn(&TrialRecord) -> f64| cell.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let sse_r = col(|r| r.sse_r);
            Ok(GroupSummary {
                group,
                estimator,
                mean_field,
                trials: cell.len(),
                sse_r: summarize(&sse_r),
                sse_r_median_all: median_with_inf(&sse_r),
                sse_x: summarize(&col(|r| r.sse_x)),
                lambda_error: summarize(&col(|r| r.lambda_error)),
                settling_error: summarize(&col(|r| r.settling_error)),
                stability_pct: stability_rate(&cell.iter().map(|r| r.stable).collect::<Vec<_>>())?,
            })
        })
        .collect()
}

/// Run every job of a mode. Records come back in plan order either way.
pub fn run_batch(cfg: &BenchConfig, mode: BatchMode, parallel: bool) -> Result<BatchReport> {
    cfg.validate()?;
    let jobs = plan(cfg, mode);
    let nested: Vec<Result<Vec<TrialRecord>>> = if parallel {
        jobs.par_iter().map(run_job).collect()
    } else {
        jobs.iter().map(run_job).collect()
    };
    let mut records = Vec::new();
    for r in nested {
        records.extend(r?);
    }
    let summaries = summarize_records(&records)?;
    Ok(BatchReport {
        mode,
        config: cfg.clone(),
        records,
        summaries,
    })
}
