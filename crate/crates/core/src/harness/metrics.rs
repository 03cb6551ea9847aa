//! Error metrics and batch statistics.

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};

/// `Σᵢ (R̂ᵢᵢ − Rᵢᵢ)²`.
pub fn sse_r(r_hat: &DMatrix<f64>, r_true: &DMatrix<f64>) -> Result<f64> {
    if r_hat.shape() != r_true.shape() || !r_hat.is_square() {
        return dim_err(format!("R̂ {:?} vs R {:?}", r_hat.shape(), r_true.shape()));
    }
    Ok((0..r_hat.nrows()).map(|i| (r_hat[(i, i)] - r_true[(i, i)]).powi(2)).sum())
}

/// `Σᵢⱼ (R̂ᵢⱼ − Rᵢⱼ)²`.
pub fn sse_r_full(r_hat: &DMatrix<f64>, r_true: &DMatrix<f64>) -> Result<f64> {
    if r_hat.shape() != r_true.shape() {
        return dim_err(format!("R̂ {:?} vs R {:?}", r_hat.shape(), r_true.shape()));
    }
    Ok((r_hat - r_true).norm_squared())
}

/// `Σₜ ‖x̂(t) − x(t)‖²` over time-major sequences, skipping the first `burn_in` rows.
pub fn sse_x(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>, burn_in: usize) -> Result<f64> {
    if x_hat.shape() != x_true.shape() {
        return dim_err(format!("x̂ {:?} vs x {:?}", x_hat.shape(), x_true.shape()));
    }
    Ok((burn_in..x_hat.nrows())
        .map(|k| (x_hat.row(k) - x_true.row(k)).norm_squared())
        .sum())
}

/// Mean `|λ̂ − λ|` over every channel and the rows from `burn_in` on.
pub fn mean_abs_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, burn_in: usize) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return dim_err(format!("{:?} vs {:?}", estimate.shape(), truth.shape()));
    }
    let rows = estimate.nrows().saturating_sub(burn_in);
    if rows == 0 || estimate.ncols() == 0 {
        return Err(Error::InvalidParameter("no samples after burn-in".into()));
    }
    let total: f64 = (burn_in..estimate.nrows())
        .flat_map(|k| (0..estimate.ncols()).map(move |i| (k, i)))
        .map(|(k, i)| (estimate[(k, i)] - truth[(k, i)]).abs())
        .sum();
    Ok(total / (rows * estimate.ncols()) as f64)
}

/// Column means over the last `fraction` of the rows.
pub fn tail_mean(trace: &DMatrix<f64>, fraction: f64) -> Vec<f64> {
    let rows = trace.nrows();
    let count = ((rows as f64 * fraction).round() as usize).clamp(1, rows.max(1));
    let from = rows - count.min(rows);
    (0..trace.ncols())
        .map(|i| (from..rows).map(|k| trace[(k, i)]).sum::<f64>() / count as f64)
        .collect()
}

/// `100 · stable / total`.
pub fn stability_rate(stable: &[bool]) -> Result<f64> {
    if stable.is_empty() {
        return Err(Error::InvalidParameter("stability rate of an empty batch".into()));
    }
    Ok(100.0 * stable.iter().filter(|s| **s).count() as f64 / stable.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

/// Mean, sample standard deviation and median of the finite values.
pub fn summarize(values: &[f64]) -> Summary {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let count = finite.len();
    if count == 0 {
        return Summary { count, mean: f64::NAN, std: f64::NAN, median: f64::NAN };
    }
    finite.sort_by(f64::total_cmp);
    let mean = finite.iter().sum::<f64>() / count as f64;
    let std = if count > 1 {
        (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    let median = if count % 2 == 1 {
        finite[count / 2]
    } else {
        0.5 * (finite[count / 2 - 1] + finite[count / 2])
    };
    Summary { count, mean, std, median }
}

/// Median including non-finite entries, which sort above every finite value.
pub fn median_with_inf(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values.iter().map(|x| if x.is_finite() { *x } else { f64::INFINITY }).collect();
    v.sort_by(f64::total_cmp);
    let c = v.len();
    if c % 2 == 1 {
        v[c / 2]
    } else {
        0.5 * (v[c / 2 - 1] + v[c / 2])
    }
}
