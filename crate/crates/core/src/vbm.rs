//! Variational-Bayes adaptive Kalman filter with inverse-Gamma posteriors on
//! the diagonal measurement-noise variances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{expm, spd_inverse, symmetrize};
use crate::plant::{Dataset, SystemModel};

/// Number of variational fixed-point iterations per measurement.
pub const DEFAULT_ITERATIONS: usize = 2;

/// Forgetting factor applied to `α`, `β` during prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPolicy {
    /// `ρ(n) = 1 − min(50/n, 0.1)`.
    Adaptive,
    Constant(f64),
}

impl RhoPolicy {
    pub fn at(self, n: usize) -> f64 {
        match self {
            RhoPolicy::Adaptive => 1.0 - (50.0 / n as f64).min(0.1),
            RhoPolicy::Constant(rho) => rho,
        }
    }
}

/// Exact discretization `(e^{A dt}, ∫₀^{dt} e^{Aτ} Q e^{Aᵀτ} dτ)` by Van Loan's method.
pub fn discretize(a: &DMatrix<f64>, q: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return dim_err(format!("A {:?} and Q {:?} must be square and equal", a.shape(), q.shape()));
    }
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a * dt));
    m.view_mut((0, n), (n, n)).copy_from(&(q * dt));
    m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * dt));
    let e = expm(&m);
    let a_d = e.view((n, n), (n, n)).transpose();
    let q_d = symmetrize(&(&a_d * e.view((0, n), (n, n))));
    Ok((a_d, q_d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VbmState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub t_index: usize,
}

impl VbmState {
    /// Prior with `α = 0`, `β = 1` on every channel.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, channels: usize) -> Self {
        Self {
            mean,
            cov,
            alpha: DVector::zeros(channels),
            beta: DVector::from_element(channels, 1.0),
            t_index: 0,
        }
    }

    /// Posterior-mean variance `β/α`, or `β` while `α = 0`.
    pub fn r_hat(&self) -> DVector<f64> {
        DVector::from_fn(self.beta.len(), |i, _| {
            if self.alpha[i] > 0.0 {
                self.beta[i] / self.alpha[i]
            } else {
                self.beta[i]
            }
        })
    }
}

/// Kalman measurement update with diagonal noise variances `r`.
pub fn kalman_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let innovation_cov = c * cov * c.transpose() + DMatrix::from_diagonal(r);
    let inv = spd_inverse(&innovation_cov)
        .map_err(|e| Error::Singular(format!("innovation covariance: {e}")))?;
    let gain = cov * c.transpose() * inv;
    let mean = mean + &gain * (y - c * mean);
    let cov = symmetrize(&(cov - &gain * c * cov));
    Ok((mean, cov))
}

/// One predict/update cycle with `iters` variational iterations.
pub fn vbm_step(
    state: &VbmState,
    y: &DVector<f64>,
    a_d: &DMatrix<f64>,
    q_d: &DMatrix<f64>,
    c: &DMatrix<f64>,
    iters: usize,
    rho: RhoPolicy,
) -> Result<VbmState> {
    if iters == 0 {
        return Err(Error::InvalidParameter("at least one VB iteration is required".into()));
    }
    let (n, m) = (state.mean.len(), state.alpha.len());
    if a_d.shape() != (n, n) || q_d.shape() != (n, n) || c.shape() != (m, n) || y.len() != m {
        return dim_err("VBM model matrices do not match the filter state");
    }
    let t_index = state.t_index + 1;
    let factor = rho.at(t_index);
    let mean_pred = a_d * &state.mean;
    let cov_pred = symmetrize(&(a_d * &state.cov * a_d.transpose() + q_d));
    let alpha = state.alpha.map(|a| factor * a + 0.5);
    let beta_prior = state.beta.map(|b| factor * b);

    let mut beta = beta_prior.clone();
    let mut mean = mean_pred.clone();
    let mut cov = cov_pred.clone();
    for _ in 0..iters {
        let r = beta.component_div(&alpha);
        (mean, cov) = kalman_update(&mean_pred, &cov_pred, y, c, &r)?;
        let residual = y - c * &mean;
        let spread = c * &cov * c.transpose();
        beta = DVector::from_fn(m, |i, _| beta_prior[i] + 0.5 * (residual[i] * residual[i] + spread[(i, i)]));
    }
    if !mean.iter().chain(cov.iter()).chain(beta.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("VBM update".into()));
    }
    Ok(VbmState {
        mean,
        cov,
        alpha,
        beta,
        t_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VbmConfig {
    pub iters: usize,
    pub rho: RhoPolicy,
    /// Initial state covariance; the initial mean is the true `x0`.
    pub initial_cov: f64,
    pub divergence_threshold: f64,
}

impl Default for VbmConfig {
    fn default() -> Self {
        Self {
            iters: DEFAULT_ITERATIONS,
            rho: RhoPolicy::Adaptive,
            initial_cov: 1e-2,
            divergence_threshold: crate::dem::DEFAULT_DIVERGENCE_THRESHOLD,
        }
    }
}

/// Per-sample filter output; rows after a divergence are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct VbmTrace {
    pub r_hat: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub x_hat: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub diverged_at: Option<usize>,
}

impl VbmTrace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Run the filter over a dataset, starting from its true `x0`.
pub fn vbm_run(dataset: &Dataset, cfg: &VbmConfig) -> Result<VbmTrace> {
    vbm_run_model(&dataset.model, &dataset.y, &dataset.x0, cfg)
}

pub fn vbm_run_model(model: &SystemModel, y: &DMatrix<f64>, x0: &DVector<f64>, cfg: &VbmConfig) -> Result<VbmTrace> {
    let (n, m) = (model.n(), model.m());
    if y.ncols() != m || x0.len() != n {
        return dim_err("measurements or x0 do not match the model");
    }
    let (a_d, q_d) = discretize(&model.a, &model.q, model.dt)?;
    let len = y.nrows();
    let nan = |cols| DMatrix::from_element(len, cols, f64::NAN);
    let mut trace = VbmTrace {
        r_hat: nan(m),
        lambda: nan(m),
        x_hat: nan(n),
        alpha: nan(m),
        beta: nan(m),
        diverged_at: None,
    };
    let mut state = VbmState::new(x0.clone(), DMatrix::identity(n, n) * cfg.initial_cov, m);
    for k in 0..len {
        let yk = y.row(k).transpose();
        state = match vbm_step(&state, &yk, &a_d, &q_d, &model.c, cfg.iters, cfg.rho) {
            Ok(next) => next,
            Err(Error::Singular(_)) | Err(Error::NonFinite(_)) => {
                trace.diverged_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        let r = state.r_hat();
        for i in 0..m {
            trace.r_hat[(k, i)] = r[i];
            trace.lambda[(k, i)] = -r[i].ln();
            trace.alpha[(k, i)] = state.alpha[i];
            trace.beta[(k, i)] = state.beta[i];
        }
        for i in 0..n {
            trace.x_hat[(k, i)] = state.mean[i];
        }
        if (0..m).any(|i| !(trace.lambda[(k, i)].abs() <= cfg.divergence_threshold)) {
            trace.diverged_at = Some(k);
            break;
        }
    }
    Ok(trace)
}
