//! Online Dynamic Expectation Maximization: joint generalized-state and
//! measurement-noise log-precision estimation by free-energy ascent.
//!
//! Each sample period runs the state observer first (exact discretization of
//! the linear observer ODE), then takes one Gauss-Newton step on `λ` evaluated
//! at the freshly updated state. Conditional covariances are re-derived from
//! their optimality conditions every step, and the `x̃`–`λ` cross-covariance is
//! zero by construction (mean-field factorization).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::genalg::{prediction_error, GeneralizedVector, LiftedSystem, PredictionError, TaylorEmbedding};
use crate::linalg::{expm, expm_with_integral, spd_inverse, spd_ln_det};
use crate::noise::{GeneralizedPrecision, NoiseHyperParams, Smoothness};

/// Default bound on `|λⁱ|` beyond which a run is classified as diverged.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 20.0;

/// Constant contributed by `½ ln|Π̃|` to `F_λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetGradient {
    /// `p + 1`, the default.
    #[serde(rename = "paper", alias = "paper_literal")]
    Full,
    /// `(p + 1)/2`, the exact derivative of `½ ln|Π̃|`.
    Half,
}

impl LogDetGradient {
    pub fn coefficient(self, p: usize) -> f64 {
        match self {
            LogDetGradient::Full => (p + 1) as f64,
            LogDetGradient::Half => (p + 1) as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemConfig {
    pub hp: NoiseHyperParams,
    /// Known process precision `Πʷ = Q⁻¹`.
    pub pi_w: DMatrix<f64>,
    pub k_x: f64,
    pub dt: f64,
    pub use_mean_field: bool,
    pub logdet_mode: LogDetGradient,
    pub divergence_threshold: f64,
}

impl DemConfig {
    pub fn new(hp: NoiseHyperParams, pi_w: DMatrix<f64>, dt: f64) -> Self {
        Self {
            hp,
            pi_w,
            k_x: 1.0,
            dt,
            use_mean_field: true,
            logdet_mode: LogDetGradient::Full,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if !(self.k_x > 0.0) || !(self.dt > 0.0) || !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "k_x, dt and divergence threshold must be positive (got {}, {}, {})",
                self.k_x, self.dt, self.divergence_threshold
            )));
        }
        Ok(())
    }
}

/// Variational posterior `q(x̃) q(λ)` at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct DemState {
    pub x: GeneralizedVector,
    pub lambda: DVector<f64>,
    pub sigma_x: DMatrix<f64>,
    pub sigma_lambda: DMatrix<f64>,
    pub free_energy: f64,
    pub t: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergyBreakdown {
    pub internal: f64,
    pub entropy_x: f64,
    pub entropy_lambda: f64,
    pub mean_field_x: f64,
    pub mean_field_lambda: f64,
    pub total: f64,
}

/// `ε̃_x̃ᵀ Π̃ ε̃_x̃ = C̃ᵀΠ̃ᶻC̃ + (Dˣ−Ã)ᵀΠ̃ʷ(Dˣ−Ã)`, i.e. `−U_x̃x̃`.
pub fn state_information(sys: &LiftedSystem, pi: &GeneralizedPrecision) -> DMatrix<f64> {
    let proc = sys.process_operator();
    sys.c_tilde.transpose() * &pi.pi_z_gen * &sys.c_tilde + proc.transpose() * &pi.pi_w_gen * proc
}

/// `qᵢ = ε̃ᵀ Π̃_{λⁱ} ε̃` for every channel.
pub fn channel_quadratics(eps: &PredictionError, pi: &GeneralizedPrecision) -> DVector<f64> {
    DVector::from_fn(pi.channels(), |i, _| pi.channel_quadratic(&eps.eps_y, i))
}

/// `tᵢ = tr(Σ^x̃ ε̃_x̃ᵀ Π̃_{λⁱ} ε̃_x̃)` for every channel.
pub fn mean_field_traces(sigma_x: &DMatrix<f64>, sys: &LiftedSystem, pi: &GeneralizedPrecision) -> DVector<f64> {
    let projected = &sys.c_tilde * sigma_x * sys.c_tilde.transpose();
    let m = pi.channels();
    let size = pi.smoothness.nrows();
    DVector::from_fn(m, |i, _| {
        let mut acc = 0.0;
        for k in 0..size {
            for l in 0..size {
                acc += pi.smoothness[(k, l)] * projected[(l * m + i, k * m + i)];
            }
        }
        pi.lambda[i].exp() * acc
    })
}

fn check_channels(pi: &GeneralizedPrecision, hp: &NoiseHyperParams) -> Result<()> {
    if pi.channels() != hp.channels() {
        return dim_err(format!("Π̃ has {} channels, hyperparameters {}", pi.channels(), hp.channels()));
    }
    Ok(())
}

/// `U = −½ ε^λᵀ P^λ ε^λ + ½ ln|P^λ| − ½ ε̃ᵀ Π̃ ε̃ + ½ ln|Π̃|` with `λ` taken from `pi`.
pub fn internal_energy(eps: &PredictionError, pi: &GeneralizedPrecision, hp: &NoiseHyperParams) -> Result<f64> {
    check_channels(pi, hp)?;
    if eps.eps_y.len() != pi.pi_z_gen.nrows() || eps.eps_x.len() != pi.pi_w_gen.nrows() {
        return dim_err("prediction error does not match Π̃");
    }
    let eps_lambda = &pi.lambda - &hp.eta;
    let prior = eps_lambda
        .iter()
        .zip(hp.prior_precision.iter())
        .map(|(e, p)| p * e * e)
        .sum::<f64>();
    let ln_det_prior = hp.prior_precision.iter().map(|p| p.ln()).sum::<f64>();
    let weighted = eps.eps_y.dot(&(&pi.pi_z_gen * &eps.eps_y)) + eps.eps_x.dot(&(&pi.pi_w_gen * &eps.eps_x));
    Ok(-0.5 * prior + 0.5 * ln_det_prior - 0.5 * weighted + 0.5 * pi.ln_det())
}

/// Free energy `F = U + H^x̃ + H^λ + W^x̃ + W^λ`.
///
/// `pi` must be built from the `λ` being evaluated; the covariances are taken
/// from `state`. With mean-field terms disabled both `W` terms are zero.
pub fn free_energy(
    eps: &PredictionError,
    pi: &GeneralizedPrecision,
    sys: &LiftedSystem,
    state: &DemState,
    cfg: &DemConfig,
) -> Result<FreeEnergyBreakdown> {
    let internal = internal_energy(eps, pi, &cfg.hp)?;
    let entropy_x = 0.5 * spd_ln_det(&state.sigma_x)?;
    let entropy_lambda = 0.5 * spd_ln_det(&state.sigma_lambda)?;
    let (mean_field_x, mean_field_lambda) = if cfg.use_mean_field {
        let info = state_information(sys, pi);
        let w_x = -0.5 * (&state.sigma_x * info).trace();
        let q = channel_quadratics(eps, pi);
        let w_l = 0.5
            * (0..q.len())
                .map(|i| state.sigma_lambda[(i, i)] * (-cfg.hp.prior_precision[i] - 0.5 * q[i]))
                .sum::<f64>();
        (w_x, w_l)
    } else {
        (0.0, 0.0)
    };
    Ok(FreeEnergyBreakdown {
        internal,
        entropy_x,
        entropy_lambda,
        mean_field_x,
        mean_field_lambda,
        total: internal + entropy_x + entropy_lambda + mean_field_x + mean_field_lambda,
    })
}

/// Mean-field curvature correction `½tᵢ + ¼Σ^λᵢᵢ qᵢ` shared by gradient and Hessian.
fn mean_field_correction(
    q: &DVector<f64>,
    sys: &LiftedSystem,
    pi: &GeneralizedPrecision,
    state: &DemState,
) -> DVector<f64> {
    let t = mean_field_traces(&state.sigma_x, sys, pi);
    DVector::from_fn(q.len(), |i, _| 0.5 * t[i] + 0.25 * state.sigma_lambda[(i, i)] * q[i])
}

/// `F_λ` for the exponential precision parametrization.
pub fn grad_lambda(
    eps: &PredictionError,
    pi: &GeneralizedPrecision,
    sys: &LiftedSystem,
    state: &DemState,
    cfg: &DemConfig,
) -> Result<DVector<f64>> {
    check_channels(pi, &cfg.hp)?;
    let hp = &cfg.hp;
    let q = channel_quadratics(eps, pi);
    let g = cfg.logdet_mode.coefficient(hp.p);
    let mut grad = DVector::from_fn(q.len(), |i, _| {
        -0.5 * q[i] - hp.prior_precision[i] * (pi.lambda[i] - hp.eta[i]) + g
    });
    if cfg.use_mean_field {
        grad -= mean_field_correction(&q, sys, pi, state);
    }
    Ok(grad)
}

/// Diagonal `F_λλ`; off-diagonal entries are identically zero.
pub fn hess_lambda(
    eps: &PredictionError,
    pi: &GeneralizedPrecision,
    sys: &LiftedSystem,
    state: &DemState,
    cfg: &DemConfig,
) -> Result<DMatrix<f64>> {
    check_channels(pi, &cfg.hp)?;
    let q = channel_quadratics(eps, pi);
    let mut diag = DVector::from_fn(q.len(), |i, _| -0.5 * q[i] - cfg.hp.prior_precision[i]);
    if cfg.use_mean_field {
        diag -= mean_field_correction(&q, sys, pi, state);
    }
    Ok(DMatrix::from_diagonal(&diag))
}

/// Gauss-Newton increment `λ + (e^{F_λλ Δt} − I) F_λλ⁻¹ F_λ`, elementwise for a
/// diagonal Hessian. A zero curvature entry falls back to `λ + F_λ Δt`.
pub fn lambda_step(lambda: &DVector<f64>, grad: &DVector<f64>, hess: &DMatrix<f64>, dt: f64) -> DVector<f64> {
    DVector::from_fn(lambda.len(), |i, _| {
        let h = hess[(i, i)];
        let gain = if h == 0.0 { dt } else { (h * dt).exp_m1() / h };
        lambda[i] + gain * grad[i]
    })
}

/// Upper bound `η^λⁱ + (p+1)/P^λⁱⁱ + 1` on the data log-precision for a unique maximum.
pub fn global_max_bound(hp: &NoiseHyperParams) -> DVector<f64> {
    let p1 = (hp.p + 1) as f64;
    DVector::from_fn(hp.channels(), |i, _| hp.eta[i] + p1 / hp.prior_precision[i] + 1.0)
}

pub fn check_global_max_condition(lambda_true: &DVector<f64>, hp: &NoiseHyperParams) -> Vec<bool> {
    let bound = global_max_bound(hp);
    lambda_true.iter().zip(bound.iter()).map(|(l, b)| l < b).collect()
}

/// Observer matrices `A₁ = Dˣ − kˣ ε̃_x̃ᵀΠ̃ε̃_x̃` and `B₁ = kˣ[C̃ᵀΠ̃ᶻ, (Dˣ−Ã)ᵀΠ̃ʷB̃]`.
pub fn observer_matrices(sys: &LiftedSystem, pi: &GeneralizedPrecision, k_x: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let a1 = &sys.d_x - state_information(sys, pi) * k_x;
    let proc = sys.process_operator();
    let b_y = sys.c_tilde.transpose() * &pi.pi_z_gen * k_x;
    let b_u = proc.transpose() * &pi.pi_w_gen * &sys.b_tilde * k_x;
    let rows = a1.nrows();
    let mut b1 = DMatrix::zeros(rows, b_y.ncols() + b_u.ncols());
    b1.view_mut((0, 0), b_y.shape()).copy_from(&b_y);
    b1.view_mut((0, b_y.ncols()), b_u.shape()).copy_from(&b_u);
    (a1, b1)
}

/// Reciprocal 1-norm condition estimate above which `A₁⁻¹` is used directly.
const DIRECT_INVERSE_RCOND: f64 = 1e-8;

/// Exact zero-order-hold discretization of `dx̃/dt = A₁x̃ + B₁[ỹ; ũ]` over `dt`.
pub fn state_step(
    x: &GeneralizedVector,
    y_tilde: &GeneralizedVector,
    u_tilde: &GeneralizedVector,
    a1: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    dt: f64,
) -> Result<GeneralizedVector> {
    let ny = y_tilde.as_vector().len();
    let nu = u_tilde.as_vector().len();
    if a1.nrows() != x.as_vector().len() || b1.nrows() != a1.nrows() || b1.ncols() != ny + nu {
        return dim_err(format!(
            "observer matrices {:?}/{:?} do not match x̃ {} and inputs {}+{}",
            a1.shape(),
            b1.shape(),
            x.as_vector().len(),
            ny,
            nu
        ));
    }
    let mut input = DVector::zeros(ny + nu);
    input.rows_mut(0, ny).copy_from(y_tilde.as_vector());
    input.rows_mut(ny, nu).copy_from(u_tilde.as_vector());
    let forcing = b1 * input;

    let direct = a1.clone().try_inverse().filter(|inv| {
        let rcond = 1.0 / (a1.lp_norm(1) * inv.lp_norm(1));
        rcond > DIRECT_INVERSE_RCOND
    });
    let next = match direct {
        Some(inv) => {
            let phi = expm(&(a1 * dt));
            let eye = DMatrix::identity(a1.nrows(), a1.nrows());
            &phi * x.as_vector() + inv * (phi - eye) * forcing
        }
        None => {
            let (phi, gamma) = expm_with_integral(a1, &forcing, dt);
            phi * x.as_vector() + gamma
        }
    };
    GeneralizedVector::new(x.base_dim(), x.order(), next)
}

/// `Σ^x̃ = (ε̃_x̃ᵀ Π̃ ε̃_x̃)⁻¹`, `Σ^λ = (P^λ + ½ diag(qᵢ))⁻¹`.
pub fn conditional_covariances(
    eps: &PredictionError,
    pi: &GeneralizedPrecision,
    sys: &LiftedSystem,
    hp: &NoiseHyperParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_channels(pi, hp)?;
    let sigma_x = spd_inverse(&state_information(sys, pi))
        .map_err(|e| Error::Singular(format!("state information matrix: {e}")))?;
    let q = channel_quadratics(eps, pi);
    let sigma_lambda = DMatrix::from_diagonal(&DVector::from_fn(q.len(), |i, _| {
        1.0 / (hp.prior_precision[i] + 0.5 * q[i])
    }));
    Ok((sigma_x, sigma_lambda))
}

/// Joint online estimator with the smoothness matrix and embeddings cached.
#[derive(Debug, Clone)]
pub struct DemEstimator {
    cfg: DemConfig,
    sys: LiftedSystem,
    smoothness: Smoothness,
    y_embedding: TaylorEmbedding,
    u_embedding: TaylorEmbedding,
}

impl DemEstimator {
    pub fn new(sys: LiftedSystem, cfg: DemConfig) -> Result<Self> {
        cfg.validate()?;
        if sys.p != cfg.hp.p || sys.d != cfg.hp.d {
            return dim_err("lifted system orders differ from the hyperparameters");
        }
        if sys.m != cfg.hp.channels() || cfg.pi_w.shape() != (sys.n, sys.n) {
            return dim_err("Πʷ or λ do not match the plant dimensions");
        }
        let smoothness = Smoothness::new(cfg.hp.smoothness_spec())?;
        Ok(Self {
            y_embedding: TaylorEmbedding::new(cfg.hp.p, cfg.dt)?,
            u_embedding: TaylorEmbedding::new(cfg.hp.d, cfg.dt)?,
            cfg,
            sys,
            smoothness,
        })
    }

    pub fn config(&self) -> &DemConfig {
        &self.cfg
    }

    pub fn system(&self) -> &LiftedSystem {
        &self.sys
    }

    pub fn precision(&self, lambda: &DVector<f64>) -> Result<GeneralizedPrecision> {
        GeneralizedPrecision::from_smoothness(&self.smoothness, lambda, &self.cfg.pi_w)
    }

    /// Posterior before any data: `x̃ = [x0; 0; ...]`, `λ = η^λ`.
    pub fn initial_state(&self, x0: &DVector<f64>) -> Result<DemState> {
        if x0.len() != self.sys.n {
            return dim_err(format!("x0 has length {}, expected {}", x0.len(), self.sys.n));
        }
        let x = GeneralizedVector::from_value(x0, self.sys.p);
        let lambda = self.cfg.hp.eta.clone();
        let pi = self.precision(&lambda)?;
        let eps = PredictionError {
            eps_y: DVector::zeros(self.sys.output_len()),
            eps_x: DVector::zeros(self.sys.state_len()),
        };
        let (sigma_x, sigma_lambda) = conditional_covariances(&eps, &pi, &self.sys, &self.cfg.hp)?;
        let mut state = DemState {
            x,
            lambda,
            sigma_x,
            sigma_lambda,
            free_energy: 0.0,
            t: 0.0,
            diverged: false,
        };
        state.free_energy = free_energy(&eps, &pi, &self.sys, &state, &self.cfg)?.total;
        Ok(state)
    }

    /// One sample period on embedded measurements `ỹ`, `ũ` observed at time `t`.
    pub fn step(&self, state: &DemState, y_tilde: &GeneralizedVector, u_tilde: &GeneralizedVector, t: f64) -> Result<DemState> {
        if y_tilde.as_vector().len() != self.sys.output_len() || u_tilde.as_vector().len() != self.sys.input_len() {
            return dim_err("embedded measurement sizes do not match the lifted system");
        }
        if state.diverged {
            return Ok(state.clone());
        }
        match self.advance(state, y_tilde, u_tilde, t) {
            Ok(next) => Ok(next),
            Err(Error::Singular(_)) | Err(Error::NonFinite(_)) => {
                let mut halted = state.clone();
                halted.diverged = true;
                halted.t = t;
                Ok(halted)
            }
            Err(e) => Err(e),
        }
    }

    fn advance(&self, state: &DemState, y_tilde: &GeneralizedVector, u_tilde: &GeneralizedVector, t: f64) -> Result<DemState> {
        let cfg = &self.cfg;
        let pi = self.precision(&state.lambda)?;
        let (a1, b1) = observer_matrices(&self.sys, &pi, cfg.k_x);
        let x = state_step(&state.x, y_tilde, u_tilde, &a1, &b1, cfg.dt)?;
        let eps = prediction_error(&x, y_tilde, u_tilde, &self.sys)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite("prediction error".into()));
        }
        let (sigma_x, sigma_lambda) = conditional_covariances(&eps, &pi, &self.sys, &cfg.hp)?;
        let current = DemState {
            x,
            lambda: state.lambda.clone(),
            sigma_x,
            sigma_lambda,
            free_energy: state.free_energy,
            t,
            diverged: false,
        };
        let grad = grad_lambda(&eps, &pi, &self.sys, &current, cfg)?;
        let hess = hess_lambda(&eps, &pi, &self.sys, &current, cfg)?;
        let lambda = lambda_step(&current.lambda, &grad, &hess, cfg.dt);

        if lambda.iter().any(|l| !l.is_finite() || l.abs() > cfg.divergence_threshold) {
            return Ok(DemState { lambda, diverged: true, ..current });
        }

        let pi = self.precision(&lambda)?;
        let (sigma_x, sigma_lambda) = conditional_covariances(&eps, &pi, &self.sys, &cfg.hp)?;
        let mut next = DemState {
            lambda,
            sigma_x,
            sigma_lambda,
            ..current
        };
        next.free_energy = free_energy(&eps, &pi, &self.sys, &next, cfg)?.total;
        if !next.free_energy.is_finite() {
            next.diverged = true;
        }
        Ok(next)
    }

    /// Run over every sample of a time-major `(y, u)` record, embedding each
    /// sample with a centred window.
    pub fn run(&self, times: &[f64], y: &DMatrix<f64>, u: &DMatrix<f64>, x0: &DVector<f64>) -> Result<DemTrace> {
        let len = times.len();
        if y.nrows() != len || u.nrows() != len {
            return dim_err("time, output and input sequences differ in length");
        }
        let (n, m) = (self.sys.n, self.sys.m);
        let mut trace = DemTrace::with_capacity(len, n, m);
        let mut state = self.initial_state(x0)?;
        for (k, &t) in times.iter().enumerate() {
            let y_tilde = self.y_embedding.embed_at(y, k)?;
            let u_tilde = self.u_embedding.embed_at(u, k)?;
            state = self.step(&state, &y_tilde, &u_tilde, t)?;
            trace.record(k, &state);
            if state.diverged {
                trace.diverged_at = Some(k);
                break;
            }
        }
        Ok(trace)
    }
}

/// Free-function form of one online step on raw sample windows.
pub fn online_step(
    state: &DemState,
    y_window: &[DVector<f64>],
    u_window: &[DVector<f64>],
    cfg: &DemConfig,
    sys: &LiftedSystem,
) -> Result<DemState> {
    let est = DemEstimator::new(sys.clone(), cfg.clone())?;
    let y_tilde = est.y_embedding.embed(y_window)?;
    let u_tilde = est.u_embedding.embed(u_window)?;
    est.step(state, &y_tilde, &u_tilde, state.t + cfg.dt)
}

/// Per-sample estimator output; rows after a divergence are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DemTrace {
    pub lambda: DMatrix<f64>,
    pub x_hat: DMatrix<f64>,
    pub free_energy: Vec<f64>,
    pub sigma_lambda: DMatrix<f64>,
    pub diverged_at: Option<usize>,
}

impl DemTrace {
    fn with_capacity(len: usize, n: usize, m: usize) -> Self {
        Self {
            lambda: DMatrix::from_element(len, m, f64::NAN),
            x_hat: DMatrix::from_element(len, n, f64::NAN),
            free_energy: vec![f64::NAN; len],
            sigma_lambda: DMatrix::from_element(len, m, f64::NAN),
            diverged_at: None,
        }
    }

    fn record(&mut self, k: usize, state: &DemState) {
        let n = self.x_hat.ncols();
        for i in 0..self.lambda.ncols() {
            self.lambda[(k, i)] = state.lambda[i];
            self.sigma_lambda[(k, i)] = state.sigma_lambda[(i, i)];
        }
        for i in 0..n {
            self.x_hat[(k, i)] = state.x.as_vector()[i];
        }
        self.free_energy[k] = state.free_energy;
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genalg::lift_system;
    use crate::noise::generalized_precision;

    fn scalar_setup(p: usize, lambda: f64) -> (LiftedSystem, DemConfig) {
        let a = DMatrix::from_element(1, 1, -0.8);
        let b = DMatrix::from_element(1, 1, 0.5);
        let c = DMatrix::from_element(1, 1, 1.0);
        let sys = lift_system(&a, &b, &c, p, p).unwrap();
        let hp = NoiseHyperParams::new(
            DVector::from_element(1, lambda),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            0.5,
            p,
            p,
        )
        .unwrap();
        let cfg = DemConfig::new(hp, DMatrix::from_element(1, 1, 1.0), 0.1);
        (sys, cfg)
    }

    fn identity_state(sys: &LiftedSystem, m: usize) -> DemState {
        DemState {
            x: GeneralizedVector::zeros(sys.n, sys.p),
            lambda: DVector::zeros(m),
            sigma_x: DMatrix::identity(sys.state_len(), sys.state_len()),
            sigma_lambda: DMatrix::identity(m, m),
            free_energy: 0.0,
            t: 0.0,
            diverged: false,
        }
    }

    #[test]
    fn internal_energy_zero_error() {
        let (sys, cfg) = scalar_setup(2, 0.0);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let eps = PredictionError {
            eps_y: DVector::zeros(sys.output_len()),
            eps_x: DVector::zeros(sys.state_len()),
        };
        let u = internal_energy(&eps, &pi, &cfg.hp).unwrap();
        assert!((u - 0.5 * pi.ln_det()).abs() < 1e-14);
    }

    #[test]
    fn internal_energy_scalar_hand_value() {
        let (_, cfg) = scalar_setup(0, 0.0);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let eps = PredictionError {
            eps_y: DVector::from_element(1, 1.0),
            eps_x: DVector::from_element(1, 1.0),
        };
        assert!((internal_energy(&eps, &pi, &cfg.hp).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn free_energy_toggle_and_entropy() {
        let (sys, mut cfg) = scalar_setup(1, 0.3);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let eps = PredictionError {
            eps_y: DVector::from_vec(vec![0.2, -0.4]),
            eps_x: DVector::from_vec(vec![0.1, 0.5]),
        };
        let mut state = identity_state(&sys, 1);
        state.lambda[0] = 0.3;
        let with_mf = free_energy(&eps, &pi, &sys, &state, &cfg).unwrap();
        assert_eq!(with_mf.entropy_x, 0.0);
        assert_eq!(with_mf.entropy_lambda, 0.0);
        assert!(with_mf.mean_field_x < 0.0 && with_mf.mean_field_lambda < 0.0);
        let sum = with_mf.internal + with_mf.entropy_x + with_mf.entropy_lambda + with_mf.mean_field_x + with_mf.mean_field_lambda;
        assert_eq!(with_mf.total, sum);
        cfg.use_mean_field = false;
        let without = free_energy(&eps, &pi, &sys, &state, &cfg).unwrap();
        assert_eq!(without.total, without.internal + without.entropy_x + without.entropy_lambda);
    }

    #[test]
    fn gradient_at_prior_with_zero_error() {
        for mode in [LogDetGradient::Full, LogDetGradient::Half] {
            let (sys, mut cfg) = scalar_setup(6, 0.0);
            cfg.use_mean_field = false;
            cfg.logdet_mode = mode;
            let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
            let eps = PredictionError {
                eps_y: DVector::zeros(sys.output_len()),
                eps_x: DVector::zeros(sys.state_len()),
            };
            let state = identity_state(&sys, 1);
            let g = grad_lambda(&eps, &pi, &sys, &state, &cfg).unwrap();
            assert_eq!(g[0], mode.coefficient(6));
            let h = hess_lambda(&eps, &pi, &sys, &state, &cfg).unwrap();
            assert_eq!(h[(0, 0)], -1.0);
        }
        assert_eq!(LogDetGradient::Full.coefficient(6), 7.0);
        assert_eq!(LogDetGradient::Half.coefficient(6), 3.5);
    }

    #[test]
    fn lambda_step_cases() {
        let lam = DVector::from_vec(vec![1.0, -2.0]);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, -0.5]));
        assert_eq!(lambda_step(&lam, &DVector::zeros(2), &h, 0.1), lam);

        let g = DVector::from_vec(vec![0.6, -0.2]);
        let newton = DVector::from_fn(2, |i, _| lam[i] - g[i] / h[(i, i)]);
        let far = lambda_step(&lam, &g, &h, 1e6);
        assert!((far - newton).norm() < 1e-12);

        // F = −½(λ−a)²: F_λ = −(λ−a), F_λλ = −1.
        let (a, dt) = (2.5, 0.3);
        let mut l = DVector::from_element(1, -1.0);
        for _ in 0..5 {
            let prev = l[0];
            let g = DVector::from_element(1, -(prev - a));
            l = lambda_step(&l, &g, &DMatrix::from_element(1, 1, -1.0), dt);
            let expected = prev + ((-dt).exp() - 1.0) * (prev - a);
            assert!((l[0] - expected).abs() < 1e-14);
        }

        let zero_curv = lambda_step(&DVector::from_element(1, 0.0), &DVector::from_element(1, 2.0), &DMatrix::zeros(1, 1), 0.1);
        assert!((zero_curv[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn global_max_condition_cases() {
        let hp = |eta: f64, prec: f64| {
            NoiseHyperParams::new(
                DVector::zeros(2),
                DVector::from_element(2, eta),
                DVector::from_element(2, prec),
                0.5,
                6,
                2,
            )
            .unwrap()
        };
        let h = hp(0.0, 1.0);
        assert_eq!(global_max_bound(&h)[0], 8.0);
        assert_eq!(check_global_max_condition(&DVector::from_vec(vec![7.99, -5.0]), &h), vec![true, true]);
        assert_eq!(check_global_max_condition(&DVector::from_vec(vec![8.0, 9.0]), &h), vec![false, false]);
        let h = hp(0.001, (-1.0f64).exp());
        let bound = global_max_bound(&h)[0];
        assert!((bound - (0.001 + 7.0 * std::f64::consts::E + 1.0)).abs() < 1e-12);
        assert!((bound - 20.03).abs() < 0.01);
    }

    #[test]
    fn observer_matrices_cases() {
        let (sys, cfg) = scalar_setup(0, 0.7);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let (a0, b0) = observer_matrices(&sys, &pi, 0.0);
        assert_eq!(a0, sys.d_x);
        assert!(b0.iter().all(|v| *v == 0.0));

        let k = 1.7;
        let (a, b, c, pz, pw) = (-0.8, 0.5, 1.0, 0.7f64.exp(), 1.0);
        let (a1, b1) = observer_matrices(&sys, &pi, k);
        assert!((a1[(0, 0)] + k * (c * c * pz + a * a * pw)).abs() < 1e-12);
        assert!((b1[(0, 0)] - k * c * pz).abs() < 1e-12);
        // (Dˣ−Ã)ᵀΠʷB̃ = (−a)·pw·b
        assert!((b1[(0, 1)] - k * (-a) * pw * b).abs() < 1e-12);

        let (sys, cfg) = scalar_setup(3, 0.2);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let (a_0, b_0) = observer_matrices(&sys, &pi, 0.0);
        let (a_1, b_1) = observer_matrices(&sys, &pi, 1.0);
        let (a_2, b_2) = observer_matrices(&sys, &pi, 2.0);
        assert!(((&a_2 - &a_0) - (&a_1 - &a_0) * 2.0).abs().max() < 1e-12);
        assert!(((&b_2 - &b_0) - (&b_1 - &b_0) * 2.0).abs().max() < 1e-12);
    }

    #[test]
    fn state_step_cases() {
        let (sys, cfg) = scalar_setup(1, 0.0);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let (a1, b1) = observer_matrices(&sys, &pi, 1.0);
        let zero = state_step(
            &GeneralizedVector::zeros(1, 1),
            &GeneralizedVector::zeros(1, 1),
            &GeneralizedVector::zeros(1, 1),
            &a1,
            &b1,
            0.1,
        )
        .unwrap();
        assert!(zero.as_vector().iter().all(|v| *v == 0.0));

        // k = 0: A₁ = Dˣ is singular, so the augmented form is taken.
        let (d, b0) = observer_matrices(&sys, &pi, 0.0);
        let x = GeneralizedVector::new(1, 1, DVector::from_vec(vec![2.0, -3.0])).unwrap();
        let dt = 0.25;
        let next = state_step(&x, &GeneralizedVector::zeros(1, 1), &GeneralizedVector::zeros(1, 1), &d, &b0, dt).unwrap();
        assert!((next.as_vector()[0] - (2.0 - 3.0 * dt)).abs() < 1e-14);
        assert!((next.as_vector()[1] + 3.0).abs() < 1e-14);
    }

    #[test]
    fn direct_and_augmented_discretizations_agree() {
        let (sys, cfg) = scalar_setup(2, 1.0);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let (a1, b1) = observer_matrices(&sys, &pi, 1.3);
        let x = GeneralizedVector::new(1, 2, DVector::from_vec(vec![0.3, -0.2, 0.9])).unwrap();
        let y = GeneralizedVector::new(1, 2, DVector::from_vec(vec![1.0, 0.5, -0.4])).unwrap();
        let u = GeneralizedVector::new(1, 2, DVector::from_vec(vec![0.2, 0.0, 0.1])).unwrap();
        let direct = state_step(&x, &y, &u, &a1, &b1, 0.1).unwrap();
        let mut input = DVector::zeros(6);
        input.rows_mut(0, 3).copy_from(y.as_vector());
        input.rows_mut(3, 3).copy_from(u.as_vector());
        let (phi, gamma) = expm_with_integral(&a1, &(&b1 * input), 0.1);
        let augmented = phi * x.as_vector() + gamma;
        assert!((direct.as_vector() - augmented).norm() < 1e-12);
    }

    #[test]
    fn conditional_covariance_cases() {
        let (sys, cfg) = scalar_setup(0, 0.4);
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w).unwrap();
        let zero = PredictionError { eps_y: DVector::zeros(1), eps_x: DVector::zeros(1) };
        let (sx, sl) = conditional_covariances(&zero, &pi, &sys, &cfg.hp).unwrap();
        assert_eq!(sl[(0, 0)], 1.0);
        let expected = 1.0 / (0.4f64.exp() + 0.64 * 1.0);
        assert!((sx[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn mean_field_traces_match_dense_form() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.4, -0.3, -1.1]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let sys = lift_system(&a, &DMatrix::zeros(2, 1), &c, 2, 1).unwrap();
        let hp = NoiseHyperParams::new(
            DVector::from_vec(vec![0.5, -0.3]),
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
            0.4,
            2,
            1,
        )
        .unwrap();
        let pi = generalized_precision(&hp, &DMatrix::identity(2, 2)).unwrap();
        let sigma = spd_inverse(&state_information(&sys, &pi)).unwrap();
        let t = mean_field_traces(&sigma, &sys, &pi);
        for i in 0..2 {
            let dense = (&sigma * sys.c_tilde.transpose() * pi.pi_z_derivative(i) * &sys.c_tilde).trace();
            assert!((t[i] - dense).abs() < 1e-12);
        }
    }

    #[test]
    fn online_step_is_pure() {
        let (sys, cfg) = scalar_setup(2, 0.0);
        let est = DemEstimator::new(sys.clone(), cfg.clone()).unwrap();
        let state = est.initial_state(&DVector::from_element(1, 1.0)).unwrap();
        let window: Vec<_> = [0.9, 1.0, 1.05].iter().map(|v| DVector::from_element(1, *v)).collect();
        let u_window: Vec<_> = (0..3).map(|_| DVector::zeros(1)).collect();
        let a = online_step(&state, &window, &u_window, &cfg, &sys).unwrap();
        let b = online_step(&state, &window, &u_window, &cfg, &sys).unwrap();
        assert_eq!(a, b);
        assert!(!a.diverged);
        assert!((a.t - 0.1).abs() < 1e-15);
        assert!(online_step(&state, &window[..2], &u_window, &cfg, &sys).is_err());
    }

    #[test]
    fn divergence_is_flagged_not_thrown() {
        let (sys, mut cfg) = scalar_setup(1, 0.0);
        cfg.divergence_threshold = 0.5;
        let est = DemEstimator::new(sys, cfg).unwrap();
        let times: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        // Tiny residuals drive λ upward past the artificial threshold.
        let y = DMatrix::from_element(50, 1, 0.0);
        let u = DMatrix::zeros(50, 1);
        let trace = est.run(&times, &y, &u, &DVector::zeros(1)).unwrap();
        assert!(trace.diverged());
        let k = trace.diverged_at.unwrap();
        assert!(k + 1 < 50);
        assert!(trace.lambda[(k + 1, 0)].is_nan());
    }
}
