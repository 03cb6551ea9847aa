//! Ground-truth data: random stable plants, RK4 integration under colored
//! noise, and seeded dataset assembly.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::noise::{sample_colored_noise, unit_colored_noise};

/// Rejection threshold on `max Re λ(A)`.
pub const STABILITY_MARGIN: f64 = -0.01;
const MAX_SYSTEM_DRAWS: usize = 100_000;

/// Continuous-time plant `ẋ = Ax + Bu + w`, `y = Cx + z`, sampled at `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dt: f64,
}

impl SystemModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn r_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 || !self.a.is_square() {
            return dim_err(format!("A must be square, got {:?}", self.a.shape()));
        }
        if self.b.nrows() != n || self.c.ncols() != n {
            return dim_err("B rows and C columns must match the state dimension");
        }
        if self.q.shape() != (n, n) || self.r.shape() != (self.m(), self.m()) {
            return dim_err("Q must be n×n and R m×m");
        }
        for (name, cov) in [("Q", &self.q), ("R", &self.r)] {
            if (cov - cov.transpose()).abs().max() > 1e-12 * cov.abs().max() {
                return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
            }
            if Cholesky::new(cov.clone()).is_none() {
                return Err(Error::Singular(format!("{name} is not positive definite")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !is_stable(&self.a, 0.0) {
            return Err(Error::InvalidParameter("A is not Hurwitz".into()));
        }
        Ok(())
    }
}

/// True when every eigenvalue of `a` has real part below `margin`.
pub fn is_stable(a: &DMatrix<f64>, margin: f64) -> bool {
    max_real_eigenvalue(a) < margin
}

pub fn max_real_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Uniform `[−1, 1]` entries, redrawn until `max Re λ(A) < −0.01`.
pub fn sample_stable_system(rng_seed: u64, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("state dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for _ in 0..MAX_SYSTEM_DRAWS {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..=1.0));
        if is_stable(&a, STABILITY_MARGIN) {
            return Ok(a);
        }
    }
    Err(Error::RetryCapExhausted(MAX_SYSTEM_DRAWS))
}

/// Piecewise-constant measurement log-precision: `λ(t) = lambda` from `t_start` on.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LambdaSegment {
    pub t_start: f64,
    pub lambda: Vec<f64>,
}

/// `λ(t)` under a schedule sorted by `t_start`.
pub fn lambda_at(schedule: &[LambdaSegment], t: f64) -> &[f64] {
    let mut current = &schedule[0].lambda;
    for seg in schedule {
        if seg.t_start <= t + 1e-9 {
            current = &seg.lambda;
        }
    }
    current
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    /// Time-major sequences: one row per sample.
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub model: SystemModel,
    pub x0: DVector<f64>,
    pub s_true: f64,
    pub seed: u64,
    pub lambda_schedule: Vec<LambdaSegment>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// True log-precision of every measurement channel at each sample.
    pub fn lambda_true(&self) -> DMatrix<f64> {
        let m = self.model.m();
        let mut out = DMatrix::zeros(self.len(), m);
        for (k, &t) in self.times.iter().enumerate() {
            let lam = lambda_at(&self.lambda_schedule, t);
            for i in 0..m {
                out[(k, i)] = lam[i];
            }
        }
        out
    }
}

/// Number of samples on `[0, horizon]` at spacing `dt`.
pub fn sample_count(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round() as usize + 1
}

/// Integrate the plant with fixed-step RK4; `u`, `w` are held constant over each step.
pub fn simulate_plant(
    model: &SystemModel,
    u_seq: &DMatrix<f64>,
    w_seq: &DMatrix<f64>,
    z_seq: &DMatrix<f64>,
    x0: &DVector<f64>,
    horizon: f64,
) -> Result<Dataset> {
    let (n, m, r) = (model.n(), model.m(), model.r_dim());
    let steps = sample_count(horizon, model.dt);
    if u_seq.shape() != (steps, r) || w_seq.shape() != (steps, n) || z_seq.shape() != (steps, m) {
        return dim_err(format!(
            "sequences must be {steps} rows with {r}/{n}/{m} columns, got {:?}/{:?}/{:?}",
            u_seq.shape(),
            w_seq.shape(),
            z_seq.shape()
        ));
    }
    if x0.len() != n {
        return dim_err(format!("x0 has length {}, expected {n}", x0.len()));
    }
    let dt = model.dt;
    let mut x = DMatrix::zeros(steps, n);
    let mut y = DMatrix::zeros(steps, m);
    let mut state = x0.clone();
    for k in 0..steps {
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("plant state at step {k}")));
        }
        x.row_mut(k).copy_from(&state.transpose());
        let out = &model.c * &state + z_seq.row(k).transpose();
        y.row_mut(k).copy_from(&out.transpose());

        let forcing = &model.b * u_seq.row(k).transpose() + w_seq.row(k).transpose();
        let f = |s: &DVector<f64>| &model.a * s + &forcing;
        let k1 = f(&state);
        let k2 = f(&(&state + &k1 * (dt / 2.0)));
        let k3 = f(&(&state + &k2 * (dt / 2.0)));
        let k4 = f(&(&state + &k3 * dt));
        state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    let lambda = (0..m).map(|i| -model.r[(i, i)].ln()).collect();
    Ok(Dataset {
        times: (0..steps).map(|k| k as f64 * dt).collect(),
        u: u_seq.clone(),
        y,
        x,
        model: model.clone(),
        x0: x0.clone(),
        s_true: 0.0,
        seed: 0,
        lambda_schedule: vec![LambdaSegment { t_start: 0.0, lambda }],
    })
}

/// Everything needed to synthesize a dataset except the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    /// Fixed plant matrix; drawn with [`sample_stable_system`] when `None`.
    pub a: Option<DMatrix<f64>>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub lambda_schedule: Vec<LambdaSegment>,
    pub x0: DVector<f64>,
    pub dt: f64,
    pub horizon: f64,
    pub s: f64,
}

impl DatasetConfig {
    /// Two-state plant with `B = 0`, `C = I`, `Q = e⁻⁵I`, `R = diag(e⁻⁴, e⁻³)`,
    /// `x0 = [1, −1]`, `dt = 0.1`, `T = 32`, `s = 0.5`.
    pub fn standard() -> Self {
        Self {
            n: 2,
            a: None,
            b: DMatrix::zeros(2, 1),
            c: DMatrix::identity(2, 2),
            q: DMatrix::identity(2, 2) * (-5.0f64).exp(),
            lambda_schedule: vec![LambdaSegment { t_start: 0.0, lambda: vec![4.0, 3.0] }],
            x0: DVector::from_vec(vec![1.0, -1.0]),
            dt: 0.1,
            horizon: 32.0,
            s: 0.5,
        }
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    fn validate(&self) -> Result<()> {
        if self.lambda_schedule.is_empty() {
            return Err(Error::InvalidParameter("λ schedule is empty".into()));
        }
        if self.lambda_schedule.iter().any(|s| s.lambda.len() != self.m()) {
            return dim_err("λ schedule entries must have one value per output");
        }
        if self.lambda_schedule.windows(2).any(|w| w[1].t_start < w[0].t_start) {
            return Err(Error::InvalidParameter("λ schedule must be sorted by start time".into()));
        }
        if let Some(a) = &self.a {
            if a.shape() != (self.n, self.n) {
                return dim_err("fixed A does not match n");
            }
        }
        Ok(())
    }
}

/// Deterministic dataset for `(config, seed)`.
pub fn make_dataset(config: &DatasetConfig, rng_seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(rng_seed);
    let a_seed: u64 = master.random();
    let w_seed: u64 = master.random();
    let z_seed: u64 = master.random();

    let a = match &config.a {
        Some(a) => a.clone(),
        None => sample_stable_system(a_seed, config.n)?,
    };
    let m = config.m();
    let r0 = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        config.lambda_schedule[0].lambda.iter().map(|l| (-l).exp()),
    ));
    let model = SystemModel {
        a,
        b: config.b.clone(),
        c: config.c.clone(),
        q: config.q.clone(),
        r: r0,
        dt: config.dt,
    };
    model.validate()?;

    let steps = sample_count(config.horizon, config.dt);
    let w = sample_colored_noise(w_seed, config.n, steps, config.dt, config.s, &config.q)?;
    let mut z_rng = ChaCha8Rng::seed_from_u64(z_seed);
    let mut z = unit_colored_noise(&mut z_rng, m, steps, config.dt, config.s);
    for k in 0..steps {
        let lam = lambda_at(&config.lambda_schedule, k as f64 * config.dt);
        for i in 0..m {
            z[(k, i)] *= (-0.5 * lam[i]).exp();
        }
    }
    let u = DMatrix::zeros(steps, model.r_dim());

    let mut data = simulate_plant(&model, &u, &w, &z, &config.x0, config.horizon)?;
    data.s_true = config.s;
    data.seed = rng_seed;
    data.lambda_schedule = config.lambda_schedule.clone();
    Ok(data)
}
