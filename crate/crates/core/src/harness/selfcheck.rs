//! Fast internal consistency checks exposed through the CLI.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dem::{free_energy, grad_lambda, hess_lambda, observer_matrices, state_step, DemConfig, DemState, LogDetGradient};
use crate::error::Result;
use crate::genalg::{lift_system, GeneralizedVector, PredictionError};
use crate::harness::batch::run_batch;
use crate::harness::config::{BatchMode, BenchConfig};
use crate::noise::{derivative_covariance, generalized_precision, NoiseHyperParams, Smoothness, SmoothnessSpec};
use crate::plant::sample_stable_system;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_problem(rng: &mut ChaCha8Rng) -> Result<(crate::genalg::LiftedSystem, DemConfig, PredictionError, DemState)> {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let p = rng.random_range(0..=4);
    let a = sample_stable_system(rng.random(), n)?;
    let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let sys = lift_system(&a, &DMatrix::zeros(n, 1), &c, p, p)?;
    let lambda = DVector::from_fn(m, |_, _| rng.random_range(-1.0..2.0));
    let hp = NoiseHyperParams::new(
        lambda.clone(),
        DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
        DVector::from_fn(m, |_, _| rng.random_range(0.2..2.0)),
        rng.random_range(0.3..1.0),
        p,
        p,
    )?;
    let mut cfg = DemConfig::new(hp, DMatrix::identity(n, n) * 2.0, 0.1);
    cfg.logdet_mode = LogDetGradient::Half;
    let eps = PredictionError {
        eps_y: DVector::from_fn(sys.output_len(), |_, _| rng.random_range(-0.5..0.5)),
        eps_x: DVector::from_fn(sys.state_len(), |_, _| rng.random_range(-0.5..0.5)),
    };
    let state = DemState {
        x: GeneralizedVector::zeros(n, p),
        lambda,
        sigma_x: DMatrix::identity(sys.state_len(), sys.state_len()) * 0.1,
        sigma_lambda: DMatrix::identity(m, m) * 0.3,
        free_energy: 0.0,
        t: 0.0,
        diverged: false,
    };
    Ok((sys, cfg, eps, state))
}

fn f_at(sys: &crate::genalg::LiftedSystem, cfg: &DemConfig, eps: &PredictionError, state: &DemState, lambda: &DVector<f64>) -> Result<f64> {
    let hp = NoiseHyperParams { lambda: lambda.clone(), ..cfg.hp.clone() };
    let pi = generalized_precision(&hp, &cfg.pi_w)?;
    Ok(free_energy(eps, &pi, sys, state, cfg)?.total)
}

fn gradient_check(trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (sys, cfg, eps, state) = random_problem(&mut rng)?;
        let pi = generalized_precision(&cfg.hp, &cfg.pi_w)?;
        let g = grad_lambda(&eps, &pi, &sys, &state, &cfg)?;
        let h = hess_lambda(&eps, &pi, &sys, &state, &cfg)?;
        let step = 1e-4;
        for i in 0..g.len() {
            let mut up = state.lambda.clone();
            up[i] += step;
            let mut down = state.lambda.clone();
            down[i] -= step;
            let (fp, fm, f0) = (f_at(&sys, &cfg, &eps, &state, &up)?, f_at(&sys, &cfg, &eps, &state, &down)?, f_at(&sys, &cfg, &eps, &state, &state.lambda)?);
            let fd = (fp - fm) / (2.0 * step);
            let fdd = (fp - 2.0 * f0 + fm) / (step * step);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(1.0));
            worst = worst.max(1e-2 * (h[(i, i)] - fdd).abs() / fdd.abs().max(1.0));
        }
    }
    Ok(CheckOutcome {
        name: "free-energy gradient and curvature vs finite differences",
        passed: worst < 1e-6,
        detail: format!("worst scaled error {worst:.2e}"),
    })
}

fn smoothness_check() -> Result<CheckOutcome> {
    let spec = SmoothnessSpec::new(0.5, 6)?;
    let s = Smoothness::new(spec)?;
    let v = derivative_covariance(&spec)?;
    let err = (&s.matrix * v - DMatrix::identity(7, 7)).amax();
    Ok(CheckOutcome {
        name: "smoothness matrix inverts the derivative covariance",
        passed: err < 1e-8,
        detail: format!("max |S V − I| = {err:.2e}"),
    })
}

fn discretization_check() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (sys, cfg, _, _) = random_problem(&mut rng)?;
    let pi = generalized_precision(&cfg.hp, &cfg.pi_w)?;
    let (a1, b1) = observer_matrices(&sys, &pi, 1.0);
    let x = GeneralizedVector::new(sys.n, sys.p, DVector::from_fn(sys.state_len(), |_, _| rng.random_range(-1.0..1.0)))?;
    let y = GeneralizedVector::new(sys.m, sys.p, DVector::from_fn(sys.output_len(), |_, _| rng.random_range(-1.0..1.0)))?;
    let u = GeneralizedVector::zeros(sys.r, sys.d);
    let exact = state_step(&x, &y, &u, &a1, &b1, 0.1)?;
    let mut input = DVector::zeros(sys.output_len() + sys.input_len());
    input.rows_mut(0, sys.output_len()).copy_from(y.as_vector());
    let forcing = &b1 * input;
    let mut z = x.as_vector().clone();
    let h = 0.1 / 1000.0;
    for _ in 0..1000 {
        let f = |v: &DVector<f64>| &a1 * v + &forcing;
        let k1 = f(&z);
        let k2 = f(&(&z + &k1 * (h / 2.0)));
        let k3 = f(&(&z + &k2 * (h / 2.0)));
        let k4 = f(&(&z + &k3 * h));
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    let err = (exact.as_vector() - z).amax();
    Ok(CheckOutcome {
        name: "exact observer discretization vs fine RK4",
        passed: err < 1e-8,
        detail: format!("max error {err:.2e}"),
    })
}

fn determinism_check() -> Result<CheckOutcome> {
    let cfg = BenchConfig {
        trials: 3,
        horizon: 6.0,
        ..BenchConfig::default()
    };
    let strip = |r: crate::harness::batch::BatchReport| {
        r.records.iter().map(|x| x.fingerprint()).collect::<Vec<_>>()
    };
    let a = strip(run_batch(&cfg, BatchMode::Table1, false)?);
    let b = strip(run_batch(&cfg, BatchMode::Table1, true)?);
    Ok(CheckOutcome {
        name: "serial and parallel batches agree",
        passed: a == b,
        detail: format!("{} records", a.len()),
    })
}

pub fn run_selfcheck() -> Result<Vec<CheckOutcome>> {
    Ok(vec![gradient_check(20)?, smoothness_check()?, discretization_check()?, determinism_check()?])
}
