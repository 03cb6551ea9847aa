//! Benchmark configuration and its mapping onto dataset and estimator settings.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dem::{DemConfig, LogDetGradient, DEFAULT_DIVERGENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::noise::{NoiseHyperParams, WHITE_NOISE_SURROGATE};
use crate::plant::{DatasetConfig, LambdaSegment};
use crate::vbm::{RhoPolicy, VbmConfig, DEFAULT_ITERATIONS};

/// Plant matrix used by the fixed-system experiments.
pub const FIXED_A: [[f64; 2]; 2] = [[0.0484, 0.7535], [-0.7617, -0.2187]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Dem,
    Vbm,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Dem => "dem",
            EstimatorKind::Vbm => "vbm",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dem" => Ok(EstimatorKind::Dem),
            "vbm" => Ok(EstimatorKind::Vbm),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Table1,
    Table2,
    SweepS,
    SweepLambda,
    StateSseSweep,
    Transient,
    AblateMf,
}

impl BatchMode {
    pub const ALL: [BatchMode; 7] = [
        BatchMode::Table1,
        BatchMode::Table2,
        BatchMode::SweepS,
        BatchMode::SweepLambda,
        BatchMode::StateSseSweep,
        BatchMode::Transient,
        BatchMode::AblateMf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BatchMode::Table1 => "table1",
            BatchMode::Table2 => "table2",
            BatchMode::SweepS => "sweep_s",
            BatchMode::SweepLambda => "sweep_lambda",
            BatchMode::StateSseSweep => "state_sse_sweep",
            BatchMode::Transient => "transient",
            BatchMode::AblateMf => "ablate_mf",
        }
    }
}

impl std::str::FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BatchMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown batch mode '{s}'")))
    }
}

/// Every knob of a benchmark batch. Defaults reproduce the standard two-state
/// colored-noise setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: usize,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    /// Horizon `T` in seconds.
    pub horizon: f64,
    pub dt: f64,
    /// Noise kernel width; values at or below the white surrogate mean white noise.
    pub s: f64,
    /// Grid for the smoothness sweeps.
    pub s_grid: Vec<f64>,
    pub lambda_true: Vec<f64>,
    /// Uniform range for per-trial `λ` draws in the noise-level sweep.
    pub lambda_range: [f64; 2],
    /// Piecewise-constant `λ` schedule overriding `lambda_true` when non-empty.
    pub schedule: Vec<LambdaSegment>,
    /// Levels visited by the first channel in the transient experiment.
    pub transient_levels: Vec<f64>,
    pub eta: Vec<f64>,
    pub prior_precision: Vec<f64>,
    /// `Q = e^{−process_log_precision} I`.
    pub process_log_precision: f64,
    pub x0: Vec<f64>,
    pub p: usize,
    pub d: usize,
    pub estimators: Vec<EstimatorKind>,
    pub use_mean_field: bool,
    pub logdet_mode: LogDetGradient,
    pub k_x: f64,
    pub vbm_iters: usize,
    pub vbm_initial_cov: f64,
    pub seed_base: u64,
    /// Row-major plant matrix; a stable matrix is drawn per trial when absent.
    pub fixed_a: Option<Vec<Vec<f64>>>,
    pub divergence_threshold: f64,
    /// Report the full-matrix SSE of `R̂` instead of the diagonal one.
    pub full_matrix_sse: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let e1 = (-1.0f64).exp();
        Self {
            trials: 50,
            n: 2,
            m: 2,
            r: 1,
            horizon: 32.0,
            dt: 0.1,
            s: 0.5,
            s_grid: vec![0.4, 0.5, 0.7, 0.9],
            lambda_true: vec![4.0, 3.0],
            lambda_range: [-5.0, 8.0],
            schedule: Vec::new(),
            transient_levels: vec![2.0, 5.0, 3.0],
            eta: vec![0.001, 0.001],
            prior_precision: vec![e1, e1],
            process_log_precision: 5.0,
            x0: vec![1.0, -1.0],
            p: 6,
            d: 2,
            estimators: vec![EstimatorKind::Dem, EstimatorKind::Vbm],
            use_mean_field: true,
            logdet_mode: LogDetGradient::Full,
            k_x: 1.0,
            vbm_iters: DEFAULT_ITERATIONS,
            vbm_initial_cov: VbmConfig::default().initial_cov,
            seed_base: 0,
            fixed_a: None,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            full_matrix_sse: false,
        }
    }
}

impl BenchConfig {
    /// Defaults adjusted to the experiment a batch mode reproduces.
    pub fn preset(mode: BatchMode) -> Self {
        let mut cfg = Self::default();
        let fixed = Some(FIXED_A.iter().map(|r| r.to_vec()).collect());
        match mode {
            BatchMode::Table1 | BatchMode::Table2 => {}
            BatchMode::SweepS => {
                cfg.fixed_a = fixed;
                cfg.prior_precision = vec![1.0; 2];
                cfg.s_grid = (0..=10).map(|i| i as f64 * 0.02).collect();
                cfg.trials = 5;
            }
            BatchMode::SweepLambda => {}
            BatchMode::StateSseSweep => {
                cfg.s_grid = (1..=9).map(|i| i as f64 * 0.1).collect();
                cfg.trials = 30;
            }
            BatchMode::Transient => {
                cfg.fixed_a = fixed;
                cfg.trials = 30;
            }
            BatchMode::AblateMf => {
                cfg.trials = 100;
                cfg.estimators = vec![EstimatorKind::Dem];
            }
        }
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.n == 0 || self.m == 0 || self.r == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(self.dt > 0.0) || !(self.horizon > self.dt) {
            return bad(format!("need 0 < dt < horizon (dt={}, horizon={})", self.dt, self.horizon));
        }
        if !(self.s >= 0.0) || self.s_grid.iter().any(|s| !(*s >= 0.0)) {
            return bad("kernel widths must be non-negative".into());
        }
        for (name, len) in [
            ("lambda_true", self.lambda_true.len()),
            ("eta", self.eta.len()),
            ("prior_precision", self.prior_precision.len()),
        ] {
            if len != self.m {
                return bad(format!("{name} has {len} entries, expected m = {}", self.m));
            }
        }
        if self.x0.len() != self.n {
            return bad(format!("x0 has {} entries, expected n = {}", self.x0.len(), self.n));
        }
        if self.schedule.iter().any(|seg| seg.lambda.len() != self.m) {
            return bad("schedule entries need one λ per output".into());
        }
        if !(self.lambda_range[0] <= self.lambda_range[1]) {
            return bad("lambda_range must be ordered".into());
        }
        if let Some(a) = &self.fixed_a {
            if a.len() != self.n || a.iter().any(|row| row.len() != self.n) {
                return bad(format!("fixed_a must be {0}×{0}", self.n));
            }
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        if !(self.k_x > 0.0) || self.vbm_iters == 0 || !(self.vbm_initial_cov > 0.0) {
            return bad("k_x, vbm_iters and vbm_initial_cov must be positive".into());
        }
        Ok(())
    }

    /// Kernel width handed to the generator and the estimator.
    pub fn effective_s(s: f64) -> f64 {
        s.max(WHITE_NOISE_SURROGATE)
    }

    pub fn lambda_schedule(&self) -> Vec<LambdaSegment> {
        if self.schedule.is_empty() {
            vec![LambdaSegment {
                t_start: 0.0,
                lambda: self.lambda_true.clone(),
            }]
        } else {
            self.schedule.clone()
        }
    }

    /// Three-or-more equal segments stepping the first channel through
    /// `transient_levels`, other channels held at `lambda_true`.
    pub fn transient_schedule(&self) -> Vec<LambdaSegment> {
        let segments = self.transient_levels.len().max(1);
        let length = self.horizon / segments as f64;
        self.transient_levels
            .iter()
            .enumerate()
            .map(|(k, level)| {
                let mut lambda = self.lambda_true.clone();
                lambda[0] = *level;
                LambdaSegment {
                    t_start: k as f64 * length,
                    lambda,
                }
            })
            .collect()
    }

    pub fn process_covariance(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n) * (-self.process_log_precision).exp()
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            n: self.n,
            a: self
                .fixed_a
                .as_ref()
                .map(|rows| DMatrix::from_fn(self.n, self.n, |i, j| rows[i][j])),
            b: DMatrix::zeros(self.n, self.r),
            c: DMatrix::identity(self.m, self.n),
            q: self.process_covariance(),
            lambda_schedule: self.lambda_schedule(),
            x0: DVector::from_column_slice(&self.x0),
            dt: self.dt,
            horizon: self.horizon,
            s: Self::effective_s(self.s),
        }
    }

    pub fn dem_config(&self, pi_w: DMatrix<f64>) -> Result<DemConfig> {
        let eta = DVector::from_column_slice(&self.eta);
        let hp = NoiseHyperParams::new(
            eta.clone(),
            eta,
            DVector::from_column_slice(&self.prior_precision),
            Self::effective_s(self.s),
            self.p,
            self.d,
        )?;
        let mut cfg = DemConfig::new(hp, pi_w, self.dt);
        cfg.k_x = self.k_x;
        cfg.use_mean_field = self.use_mean_field;
        cfg.logdet_mode = self.logdet_mode;
        cfg.divergence_threshold = self.divergence_threshold;
        Ok(cfg)
    }

    pub fn vbm_config(&self) -> VbmConfig {
        VbmConfig {
            iters: self.vbm_iters,
            rho: RhoPolicy::Adaptive,
            initial_cov: self.vbm_initial_cov,
            divergence_threshold: self.divergence_threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_standard_setup() {
        let cfg = BenchConfig::default();
        cfg.validate().unwrap();
        let ds = cfg.dataset_config();
        assert_eq!(ds, DatasetConfig::standard());
        assert_eq!(cfg.eta, vec![0.001; 2]);
        assert_eq!(cfg.prior_precision, vec![(-1.0f64).exp(); 2]);
        assert_eq!((cfg.p, cfg.d, cfg.trials), (6, 2, 50));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = BenchConfig::preset(BatchMode::SweepS);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(BenchConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = BenchConfig::from_toml_str("trials = 3\ns = 0.7\n").unwrap();
        assert_eq!(partial.trials, 3);
        assert_eq!(partial.s, 0.7);
        assert_eq!(partial.n, 2);
        assert!(BenchConfig::from_toml_str("trails = 3").is_err());
        assert!(BenchConfig::from_toml_str("trials = 0").is_err());
    }

    #[test]
    fn transient_schedule_has_equal_segments() {
        let cfg = BenchConfig::preset(BatchMode::Transient);
        let sched = cfg.transient_schedule();
        assert_eq!(sched.len(), 3);
        assert_eq!(sched[1].t_start, 32.0 / 3.0);
        assert_eq!(sched.iter().map(|s| s.lambda[0]).collect::<Vec<_>>(), vec![2.0, 5.0, 3.0]);
        assert!(sched.iter().all(|s| s.lambda[1] == 3.0));
    }

    #[test]
    fn names_parse_back() {
        for mode in BatchMode::ALL {
            assert_eq!(mode.name().parse::<BatchMode>().unwrap(), mode);
        }
        assert_eq!("VBM".parse::<EstimatorKind>().unwrap(), EstimatorKind::Vbm);
        assert!("kf".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn zero_width_maps_to_white_surrogate() {
        assert_eq!(BenchConfig::effective_s(0.0), WHITE_NOISE_SURROGATE);
        assert_eq!(BenchConfig::effective_s(0.5), 0.5);
    }
}
