use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dem_ncm::dem::LogDetGradient;
use dem_ncm::harness::config::{BatchMode, BenchConfig, EstimatorKind};
use dem_ncm::harness::io::{read_dataset, write_batch, write_dataset, write_manifest, write_trace};
use dem_ncm::harness::run_batch;
use dem_ncm::harness::selfcheck::run_selfcheck;
use dem_ncm::harness::trial::{run_estimator, score};
use dem_ncm::plant::make_dataset;
use dem_ncm::{Error, Result};

#[derive(Parser)]
#[command(name = "dem-ncm", version, about = "Joint state and measurement-noise estimation under colored noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one dataset and write it as CSV.
    Simulate(Common),
    /// Run one estimator on a dataset file and write its trace.
    Estimate {
        /// Dataset CSV written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dem")]
        estimator: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run a benchmark batch.
    Bench {
        /// table1, table2, sweep_s, sweep_lambda, state_sse_sweep, transient, ablate_mf or all.
        #[arg(long, default_value = "table1")]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the kernel width or the noise level.
    Sweep {
        #[arg(long, value_enum)]
        over: SweepAxis,
        /// Comma-separated grid overriding the default one (kernel-width sweep only).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in consistency checks.
    Selfcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    S,
    Lambda,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogDetArg {
    Paper,
    Half,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with BenchConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Comma-separated list, e.g. `dem,vbm`.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, value_enum)]
    mean_field: Option<OnOff>,
    #[arg(long, value_enum)]
    logdet_mode: Option<LogDetArg>,
}

impl Common {
    fn config(&self, mode: BatchMode) -> Result<BenchConfig> {
        let mut cfg = match &self.config {
            Some(path) => BenchConfig::load(path)?,
            None => BenchConfig::preset(mode),
        };
        if let Some(seed) = self.seed {
            cfg.seed_base = seed;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        if let Some(list) = &self.estimators {
            cfg.estimators = list.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(mf) = self.mean_field {
            cfg.use_mean_field = matches!(mf, OnOff::On);
        }
        if let Some(mode) = self.logdet_mode {
            cfg.logdet_mode = match mode {
                LogDetArg::Paper => LogDetGradient::Full,
                LogDetArg::Half => LogDetGradient::Half,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn bench(cfg: &BenchConfig, mode: BatchMode, dir: &Path) -> Result<()> {
    let report = run_batch(cfg, mode, true)?;
    for s in &report.summaries {
        let group = if s.group.is_nan() { String::new() } else { format!(" s={}", s.group) };
        let variant = match (s.estimator, s.mean_field) {
            (EstimatorKind::Dem, false) => "dem (no mean-field)".to_string(),
            (e, _) => e.name().to_string(),
        };
        println!(
            "{}{group} {variant}: median SSE_R {:.3e}, mean SSE_x {:.3e}, stability {:.0}%",
            mode.name(),
            s.sse_r_median_all,
            s.sse_x.mean,
            s.stability_pct
        );
    }
    for path in write_batch(&report, dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.config(BatchMode::Table1)?;
            let data = make_dataset(&cfg.dataset_config(), cfg.seed_base)?;
            fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join(format!("dataset_seed{}.csv", cfg.seed_base));
            write_dataset(&data, &path)?;
            write_manifest(&common.out_dir, &cfg, "simulate", std::slice::from_ref(&path))?;
            println!("wrote {}", path.display());
        }
        Command::Estimate { data, estimator, common } => {
            let kind: EstimatorKind = estimator.parse()?;
            let data = read_dataset(&data)?;
            let mut cfg = common.config(BatchMode::Table1)?;
            let (n, m) = (data.model.n(), data.model.m());
            cfg.n = n;
            cfg.m = m;
            cfg.r = data.model.r_dim();
            cfg.s = data.s_true;
            cfg.x0 = data.x0.iter().copied().collect();
            cfg.eta.resize(m, cfg.eta[0]);
            cfg.prior_precision.resize(m, cfg.prior_precision[0]);
            cfg.lambda_true.resize(m, cfg.lambda_true[0]);
            let trace = run_estimator(&cfg, &data, kind)?;
            let rec = score(&cfg, &data, trace, f64::NAN, 0.0)?;
            fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join(format!("trace_{}_seed{}.csv", kind.name(), data.seed));
            write_trace(&rec.trace, &path)?;
            write_manifest(&common.out_dir, &cfg, &format!("estimate {}", kind.name()), std::slice::from_ref(&path))?;
            println!(
                "{}: lambda_hat {:?}, SSE_R {:.3e}, SSE_x {:.3e}, stable {}",
                kind.name(),
                rec.lambda_hat,
                rec.sse_r,
                rec.sse_x,
                rec.stable
            );
            println!("wrote {}", path.display());
        }
        Command::Bench { mode, common } => {
            let modes: Vec<BatchMode> = if mode.eq_ignore_ascii_case("all") {
                BatchMode::ALL.to_vec()
            } else {
                vec![mode.parse()?]
            };
            let nested = modes.len() > 1;
            for m in modes {
                let dir = if nested { common.out_dir.join(m.name()) } else { common.out_dir.clone() };
                bench(&common.config(m)?, m, &dir)?;
            }
        }
        Command::Sweep { over, grid, common } => {
            let mode = match over {
                SweepAxis::S => BatchMode::SweepS,
                SweepAxis::Lambda => BatchMode::SweepLambda,
            };
            let mut cfg = common.config(mode)?;
            if let Some(grid) = grid {
                cfg.s_grid = grid;
                cfg.validate()?;
            }
            bench(&cfg, mode, &common.out_dir)?;
        }
        Command::Selfcheck => {
            let outcomes = run_selfcheck()?;
            let mut failed = 0;
            for c in &outcomes {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::Config(format!("{failed} self-checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
