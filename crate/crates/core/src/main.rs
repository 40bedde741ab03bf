use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shockmix::config::CaseConfig;
use shockmix::driver::{analyze_snapshot, bic_table_csv, measure_sensor_cost, run_case, write_sod_reference, AnalyzeOptions};
use shockmix::sensors::FeatureChoice;
use shockmix::snapshot::SnapshotRecord;
use shockmix::{Error, Result};

#[derive(Parser)]
#[command(name = "shockmix", version, about = "DG solver with mixture-model shock sensing")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "SHOCKMIX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a case from a TOML config.
    Solve {
        config: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit mixtures for a range of cluster counts and print the BIC/AIC table.
    Analyze {
        snapshot: PathBuf,
        #[arg(long, default_value = "gradp_divv")]
        features: String,
        #[arg(long, default_value_t = 1)]
        kmin: usize,
        #[arg(long, default_value_t = 6)]
        kmax: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Time each sensor relative to the full step.
    BenchSensor {
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        /// Untimed steps before measuring, so the cold start and the first warm
        /// starts are excluded.
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        /// Start from this snapshot instead of the initial condition.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Write the exact shock-tube solution as CSV.
    SodExact {
        #[arg(long, default_value_t = 0.2)]
        time: f64,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 1.4)]
        gamma: f64,
        #[arg(long, short)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Solve { config, output, seed } => {
            let mut cfg = CaseConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = output.or_else(|| cfg.output.dir.clone().map(PathBuf::from));
            let report = run_case(&cfg, dir.as_deref())?;
            println!(
                "{}: {} steps to t = {:.6}, min rho {:.3e}, min p {:.3e}, wall {:.2}s (sensor {:.2}s)",
                report.case,
                report.steps,
                report.time,
                report.min_density,
                report.min_pressure,
                report.wall.total,
                report.wall.sensor
            );
        }
        Command::Analyze { snapshot, features, kmin, kmax, seed, max_iters, tol, output } => {
            let opts = AnalyzeOptions {
                features: FeatureChoice::parse(&features)?,
                k_min: kmin,
                k_max: kmax,
                seed,
                max_iters,
                delta: tol,
                ..AnalyzeOptions::default()
            };
            let rows = analyze_snapshot(&snapshot, &opts)?;
            let csv = bic_table_csv(&rows);
            match output {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::BenchSensor { config, steps, warmup, from, output } => {
            let cfg = CaseConfig::load(&config)?;
            let start = from.as_deref().map(SnapshotRecord::read).transpose()?;
            let report = measure_sensor_cost(&cfg, start.as_ref(), steps, warmup)?;
            let json = report.to_json();
            match output {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::SodExact { time, points, gamma, output } => {
            write_sod_reference(&output, time, gamma, points)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
