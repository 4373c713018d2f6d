use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use uavsec_cli::{run, sweep, RunManifest, SweepAxis, EXIT_FAILURE, EXIT_OK};
use uavsec_core::Scheme;

/// Secure multi-UAV OFDMA: optimize scheduling, power, jamming and trajectories.
#[derive(Parser, Debug)]
#[command(name = "uavsec", version)]
struct Args {
    /// Scenario config (TOML); the built-in default scenario when omitted
    #[arg(long)]
    scenario: Option<PathBuf>,

    /// Scheme: pa (multi-purpose), nj (no jamming), sp (split roles).
    /// A sweep accepts a comma-separated list
    #[arg(long, default_value = "pa", value_delimiter = ',')]
    scheme: Vec<Scheme>,

    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Relative objective change that counts as converged
    #[arg(long)]
    tol: Option<f64>,

    #[arg(long)]
    max_iter: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Record wall-clock seconds in metrics.json (makes it run-dependent)
    #[arg(long)]
    timing: bool,

    /// Sweep axis: mission_time (s) or peak_power (dBm)
    #[arg(long, requires = "values")]
    sweep: Option<SweepAxis>,

    /// Comma-separated ascending sweep values
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    values: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let manifest = RunManifest {
        scheme: args.scheme[0],
        scenario: args.scenario,
        tol: args.tol,
        max_iter: args.max_iter,
        out: args.out,
        seed: args.seed,
        timing: args.timing,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };

    let code = match args.sweep {
        Some(axis) => match sweep(&manifest, &args.scheme, axis, &args.values) {
            Ok(rows) => {
                for r in rows {
                    println!("{:>10} {} eta={:.6} converged={} {:.1}s", r.axis_value, r.scheme, r.eta_bpshz, r.converged, r.seconds);
                }
                EXIT_OK
            }
            Err(e) => {
                log::error!("{e:#}");
                EXIT_FAILURE
            }
        },
        None => {
            if args.scheme.len() > 1 {
                log::error!("a single run takes one scheme");
                return ExitCode::from(EXIT_FAILURE as u8);
            }
            match run(&manifest) {
                Ok(o) => {
                    if let Some(m) = &o.metrics {
                        println!("{} eta={:.6} iterations={} converged={} {:.1}s", m.scheme, m.eta_bpshz, m.iterations, m.converged, o.seconds);
                    }
                    o.exit_code
                }
                Err(e) => {
                    log::error!("{e:#}");
                    EXIT_FAILURE
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
