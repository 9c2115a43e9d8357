use clap::{Args, Parser, Subcommand};
use pnp_cli::commands::{SCAN_EPSILONS, SCAN_FORMULATIONS, SCAN_SCHEMES, TIMING_EPSILONS};
use pnp_cli::config::{parse_formulation, parse_scheme};
use pnp_cli::{CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pnp", version, about = "Poisson-Nernst-Planck solver: runs, convergence studies, stability scans and timing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set epsilon=1e-9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Single run writing series.csv, field dumps and report.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write profile.csv along the grid column nearest to this x.
        #[arg(long)]
        profile_x: Option<f64>,
    },
    /// Richardson order study with dt halved per level, starting at dt_over_h·h.
    Converge {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        /// Comma-separated ε values; defaults to the configured epsilon.
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
    },
    /// Stability matrix over schemes × formulations × ε.
    Scan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        formulations: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
    },
    /// Mean seconds per step in both formulations.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let base = match &common.config {
        Some(p) => RunConfig::from_file(p),
        None => RunConfig::from_json("{}"),
    };
    base.and_then(|c| c.with_overrides(&common.overrides)).map_err(|e| CliError::Config(e.to_string()))
}

fn or_default<T: Clone>(v: Vec<T>, default: &[T]) -> Vec<T> {
    if v.is_empty() {
        default.to_vec()
    } else {
        v
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    pnp_cli::init_threads()?;
    match cli.command {
        Command::Run { common, profile_x } => {
            let cfg = load(&common)?;
            let res = pnp_cli::run(&cfg, profile_x)?;
            let r = &res.report;
            match &r.blow_up {
                None => println!("stable: {} steps in {:.2} s, output in {}", r.steps, r.timings.wall_seconds, res.output.display()),
                Some(b) => println!("unstable at step {}: {}; partial output in {}", b.step, b.reason, res.output.display()),
            }
            Ok(res.exit_code())
        }
        Command::Converge { common, levels, epsilons } => {
            let cfg = load(&common)?;
            let eps = or_default(epsilons, &[cfg.epsilon]);
            let out = pnp_cli::converge_cmd(&cfg, &eps, levels)?;
            for r in &out.reports {
                let orders: Vec<String> =
                    r.data.orders.iter().map(|o| o.map_or("-".into(), |v| format!("{v:.3}"))).collect();
                println!("{} {} ε = {:e}: {} orders [{}]", r.scheme, r.formulation, r.epsilon, r.verdict, orders.join(", "));
            }
            Ok(0)
        }
        Command::Scan { common, schemes, formulations, epsilons } => {
            let cfg = load(&common)?;
            let schemes = if schemes.is_empty() {
                SCAN_SCHEMES.to_vec()
            } else {
                schemes.iter().map(|s| parse_scheme(s)).collect::<Result<_, _>>().map_err(CliError::Config)?
            };
            let formulations = if formulations.is_empty() {
                SCAN_FORMULATIONS.to_vec()
            } else {
                formulations.iter().map(|s| parse_formulation(s)).collect::<Result<_, _>>().map_err(CliError::Config)?
            };
            let eps = or_default(epsilons, &SCAN_EPSILONS);
            let out = pnp_cli::scan_cmd(&cfg, &schemes, &formulations, &eps)?;
            for c in &out.matrix.cells {
                println!("{:>5} {:>13} ε = {:7.0e}: {:?} (peak growth {:.3e})", c.scheme.as_str(), c.formulation.name(), c.epsilon, c.verdict, c.peak_growth);
            }
            for v in &out.monotonicity_violations {
                eprintln!("warning: {v}");
            }
            Ok(0)
        }
        Command::Timing { common, epsilons, iterations } => {
            let cfg = load(&common)?;
            let eps = or_default(epsilons, &TIMING_EPSILONS);
            let out = pnp_cli::timing_cmd(&cfg, &eps, iterations)?;
            println!("{}", pnp_cli::commands::TIMING_HEADER);
            for r in &out.table.rows {
                println!("{:e},{:.4e},{:.4e}", r.epsilon, r.t_primitive, r.t_cq);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
