use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use scale_shrink::estimators::t_max;
use scale_shrink::experiment::{
    create_output, default_a_grid, default_t_grid, format_identity, run_table, sweep_a, sweep_t,
    verify, with_workers, write_reports, write_rows, ExperimentConfig, OutputFormat, Workers,
};
use scale_shrink::haff::HaffOperatorConfig;
use scale_shrink::risk::{LossKind, Pairing};
use scale_shrink::{DistributionFamily, Scenario};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "scale-shrink", version, about = "Monte Carlo experiments for scale-matrix shrinkage estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output file (defaults to the config's output, then stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format.
    #[arg(long, global = true, value_parser = parse_format)]
    format: Option<OutputFormat>,

    /// Worker threads: a positive integer or `auto`.
    #[arg(long, global = true, value_parser = parse_workers)]
    workers: Option<Workers>,

    /// Draw independent samples per estimator instead of common random numbers.
    #[arg(long, global = true)]
    unpaired: bool,

    /// Exit with status 3 when the identity check fails.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every scenario × estimator × loss cell of a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// PRIAL of the corrected estimator over a grid of t values.
    SweepT {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated t values (defaults to multiples of t_max).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value = "data-based")]
        loss: LossKind,
    },
    /// Empirical risk of aS over a grid of a values.
    SweepA {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated a values (defaults to 25 points around a_o).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value = "data-based")]
        loss: LossKind,
    },
    /// Monte Carlo check of the Stein-Haff identity for the corrected estimator.
    Verify {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Finite-difference step scale.
        #[arg(long)]
        step_scale: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    m: usize,
    /// AR(1) correlation of the scale matrix.
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Student-t degrees of freedom (Gaussian when absent).
    #[arg(long)]
    nu: Option<f64>,
}

impl ScenarioArgs {
    fn scenario(&self) -> scale_shrink::Result<Scenario> {
        let family = match self.nu {
            Some(nu) => DistributionFamily::student(nu)?,
            None => DistributionFamily::Gaussian,
        };
        Scenario::ar1(self.p, self.m, self.rho, family)
    }
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: scale_shrink::Error| e.to_string())
}

fn parse_workers(s: &str) -> Result<Workers, String> {
    if s == "auto" {
        return Ok(Workers::Auto);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Workers::Count(n)),
        _ => Err(format!("expected a positive integer or `auto`, got {s:?}")),
    }
}

fn open_sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create_output(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn pairing(cli: &Cli) -> Pairing {
    if cli.unpaired {
        Pairing::Unpaired
    } else {
        Pairing::Paired
    }
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let workers = cli.workers.unwrap_or_default();
    let format = cli.format.unwrap_or_default();
    match &cli.command {
        Command::Run { config } => {
            let mut cfg = ExperimentConfig::from_path(config)?;
            if let Some(w) = cli.workers {
                cfg.workers = w;
            }
            if cli.unpaired {
                cfg.pairing = Pairing::Unpaired;
            }
            let (out, format) = match (&cli.out, &cfg.output) {
                (Some(p), _) => (Some(p.clone()), format),
                (None, Some(spec)) => (Some(spec.path.clone()), cli.format.unwrap_or(spec.format)),
                (None, None) => (None, format),
            };
            let outcome = with_workers(cfg.workers, || run_table(&cfg))??;
            let mut sink = open_sink(out.as_ref())?;
            write_reports(&mut sink, format, &outcome.rows)?;
            sink.flush().context("flushing output")?;
            for f in &outcome.failures {
                eprintln!(
                    "scenario p={} m={} {}: {}",
                    f.scenario.p, f.scenario.m, f.scenario.family, f.message
                );
            }
            if outcome.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_NUMERICAL))
            }
        }
        Command::SweepT { scenario, grid, loss } => {
            let sc = scenario.scenario()?;
            let grid = grid.clone().unwrap_or_else(|| default_t_grid(sc.p(), sc.m()));
            let rows = with_workers(workers, || {
                sweep_t(&sc, &grid, *loss, scenario.reps, scenario.seed, pairing(cli))
            })??;
            eprintln!("t_max = {}", t_max(sc.p(), sc.m()));
            let mut sink = open_sink(cli.out.as_ref())?;
            write_rows(&mut sink, format, &rows)?;
            sink.flush().context("flushing output")?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepA { scenario, grid, loss } => {
            let sc = scenario.scenario()?;
            let grid = match grid {
                Some(g) => g.clone(),
                None => default_a_grid(sc.p(), sc.m(), sc.k_star()?),
            };
            let rows = with_workers(workers, || {
                sweep_a(&sc, &grid, *loss, scenario.reps, scenario.seed, pairing(cli))
            })??;
            if let Some(best) = rows.iter().find(|r| r.argmin) {
                eprintln!("argmin a = {} (a_o = {})", best.a, best.a_optimal);
            }
            let mut sink = open_sink(cli.out.as_ref())?;
            write_rows(&mut sink, format, &rows)?;
            sink.flush().context("flushing output")?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { scenario, step_scale } => {
            let sc = scenario.scenario()?;
            let cfg = match step_scale {
                Some(s) => HaffOperatorConfig::new(*s)?,
                None => HaffOperatorConfig::default(),
            };
            let report = with_workers(workers, || verify(&sc, scenario.reps, scenario.seed, &cfg))??;
            let mut sink = open_sink(cli.out.as_ref())?;
            match cli.format {
                Some(OutputFormat::Json) => {
                    serde_json::to_writer_pretty(&mut sink, &report)?;
                    writeln!(sink)?;
                }
                _ => writeln!(sink, "{}", format_identity(&report))?,
            }
            sink.flush().context("flushing output")?;
            if cli.strict && !report.pass {
                Ok(ExitCode::from(EXIT_NUMERICAL))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<scale_shrink::Error>()) {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
