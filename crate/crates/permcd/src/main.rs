use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use permcd::error::Error;
use permcd::harness::{
    self, figure_csv, rates_csv, table_csv, to_json, ExperimentConfig, OutputFormat, VerifySuite,
};

#[derive(Parser)]
#[command(
    name = "permcd",
    about = "Coordinate descent ordering experiments on structured convex quadratics",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-epoch objective curves for each strategy and seed.
    Figure(RunArgs),
    /// Observed/predicted rate comparison over a delta grid.
    Table(RunArgs),
    /// Theoretical rates only (no simulation).
    Rates(RunArgs),
    /// Numerical verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// perturbed-identity | spike | spiked-eigvec
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Comma-separated delta grid (table/rates).
    #[arg(long)]
    deltas: Option<String>,
    /// Fixed eps value (implies --eps-rule fixed).
    #[arg(long)]
    eps: Option<f64>,
    /// equal | sqrt-delta-over-10 | fixed
    #[arg(long = "eps-rule")]
    eps_rule: Option<String>,
    /// linspace | seeded-uniform | seeded-uniform:<seed>
    #[arg(long = "d-spec")]
    d_spec: Option<String>,
    /// Seed for the spiked-eigvec family's eigenvector draw.
    #[arg(long = "u-seed")]
    u_seed: Option<u64>,
    /// Comma-separated: ccd, rcd, rpcd, rcd-weighted.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long = "seed-base")]
    seed_base: Option<u64>,
    /// std-normal | ones | explicit:<v1,v2,...>
    #[arg(long)]
    x0: Option<String>,
    /// Tail window for the observed-rate estimator.
    #[arg(long)]
    window: Option<usize>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// identities | lemmas | recurrence | first-iter | scaling | all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// json (the only verify format)
    #[arg(long, default_value = "json")]
    format: String,
}

fn build_config(args: &RunArgs) -> Result<(ExperimentConfig, OutputFormat), Error> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_file(&text)?;
    }
    if let Some(v) = &args.family {
        cfg.set("family", v)?;
    }
    if let Some(v) = args.n {
        cfg.set("n", &v.to_string())?;
    }
    if let Some(v) = args.delta {
        cfg.set("delta", &v.to_string())?;
    }
    if let Some(v) = &args.deltas {
        cfg.set("deltas", v)?;
    }
    if let Some(v) = args.eps {
        cfg.set("eps", &v.to_string())?;
    }
    if let Some(v) = &args.eps_rule {
        cfg.set("eps-rule", v)?;
    }
    if let Some(v) = &args.d_spec {
        cfg.set("d-spec", v)?;
    }
    if let Some(v) = args.u_seed {
        cfg.set("u-seed", &v.to_string())?;
    }
    if let Some(v) = &args.strategy {
        cfg.set("strategy", v)?;
    }
    if let Some(v) = args.epochs {
        cfg.set("epochs", &v.to_string())?;
    }
    if let Some(v) = args.seeds {
        cfg.set("seeds", &v.to_string())?;
    }
    if let Some(v) = args.seed_base {
        cfg.set("seed-base", &v.to_string())?;
    }
    if let Some(v) = &args.x0 {
        cfg.set("x0", v)?;
    }
    if let Some(v) = args.window {
        cfg.set("window", &v.to_string())?;
    }
    let format = OutputFormat::parse(&args.format)?;
    Ok((cfg, format))
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Figure(args) => {
            let (cfg, format) = build_config(&args)?;
            let rows = harness::run_figure(&cfg)?;
            let content = match format {
                OutputFormat::Csv => figure_csv(&rows),
                OutputFormat::Json => to_json(&rows)?,
            };
            emit(&args.out, &content)?;
            Ok(0)
        }
        Cmd::Table(args) => {
            let (cfg, format) = build_config(&args)?;
            let rows = harness::run_table(&cfg)?;
            let content = match format {
                OutputFormat::Csv => table_csv(&rows),
                OutputFormat::Json => to_json(&rows)?,
            };
            emit(&args.out, &content)?;
            Ok(0)
        }
        Cmd::Rates(args) => {
            let (cfg, format) = build_config(&args)?;
            let rows = harness::run_rates(&cfg)?;
            let content = match format {
                OutputFormat::Csv => rates_csv(&rows),
                OutputFormat::Json => to_json(&rows)?,
            };
            emit(&args.out, &content)?;
            Ok(0)
        }
        Cmd::Verify(args) => {
            let suite = VerifySuite::parse(&args.suite)?;
            if args.format != "json" {
                return Err(Error::Config(format!(
                    "verify only supports json output, got '{}'",
                    args.format
                )));
            }
            let report = harness::run_verify(suite)?;
            for check in &report.checks {
                eprintln!(
                    "{} {} ({})",
                    if check.pass { "PASS" } else { "FAIL" },
                    check.name,
                    check.detail
                );
            }
            emit(&args.out, &to_json(&report)?)?;
            Ok(if report.ok { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::InvalidParameter(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
