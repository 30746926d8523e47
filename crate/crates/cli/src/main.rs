use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnfc_core::evaluation::{render_report, ReportFormat, RowOutcome};
use attnfc_core::exec::Execution;
use attnfc_core::model::ModelKind;
use attnfc_core::pipeline::{self, CountryOutcome, RunConfig};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

/// Fine-grained attention LSTM forecasts of cumulative COVID-19 cases.
#[derive(Parser, Debug)]
#[command(name = "attnfc", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Restrict the run to one country.
    #[arg(long, global = true, value_name = "NAME")]
    country: Option<String>,

    /// Countries processed concurrently (default: all cores).
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Default root for relative data file names.
    #[arg(long, global = true, env = "ATTNFC_DATA_DIR", value_name = "DIR", hide_env_values = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build per-country series and the statistics table from the JHU files.
    Ingest,
    /// Rebuild the statistics table from ingested series and print it.
    Stats,
    /// Train the AttentionLSTM and LSTM models per country.
    Train {
        #[arg(long)]
        seed: u64,
    },
    /// Score every model on the test split and the forecast horizons.
    Evaluate {
        #[arg(long)]
        seed: u64,
    },
    /// Forecast past the last ingested date with a trained AttentionLSTM.
    Forecast {
        /// Days ahead (default: the largest configured horizon).
        #[arg(long, value_name = "N")]
        horizon: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(country) = &common.country {
        cfg.countries = vec![country.clone()];
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execution(jobs: Option<u16>) -> Result<Execution> {
    match jobs {
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.into())
                .build_global()
                .context("configuring the worker pool")?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::default()),
    }
}

/// Logs failed countries; true if all succeeded.
fn report_outcomes<T>(what: &str, outcomes: &[CountryOutcome<T>]) -> bool {
    let mut ok = true;
    for o in outcomes {
        if let Err(e) = &o.result {
            error!("{}: {what} failed: {e}", o.country);
            ok = false;
        }
    }
    ok
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn ingest(cfg: &RunConfig, data_dir: Option<&Path>, exec: Execution) -> Result<ExitCode> {
    let tables = pipeline::load_tables(cfg, data_dir)?;
    let outcomes = pipeline::ingest(cfg, &tables, exec);
    let ok = report_outcomes("ingest", &outcomes);
    let series: Vec<_> = outcomes.into_iter().filter_map(|o| o.result.ok()).collect();
    if !series.is_empty() {
        pipeline::write_stats_table(cfg, &series)?;
    }
    info!("{} of {} countries ingested", series.len(), cfg.countries.len());
    Ok(status(ok))
}

fn stats(cfg: &RunConfig) -> Result<ExitCode> {
    let series = cfg
        .countries
        .iter()
        .map(|c| pipeline::load_series(cfg, c))
        .collect::<Result<Vec<_>, _>>()
        .context("run `attnfc ingest` first")?;
    pipeline::write_stats_table(cfg, &series)?;
    print!("{}", pipeline::stats_markdown(&series));
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, seed: u64, exec: Execution) -> Result<ExitCode> {
    let outcomes = pipeline::train(cfg, seed, exec);
    for o in &outcomes {
        if let Ok(t) = &o.result {
            info!(
                "{}: AttentionLSTM best epoch {} (validation {:.3e}), LSTM best epoch {} (validation {:.3e})",
                o.country,
                t.attention.best_epoch,
                t.attention.best_validation_loss,
                t.plain.best_epoch,
                t.plain.best_validation_loss
            );
        }
    }
    Ok(status(report_outcomes("training", &outcomes)))
}

fn evaluate(cfg: &RunConfig, seed: u64, exec: Execution) -> Result<ExitCode> {
    let report = pipeline::evaluate(cfg, seed, exec)?;
    print!("{}", render_report(&report, ReportFormat::Markdown)?);
    // Persistence needs no checkpoint, so "all failed" is judged on the
    // trained models only.
    let trained = [ModelKind::AttentionLstm, ModelKind::PlainLstm].map(|k| k.display_name());
    let any_scored = report
        .rows
        .iter()
        .filter(|r| trained.contains(&r.model.as_str()))
        .any(|r| matches!(r.outcome, RowOutcome::Scored { .. }));
    if !any_scored {
        error!("no trained model could be evaluated");
    }
    Ok(status(any_scored))
}

fn forecast(cfg: &RunConfig, horizon: Option<usize>) -> Result<ExitCode> {
    let [country] = cfg.countries.as_slice() else {
        bail!("forecast needs exactly one country; pass --country");
    };
    let horizon = horizon.unwrap_or_else(|| cfg.horizons.max());
    let out = pipeline::forecast(cfg, country, horizon)?;
    println!("date,predicted_confirmed");
    for (d, y) in out.dates.iter().zip(&out.predicted) {
        println!("{},{y:.0}", d.format("%Y-%m-%d"));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    let exec = execution(cli.common.jobs)?;
    let data_dir = cli.common.data_dir.as_deref();
    match cli.command {
        Command::Ingest => ingest(&cfg, data_dir, exec),
        Command::Stats => stats(&cfg),
        Command::Train { seed } => train(&cfg, seed, exec),
        Command::Evaluate { seed } => evaluate(&cfg, seed, exec),
        Command::Forecast { horizon } => forecast(&cfg, horizon),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
