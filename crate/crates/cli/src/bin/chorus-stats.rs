use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chorus_cli::{read_log, render, Format, Report};
use chorus_core::ChorusConfig;
use clap::Parser;

/// Cost, session and worker-quality reports from an event log.
#[derive(Parser)]
#[command(name = "chorus-stats", version)]
struct Cli {
    /// JSONL event log.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, value_enum, default_value = "sessions")]
    report: Report,
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    #[arg(long)]
    csv: bool,
    /// Days to divide the base cost by. Defaults to the days the log spans.
    #[arg(long)]
    days: Option<u32>,
    /// TOML config for fee and retainer rates. `CHORUS_*` variables apply
    /// on top.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ChorusConfig::load(cli.config.as_deref())?;
    let log = read_log(&cli.log)?;
    let format = match (cli.json, cli.csv) {
        (true, _) => Format::Json,
        (_, true) => Format::Csv,
        _ => Format::Text,
    };
    print!(
        "{}",
        render(log.entries(), cli.report, format, cli.days, &cfg)?
    );
    Ok(())
}
