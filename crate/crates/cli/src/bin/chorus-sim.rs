use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use chorus_core::sim::{fuzz, generate_corpus, run_scenario, CorpusTargets, Scenario};
use clap::{Parser, Subcommand};

/// Runs simulated deployments in virtual time.
#[derive(Parser)]
#[command(name = "chorus-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its event log.
    Run {
        /// Scenario file, JSON or YAML.
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSONL event log.
        #[arg(long)]
        out: PathBuf,
        /// Where to write a JSON run summary.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run random scenarios twice each and check invariants, replay and
    /// determinism.
    Fuzz {
        #[arg(long, default_value_t = 1000)]
        runs: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write a scenario whose sessions match the deployment's published
    /// means and standard deviations.
    Corpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        sessions: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the JSON Schema for scenario files.
    Schema,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            summary,
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let output = run_scenario(&s)?;
            let file = std::fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut w = std::io::BufWriter::new(file);
            output.log.write_jsonl(&mut w)?;
            w.flush()?;
            if let Some(path) = summary {
                std::fs::write(&path, serde_json::to_string_pretty(&output.summary)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let sm = &output.summary;
            eprintln!(
                "{}: seed {}, {} events, {} sessions, base {} ({} per day)",
                sm.scenario,
                sm.seed,
                sm.events,
                sm.sessions.n_sessions,
                sm.cost.totals.base,
                sm.cost.per_day
            );
            if sm.invariant_violations.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for v in &sm.invariant_violations {
                    eprintln!("invariant: {v}");
                }
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Fuzz { runs, seed, json } => {
            let report = fuzz(runs, seed);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{} runs, {} events, {} sessions, {} failures",
                    report.runs,
                    report.events,
                    report.sessions,
                    report.failures.len()
                );
                for f in &report.failures {
                    println!("run {} (scenario seed {}):", f.run, f.scenario_seed);
                    for p in &f.problems {
                        println!("  {p}");
                    }
                }
            }
            Ok(if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Corpus {
            seed,
            sessions,
            out,
        } => {
            let mut targets = CorpusTargets::default();
            if let Some(n) = sessions {
                targets.sessions = n;
            }
            let s = generate_corpus(&targets, seed)?;
            std::fs::write(&out, s.to_json() + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Schema => {
            println!(
                "{}",
                serde_json::to_string_pretty(&Scenario::json_schema())?
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
