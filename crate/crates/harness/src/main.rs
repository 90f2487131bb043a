use std::path::PathBuf;
use std::process::ExitCode;

use aegon_harness::{run_bench, run_scenario, scenario_names, Profile};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aegon-harness", about = "Aegon protocol scenarios and latency benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one scenario (or `all`) and prints its transcript.
    Scenario {
        name: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print the report as JSON instead of the transcript.
        #[arg(long)]
        json: bool,
    },
    /// Lists the built-in scenarios.
    List,
    /// Runs the latency benchmark.
    Bench {
        #[arg(long, default_value = "quick")]
        profile: Profile,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::List => {
            for n in scenario_names() {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
        Command::Scenario { name, seed, json } => {
            let names = if name == "all" { scenario_names() } else { vec![name.as_str()] };
            let mut all_passed = true;
            for n in names {
                let report = match run_scenario(n, seed) {
                    Ok(r) => r,
                    Err(e) => {
                        eprintln!("{e}; known: {}", scenario_names().join(", "));
                        return ExitCode::from(2);
                    }
                };
                all_passed &= report.passed;
                if json {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                } else {
                    println!("== {} (seed {})", report.name, report.seed);
                    for line in &report.transcript {
                        println!("{line}");
                    }
                }
            }
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Bench { profile, out } => {
            let report = match run_bench(profile) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("bench setup failed: {e}");
                    return ExitCode::from(2);
                }
            };
            for c in &report.cells {
                println!(
                    "{:<36} n={:<5} rate={:>8.1}/s p50={:>7.3}ms p95={:>7.3}ms p99={:>7.3}ms {}",
                    c.operation,
                    c.samples,
                    c.achieved_rate,
                    c.p50_ms,
                    c.p95_ms,
                    c.p99_ms,
                    match (c.pass, c.target_p95_ms) {
                        (Some(true), Some(t)) => format!("PASS (P95 < {t} ms)"),
                        (Some(false), Some(t)) => format!("FAIL (P95 < {t} ms)"),
                        _ => "reported".into(),
                    }
                );
            }
            println!("receipt JWS max {} bytes (limit {})", report.receipt_jws_max_bytes, report.receipt_limit_bytes);
            for a in &report.ledger_append {
                println!("ledger append fsync={} {:.0}/s over {}", a.fsync, a.per_second, a.appends);
            }
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = out {
                if let Err(e) = std::fs::write(&path, json) {
                    eprintln!("writing {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
