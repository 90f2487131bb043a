use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use aegon_audit::{Auditor, AuditorState, FixtureTransport, HttpTransport, RecordingTransport, Report, Transport};
use clap::{Parser, Subcommand};

/// Verify an Aegon broker's tree heads and proofs independently.
#[derive(Debug, Parser)]
#[command(name = "aegon-audit", version)]
struct Args {
    /// Broker base URL.
    #[arg(long, global = true, default_value = "http://127.0.0.1:8080")]
    broker: String,
    /// Where the STH history and verification log live.
    #[arg(long, global = true, default_value = ".aegon-audit")]
    state_dir: PathBuf,
    /// Print one JSON object instead of text lines.
    #[arg(long, global = true)]
    json: bool,
    /// Replay recorded responses instead of contacting the broker.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Save every broker response to this file.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fetch, verify and store the current signed tree head.
    Sth,
    /// Prove a transaction's license entry is in the current tree.
    VerifyInclusion { txn_id: String },
    /// Check append-only growth between stored heads, or from the newest stored head to the current one.
    Consistency {
        #[arg(long)]
        old: Option<u64>,
        #[arg(long)]
        new: Option<u64>,
    },
    /// Poll the broker and alert on any inconsistency.
    Watch {
        /// Seconds between polls.
        #[arg(long, default_value_t = 60)]
        interval: u64,
        /// Stop after this many polls.
        #[arg(long)]
        cycles: Option<u64>,
    },
}

fn run<T: Transport>(transport: T, args: &Args) -> Result<Report, String> {
    let state = AuditorState::open(&args.state_dir).map_err(|e| format!("state dir {}: {e}", args.state_dir.display()))?;
    let mut auditor = Auditor::new(transport, state);
    Ok(match &args.command {
        Command::Sth => auditor.cmd_sth(),
        Command::VerifyInclusion { txn_id } => auditor.cmd_verify_inclusion(txn_id),
        Command::Consistency { old, new } => auditor.cmd_consistency(*old, *new),
        Command::Watch { interval, cycles } => {
            let json = args.json;
            auditor.cmd_watch(Duration::from_secs(*interval), *cycles, &std::thread::sleep, |line| {
                if !json {
                    println!("{line}");
                }
            })
        }
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Sth => "sth",
        Command::VerifyInclusion { .. } => "verify-inclusion",
        Command::Consistency { .. } => "consistency",
        Command::Watch { .. } => "watch",
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = match (&args.fixtures, &args.record) {
        (Some(f), _) => FixtureTransport::load(f).map_err(|e| e.to_string()).and_then(|t| run(t, &args)),
        (None, Some(path)) => {
            let rec = RecordingTransport::new(HttpTransport::new(&args.broker));
            let r = run(&rec, &args);
            if let Err(e) = rec.save(path) {
                eprintln!("could not save fixtures: {e}");
            }
            r
        }
        (None, None) => run(HttpTransport::new(&args.broker), &args),
    };
    let report = match outcome {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(3);
        }
    };
    if args.json {
        println!("{}", report.to_json(command_name(&args.command)));
    } else if !matches!(args.command, Command::Watch { .. }) {
        for l in &report.lines {
            println!("{l}");
        }
    }
    ExitCode::from(report.code() as u8)
}
