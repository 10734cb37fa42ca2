//! Thin command-line front end over the library harness.
//!
//! Subcommands:
//!   run --config <path> --out <dir>      execute a sweep, write CSV tables
//!   verify-theory [--seed N] --out <dir> run the closed-form theory checks
//!   hist --scores <file> --out <csv>     bin a score dump into a histogram
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 theory-check failure.

use spurious_ood::config::{parse_config, ConfigError};
use spurious_ood::harness::{self, HarnessError, VerifyOptions};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "usage:
  spurious-ood run --config <path> --out <dir>
  spurious-ood verify-theory [--seed N] --out <dir>
  spurious-ood hist --scores <file> --out <csv>";

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n{USAGE}");
    ExitCode::from(1)
}

fn flag_value(args: &[String], flag: &str) -> Option<String> {
    args.iter().position(|a| a == flag).and_then(|i| args.get(i + 1).cloned())
}

fn exit_for(err: &HarnessError) -> ExitCode {
    let code = match err {
        HarnessError::Config(_) => 1,
        HarnessError::Data(_) | HarnessError::Io(_) | HarnessError::BadScoreFile(_) => 2,
        _ => 2,
    };
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = args.first() else {
        return usage_error("missing subcommand");
    };
    match cmd.as_str() {
        "run" => {
            let Some(config) = flag_value(&args, "--config") else {
                return usage_error("run requires --config");
            };
            let Some(out) = flag_value(&args, "--out") else {
                return usage_error("run requires --out");
            };
            let plan = match parse_config(&PathBuf::from(&config)) {
                Ok(p) => p,
                Err(e @ ConfigError::Io(_)) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match harness::run(&plan, &PathBuf::from(&out)) {
                Ok(rows) => {
                    println!("wrote {} result rows to {out}", rows.len());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
        "verify-theory" => {
            let Some(out) = flag_value(&args, "--out") else {
                return usage_error("verify-theory requires --out");
            };
            let seed = match flag_value(&args, "--seed") {
                Some(s) => match s.parse::<u64>() {
                    Ok(v) => v,
                    Err(_) => return usage_error("--seed must be an integer"),
                },
                None => 0,
            };
            let opts = VerifyOptions { seed, ..VerifyOptions::default() };
            match harness::verify_theory(&opts, &PathBuf::from(&out)) {
                Ok(report) => {
                    print!("{}", report.render());
                    if report.all_passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(3)
                    }
                }
                Err(e) => exit_for(&e),
            }
        }
        "hist" => {
            let Some(scores) = flag_value(&args, "--scores") else {
                return usage_error("hist requires --scores");
            };
            let Some(out) = flag_value(&args, "--out") else {
                return usage_error("hist requires --out");
            };
            match harness::hist(&PathBuf::from(&scores), &PathBuf::from(&out)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => exit_for(&e),
            }
        }
        other => usage_error(&format!("unknown subcommand '{other}'")),
    }
}
