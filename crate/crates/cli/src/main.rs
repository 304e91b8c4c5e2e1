use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fieldmachine::cli_io::{self, OracleTolerances, Protocol, RunConfig, RunOutput};
use fieldmachine::Error;

/// Exit codes.
const OK: u8 = 0;
const INVALID: u8 = 1;
const INVARIANT: u8 = 2;
const ORACLE_MISMATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "fieldmachine", version, about = "Thermal machines on 1D quasi-condensates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a protocol from a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides out_dir in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep every N-th frame in energy_density.csv.
        #[arg(long, value_name = "N")]
        frames: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Compare the lattice model against the closed-form oracles.
    OracleCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print the config schema.
    Schema,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invariant(_) | Error::NotFaithful(_) => INVARIANT,
        _ => INVALID,
    }
}

fn execute(config: &RunConfig, out: Option<PathBuf>, quiet: bool) -> Result<u8, Error> {
    if !quiet {
        eprintln!("running {}", config.protocol.kind());
    }
    let output = cli_io::run(config)?;
    let dir = out.or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let written = cli_io::write_outputs(config, &output, &dir)?;
    if !quiet {
        for p in &written {
            eprintln!("wrote {}", p.display());
        }
    }
    if let RunOutput::Oracles(checks) = &output {
        for c in checks {
            if !quiet || !c.pass {
                println!(
                    "{:<20} {} deviation {:.3e} (tolerance {:.1e})",
                    c.name,
                    if c.pass { "PASS" } else { "FAIL" },
                    c.deviation,
                    c.tolerance
                );
            }
        }
        if checks.iter().any(|c| !c.pass) {
            return Ok(ORACLE_MISMATCH);
        }
    }
    Ok(OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { INVALID } else { OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Schema => {
            print!("{}", cli_io::SCHEMA);
            Ok(OK)
        }
        Command::Run { config, out, frames, quiet } => std::fs::read_to_string(&config)
            .map_err(|source| Error::Io { path: config.display().to_string(), source })
            .and_then(|text| cli_io::parse_config(&text))
            .and_then(|mut cfg| {
                if let Some(n) = frames {
                    if n == 0 {
                        return Err(Error::Config(vec!["--frames: must be at least 1".into()]));
                    }
                    cfg.frame_stride = n;
                }
                execute(&cfg, out, quiet)
            }),
        Command::OracleCheck { out, quiet } => {
            let cfg = RunConfig {
                protocol: Protocol::OracleCheck(OracleTolerances::default()),
                coupling: Default::default(),
                layout: None,
                record: Default::default(),
                frame_stride: 1,
                out_dir: None,
            };
            execute(&cfg, out, quiet)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
