use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use shapedesc::cli::{cmd_check, cmd_compare, cmd_oracle, cmd_run, Cli, Command, OUT_ENV};
use shapedesc::verify::CheckOptions;

fn out_override() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config, out_override()).map(|s| println!("{}", s.line())),
        Command::Compare { config } => cmd_compare(&config, out_override()).map(|report| {
            for s in &report.succeeded {
                println!("{}", s.line());
            }
            for (m, e) in &report.failed {
                println!("method {m}: failed: {e}");
            }
        }),
        Command::Oracle { c1, n, out } => {
            let dir = out_override().or(out).unwrap_or_else(|| PathBuf::from("."));
            cmd_oracle(c1, n, &dir).map(|failures| {
                println!("wrote {} oracle rows, {failures} failed", n);
            })
        }
        Command::Check { seed, perturb_stiffness } => {
            let (report, status) = cmd_check(CheckOptions { seed, perturb_stiffness });
            print!("{report}");
            status
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
