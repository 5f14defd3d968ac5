//! `mino`: dataset generation, training, sampling and evaluation for
//! discretization-agnostic functional flow matching.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::config::{resolve, OUT_DIR_ENV, THREADS_ENV};

#[derive(Parser, Debug)]
#[command(
    name = "mino",
    version,
    about = "Functional flow matching on arbitrary discretizations",
    after_help = "Any config key can be overridden with --<dotted.key>=<value>, e.g. --train.epochs=5."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads (same as --threads=N override).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Container whose positions `generate` samples on (same as --generate.positions).
    #[arg(long, global = true)]
    positions: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Sample a Matérn GP dataset and write train/test/mesh containers.
    GenData,
    /// Draw GP samples on the configured points.
    SampleGp,
    /// Train the velocity model on data.train.
    Train,
    /// Push base samples through a trained model.
    Generate,
    /// Compare two sample containers.
    Eval,
    /// Emit CSV/SVG plot data.
    Plot,
}

/// Splits `--a.b=c` / `--a.b c` overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') && key != "out_dir" {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => match it.next_if(|next| !next.starts_with("--")) {
                Some(v) => v,
                None => return Err(format!("override --{key} needs a value")),
            },
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (args, mut overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .init();

    if let Some(t) = cli.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Some(p) = &cli.positions {
        overrides.push(("generate.positions".into(), format!("{:?}", p.display().to_string())));
    }
    let env: Vec<(String, String)> = [OUT_DIR_ENV, THREADS_ENV]
        .iter()
        .filter_map(|k| std::env::var(k).ok().map(|v| (k.to_string(), v)))
        .map(|(k, v)| if k == OUT_DIR_ENV { (k, format!("{v:?}")) } else { (k, v) })
        .collect();
    let cfg = match resolve(cli.config.as_deref(), &env, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    log::info!("running {:?} with {} thread(s)", cli.command, cfg.threads);

    let result = match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::SampleGp => commands::sample_gp_cmd(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Generate => commands::generate_cmd(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Plot => commands::plot(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
