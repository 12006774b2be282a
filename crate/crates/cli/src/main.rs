use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mgwcn_cli::config::{parse_overrides, read_config_file, RunConfig};
use mgwcn_cli::{exit_code, run, Command};

/// Graph wavelet networks for uni- and multimodal node classification.
#[derive(Parser)]
#[command(name = "mgwcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic multimodal bundle to out_dir.
    Synth(RunArgs),
    /// Print per-scale wavelet statistics.
    Wavelet(RunArgs),
    /// Train and write metrics, summary and parameters to out_dir.
    Train(RunArgs),
    /// Report test accuracy of a saved parameter snapshot.
    Eval(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides as `--key value`; these win over the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let text = read_config_file(args.config.as_deref())?;
    let flags = parse_overrides(&args.overrides)?;
    Ok(RunConfig::resolve(text.as_deref(), &flags)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match &cli.command {
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::Wavelet(a) => (Command::Wavelet, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
    };
    let result = resolve(args).and_then(|cfg| run(cmd, &cfg, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
