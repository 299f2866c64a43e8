use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exitaudit::pipeline::{exit_code, load_config, Command, Pipeline};

/// Membership-leakage audits of multi-exit networks.
#[derive(Parser, Debug)]
#[command(name = "exitaudit", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Set a config key, e.g. `model.n_exits=6`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// No progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Generate or load the dataset and its four-way split.
    GenData,
    /// Train target, shadow and vanilla models.
    Train,
    /// Run every attack and the overfitting analysis.
    Audit,
    /// Recover the exit count and depths from response times.
    Steal,
    /// Apply the configured response-time defense and re-attack.
    Defend,
    /// Sweep the delay scale and tabulate privacy against latency.
    Sweep,
    /// Merge the audit, stealing and sweep outputs into one report.
    Report,
    /// Every command above, in order.
    All,
    /// Print the resolved config.
    ShowConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(cli.config.as_deref(), &cli.overrides, cli.out.as_deref(), cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    if let Cmd::ShowConfig = cli.cmd {
        return match cfg.to_toml_string() {
            Ok(s) => {
                print!("{s}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        };
    }
    let mut pipeline = Pipeline::new(cfg).quiet(cli.quiet);
    let result = match cli.cmd {
        Cmd::GenData => pipeline.run(Command::GenData),
        Cmd::Train => pipeline.run(Command::Train),
        Cmd::Audit => pipeline.run(Command::Audit),
        Cmd::Steal => pipeline.run(Command::Steal),
        Cmd::Defend => pipeline.run(Command::Defend),
        Cmd::Sweep => pipeline.run(Command::Sweep),
        Cmd::Report => pipeline.run(Command::Report),
        Cmd::All => pipeline.run_all(),
        Cmd::ShowConfig => unreachable!(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
