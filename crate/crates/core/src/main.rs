use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stocksignal::cli::{self, CliResult, CommandOutput, ModelKind, Overrides, RunConfig};
use stocksignal::features::Weighting;
use stocksignal::labelling::{AlignmentMode, SchemeKind};

/// Predict stock price direction from social-media messages.
#[derive(Debug, Parser)]
#[command(name = "stocksignal", version)]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Label scheme: binary, pct2 or pct3.
    #[arg(long, global = true)]
    scheme: Option<SchemeKind>,
    /// same-day or prev-day.
    #[arg(long, global = true)]
    alignment: Option<AlignmentMode>,
    /// count or tfidf.
    #[arg(long, global = true)]
    vectorizer: Option<Weighting>,
    /// nb or lr.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Precision threshold for the invest signal.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Hours added to UTC message timestamps before taking the date.
    #[arg(long, global = true, allow_hyphen_values = true)]
    tz_offset: Option<i32>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download OHLC CSV for the configured symbols.
    Fetch,
    /// Gap-fill prices and label every message.
    Label,
    /// Clean the labelled messages' text.
    Prep,
    /// Fit the vectorizer and model on the training split.
    Train,
    /// Score the trained model on the held-out split.
    Eval,
    /// k-fold cross-validation of the configured model.
    Cv,
    /// Grid search over vectorizers and models.
    Grid,
    /// Invest/avoid decision per symbol over the final window.
    Signal,
    /// Aggregate eval runs into comparison tables.
    Report,
}

fn run(args: &Args) -> CliResult<CommandOutput> {
    let overrides = Overrides {
        scheme: args.scheme,
        alignment: args.alignment,
        vectorizer: args.vectorizer,
        model: args.model,
        seed: args.seed,
        tau: args.tau,
        tz_offset: args.tz_offset,
        out_dir: args.out.clone(),
    };
    let config = RunConfig::load(args.config.as_deref(), &overrides)?;
    match args.command {
        Command::Fetch => cli::cmd_fetch(&config),
        Command::Label => cli::cmd_label(&config),
        Command::Prep => cli::cmd_prep(&config),
        Command::Train => cli::cmd_train(&config),
        Command::Eval => cli::cmd_eval(&config),
        Command::Cv => cli::cmd_cv(&config),
        Command::Grid => cli::cmd_grid(&config),
        Command::Signal => cli::cmd_signal(&config),
        Command::Report => cli::cmd_report(&config),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            for l in &out.lines {
                println!("{l}");
            }
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
