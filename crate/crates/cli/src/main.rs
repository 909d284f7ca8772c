use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use conceptvae_cli::{fetch, CliError, Pipeline, RunConfig};

#[derive(Parser)]
#[command(name = "conceptvae", version, about = "Concept-supervised convolutional VAE experiments on MNIST")]
struct Cli {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Sets the data, init, noise and cluster seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Download or verify the raw MNIST files.
    Fetch,
    /// Train the VAE on the original images.
    Baseline,
    /// Cluster baseline latents and decode one representative per digit.
    Representatives,
    /// Generate concept samples and build the augmented split.
    Augment,
    /// Train on the augmented data.
    Train {
        #[arg(long, value_enum, default_value = "on")]
        concept_loss: Switch,
    },
    /// Clustering experiments, grids, alignment scores and the MSE table.
    Analyze,
    /// Re-hash every stage output against its manifest.
    Verify,
    /// Run every stage enabled in the config.
    Run,
    /// Print the resolved config.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(dir) = &cli.run_dir {
        overrides.push(format!("run_dir={}", serde_json::to_string(dir).expect("path serializes")));
    }
    if let Some(seed) = cli.seed {
        overrides.extend(["data", "init", "noise", "cluster"].map(|s| format!("seeds.{s}={seed}")));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Config => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
        Command::Fetch => {
            let r = fetch::fetch(&cfg)?;
            println!("fetched {} files, verified {} existing files", r.fetched.len(), r.verified.len());
            return Ok(());
        }
        _ => {}
    }
    let mut p = Pipeline::open(cfg)?;
    p.quiet = cli.quiet;
    match cli.command {
        Command::Baseline => p.baseline().map(drop),
        Command::Representatives => p.representatives().map(drop),
        Command::Augment => p.augment().map(drop),
        Command::Train { concept_loss } => p.train(matches!(concept_loss, Switch::On)).map(drop),
        Command::Analyze => p.analyze().map(drop),
        Command::Verify => p.verify().map(drop),
        Command::Run => p.run_all(),
        Command::Fetch | Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
