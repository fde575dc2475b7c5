use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use embgeo_cli::{commands, Overrides, Result, RunConfig};

/// Train and inspect toy contrastive models in clip, elliptic, euclidean and
/// hyperbolic embedding geometries.
#[derive(Parser)]
#[command(name = "embgeo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
    /// Generate the synthetic tree and a corpus of text/image pairs.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train encoders on the generated tree and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Embed the corpus and summarize root distances per modality.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Walk corpus images toward the root and retrieve captions on the way.
    Traverse {
        #[command(flatten)]
        common: Common,
        /// Keep only captions whose entailment cone (minimum radius K) contains the step.
        #[arg(long)]
        filter_k: Option<f64>,
    },
}

fn config(common: &Common, filter_k: Option<f64>) -> Result<RunConfig> {
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        filter_k,
    };
    RunConfig::load(common.config.as_deref())?.resolve(&overrides)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gradcheck {
            common,
            inject_wrong_sign,
        } => commands::gradcheck(&config(&common, None)?, inject_wrong_sign),
        Command::GenData { common } => commands::gen_data(&config(&common, None)?),
        Command::Train { common } => commands::train(&config(&common, None)?),
        Command::Analyze { common } => commands::analyze(&config(&common, None)?),
        Command::Traverse { common, filter_k } => commands::traverse(&config(&common, filter_k)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("embgeo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
