use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maskguide::cli::{self, extract_overrides, RunConfig};
use maskguide::tokens::Split;
use maskguide::Result;

const USAGE_EXIT: u8 = 2;

/// Structure-guided masked token sampling on synthetic shape images.
///
/// Any config key can be overridden as `--section.key=value`, e.g.
/// `--sampler.lambda-s=0.5`; `--seed N` sets the root seed.
#[derive(Parser)]
#[command(name = "maskguide", version)]
struct Args {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the transformer on the dataset.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the proxy embedder used for selection.
    TrainEmbedder {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample guided by a sketch and keep the best trial.
    Sample {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a sketch under every configured layer set.
    LayerSweep {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a sketch across guidance scales.
    Tradeoff {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the full pipeline on dataset sketches.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args, config: RunConfig) -> Result<()> {
    match args.command {
        Command::ShowConfig => print!("{}", config.to_toml()),
        Command::GenData { out } => {
            let dir = cli::cmd_gen_data(&config, out.as_deref())?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { out } => {
            let acc = cli::cmd_train(&config, out.as_deref())?;
            println!(
                "held-out masked accuracy {:.4} (majority baseline {:.4})",
                acc.accuracy, acc.majority_accuracy
            );
        }
        Command::TrainEmbedder { out } => {
            let e = cli::cmd_train_embedder(&config, out.as_deref())?;
            println!(
                "held-out accuracy {:.4}, mean true-class probability {:.4}",
                e.accuracy, e.mean_true_class_probability
            );
        }
        Command::Sample { sketch, class, out } => {
            let s = cli::cmd_sample(&config, &sketch, class, out.as_deref())?;
            println!("selected trial {} in {}", s.selection.best, s.dir.display());
        }
        Command::LayerSweep { sketch, class, out } => {
            for r in cli::cmd_layer_sweep(&config, &sketch, class, out.as_deref())? {
                println!(
                    "layers {:?}: structure distance {:.4}, diversity {:.4}",
                    r.layers, r.mean_structure_distance, r.diversity
                );
            }
        }
        Command::Tradeoff { sketch, class, out } => {
            for r in cli::cmd_tradeoff(&config, &sketch, class, out.as_deref())? {
                println!(
                    "beta {}: class score {:.4}, structure distance {:.4}",
                    r.guidance_scale, r.mean_class_score, r.mean_structure_distance
                );
            }
        }
        Command::Eval { split, out } => {
            let r = cli::cmd_eval(&config, Split::parse(&split)?, out.as_deref())?;
            println!(
                "{} sketches: structure distance {:.4}, class score {:.4}, diversity {:.4}",
                r.sketches, r.mean_structure_distance, r.mean_class_score, r.diversity
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match extract_overrides(&raw) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(USAGE_EXIT);
        }
    };
    let args = Args::parse_from(rest);
    let config = match RunConfig::load(args.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(args, config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
