use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lum_core::pipeline::{
    load_config, render_ablation, render_report, run_gradcheck, stage_ablate, stage_build_tokens,
    stage_evaluate, stage_gen_data, stage_pretrain, stage_train, PipelineConfig,
};
use lum_core::LumError;

const EXIT_CONFIG: u8 = 2;
const EXIT_DEPENDENCY: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

#[derive(Parser)]
#[command(name = "lum", about = "User behavior modeling pipeline", version)]
struct Cli {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set train.lr=0.001
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic event dataset.
    GenData,
    /// Build semantic IDs and business embeddings from the dataset.
    BuildTokens,
    /// Phase I: multi-modal alignment pretraining.
    Pretrain,
    /// Phase II: contrastive recommendation training.
    Train,
    /// Leave-one-out ranking evaluation.
    Evaluate,
    /// Ablation sweep over one axis across several seeds.
    Ablate {
        /// Axis: placement | timestamp | fusion
        #[arg(long, default_value = "placement")]
        axis: String,
        /// Seeds to average over.
        #[arg(long, value_delimiter = ',', default_values_t = vec![7u64, 11, 13])]
        seeds: Vec<u64>,
    },
    /// Numeric gradient verification of the model stack.
    Gradcheck,
}

fn exit_code_for(err: &LumError) -> u8 {
    match err {
        LumError::Config(_) | LumError::Schema(_) => EXIT_CONFIG,
        LumError::Dependency(_) => EXIT_DEPENDENCY,
        _ => EXIT_VERIFICATION,
    }
}

fn run(cli: Cli) -> Result<(), LumError> {
    let cfg: PipelineConfig = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenData => println!("{}", stage_gen_data(&cfg)?.message),
        Command::BuildTokens => println!("{}", stage_build_tokens(&cfg)?.message),
        Command::Pretrain => println!("{}", stage_pretrain(&cfg)?.message),
        Command::Train => println!("{}", stage_train(&cfg)?.message),
        Command::Evaluate => {
            let (res, report) = stage_evaluate(&cfg)?;
            if res.skipped {
                println!("{}", res.message);
                println!("{}", render_report(&report));
            } else {
                println!("{}", res.message);
            }
        }
        Command::Ablate { axis, seeds } => {
            let report = stage_ablate(&cfg, &axis, &seeds)?;
            println!("ablate ({axis}, seeds {seeds:?}):");
            println!("{}", render_ablation(&report));
        }
        Command::Gradcheck => {
            let lines = run_gradcheck()?;
            let mut failed = false;
            for line in &lines {
                println!(
                    "{} {:<22} max rel err {:.2e}",
                    if line.passed { "PASS" } else { "FAIL" },
                    line.name,
                    line.max_rel_err
                );
                failed |= !line.passed;
            }
            if failed {
                return Err(LumError::Validation("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
