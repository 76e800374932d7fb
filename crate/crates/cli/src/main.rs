use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mirnet_cli::pipeline::{self, Layout};
use mirnet_cli::{CliError, Profile, RunConfig};
use mirnet_core::train::Ablation;

#[derive(Parser)]
#[command(name = "mirnet", version, about = "Constraint-aware multi-label image classification pipeline")]
struct Cli {
    /// Run configuration (JSON); the bundled desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Ablations: any of C (no constraints), G (identity decoder), P (no pretraining).
    #[arg(long, global = true, value_delimiter = ',')]
    ablate: Vec<String>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic labeled and unlabeled images.
    GenData,
    /// Masked-autoencoder pretraining on the unlabeled pool.
    Pretrain,
    /// Fine-tune the classifier.
    Train,
    /// Train the second model and plan the prediction merge.
    Boost,
    /// Test-split metrics for the trained (and boosted) model.
    Eval,
    /// Comparison table and heatmap data over all evaluated runs.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_profile(cli.profile);
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ablation = Ablation::parse(&cli.ablate.join(",")).map_err(|e| CliError::Config(e.to_string()))?;
    let layout = Layout::new(&cfg, cli.out.as_deref());
    match cli.verb {
        Verb::GenData => pipeline::gen_data(&cfg, &layout).map(drop),
        Verb::Pretrain => pipeline::pretrain(&cfg, &layout).map(drop),
        Verb::Train => pipeline::train(&cfg, &layout, &ablation).map(drop),
        Verb::Boost => pipeline::boost(&cfg, &layout, &ablation).map(drop),
        Verb::Eval => pipeline::eval(&cfg, &layout, &ablation).map(drop),
        Verb::Report => pipeline::report(&layout).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
