//! `lsmtcr`: pretraining, transfer, fine-tuning, generation, assembly and
//! evaluation of epitope-conditioned TCR models.

mod commands;
mod inputs;
mod output;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lsmtcr_core::error::Error as CoreError;

use settings::Settings;

#[derive(Parser)]
#[command(name = "lsmtcr", version, about = "Epitope-conditioned TCR generation and assembly")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Key-value config file (`key = value` per line).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Comma-separated sampling temperatures, e.g. `0.5,1.0,1.5`.
    #[arg(long, value_name = "LIST")]
    temperature: Option<String>,
    /// Output directory; replaced atomically on success.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-diffusion pretraining of the epitope encoder.
    PretrainEpitope(Common),
    /// Causal pretraining of the CDR3 decoder.
    PretrainCdr3(Common),
    /// Continue a beta CDR3 decoder on an alpha corpus.
    TransferAlpha(Common),
    /// Epitope-conditioned fine-tuning on paired data.
    Finetune(Common),
    /// Sample CDR3s, one block per epitope and temperature.
    Generate(Common),
    /// Train both assembler stages for one chain.
    TrainAssembler(Common),
    /// Stage-1 V/J gene prediction for CDR3s.
    PredictGenes(Common),
    /// Full-length chains from CDR3s via predicted genes.
    Assemble(Common),
    /// Diversity metrics and composite scores across repertoires.
    Evaluate(Common),
    /// Summarize a checkpoint, or the preset sizes when no path is given.
    Inspect {
        path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn settings(c: &Common) -> Result<Settings> {
    let mut s = Settings::load(c.config.as_deref(), &c.sets)?;
    if let Some(seed) = c.seed {
        s.set("seed", seed);
    }
    if let Some(p) = c.preset {
        s.set("preset", if matches!(p, Preset::Full) { "full" } else { "desk" });
    }
    if let Some(t) = &c.temperature {
        s.set("temperature", t);
    }
    Ok(s)
}

fn out_dir(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| anyhow!("--out DIR is required"))
}

fn run(cli: Cli) -> Result<()> {
    type Cmd = fn(&Settings, &Path) -> Result<()>;
    let (common, cmd): (&Common, Cmd) = match &cli.command {
        Command::PretrainEpitope(c) => (c, commands::pretrain_epitope),
        Command::PretrainCdr3(c) => (c, commands::pretrain_cdr3),
        Command::TransferAlpha(c) => (c, commands::transfer_alpha),
        Command::Finetune(c) => (c, commands::finetune),
        Command::Generate(c) => (c, commands::generate),
        Command::TrainAssembler(c) => (c, commands::train_assembler),
        Command::PredictGenes(c) => (c, commands::predict_genes),
        Command::Assemble(c) => (c, commands::assemble),
        Command::Evaluate(c) => (c, commands::evaluate),
        Command::Inspect { path, common } => {
            return commands::inspect(&settings(common)?, path.as_deref());
        }
    };
    let s = settings(common)?;
    cmd(&s, out_dir(common)?)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::MissingInput(_) => 2,
                CoreError::Mismatch { .. } => 3,
                CoreError::CorruptCheckpoint { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LSMTCR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("LSMTCR_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
