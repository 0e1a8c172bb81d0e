//! `contrastdx` command-line tool.
//!
//! Exit status: 0 on success, 2 for bad input or configuration, 3 for
//! runtime and data failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contrastdx::config::RunConfig;
use contrastdx::data::{Case, Manifest};
use contrastdx::inference::SupportIndex;
use contrastdx::pipeline::{self, DEFAULT_VOLUME};
use contrastdx::trainer::Checkpoint;
use contrastdx::{Error, Result};

#[derive(Parser)]
#[command(name = "contrastdx", version, about = "Case-based nodule diagnosis with a Siamese U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize balanced train/val/test cases and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_val: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume size as X,Y,Z.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_VOLUME)]
        dims: Vec<usize>,
    },
    /// Train and keep the best-validation checkpoint.
    Train {
        /// Run configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode train and val cases into a support index.
    BuildIndex(StageArgs),
    /// Choose k on the validation split.
    TuneK(StageArgs),
    /// Set the confidence threshold from leave-one-out matches.
    Calibrate(StageArgs),
    /// Classify one case directory.
    Predict {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: PathBuf,
        /// Also write the prediction JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write attention overlays for the query and its neighbours here.
        #[arg(long)]
        explain: Option<PathBuf>,
    },
    /// Metrics, ROC points and per-case predictions on a labeled split.
    Evaluate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output index directory.
    #[arg(long)]
    out: PathBuf,
    /// Start from this index instead of rebuilding one.
    #[arg(long)]
    index: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn starting_index(args: &StageArgs, ck: &Checkpoint, manifest: &Manifest) -> Result<SupportIndex> {
    match &args.index {
        Some(dir) => SupportIndex::load(dir),
        None => pipeline::build_index_stage(ck, manifest),
    }
}

fn write_stage(index: &SupportIndex, ck: &Checkpoint, out: &Path) -> Result<()> {
    index.save(out)?;
    ck.config.write_resolved(out)?;
    log::info!(
        "index with {} entries, k = {}, tau = {:?} written to {}",
        index.len(),
        index.k(),
        index.tau(),
        out.display()
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            n_train,
            n_val,
            n_test,
            seed,
            dims,
        } => {
            let dims: [usize; 3] = dims
                .try_into()
                .map_err(|_| Error::Parameter("--dims takes exactly three values".into()))?;
            let m = pipeline::gen_data(&out, [n_train, n_val, n_test], seed, dims)?;
            log::info!("wrote {} cases to {}", m.entries.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let ck = pipeline::train_stage(&cfg, &data, &out)?;
            log::info!("best epoch {} written to {}", ck.epoch, out.display());
        }
        Command::BuildIndex(args) => {
            let ck = pipeline::load_checkpoint(&args.checkpoint)?;
            let manifest = pipeline::load_manifest(&args.data)?;
            let index = starting_index(&args, &ck, &manifest)?;
            write_stage(&index, &ck, &args.out)?;
        }
        Command::TuneK(args) => {
            let ck = pipeline::load_checkpoint(&args.checkpoint)?;
            let manifest = pipeline::load_manifest(&args.data)?;
            let index = pipeline::tune_k_stage(starting_index(&args, &ck, &manifest)?, &ck, &manifest)?;
            write_stage(&index, &ck, &args.out)?;
        }
        Command::Calibrate(args) => {
            let ck = pipeline::load_checkpoint(&args.checkpoint)?;
            let manifest = pipeline::load_manifest(&args.data)?;
            let index = pipeline::calibrate_stage(starting_index(&args, &ck, &manifest)?)?;
            write_stage(&index, &ck, &args.out)?;
        }
        Command::Predict {
            index,
            checkpoint,
            case,
            out,
            explain,
        } => {
            let index = SupportIndex::load(&index)?;
            let ck = pipeline::load_checkpoint(&checkpoint)?;
            let query = Case::load(&case)?;
            let report = pipeline::predict_case(&index, &ck, &query)?;
            if let Some(path) = &out {
                pipeline::write_prediction(&report, path)?;
            }
            if let Some(dir) = &explain {
                pipeline::explain_prediction(&report, &index, &ck, &query, dir)?;
                ck.config.write_resolved(dir)?;
            }
            println!("{}", pipeline::to_json_pretty(&report)?);
        }
        Command::Evaluate {
            index,
            checkpoint,
            data,
            split,
            out,
        } => {
            let index = SupportIndex::load(&index)?;
            let ck = pipeline::load_checkpoint(&checkpoint)?;
            let manifest = pipeline::load_manifest(&data)?;
            let report = pipeline::evaluate_stage(&index, &ck, &manifest, &split, &out)?;
            ck.config.write_resolved(&out)?;
            println!("{}", pipeline::to_json_pretty(&report)?);
        }
    }
    Ok(())
}
