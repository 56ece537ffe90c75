//! `tad` — two-stage transformer anomaly detection.
//!
//! Verbs: `synth` (build a synthetic corpus), `pretrain` (stage 1),
//! `train` (stage 2), `score` (heatmaps for images), `eval` (ROC/AUC
//! report), `ablate` (the variant matrix). Every command is deterministic
//! given its config and seed. `TAD_THREADS` caps the kernel thread pool.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use tad_core::data::synth::{Category, DefectKind, SynthSpec};
use tad_core::infer::ScoreVariant;
use tad_core::pipeline::ablation::{cmd_ablate, VariantId};
use tad_core::pipeline::{
    cmd_eval, cmd_pretrain, cmd_score, cmd_synth, cmd_train, load_run_config, RunConfig,
};

#[derive(Parser)]
#[command(name = "tad", version, about = "Two-stage transformer anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = load_run_config(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in MVTec layout.
    Synth {
        /// Output corpus root.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Comma-separated categories (stripes, checker, blobs).
        #[arg(long, default_value = "stripes,checker,blobs", value_delimiter = ',')]
        categories: Vec<String>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 60)]
        n_train: usize,
        #[arg(long, default_value_t = 10)]
        n_test_normal: usize,
        #[arg(long, default_value_t = 10)]
        n_test_anomalous: usize,
    },
    /// Stage-1 masked-autoencoder training on a category's normal images.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Category directory (contains train/good).
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 frozen-encoder training from a stage-1 checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to initialize from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score images: 16-bit PGM heatmaps plus scores.csv.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to score with.
        #[arg(long)]
        ckpt: PathBuf,
        /// A png file or a directory of png files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fusion | e | p | masked-e
        #[arg(long, default_value = "fusion")]
        variant: String,
        /// Also dump raw E/P/S maps as tensor containers.
        #[arg(long)]
        dump_raw: bool,
    },
    /// Evaluate a checkpoint: image/pixel AUC per category.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Category directory or corpus root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fusion")]
        variant: String,
    },
    /// Run the ablation matrix (Models I..VIII and OURS).
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant ids.
        #[arg(
            long,
            default_value = "I,II,III,IV,V,VI,VII,VIII,OURS",
            value_delimiter = ','
        )]
        variants: Vec<String>,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("TAD_THREADS") {
        let n: usize = value
            .parse()
            .with_context(|| format!("TAD_THREADS must be a positive integer, got '{value}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing thread pool")?;
    }
    Ok(())
}

fn run() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Synth {
            out,
            seed,
            categories,
            image_size,
            n_train,
            n_test_normal,
            n_test_anomalous,
        } => {
            let specs: Vec<SynthSpec> = categories
                .iter()
                .map(|c| -> Result<SynthSpec> {
                    Ok(SynthSpec {
                        category: Category::from_str(c)?,
                        image_size,
                        n_train,
                        n_test_normal,
                        n_test_anomalous,
                        defects: DefectKind::ALL.to_vec(),
                        seed,
                    })
                })
                .collect::<Result<_>>()?;
            cmd_synth(&specs, &out)?;
            println!("wrote {} categories under {}", specs.len(), out.display());
        }
        Command::Pretrain { config, data, out } => {
            let cfg = config.load()?;
            cmd_pretrain(&cfg, &data, &out, &mut stdout)?;
            println!("# checkpoint: {}", out.display());
        }
        Command::Train {
            config,
            data,
            init,
            out,
        } => {
            let cfg = config.load()?;
            cmd_train(&cfg, &data, &init, &out, &mut stdout)?;
            println!("# checkpoint: {}", out.display());
        }
        Command::Score {
            config,
            ckpt,
            input,
            out,
            variant,
            dump_raw,
        } => {
            let cfg = config.load()?;
            let variant = ScoreVariant::from_str(&variant)?;
            cmd_score(&cfg, &ckpt, &input, &out, variant, dump_raw)?;
            println!("# scores: {}", out.join("scores.csv").display());
        }
        Command::Eval {
            config,
            ckpt,
            data,
            out,
            variant,
        } => {
            let cfg = config.load()?;
            let variant = ScoreVariant::from_str(&variant)?;
            let summary = cmd_eval(&cfg, &ckpt, &data, &out, variant)?;
            for row in &summary.rows {
                println!(
                    "{},{},{},{},{}",
                    row.category,
                    row.image_auc,
                    row.pixel_auc,
                    row.image_positives,
                    row.image_negatives
                );
            }
            println!("mean,{},{}", summary.mean_image_auc, summary.mean_pixel_auc);
        }
        Command::Ablate {
            config,
            data,
            out,
            variants,
        } => {
            let cfg = config.load()?;
            let ids: Vec<VariantId> = variants
                .iter()
                .map(|v| VariantId::from_str(v).map_err(anyhow::Error::from))
                .collect::<Result<_>>()?;
            cmd_ablate(&cfg, &data, &out, &ids, &mut stdout)?;
            println!("# table: {}", out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
