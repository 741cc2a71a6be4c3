//! `gms` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gms_core::data::{generate_synthetic, AugmentConfig, Domain, DomainSpec};
use gms_core::losses::LossConfig;
use gms_core::tokenizer::{train_conv_vae, FrozenTokenizer, TokenizerKind, VaeTrainConfig};
use gms_core::trainer::{self, Checkpoint, TrainConfig};
use gms_core::{GmsError, Result};

#[derive(Parser)]
#[command(name = "gms", version, about = "Latent-space generative segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/mask dataset for one domain.
    GenData {
        #[arg(long)]
        domain: DomainArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the convolutional VAE tokenizer and write its weights.
    TrainTokenizer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output weights file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "on")]
        deterministic: Switch,
    },
    /// Train the latent mapping model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        tokenizer_weights: Option<PathBuf>,
        /// Report file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "on")]
        deterministic: Switch,
    },
    /// Segment one PPM image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth PGM mask; prints the Dice score when given.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        tokenizer_weights: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "on")]
        deterministic: Switch,
    },
    /// Loss ablation: latent only, segmentation only and both.
    Ablate(TrainArgs),
    /// Train on each of two domains and test on both.
    CrossDomain(TrainArgs),
    /// Same training under the patch and VAE tokenizers.
    TokAblate(TrainArgs),
    /// Print the header of an archive.
    InspectArchive { path: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root; cross-domain takes it twice.
    #[arg(long, required = true)]
    dataset: Vec<PathBuf>,
    #[arg(long, default_value = "patch")]
    tokenizer: TokenizerArg,
    #[arg(long)]
    tokenizer_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value = "both")]
    loss: LossArg,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "on")]
    augment: Switch,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "on")]
    deterministic: Switch,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerArg {
    Patch,
    Vae,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Lm,
    Seg,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            dataset: self.dataset[0].clone(),
            tokenizer: match self.tokenizer {
                TokenizerArg::Patch => TokenizerKind::Patch,
                TokenizerArg::Vae => TokenizerKind::ConvVae,
            },
            tokenizer_weights: self.tokenizer_weights.clone(),
            loss: match self.loss {
                LossArg::Lm => LossConfig::lm_only(),
                LossArg::Seg => LossConfig::seg_only(),
                LossArg::Both => LossConfig::both(),
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            image_size: self.size,
            seed: self.seed,
            augment: if self.augment == Switch::On {
                AugmentConfig::default()
            } else {
                AugmentConfig::disabled()
            },
            ..TrainConfig::default()
        }
    }

    fn single_dataset(&self) -> Result<()> {
        if self.dataset.len() != 1 {
            return Err(GmsError::Usage(
                "--dataset must be given exactly once".into(),
            ));
        }
        Ok(())
    }
}

/// Sizes the worker pool: `GMS_THREADS` if set, else one thread in
/// deterministic mode and all cores otherwise.
fn configure_threads(deterministic: Switch) -> Result<()> {
    let threads = match std::env::var("GMS_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            GmsError::Usage(format!("GMS_THREADS={v:?} is not a positive integer"))
        })?,
        Err(_) if deterministic == Switch::On => 1,
        Err(_) => 0,
    };
    // Fails only if a pool already exists, which is fine.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Report without the per-sample list.
fn print_summary(r: &trainer::EvalReport) -> Result<()> {
    print_json(&serde_json::json!({
        "dsc": r.dsc,
        "iou": r.iou,
        "hd95": r.hd95,
        "n": r.n,
        "seed": r.seed,
        "config_hash": r.config_hash,
        "tokenizer": r.tokenizer,
        "trainable_params": r.trainable_params,
        "wall_clock_secs": r.wall_clock_secs,
    }))
}

fn tokenizer_for(ckpt: &Checkpoint<f32>, weights: Option<&Path>) -> Result<FrozenTokenizer<f32>> {
    trainer::load_tokenizer(ckpt.tokenizer_kind, weights)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            domain,
            n,
            size,
            seed,
            out,
        } => {
            let domain = match domain {
                DomainArg::A => Domain::A,
                DomainArg::B => Domain::B,
            };
            let ids = generate_synthetic(&DomainSpec::for_domain(domain), n, size, seed, &out)?;
            println!(
                "wrote {} samples of domain {domain} to {}",
                ids.len(),
                out.display()
            );
        }
        Command::TrainTokenizer {
            dataset,
            epochs,
            batch_size,
            lr,
            size,
            seed,
            out,
            deterministic,
        } => {
            configure_threads(deterministic)?;
            let cfg = TrainConfig {
                dataset,
                image_size: size,
                seed,
                ..TrainConfig::default()
            };
            let data = trainer::load_data(&cfg)?;
            let vae_cfg = VaeTrainConfig {
                epochs,
                lr,
                batch_size,
                seed,
                ..VaeTrainConfig::default()
            };
            let (tok, report) = train_conv_vae::<f32>(&data.train, &vae_cfg)?;
            tok.save(&out)?;
            let held_out = tok.reconstruction_mse(&data.test)?;
            println!(
                "tokenizer written to {}; final train mse {:.5}, held-out mse {held_out:.5}",
                out.display(),
                report.recon.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train(args) => {
            args.single_dataset()?;
            configure_threads(args.deterministic)?;
            let outcome = trainer::train(&args.config(), args.out.as_deref())?;
            print_summary(&outcome.report)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            tokenizer_weights,
            out,
            deterministic,
        } => {
            configure_threads(deterministic)?;
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let tok = tokenizer_for(&ckpt, tokenizer_weights.as_deref())?;
            let cfg = TrainConfig {
                dataset,
                ..ckpt.config.clone()
            };
            let data = trainer::load_data(&cfg)?;
            let report = trainer::evaluate(&ckpt, &tok, &data.test)?;
            if let Some(path) = out {
                report.write(path)?;
            }
            print_summary(&report)?;
        }
        Command::Predict {
            checkpoint,
            image,
            mask,
            tokenizer_weights,
            out,
            deterministic,
        } => {
            configure_threads(deterministic)?;
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let tok = tokenizer_for(&ckpt, tokenizer_weights.as_deref())?;
            let p = trainer::predict(&ckpt, &tok, &image, mask.as_deref(), &out)?;
            println!("mask: {}", p.mask_path.display());
            println!("gray: {}", p.gray_path.display());
            if let Some(d) = p.dsc {
                println!("dsc: {d:.6}");
            }
        }
        Command::Ablate(args) => {
            args.single_dataset()?;
            configure_threads(args.deterministic)?;
            print_json(&trainer::run_ablation(&args.config(), args.out.as_deref())?)?;
        }
        Command::CrossDomain(args) => {
            if args.dataset.len() != 2 {
                return Err(GmsError::Usage(
                    "cross-domain needs --dataset twice (one per domain)".into(),
                ));
            }
            configure_threads(args.deterministic)?;
            let t = trainer::run_cross_domain(
                &args.config(),
                &args.dataset[0],
                &args.dataset[1],
                args.out.as_deref(),
            )?;
            print_json(&t)?;
        }
        Command::TokAblate(args) => {
            args.single_dataset()?;
            let weights = args.tokenizer_weights.clone().ok_or_else(|| {
                GmsError::Usage("tok-ablate needs --tokenizer-weights for the vae".into())
            })?;
            configure_threads(args.deterministic)?;
            let cfg = TrainConfig {
                tokenizer_weights: None,
                ..args.config()
            };
            print_json(&trainer::run_tokenizer_ablation(
                &cfg,
                &weights,
                args.out.as_deref(),
            )?)?;
        }
        Command::InspectArchive { path } => {
            let a = gms_core::archive::Archive::read(&path)?;
            println!("{}: {} tensors", path.display(), a.tensors().len());
            for (name, t) in a.tensors() {
                println!("  {name} {:?} {:?}", t.dtype, t.shape);
            }
            for (k, v) in &a.metadata {
                println!("  meta {k} = {v}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
