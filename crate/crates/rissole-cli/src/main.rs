//! `rissole`: command-line driver for the block-wise retrieval-augmented
//! latent diffusion pipeline. Each subcommand reads and writes artifacts
//! inside one run directory, so a run is fully described by its
//! `resolved.cfg` plus the files the commands leave behind.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use rissole_core::config::RunConfig;
use rissole_core::eval::Suite;
use rissole_core::pipeline;

#[derive(Parser)]
#[command(
    name = "rissole",
    about = "Block-wise retrieval-augmented latent diffusion, desk scale",
    version
)]
struct Cli {
    /// Config file of key=value lines; omitted keys use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set blocks.b=9 (repeatable).
    #[arg(long = "set", global = true, value_name = "K=V")]
    sets: Vec<String>,

    /// Run directory holding all artifacts (created if absent).
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Master seed: deterministically re-seeds data, codec, model,
    /// training, and sampling from one number.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset into the run directory.
    GenData,
    /// Train the patch autoencoder codec on the dataset.
    TrainCodec,
    /// Encode the dataset and build the block-sharded retrieval database.
    BuildDb,
    /// Train the block-wise denoiser.
    Train,
    /// Generate samples and write RSSL-T tensors plus PGM/PPM previews.
    Sample,
    /// Score generated samples against the dataset (Fréchet proxy).
    Eval,
    /// Run an ablation suite and write its report.
    Ablate {
        /// One of: rag_vs_no_rag, pos_vs_no_pos, prev_vs_no_prev,
        /// query_z_vs_z0, b_sweep.
        suite: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    for s in &cli.sets {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = cli.seed {
        for (key, offset) in [
            ("data.seed", 1u64),
            ("codec.seed", 2),
            ("model.seed", 3),
            ("train.seed", 4),
            ("sampler.seed", 5),
        ] {
            cfg.apply_override(&format!("{key}={}", seed.wrapping_add(offset)))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.run_dir)
        .with_context(|| format!("creating run dir {}", cli.run_dir.display()))?;
    cfg.write_resolved(&cli.run_dir.join("resolved.cfg"))?;
    let run = cli.run_dir.as_path();
    match &cli.command {
        Command::GenData => pipeline::cmd_gen_data(run, &cfg)?,
        Command::TrainCodec => pipeline::cmd_train_codec(run, &cfg)?,
        Command::BuildDb => pipeline::cmd_build_db(run, &cfg)?,
        Command::Train => pipeline::cmd_train(run, &cfg)?,
        Command::Sample => pipeline::cmd_sample(run, &cfg)?,
        Command::Eval => {
            let score = pipeline::cmd_eval(run, &cfg)?;
            println!("frechet_proxy={score:.6}");
        }
        Command::Ablate { suite } => {
            let suite = Suite::parse(suite)?;
            pipeline::cmd_ablate(run, &cfg, suite)?;
            println!(
                "report written to {}",
                run.join(format!("report_{}.txt", suite.as_str())).display()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
