use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use embae::eval::Scores;
use embae::harness::{
    evaluate_split, load_checkpoint, load_dataset_dir, split_by_identity, with_variant, EvalConfig, Experiment,
    ExperimentConfig, RunUntil, StageLog,
};
use embae::providers::{synth_generate, write_precomputed, SyntheticWorldConfig};
use embae::training::FinetuneKind;
use embae::Error;

#[derive(Parser)]
#[command(name = "embae", version, about = "Metric embeddings and split-latent autoencoders for re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a world config (TOML).
    SynthGen {
        config: PathBuf,
        out: PathBuf,
        /// Write `train/`, `query/` and `gallery/` identity splits instead.
        #[arg(long)]
        split: bool,
    },
    /// Train the identity embedding on the source datasets.
    TrainEmbedding {
        config: PathBuf,
        /// Ignore existing checkpoints.
        #[arg(long)]
        fresh: bool,
    },
    /// Pre-train the autoencoder on the sources (trains the embedding first if needed).
    PretrainEmbae {
        config: PathBuf,
        #[arg(long)]
        fresh: bool,
    },
    /// Fine-tune on the target and write the score report.
    Finetune {
        config: PathBuf,
        #[arg(long)]
        variant: FinetuneKind,
        #[arg(long)]
        fresh: bool,
    },
    /// Score a checkpoint on query/gallery directories.
    Evaluate {
        checkpoint: PathBuf,
        query_dir: PathBuf,
        gallery_dir: PathBuf,
        #[arg(long)]
        no_tta: bool,
        #[arg(long)]
        no_normalize: bool,
    },
    /// Run the full pipeline.
    Run {
        config: PathBuf,
        #[arg(long)]
        fresh: bool,
    },
}

fn stage_pipeline(cfg: ExperimentConfig, until: RunUntil, fresh: bool) -> embae::Result<()> {
    let mut exp = Experiment::prepare(cfg)?;
    exp.resume = !fresh;
    let mut log = StageLog::default();
    let report = exp.run(until, &mut log)?;
    for name in &log.resumed {
        log::info!("reused checkpoint for stage {name}");
    }
    match report {
        Some(r) => println!("{}", serde_json::to_string_pretty(&r)?),
        None => println!("{}", exp.output_dir().display()),
    }
    Ok(())
}

fn synth_gen(config: &Path, out: &Path, split: bool) -> embae::Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::Load {
        path: config.to_path_buf(),
        message: e.to_string(),
    })?;
    let world: SyntheticWorldConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("invalid world config: {}", e.message())))?;
    let ds = synth_generate(&world)?;
    if split {
        let s = split_by_identity(&ds)?;
        write_precomputed(&out.join("train"), &s.train)?;
        write_precomputed(&out.join("query"), &s.query)?;
        write_precomputed(&out.join("gallery"), &s.gallery)?;
    } else {
        write_precomputed(out, &ds)?;
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, query: &Path, gallery: &Path, eval: EvalConfig) -> embae::Result<Scores> {
    let params = load_checkpoint(checkpoint)?.params;
    let q = load_dataset_dir(query)?;
    let g = load_dataset_dir(gallery)?;
    evaluate_split(&params, &q, &g, eval)
}

fn execute(command: Command) -> embae::Result<()> {
    match command {
        Command::SynthGen { config, out, split } => synth_gen(&config, &out, split),
        Command::TrainEmbedding { config, fresh } => {
            stage_pipeline(ExperimentConfig::from_path(&config)?, RunUntil::Embedding, fresh)
        }
        Command::PretrainEmbae { config, fresh } => {
            stage_pipeline(ExperimentConfig::from_path(&config)?, RunUntil::Pretrain, fresh)
        }
        Command::Finetune { config, variant, fresh } => {
            let cfg = with_variant(&ExperimentConfig::from_path(&config)?, variant);
            stage_pipeline(cfg, RunUntil::Full, fresh)
        }
        Command::Run { config, fresh } => stage_pipeline(ExperimentConfig::from_path(&config)?, RunUntil::Full, fresh),
        Command::Evaluate {
            checkpoint,
            query_dir,
            gallery_dir,
            no_tta,
            no_normalize,
        } => {
            let eval = EvalConfig {
                tta: !no_tta,
                normalize: !no_normalize,
            };
            let scores = evaluate(&checkpoint, &query_dir, &gallery_dir, eval)?;
            println!("{}", serde_json::to_string_pretty(&scores)?);
            Ok(())
        }
    }
}

fn error_line(e: &Error) -> String {
    let stage = match e {
        Error::Stage { stage, .. } => Some(stage.as_str()),
        _ => None,
    };
    serde_json::json!({
        "error": e.root().kind(),
        "stage": stage,
        "message": e.to_string(),
    })
    .to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
