use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lerenet::episodes::Dataset;
use lerenet::harness::{
    ablate, gradcheck, threads_from_env, train, Checkpoint, Config, EvalRequest, ModelPredictor, ModelReport,
};
use lerenet::{Error, Result};

#[derive(Parser)]
#[command(name = "lerenet", version, about = "Few-shot defect segmentation on synthetic surface defects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, writing a checkpoint after every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on episodes of its held-out fold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        episodes: usize,
        /// Evaluation seed; defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the six-row module toggle grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every module in f64.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parameter counts per module.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Write the synthetic dataset to disk as tensor files.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = Config::load(&config)?;
            let trainer = train(&cfg, Some(&out))?;
            let n = trainer.loss_trace.len();
            let tail = &trainer.loss_trace[n.saturating_sub(20)..];
            Ok(format!(
                "epochs = {}\nepisodes = {}\nfinal_loss_mean = {:.6}\ncheckpoint = {}\n",
                trainer.epoch,
                trainer.episodes_done,
                tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                out.join(lerenet::harness::train::CHECKPOINT_FILE).display()
            ))
        }
        Command::Eval { ckpt, fold, k, episodes, seed } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = &ckpt.config;
            if fold != cfg.test_fold {
                return Err(Error::Config(format!(
                    "checkpoint was trained with fold {} held out, cannot evaluate fold {fold}",
                    cfg.test_fold
                )));
            }
            if k == 0 {
                return Err(Error::Config("k must be at least 1".into()));
            }
            let (model, store) = ckpt.restore()?;
            let dataset = Dataset::new(cfg.image_size, cfg.fold_seed, fold)?;
            let req = EvalRequest {
                shots: k,
                episodes,
                seed: seed.unwrap_or(cfg.seed),
            };
            let predictor = ModelPredictor { model: &model, store: &store };
            let report = lerenet::harness::evaluate(&predictor, &dataset, &req, threads_from_env()?, ckpt.loss_trace.clone())?;
            Ok(report.render())
        }
        Command::Ablate { config } => {
            let cfg = Config::load(&config)?;
            Ok(ablate(&cfg, threads_from_env()?)?.render())
        }
        Command::Gradcheck { config } => {
            let cfg = Config::load(&config)?;
            let checks = gradcheck::gradcheck_suite(&cfg)?;
            print!("{}", gradcheck::render(&checks));
            gradcheck::enforce(&checks)?;
            Ok(String::new())
        }
        Command::Report { ckpt } => Ok(ModelReport::from_checkpoint(&Checkpoint::load(&ckpt)?).render()),
        Command::Generate { out, per_class, image_size, seed } => {
            let n = Dataset::new(image_size, seed, 0)?.export(&out, per_class, seed)?;
            Ok(format!("samples = {n}\nroot = {}\n", out.display()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
