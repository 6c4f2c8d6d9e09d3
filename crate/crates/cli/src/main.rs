use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sessionseg::models::ModelKind;
use sessionseg::pipeline::{self, PipelineConfig, PipelineError};

/// Segment shopping sessions at topic changes.
#[derive(Parser)]
#[command(name = "sessionseg", version)]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true, default_value = "sessionseg.toml")]
    config: PathBuf,
    /// Window size: items on each side of a gap.
    #[arg(long, global = true)]
    w: Option<usize>,
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    /// Random-search trials.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Decision threshold on the predicted probability.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic session log, catalog and annotations.
    Synth,
    /// Train behavior embeddings on unannotated sessions.
    Embed,
    /// Build the window-feature dataset.
    Features,
    /// Tune, fit and evaluate a classifier next to the cosine baseline.
    Train,
    /// Aggregate SHAP importance of a trained model.
    Importance {
        /// Model file; defaults to the one written by `train`.
        #[arg(long)]
        model_file: Option<PathBuf>,
    },
    /// Run embed, features and train in order.
    Run,
}

fn load(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(w) = cli.w {
        cfg.w = w;
        cfg.importance.w = w;
    }
    if let Some(m) = cli.model {
        cfg.model = m;
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.sgns.seed = s;
    }
    if let Some(t) = cli.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Synth => print_json(&pipeline::cmd_synth(&cfg)?),
        Command::Embed => print_json(&pipeline::cmd_embed(&cfg)?),
        Command::Features => print_json(&pipeline::cmd_features(&cfg, cfg.w)?),
        Command::Train => println!("{}", pipeline::cmd_tune_train_eval(&cfg, cfg.w, cfg.model)?.to_json()),
        Command::Importance { model_file } => {
            let report = pipeline::cmd_importance(&cfg, cfg.importance.w, cfg.model, model_file.as_deref())?;
            eprintln!("wrote {}", cfg.importance_path(cfg.model, cfg.importance.w).display());
            for e in report.entries.iter().take(10) {
                println!("{:>3}  {:<24} {:.6}", e.rank, e.label, e.mean_abs);
            }
        }
        Command::Run => {
            print_json(&pipeline::cmd_embed(&cfg)?);
            print_json(&pipeline::cmd_features(&cfg, cfg.w)?);
            println!("{}", pipeline::cmd_tune_train_eval(&cfg, cfg.w, cfg.model)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
