//! Runs the full pipeline on a synthetic corpus and prints the reports.
//!
//! `cargo run --release -p sessionseg --example synthetic_benchmark -- [workdir]`

use std::path::PathBuf;
use std::time::Instant;

use sessionseg::models::ModelKind;
use sessionseg::pipeline::{cmd_embed, cmd_features, cmd_synth, cmd_tune_train_eval, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("sessionseg-bench"));
    let mut cfg = PipelineConfig::default();
    cfg.resolve_relative(&dir);
    cfg.sgns.vector_size = 32;
    cfg.sgns.epochs = 30;
    cfg.trials = 10;
    let t = Instant::now();
    let s = cmd_synth(&cfg)?;
    println!("synth: {s:?} ({:.1?})", t.elapsed());
    let r = cmd_embed(&cfg)?;
    println!("embed: vocab {} used {} ({:.1?})", r.vocab_size, r.sessions_used, t.elapsed());
    let f = cmd_features(&cfg, cfg.w)?;
    println!("features: {f:?} ({:.1?})", t.elapsed());
    for kind in [ModelKind::Gbdt, ModelKind::Logreg] {
        let rep = cmd_tune_train_eval(&cfg, cfg.w, kind)?;
        println!(
            "{kind}: test F1 {:.4} PR-AUC {:.4} ROC-AUC {:.4} | baseline F1 {:.4} ROC {:.4} | cv {:.4} ({:.1?})",
            rep.test.f1, rep.test.pr_auc, rep.test.roc_auc, rep.baseline.f1, rep.baseline.roc_auc, rep.cv_mean_f1, t.elapsed()
        );
    }
    Ok(())
}
