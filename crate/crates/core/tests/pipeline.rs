use std::path::Path;

use sessionseg::models::{ModelKind, TrainedModel};
use sessionseg::pipeline::{cmd_embed, cmd_features, cmd_importance, cmd_synth, cmd_tune_train_eval, PipelineConfig, PipelineError};

fn small(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.resolve_relative(dir);
    cfg.synth.annotated_sessions = 200;
    cfg.synth.unlabeled_sessions = 400;
    cfg.synth.topics = 10;
    cfg.synth.items_per_topic = 20;
    cfg.sgns.vector_size = 16;
    cfg.sgns.epochs = 5;
    cfg.trials = 3;
    cfg.folds = 3;
    cfg.gbdt.num_rounds = 30;
    cfg.importance.w = 2;
    cfg.importance.background = 50;
    cfg.importance.max_rows = Some(60);
    cfg
}

fn run_all(cfg: &PipelineConfig) -> Vec<u8> {
    cmd_synth(cfg).unwrap();
    let embed = cmd_embed(cfg).unwrap();
    assert_eq!(embed.sessions_excluded, cfg.synth.annotated_sessions);
    assert_eq!(embed.sessions_used, cfg.synth.unlabeled_sessions);
    cmd_features(cfg, 2).unwrap();
    let report = cmd_tune_train_eval(cfg, 2, ModelKind::Gbdt).unwrap();
    assert_eq!(report.test.threshold, 0.5);
    assert_eq!(report.trials, 3);
    std::fs::read(cfg.report_path(ModelKind::Gbdt, 2)).unwrap()
}

#[test]
fn identical_seeds_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_all(&small(a.path()));
    assert_eq!(ra, run_all(&small(b.path())));
    let mut other = small(b.path());
    other.seed = 43;
    cmd_tune_train_eval(&other, 2, ModelKind::Gbdt).unwrap();
    assert_ne!(std::fs::read(other.report_path(ModelKind::Gbdt, 2)).unwrap(), ra);
}

#[test]
fn importance_and_window_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_all(&cfg);
    let report = cmd_importance(&cfg, 2, ModelKind::Gbdt, None).unwrap();
    assert_eq!(report.entries.len(), 24);
    assert!(report.entries.windows(2).all(|p| p[0].mean_abs >= p[1].mean_abs));
    let top = &report.entries[0].label;
    assert!(top.starts_with("(") && top.contains("):"), "{top}");
    assert_eq!(cmd_importance(&cfg, 2, ModelKind::Gbdt, None).unwrap(), report);

    let w3 = cmd_features(&cfg, 3).unwrap();
    assert_eq!(w3.dim, 60);
    let model = TrainedModel::load(&cfg.model_path(ModelKind::Gbdt, 2)).unwrap();
    assert!(TrainedModel::load_for_window(&cfg.model_path(ModelKind::Gbdt, 2), 3).is_err());
    assert_eq!(model.feature_dim, 24);
    let err = cmd_importance(&cfg, 3, ModelKind::Gbdt, Some(&cfg.model_path(ModelKind::Gbdt, 2))).unwrap_err();
    assert!(err.is_user_error(), "{err}");
}

#[test]
fn linear_and_kernel_models_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_all(&cfg);
    for kind in [ModelKind::Logreg, ModelKind::Svm] {
        let r = cmd_tune_train_eval(&cfg, 2, kind).unwrap();
        assert!((0.0..=1.0).contains(&r.test.f1));
        assert_eq!(r.model, kind);
    }
}

#[test]
fn missing_inputs_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let err = cmd_embed(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Input { .. }));
    assert!(err.is_user_error());
    assert!(err.to_string().contains("sessions.csv"));
}
