//! Staged experiment flow: synthesize or load a corpus, train behavior
//! embeddings, build window features, tune/train/evaluate a classifier with
//! the baseline alongside, and compute feature importance.
//!
//! Stages communicate only through files in the work directory, so any stage
//! can be rerun on its own.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{score_annotated, threshold_sweep, BaselineError, Direction};
use crate::behavior_embed::{train_behavior_embeddings, EmbedError, EmbeddingTable, SgnsConfig, TrainingReport};
use crate::corpus::{
    read_annotations, read_catalog, read_session_log, split_annotated, write_annotations, write_catalog,
    write_session_log, CorpusError, SplitManifest,
};
use crate::eval_tune::{evaluate, group_kfold, tune, write_trial_log, EvalError, MetricReport, ParamSet, SearchSpace};
use crate::explain::{aggregate_importance, attribute_rows, Background, ExplainError, ImportanceReport, TreeShapMethod};
use crate::features::{Dataset, FeatureContext, FeatureError, PriceRule, WindowConfig};
use crate::models::{GbdtConfig, LogregConfig, ModelError, ModelKind, ModelSpec, SvmConfig, TrainedModel};
use crate::synth::{generate, SynthConfig, SynthError};
use crate::text_embed::{TextEmbedError, TextEmbeddingProvider, DEFAULT_FALLBACK_DIM};

pub const REPORT_FORMAT: &str = "sessionseg-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: Box<PipelineError> },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Text(#[from] TextEmbedError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Whether the failure comes from inputs or configuration rather than
    /// from a defect in the toolkit.
    pub fn is_user_error(&self) -> bool {
        match self {
            PipelineError::Input { .. }
            | PipelineError::Config(_)
            | PipelineError::Corpus(_)
            | PipelineError::Text(_)
            | PipelineError::Feature(_)
            | PipelineError::Synth(_)
            | PipelineError::Embed(_) => true,
            PipelineError::Model(e) => matches!(
                e,
                ModelError::File(_) | ModelError::DimMismatch { .. } | ModelError::SingleClass | ModelError::TooLarge { .. } | ModelError::Config(_) | ModelError::Io(_)
            ),
            PipelineError::Eval(e) => matches!(e, EvalError::SingleClass | EvalError::NoPositives | EvalError::Folds(_) | EvalError::Io(_)),
            PipelineError::Io(e) => matches!(e.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied),
            PipelineError::Baseline(_) | PipelineError::Explain(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn input<T, E: Into<PipelineError>>(path: &Path, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| PipelineError::Input { path: path.to_path_buf(), source: Box::new(e.into()) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub sessions: PathBuf,
    pub catalog: PathBuf,
    pub annotations: PathBuf,
    pub workdir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            sessions: "sessions.csv".into(),
            catalog: "catalog.csv".into(),
            annotations: "annotations.jsonl".into(),
            workdir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    /// Precomputed vectors keyed `title:<item>` / `brand:<item>`; hashed
    /// n-gram vectors are used when absent.
    pub vectors: Option<PathBuf>,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { vectors: None, dim: DEFAULT_FALLBACK_DIM, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub w: usize,
    pub background: usize,
    /// Explain at most this many test rows (seeded subsample).
    pub max_rows: Option<usize>,
    pub method: TreeShapMethod,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self { w: 4, background: 1000, max_rows: None, method: TreeShapMethod::Interventional }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub w: usize,
    pub model: ModelKind,
    pub threshold: f64,
    pub trials: usize,
    pub folds: usize,
    /// Train and test parts of the session split.
    pub split: (u32, u32),
    pub seed: u64,
    pub price_rule: PriceRule,
    pub sgns: SgnsConfig,
    pub text: TextConfig,
    pub gbdt: GbdtConfig,
    pub logreg: LogregConfig,
    pub svm: SvmConfig,
    pub synth: SynthConfig,
    pub importance: ImportanceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            w: 2,
            model: ModelKind::Gbdt,
            threshold: 0.5,
            trials: 50,
            folds: 5,
            split: (4, 1),
            seed: 42,
            price_rule: PriceRule::MinPlusOne,
            sgns: SgnsConfig::default(),
            text: TextConfig::default(),
            gbdt: GbdtConfig::default(),
            logreg: LogregConfig::default(),
            svm: SvmConfig::default(),
            synth: SynthConfig::default(),
            importance: ImportanceConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML config. Relative paths are resolved against the
    /// directory holding the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = input(path, fs::read_to_string(path))?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, dir: &Path) {
        for p in [&mut self.paths.sessions, &mut self.paths.catalog, &mut self.paths.annotations, &mut self.paths.workdir] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(v) = self.text.vectors.as_mut() {
            if v.is_relative() {
                *v = dir.join(&*v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.w == 0 || self.importance.w == 0 {
            return bad("w must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.split.0 == 0 || self.split.1 == 0 {
            return bad("split parts must be positive".into());
        }
        self.sgns.validate()?;
        self.gbdt.validate()?;
        Ok(())
    }

    pub fn base_spec(&self, kind: ModelKind) -> ModelSpec {
        match kind {
            ModelKind::Gbdt => ModelSpec::Gbdt(GbdtConfig { seed: self.seed, ..self.gbdt.clone() }),
            ModelKind::Logreg => ModelSpec::Logreg(self.logreg.clone()),
            ModelKind::Svm => ModelSpec::Svm(SvmConfig { seed: self.seed, ..self.svm.clone() }),
        }
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.paths.workdir.join("embeddings.vec")
    }

    pub fn embed_report_path(&self) -> PathBuf {
        self.paths.workdir.join("embed_report.json")
    }

    pub fn dataset_path(&self, w: usize) -> PathBuf {
        self.paths.workdir.join(format!("features_w{w}.tsv"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.paths.workdir.join("split.json")
    }

    pub fn model_path(&self, kind: ModelKind, w: usize) -> PathBuf {
        self.paths.workdir.join(format!("model_{kind}_w{w}.json"))
    }

    pub fn report_path(&self, kind: ModelKind, w: usize) -> PathBuf {
        self.paths.workdir.join(format!("report_{kind}_w{w}.json"))
    }

    pub fn trial_log_path(&self, kind: ModelKind, w: usize) -> PathBuf {
        self.paths.workdir.join(format!("trials_{kind}_w{w}.jsonl"))
    }

    pub fn baseline_sweep_path(&self) -> PathBuf {
        self.paths.workdir.join("baseline_sweep.csv")
    }

    pub fn importance_path(&self, kind: ModelKind, w: usize) -> PathBuf {
        self.paths.workdir.join(format!("importance_{kind}_w{w}.csv"))
    }
}

fn ensure_workdir(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.workdir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub sessions: usize,
    pub annotated: usize,
    pub items: usize,
    pub positive_rate: f64,
}

/// Writes a synthetic session log, catalog and annotation file to the
/// configured input paths.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let corpus = generate(&cfg.synth)?;
    for p in [&cfg.paths.sessions, &cfg.paths.catalog, &cfg.paths.annotations] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    write_session_log(&cfg.paths.sessions, &corpus.sessions)?;
    write_catalog(&cfg.paths.catalog, &corpus.catalog)?;
    write_annotations(&cfg.paths.annotations, &corpus.annotated)?;
    Ok(SynthSummary {
        sessions: corpus.sessions.len(),
        annotated: corpus.annotated.len(),
        items: corpus.catalog.len(),
        positive_rate: corpus.positive_rate(),
    })
}

/// Trains behavior embeddings on every logged session except annotated ones.
pub fn cmd_embed(cfg: &PipelineConfig) -> Result<TrainingReport> {
    let sessions = input(&cfg.paths.sessions, read_session_log(&cfg.paths.sessions))?;
    let annotated = input(&cfg.paths.annotations, read_annotations(&cfg.paths.annotations))?;
    let exclude: HashSet<String> = annotated.iter().map(|a| a.session.session_id.clone()).collect();
    let (table, report) = train_behavior_embeddings(&sessions, &cfg.sgns, &exclude)?;
    ensure_workdir(cfg)?;
    table.save(&cfg.embeddings_path())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| PipelineError::Config(e.to_string()))?;
    fs::write(cfg.embed_report_path(), json + "\n")?;
    Ok(report)
}

fn text_providers(cfg: &PipelineConfig) -> Result<(TextEmbeddingProvider, TextEmbeddingProvider)> {
    match &cfg.text.vectors {
        Some(p) => {
            let title = input(p, TextEmbeddingProvider::load_precomputed(p, cfg.text.seed))?;
            let brand = input(p, TextEmbeddingProvider::load_precomputed(p, cfg.text.seed))?;
            Ok((title, brand))
        }
        None => Ok((
            TextEmbeddingProvider::hashed("title", cfg.text.dim, cfg.text.seed)?,
            TextEmbeddingProvider::hashed("brand", cfg.text.dim, cfg.text.seed)?,
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesSummary {
    pub w: usize,
    pub rows: usize,
    pub dim: usize,
    pub positives: usize,
    pub positive_rate: f64,
}

/// Builds the feature dataset of all annotated sessions for window `w`.
pub fn cmd_features(cfg: &PipelineConfig, w: usize) -> Result<FeaturesSummary> {
    let annotated = input(&cfg.paths.annotations, read_annotations(&cfg.paths.annotations))?;
    let (catalog, _) = input(&cfg.paths.catalog, read_catalog(&cfg.paths.catalog))?;
    let emb_path = cfg.embeddings_path();
    let table = input(&emb_path, EmbeddingTable::load(&emb_path))?;
    let (title, brand) = text_providers(cfg)?;
    let window = WindowConfig { price_rule: cfg.price_rule, ..WindowConfig::new(w)? };
    let ctx = FeatureContext { window, behavior: &table, title: &title, brand: &brand, catalog: &catalog };
    let ds = ctx.build_dataset(&annotated)?;
    ensure_workdir(cfg)?;
    ds.save(&cfg.dataset_path(w))?;
    let positives = ds.y.iter().filter(|&&l| l == 1).count();
    Ok(FeaturesSummary { w, rows: ds.len(), dim: ds.feature_dim(), positives, positive_rate: ds.positive_rate() })
}

fn load_dataset(cfg: &PipelineConfig, w: usize) -> Result<Dataset> {
    let path = cfg.dataset_path(w);
    let ds = input(&path, Dataset::load(&path))?;
    if ds.w != w {
        return Err(PipelineError::Input {
            path,
            source: Box::new(PipelineError::Config(format!("dataset has w={}, expected w={w}", ds.w))),
        });
    }
    Ok(ds)
}

fn rows_of(ds: &Dataset, sessions: &HashSet<&str>) -> Vec<usize> {
    (0..ds.len()).filter(|&i| sessions.contains(ds.groups[i].as_str())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub direction: Direction,
    pub best_threshold: f64,
    pub f1: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub w: usize,
    pub seed: u64,
    pub trials: usize,
    pub folds: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub test_positive_rate: f64,
    pub best_params: ParamSet,
    pub cv_mean_f1: f64,
    pub failed_trials: usize,
    pub test: MetricReport,
    pub baseline: BaselineRow,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Session split, grouped-CV random search on the training side, refit on
/// the whole training side and evaluation on the test side, with the cosine
/// baseline scored on the same test sessions.
pub fn cmd_tune_train_eval(cfg: &PipelineConfig, w: usize, kind: ModelKind) -> Result<EvalReport> {
    let ds = load_dataset(cfg, w)?;
    let annotated = input(&cfg.paths.annotations, read_annotations(&cfg.paths.annotations))?;
    let emb_path = cfg.embeddings_path();
    let table = input(&emb_path, EmbeddingTable::load(&emb_path))?;

    let (train_s, test_s, manifest) = split_annotated(&annotated, cfg.split, cfg.seed)?;
    let train_ids: HashSet<&str> = manifest.train.iter().map(String::as_str).collect();
    let test_ids: HashSet<&str> = manifest.test.iter().map(String::as_str).collect();
    let train = ds.subset(&rows_of(&ds, &train_ids));
    let test = ds.subset(&rows_of(&ds, &test_ids));
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::Config("session split left one side without gaps".into()));
    }
    if !test.y.contains(&1) || !test.y.contains(&0) {
        return Err(EvalError::SingleClass.into());
    }

    let plan = group_kfold(&train.groups, cfg.folds, cfg.seed.wrapping_add(1))?;
    let base = cfg.base_spec(kind);
    let space = SearchSpace::for_spec(&base);
    let (spec, search) =
        tune(&base, &space, train.x.view(), &train.y, &plan, cfg.trials, cfg.seed.wrapping_add(2), cfg.threshold)?;
    let model = spec.fit(train.x.view(), &train.y)?.with_window(w);
    let test_report = evaluate(&model, test.x.view(), &test.y, cfg.threshold)?;

    let (by, gaps) = score_annotated(&test_s, &table);
    let sweep = threshold_sweep(&by, &gaps, Direction::Below)?;

    ensure_workdir(cfg)?;
    manifest.save(&cfg.split_path())?;
    model.save(&cfg.model_path(kind, w))?;
    write_trial_log(&cfg.trial_log_path(kind, w), &search.trials)?;
    sweep.write_csv(fs::File::create(cfg.baseline_sweep_path())?)?;

    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        model: kind,
        w,
        seed: cfg.seed,
        trials: cfg.trials,
        folds: cfg.folds,
        train_sessions: train_s.len(),
        test_sessions: test_s.len(),
        train_rows: train.len(),
        test_rows: test.len(),
        test_positive_rate: test.positive_rate(),
        best_params: search.best_params.clone(),
        cv_mean_f1: search.best_mean_f1,
        failed_trials: search.trials.iter().filter(|t| t.error.is_some()).count(),
        test: test_report,
        baseline: BaselineRow {
            direction: sweep.direction,
            best_threshold: sweep.best.threshold,
            f1: sweep.best.f1,
            pr_auc: sweep.best.pr_auc,
            roc_auc: sweep.best.roc_auc,
        },
    };
    fs::write(cfg.report_path(kind, w), report.to_json())?;
    Ok(report)
}

/// Attributions on test rows of the trained model for window `w`,
/// aggregated into a ranked report and written as CSV.
pub fn cmd_importance(cfg: &PipelineConfig, w: usize, kind: ModelKind, model_path: Option<&Path>) -> Result<ImportanceReport> {
    let path = model_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.model_path(kind, w));
    let model = input(&path, TrainedModel::load_for_window(&path, w))?;
    let ds = load_dataset(cfg, w)?;
    let split_path = cfg.split_path();
    let manifest = input(&split_path, SplitManifest::load(&split_path))?;
    let train_ids: HashSet<&str> = manifest.train.iter().map(String::as_str).collect();
    let test_ids: HashSet<&str> = manifest.test.iter().map(String::as_str).collect();
    let train_rows = rows_of(&ds, &train_ids);
    let mut test_rows = rows_of(&ds, &test_ids);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(PipelineError::Config("split manifest does not match the dataset sessions".into()));
    }
    if let Some(max) = cfg.importance.max_rows.filter(|&m| m < test_rows.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
        let mut idx = sample(&mut rng, test_rows.len(), max).into_vec();
        idx.sort_unstable();
        test_rows = idx.into_iter().map(|i| test_rows[i]).collect();
    }
    let background =
        Background::sample(ds.x.select(Axis(0), &train_rows).view(), cfg.importance.background, cfg.seed.wrapping_add(3))?;
    let x = ds.x.select(Axis(0), &test_rows);
    let attributions = attribute_rows(&model, x.view(), &background, cfg.importance.method)?;
    let report = aggregate_importance(&attributions, w)?;
    ensure_workdir(cfg)?;
    report.save_csv(&cfg.importance_path(kind, w))?;
    Ok(report)
}
