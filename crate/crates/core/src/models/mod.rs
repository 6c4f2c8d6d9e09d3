//! Boundary classifiers.
//!
//! Three model families share one [`TrainedModel`] envelope: gradient-boosted
//! trees, L2-regularized logistic regression and an RBF-kernel SVM with Platt
//! calibration. Every model maps a feature row to a boundary probability.

pub mod gbdt;
pub mod logreg;
pub mod svm;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gbdt::{GbdtConfig, GbdtModel, Growth};
pub use logreg::{LinearModel, LogregConfig};
pub use svm::{SvmConfig, SvmModel};

use crate::features::LAYOUT_VERSION;

pub const MODEL_FORMAT: &str = "sessionseg-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("need at least {0} training rows")]
    TooFewRows(usize),
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("feature dimension {got} does not match model dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("too many rows for the kernel solver: {rows} > {limit}")]
    TooLarge { rows: usize, limit: usize },
    #[error("model file: {0}")]
    File(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss `log(1 + e^m) - y m` without overflow.
pub(crate) fn logistic_loss(margin: f64, y: f64) -> f64 {
    let softplus = if margin > 0.0 { margin + (-margin).exp().ln_1p() } else { margin.exp().ln_1p() };
    softplus - y * margin
}

/// Checks shapes, labels and finiteness; requires both classes.
pub(crate) fn validate_training(x: ArrayView2<f64>, y: &[u8], min_rows: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(ModelError::LengthMismatch { rows: x.nrows(), labels: y.len() });
    }
    if y.len() < min_rows {
        return Err(ModelError::TooFewRows(min_rows));
    }
    if let Some(&b) = y.iter().find(|&&l| l > 1) {
        return Err(ModelError::BadLabel(b));
    }
    if !(y.contains(&0) && y.contains(&1)) {
        return Err(ModelError::SingleClass);
    }
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(ModelError::NonFinite { row, col });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gbdt,
    Logreg,
    Svm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gbdt => "gbdt",
            ModelKind::Logreg => "logreg",
            ModelKind::Svm => "svm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gbdt" => Ok(ModelKind::Gbdt),
            "logreg" => Ok(ModelKind::Logreg),
            "svm" => Ok(ModelKind::Svm),
            other => Err(format!("unknown model kind `{other}` (expected gbdt, logreg or svm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Gbdt(GbdtModel),
    Logreg(LinearModel),
    Svm(SvmModel),
}

/// Window radius and layout version of the features a model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub w: Option<usize>,
    pub layout_version: u32,
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self { w: None, layout_version: LAYOUT_VERSION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub meta: ModelMeta,
    pub params: ModelParams,
}

/// A model family with its hyperparameters, ready to fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Gbdt(GbdtConfig),
    Logreg(LogregConfig),
    Svm(SvmConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Gbdt(_) => ModelKind::Gbdt,
            ModelSpec::Logreg(_) => ModelKind::Logreg,
            ModelSpec::Svm(_) => ModelKind::Svm,
        }
    }

    pub fn fit(&self, x: ArrayView2<f64>, y: &[u8]) -> Result<TrainedModel> {
        match self {
            ModelSpec::Gbdt(c) => gbdt::fit_gbdt(x, y, c),
            ModelSpec::Logreg(c) => logreg::fit_logreg(x, y, c),
            ModelSpec::Svm(c) => svm::fit_svm(x, y, c),
        }
    }
}

impl TrainedModel {
    pub(crate) fn new(feature_dim: usize, params: ModelParams) -> Self {
        Self { format: MODEL_FORMAT.into(), version: MODEL_VERSION, feature_dim, meta: ModelMeta::default(), params }
    }

    pub fn with_window(mut self, w: usize) -> Self {
        self.meta.w = Some(w);
        self
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Gbdt(_) => ModelKind::Gbdt,
            ModelParams::Logreg(_) => ModelKind::Logreg,
            ModelParams::Svm(_) => ModelKind::Svm,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(ModelError::DimMismatch { expected: self.feature_dim, got: x.len() });
        }
        Ok(())
    }

    /// Raw score before the output link: log-odds for trees and logistic
    /// regression, the kernel decision value for the SVM.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match &self.params {
            ModelParams::Gbdt(m) => m.margin(x),
            ModelParams::Logreg(m) => m.margin(x),
            ModelParams::Svm(m) => m.decision(x),
        })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match &self.params {
            ModelParams::Gbdt(m) => sigmoid(m.margin(x)),
            ModelParams::Logreg(m) => sigmoid(m.margin(x)),
            ModelParams::Svm(m) => m.predict_proba(x),
        })
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.feature_dim {
            return Err(ModelError::DimMismatch { expected: self.feature_dim, got: x.ncols() });
        }
        x.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.predict_proba(s),
                None => self.predict_proba(&r.to_vec()),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(|e| ModelError::File(e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: TrainedModel = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| ModelError::File(e.to_string()))?;
        if m.format != MODEL_FORMAT {
            return Err(ModelError::File(format!("format `{}` is not `{MODEL_FORMAT}`", m.format)));
        }
        if m.version != MODEL_VERSION {
            return Err(ModelError::File(format!("model version {} unsupported", m.version)));
        }
        Ok(m)
    }

    /// Loads a model and checks it was trained on features with window `w`
    /// and the current layout.
    pub fn load_for_window(path: &Path, w: usize) -> Result<Self> {
        let m = Self::load(path)?;
        m.check_features(w)?;
        Ok(m)
    }

    pub fn check_features(&self, w: usize) -> Result<()> {
        if self.meta.layout_version != LAYOUT_VERSION {
            return Err(ModelError::File(format!(
                "model layout version {} does not match features layout {LAYOUT_VERSION}",
                self.meta.layout_version
            )));
        }
        if self.meta.w != Some(w) {
            return Err(ModelError::File(format!("model was trained with w={:?}, features have w={w}", self.meta.w)));
        }
        if self.feature_dim != crate::features::feature_dim(w) {
            return Err(ModelError::DimMismatch { expected: crate::features::feature_dim(w), got: self.feature_dim });
        }
        Ok(())
    }
}
