//! Evaluation metrics, session-grouped folds and hyperparameter search.

mod folds;
mod metrics;
mod search;

use thiserror::Error;

pub use folds::{group_kfold, FoldPlan};
pub use metrics::{confusion, evaluate, evaluate_scores, f1_score, pr_auc, roc_auc, Confusion, MetricReport};
pub use search::{
    apply_params, cross_validate, random_search, tune, write_trial_log, ParamRange, ParamSet, ParamValue,
    SearchResult, SearchSpace, TrialRecord,
};

use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("score {0} is NaN")]
    NanScore(usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("labels contain no positives")]
    NoPositives,
    #[error("fold plan: {0}")]
    Folds(String),
    #[error("search: {0}")]
    Search(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
