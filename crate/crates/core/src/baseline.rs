//! Unsupervised comparison method: threshold the behavior-embedding cosine
//! of the two items adjacent to each gap.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior_embed::EmbeddingTable;
use crate::corpus::{AnnotatedSession, Session};
use crate::eval_tune::{evaluate_scores, pr_auc, roc_auc, EvalError};
use crate::features::cosine;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("threshold {0} outside [-1, 1]")]
    Threshold(f64),
    #[error("session `{0}` has fewer than two items")]
    TooShort(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Boundary where the adjacent cosine is below the threshold.
    #[default]
    Below,
    /// Boundary where the adjacent cosine is above the threshold.
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub threshold: f64,
    pub direction: Direction,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { threshold: 0.5, direction: Direction::Below }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(BaselineError::Threshold(self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapScore {
    pub cosine: f64,
    /// `1 - cosine` clamped to `[0, 2]`; higher means more likely a boundary.
    pub score: f64,
    /// One of the two items has no embedding; its cosine is taken as 0.
    pub oov: bool,
}

fn adjacent_cosine(table: &EmbeddingTable, a: &str, b: &str) -> (f64, bool) {
    match (table.lookup(a), table.lookup(b)) {
        (Some(u), Some(v)) => (cosine(u, v).expect("table vectors share a dimension"), false),
        _ => (0.0, true),
    }
}

pub fn baseline_scores(session: &Session, table: &EmbeddingTable) -> Result<Vec<GapScore>> {
    if session.len() < 2 {
        return Err(BaselineError::TooShort(session.session_id.clone()));
    }
    Ok(session
        .items
        .windows(2)
        .map(|p| {
            let (c, oov) = adjacent_cosine(table, &p[0], &p[1]);
            GapScore { cosine: c, score: (1.0 - c).clamp(0.0, 2.0), oov }
        })
        .collect())
}

fn label(cos: f64, cfg: &BaselineConfig) -> u8 {
    match cfg.direction {
        Direction::Below => (cos < cfg.threshold) as u8,
        Direction::Above => (cos > cfg.threshold) as u8,
    }
}

pub fn baseline_segment(session: &Session, table: &EmbeddingTable, cfg: &BaselineConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    Ok(baseline_scores(session, table)?.iter().map(|g| label(g.cosine, cfg)).collect())
}

/// Labels and gap scores for every gap of sessions with at least two items,
/// in the row order of the feature dataset.
pub fn score_annotated(annotated: &[AnnotatedSession], table: &EmbeddingTable) -> (Vec<u8>, Vec<GapScore>) {
    let mut y = Vec::new();
    let mut scores = Vec::new();
    for a in annotated.iter().filter(|a| a.session.len() >= 2) {
        y.extend_from_slice(&a.gap_labels);
        scores.extend(baseline_scores(&a.session, table).expect("length checked"));
    }
    (y, scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub f1: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub direction: Direction,
    pub rows: Vec<SweepRow>,
    /// Row with the highest F1 (first on ties).
    pub best: SweepRow,
}

/// F1 at every threshold that yields a distinct labeling, with the ranking
/// metrics of the score `1 - cosine`. Candidate thresholds are the midpoints
/// between consecutive distinct cosines plus both ends of `[-1, 1]`.
pub fn threshold_sweep(y: &[u8], gaps: &[GapScore], direction: Direction) -> Result<SweepReport> {
    let ranking: Vec<f64> = match direction {
        Direction::Below => gaps.iter().map(|g| g.score).collect(),
        Direction::Above => gaps.iter().map(|g| g.cosine).collect(),
    };
    let pr = pr_auc(y, &ranking)?;
    let roc = roc_auc(y, &ranking)?;
    let mut cos: Vec<f64> = gaps.iter().map(|g| g.cosine).collect();
    cos.sort_by(f64::total_cmp);
    cos.dedup();
    let mut thresholds = vec![-1.0];
    thresholds.extend(cos.windows(2).map(|p| 0.5 * (p[0] + p[1])));
    thresholds.push(1.0);
    thresholds.dedup();
    let mut rows = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        let cfg = BaselineConfig { threshold: t, direction };
        let pred: Vec<f64> = gaps.iter().map(|g| label(g.cosine, &cfg) as f64).collect();
        let report = evaluate_scores(y, &pred, 0.5)?;
        rows.push(SweepRow { threshold: t, f1: report.f1, pr_auc: pr, roc_auc: roc });
    }
    let mut best = rows[0].clone();
    for r in &rows {
        if r.f1 > best.f1 {
            best = r.clone();
        }
    }
    Ok(SweepReport { direction, rows, best })
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["threshold", "f1", "pr_auc", "roc_auc"])?;
        for r in &self.rows {
            out.write_record([r.threshold.to_string(), r.f1.to_string(), r.pr_auc.to_string(), r.roc_auc.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
