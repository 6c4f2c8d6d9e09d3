//! Seeded random search with a cross-validated F1 objective.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::metrics::f1_score;
use super::EvalError;
use crate::models::{GbdtConfig, Growth, LogregConfig, ModelSpec, SvmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scale", rename_all = "snake_case")]
pub enum ParamRange {
    LogUniform { lo: f64, hi: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Inclusive on both ends.
    IntUniform { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
}

impl ParamValue {
    pub fn as_f64(self) -> f64 {
        match self {
            ParamValue::Int(v) => v as f64,
            ParamValue::Real(v) => v,
        }
    }
}

impl ParamRange {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            ParamRange::LogUniform { lo, .. } if !(lo > 0.0) => Err(format!("log scale needs lo > 0, got {lo}")),
            ParamRange::LogUniform { lo, hi } | ParamRange::Uniform { lo, hi } if !(lo < hi && hi.is_finite()) => {
                Err(format!("empty range [{lo}, {hi}]"))
            }
            ParamRange::IntUniform { lo, hi } if lo >= hi => Err(format!("empty range [{lo}, {hi}]")),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ParamValue {
        match *self {
            ParamRange::LogUniform { lo, hi } => {
                let v = (rng.gen_range(lo.ln()..hi.ln())).exp();
                // exp(ln x) can round just outside the bounds
                ParamValue::Real(v.clamp(lo, hi))
            }
            ParamRange::Uniform { lo, hi } => ParamValue::Real(rng.gen_range(lo..hi)),
            ParamRange::IntUniform { lo, hi } => ParamValue::Int(rng.gen_range(lo..=hi)),
        }
    }
}

pub type ParamSet = BTreeMap<String, ParamValue>;

/// Named parameter ranges, sampled in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<(String, ParamRange)>,
}

impl SearchSpace {
    pub fn new(params: Vec<(&str, ParamRange)>) -> Result<Self, EvalError> {
        for (name, r) in &params {
            r.validate().map_err(|m| EvalError::Search(format!("{name}: {m}")))?;
        }
        Ok(Self { params: params.into_iter().map(|(n, r)| (n.to_string(), r)).collect() })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ParamSet {
        self.params.iter().map(|(n, r)| (n.clone(), r.sample(rng))).collect()
    }

    /// Leaf-wise boosting space.
    pub fn leaf_wise() -> Self {
        use ParamRange::*;
        Self::new(vec![
            ("learning_rate", LogUniform { lo: 1e-4, hi: 0.1 }),
            ("feature_fraction", Uniform { lo: 0.5, hi: 1.0 }),
            ("lambda_l2", LogUniform { lo: 0.1, hi: 10.0 }),
            ("num_leaves", IntUniform { lo: 4, hi: 768 }),
            ("min_sum_hessian_in_leaf", LogUniform { lo: 1e-4, hi: 100.0 }),
            ("bagging_fraction", Uniform { lo: 0.5, hi: 1.0 }),
        ])
        .expect("static space")
    }

    /// Depth-wise boosting space.
    pub fn level_wise() -> Self {
        use ParamRange::*;
        Self::new(vec![
            ("learning_rate", LogUniform { lo: 1e-4, hi: 0.1 }),
            ("colsample_bytree", Uniform { lo: 0.5, hi: 1.0 }),
            ("gamma", LogUniform { lo: 1e-3, hi: 100.0 }),
            ("lambda", LogUniform { lo: 0.1, hi: 10.0 }),
            ("max_depth", IntUniform { lo: 3, hi: 14 }),
            ("min_child_weight", LogUniform { lo: 1e-4, hi: 100.0 }),
            ("subsample", Uniform { lo: 0.5, hi: 1.0 }),
        ])
        .expect("static space")
    }

    pub fn svm() -> Self {
        use ParamRange::*;
        Self::new(vec![("C", LogUniform { lo: 1e-4, hi: 10.0 }), ("gamma", LogUniform { lo: 1e-4, hi: 1.0 })])
            .expect("static space")
    }

    pub fn logreg() -> Self {
        Self::new(vec![("C", ParamRange::LogUniform { lo: 1e-4, hi: 10.0 })]).expect("static space")
    }

    /// The default space matching a base model specification.
    pub fn for_spec(base: &ModelSpec) -> Self {
        match base {
            ModelSpec::Gbdt(c) => match c.growth {
                Growth::LeafWise { .. } => Self::leaf_wise(),
                Growth::LevelWise { .. } => Self::level_wise(),
            },
            ModelSpec::Logreg(_) => Self::logreg(),
            ModelSpec::Svm(_) => Self::svm(),
        }
    }
}

fn int_param(name: &str, v: ParamValue) -> Result<usize, EvalError> {
    match v {
        ParamValue::Int(i) if i >= 0 => Ok(i as usize),
        _ => Err(EvalError::Search(format!("{name} must be a non-negative integer"))),
    }
}

/// Overrides fields of `base` with sampled parameters. Parameter names follow
/// the conventional names of each model family.
pub fn apply_params(base: &ModelSpec, params: &ParamSet) -> Result<ModelSpec, EvalError> {
    let unknown = |n: &str| Err(EvalError::Search(format!("parameter `{n}` does not apply to this model")));
    match base {
        ModelSpec::Gbdt(c) => {
            let mut c: GbdtConfig = c.clone();
            for (n, &v) in params {
                let f = v.as_f64();
                match (n.as_str(), &mut c.growth) {
                    ("learning_rate", _) => c.learning_rate = f,
                    ("feature_fraction" | "colsample_bytree", _) => c.feature_fraction = f,
                    ("bagging_fraction" | "subsample", _) => c.bagging_fraction = f,
                    ("lambda_l2" | "lambda", _) => c.l2_lambda = f,
                    ("min_sum_hessian_in_leaf" | "min_child_weight", _) => c.min_child_weight = f,
                    ("gamma", _) => c.gamma = f,
                    ("num_rounds", _) => c.num_rounds = int_param(n, v)?,
                    ("num_leaves", Growth::LeafWise { num_leaves, .. }) => *num_leaves = int_param(n, v)?,
                    ("max_depth", Growth::LevelWise { max_depth }) => *max_depth = int_param(n, v)?,
                    ("max_depth", Growth::LeafWise { max_depth, .. }) => *max_depth = Some(int_param(n, v)?),
                    _ => return unknown(n),
                }
            }
            Ok(ModelSpec::Gbdt(c))
        }
        ModelSpec::Logreg(c) => {
            let mut c: LogregConfig = c.clone();
            for (n, &v) in params {
                match n.as_str() {
                    "C" => c.c = v.as_f64(),
                    _ => return unknown(n),
                }
            }
            Ok(ModelSpec::Logreg(c))
        }
        ModelSpec::Svm(c) => {
            let mut c: SvmConfig = c.clone();
            for (n, &v) in params {
                match n.as_str() {
                    "C" => c.c = v.as_f64(),
                    "gamma" => c.gamma = v.as_f64(),
                    _ => return unknown(n),
                }
            }
            Ok(ModelSpec::Svm(c))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: ParamSet,
    pub fold_f1: Vec<f64>,
    pub mean_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_trial: usize,
    pub best_params: ParamSet,
    pub best_mean_f1: f64,
    pub trials: Vec<TrialRecord>,
}

/// Samples `trials` parameter sets in order from a generator seeded with
/// `seed`, scores each with `objective` (per-fold F1 values) and keeps the
/// first trial with the highest mean. A failing trial is recorded and
/// skipped.
pub fn random_search<F>(space: &SearchSpace, trials: usize, seed: u64, objective: F) -> Result<SearchResult, EvalError>
where
    F: Fn(&ParamSet) -> Result<Vec<f64>, String> + Sync,
{
    if trials == 0 {
        return Err(EvalError::Search("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled: Vec<ParamSet> = (0..trials).map(|_| space.sample(&mut rng)).collect();
    let records: Vec<TrialRecord> = sampled
        .into_par_iter()
        .enumerate()
        .map(|(trial, params)| match objective(&params) {
            Ok(fold_f1) if !fold_f1.is_empty() => {
                let mean = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
                TrialRecord { trial, params, fold_f1, mean_f1: Some(mean), error: None }
            }
            Ok(_) => TrialRecord { trial, params, fold_f1: vec![], mean_f1: None, error: Some("no folds".into()) },
            Err(e) => TrialRecord { trial, params, fold_f1: vec![], mean_f1: None, error: Some(e) },
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for r in &records {
        if let Some(m) = r.mean_f1 {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((r.trial, m));
            }
        }
    }
    let (best_trial, best_mean_f1) = best.ok_or_else(|| {
        let first = records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        EvalError::Search(format!("all {trials} trials failed; first error: {first}"))
    })?;
    Ok(SearchResult { best_trial, best_params: records[best_trial].params.clone(), best_mean_f1, trials: records })
}

/// Per-fold validation F1 of `spec` under `plan`.
pub fn cross_validate(
    spec: &ModelSpec,
    x: ArrayView2<f64>,
    y: &[u8],
    plan: &FoldPlan,
    threshold: f64,
) -> Result<Vec<f64>, EvalError> {
    if plan.fold_of_row.len() != y.len() {
        return Err(EvalError::Folds(format!("plan covers {} rows, data has {}", plan.fold_of_row.len(), y.len())));
    }
    (0..plan.k)
        .map(|f| {
            let tr = plan.train_rows(f);
            let va = plan.validation_rows(f);
            let tx = x.select(Axis(0), &tr);
            let ty: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
            let vx = x.select(Axis(0), &va);
            let vy: Vec<u8> = va.iter().map(|&i| y[i]).collect();
            let model = spec.fit(tx.view(), &ty)?;
            let scores = model.predict_proba_batch(vx.view())?;
            f1_score(&vy, &scores, threshold)
        })
        .collect()
}

/// Random search of `space` around `base`, scored by grouped cross-validation.
pub fn tune(
    base: &ModelSpec,
    space: &SearchSpace,
    x: ArrayView2<f64>,
    y: &[u8],
    plan: &FoldPlan,
    trials: usize,
    seed: u64,
    threshold: f64,
) -> Result<(ModelSpec, SearchResult), EvalError> {
    let result = random_search(space, trials, seed, |params| {
        let spec = apply_params(base, params).map_err(|e| e.to_string())?;
        cross_validate(&spec, x, y, plan, threshold).map_err(|e| e.to_string())
    })?;
    let spec = apply_params(base, &result.best_params)?;
    Ok((spec, result))
}

pub fn write_trial_log(path: &Path, trials: &[TrialRecord]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trials {
        serde_json::to_writer(&mut w, t).map_err(|e| EvalError::Search(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_validation() {
        assert!(ParamRange::LogUniform { lo: 0.0, hi: 1.0 }.validate().is_err());
        assert!(ParamRange::Uniform { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(ParamRange::IntUniform { lo: 3, hi: 2 }.validate().is_err());
        assert!(ParamRange::IntUniform { lo: 3, hi: 14 }.validate().is_ok());
    }

    #[test]
    fn int_sampling_is_inclusive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ParamRange::IntUniform { lo: 0, hi: 2 };
        let mut seen = [false; 3];
        for _ in 0..200 {
            match r.sample(&mut rng) {
                ParamValue::Int(v) => seen[v as usize] = true,
                _ => unreachable!(),
            }
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn single_trial_wins() {
        let r = random_search(&SearchSpace::logreg(), 1, 0, |_| Ok(vec![0.3])).unwrap();
        assert_eq!(r.best_trial, 0);
        assert_eq!(r.best_mean_f1, 0.3);
    }

    #[test]
    fn failed_trials_are_recorded() {
        let r = random_search(&SearchSpace::svm(), 4, 0, |p| {
            if p["C"].as_f64() > 0.01 { Ok(vec![p["C"].as_f64()]) } else { Err("boom".into()) }
        });
        match r {
            Ok(r) => assert!(r.trials.iter().any(|t| t.mean_f1.is_some())),
            Err(e) => assert!(e.to_string().contains("boom")),
        }
        let all_fail = random_search(&SearchSpace::svm(), 3, 0, |_| Err("nope".into()));
        assert!(all_fail.is_err());
    }

    #[test]
    fn params_map_onto_configs() {
        let base = ModelSpec::Gbdt(GbdtConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SearchSpace::leaf_wise().sample(&mut rng);
        match apply_params(&base, &p).unwrap() {
            ModelSpec::Gbdt(c) => {
                assert_eq!(c.learning_rate, p["learning_rate"].as_f64());
                assert!(matches!(c.growth, Growth::LeafWise { num_leaves, .. } if num_leaves as f64 == p["num_leaves"].as_f64()));
            }
            _ => unreachable!(),
        }
        let lvl = ModelSpec::Gbdt(GbdtConfig { growth: Growth::LevelWise { max_depth: 6 }, ..Default::default() });
        let p = SearchSpace::level_wise().sample(&mut rng);
        assert!(apply_params(&lvl, &p).is_ok());
        assert!(apply_params(&ModelSpec::Logreg(LogregConfig::default()), &p).is_err());
    }
}
