//! Shapley attributions per prediction and aggregated feature importance.
//!
//! Tree ensembles get exact values. [`tree_shap`] is interventional: feature
//! values absent from a coalition are taken from background rows, and the
//! result is averaged over the background. [`tree_shap_path_dependent`]
//! instead marginalizes absent features with the training covers stored in
//! the trees and needs no background. Linear models get `w_j (x_j - mean_j)`;
//! RBF SVMs get a gradient surrogate flagged as approximate.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{feature_dim, PairIndex};
use crate::models::gbdt::{GbdtModel, Node, Tree};
use crate::models::{LinearModel, ModelParams, SvmModel, TrainedModel};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{0}")]
    WrongModel(String),
    #[error("background set is empty")]
    EmptyBackground,
    #[error("expected {expected} features, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no attributions to aggregate")]
    NoAttributions,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub contributions: Vec<f64>,
    /// Expected raw margin the contributions are measured from.
    pub base_value: f64,
    /// False for surrogate attributions that do not satisfy local accuracy.
    pub exact: bool,
}

impl Attribution {
    pub fn total(&self) -> f64 {
        self.base_value + self.contributions.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeShapMethod {
    #[default]
    Interventional,
    PathDependent,
}

/// Reference rows for attributions.
#[derive(Debug, Clone)]
pub struct Background {
    pub rows: Array2<f64>,
    pub mean: Vec<f64>,
}

impl Background {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(ExplainError::EmptyBackground);
        }
        let mean = rows.mean_axis(Axis(0)).expect("non-empty").to_vec();
        Ok(Self { rows, mean })
    }

    /// Up to `size` rows drawn without replacement, kept in original order.
    pub fn sample(x: ArrayView2<f64>, size: usize, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(ExplainError::EmptyBackground);
        }
        let mut idx: Vec<usize> = if size >= n {
            (0..n).collect()
        } else {
            sample(&mut ChaCha8Rng::seed_from_u64(seed), n, size).into_vec()
        };
        idx.sort_unstable();
        Self::new(x.select(Axis(0), &idx))
    }
}

/// Interventional contributions of one tree for the pair `(x, z)`:
/// `φ_i` sums to `tree(x) - tree(z)`.
fn tree_pair_shap(tree: &Tree, x: &[f64], z: &[f64], phi: &mut [f64]) {
    // feature state: 0 = free, 1 = taken from x, 2 = taken from z
    fn go(tree: &Tree, node: usize, x: &[f64], z: &[f64], state: &mut Vec<u8>, set: &mut Vec<usize>, a: usize, b: usize, phi: &mut [f64]) {
        match tree.nodes[node] {
            Node::Leaf { value, .. } => {
                if a + b == 0 {
                    return;
                }
                // (a-1)! b! / (a+b)!  and  a! (b-1)! / (a+b)!
                let pos = if a > 0 { value * weight(a - 1, b) } else { 0.0 };
                let neg = if b > 0 { value * weight(b - 1, a) } else { 0.0 };
                for &f in set.iter() {
                    if state[f] == 1 {
                        phi[f] += pos;
                    } else {
                        phi[f] -= neg;
                    }
                }
            }
            Node::Split { feature, threshold, left, right, .. } => {
                let dx = if x[feature] <= threshold { left } else { right };
                let dz = if z[feature] <= threshold { left } else { right };
                match state[feature] {
                    1 => go(tree, dx, x, z, state, set, a, b, phi),
                    2 => go(tree, dz, x, z, state, set, a, b, phi),
                    _ if dx == dz => go(tree, dx, x, z, state, set, a, b, phi),
                    _ => {
                        set.push(feature);
                        state[feature] = 1;
                        go(tree, dx, x, z, state, set, a + 1, b, phi);
                        state[feature] = 2;
                        go(tree, dz, x, z, state, set, a, b + 1, phi);
                        state[feature] = 0;
                        set.pop();
                    }
                }
            }
        }
    }
    let mut state = vec![0u8; x.len()];
    let mut set = Vec::new();
    go(tree, 0, x, z, &mut state, &mut set, 0, 0, phi);
}

/// `k! m! / (k + m + 1)!`
fn weight(k: usize, m: usize) -> f64 {
    let (lo, hi) = if k < m { (k, m) } else { (m, k) };
    // lo! / ((hi+1)(hi+2)...(hi+lo+1))
    let mut w = 1.0;
    for i in 1..=lo {
        w *= i as f64 / (hi + i) as f64;
    }
    w / (hi + lo + 1) as f64
}

fn gbdt_of(model: &TrainedModel) -> Result<&GbdtModel> {
    match &model.params {
        ModelParams::Gbdt(m) => Ok(m),
        other => Err(ExplainError::WrongModel(format!(
            "tree_shap needs a gbdt model, got {}; use linear_shap",
            match other {
                ModelParams::Logreg(_) => "logreg",
                ModelParams::Svm(_) => "svm",
                ModelParams::Gbdt(_) => unreachable!(),
            }
        ))),
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ExplainError::DimMismatch { expected, got });
    }
    Ok(())
}

/// Interventional TreeSHAP of a boosted ensemble, averaged over the
/// background rows. `base_value` is the mean background margin, so the
/// contributions sum to `margin(x) - base_value`.
pub fn tree_shap(model: &TrainedModel, x: &[f64], background: &Background) -> Result<Attribution> {
    let gbdt = gbdt_of(model)?;
    check_len(model.feature_dim, x.len())?;
    check_len(model.feature_dim, background.rows.ncols())?;
    Ok(gbdt_interventional(gbdt, x, background.rows.view()))
}

pub fn gbdt_interventional(model: &GbdtModel, x: &[f64], background: ArrayView2<f64>) -> Attribution {
    let mut phi = vec![0.0; x.len()];
    let mut base = 0.0;
    for z in background.rows() {
        let z = z.to_vec();
        for tree in &model.trees {
            tree_pair_shap(tree, x, &z, &mut phi);
        }
        base += model.margin(&z);
    }
    let n = background.nrows() as f64;
    for p in &mut phi {
        *p /= n;
    }
    Attribution { contributions: phi, base_value: base / n, exact: true }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let l = path.len();
    path.push(PathElem { feature, zero, one, weight: if l == 0 { 1.0 } else { 0.0 } });
    let lf = (l + 1) as f64;
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / lf;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / lf;
    }
}

fn unwind(path: &mut Vec<PathElem>, i: usize) {
    let l = path.len() - 1;
    let lf = (l + 1) as f64;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut n = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let t = path[j].weight;
            path[j].weight = n * lf / ((j + 1) as f64 * one);
            n = t - path[j].weight * zero * (l - j) as f64 / lf;
        } else {
            path[j].weight = path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    for j in i..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], i: usize) -> f64 {
    let l = path.len() - 1;
    let lf = (l + 1) as f64;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut total = 0.0;
    if one != 0.0 {
        let mut n = path[l].weight;
        for j in (0..l).rev() {
            let t = n * lf / ((j + 1) as f64 * one);
            total += t;
            n = path[j].weight - t * zero * (l - j) as f64 / lf;
        }
    } else {
        for j in (0..l).rev() {
            total += path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    total
}

fn path_dependent_tree(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    fn recurse(tree: &Tree, node: usize, x: &[f64], phi: &mut [f64], mut path: Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
        extend(&mut path, zero, one, feature);
        match tree.nodes[node] {
            Node::Leaf { value, .. } => {
                for i in 1..path.len() {
                    let w = unwound_sum(&path, i);
                    let e = path[i];
                    phi[e.feature.expect("non-root element")] += w * (e.one - e.zero) * value;
                }
            }
            Node::Split { feature: f, threshold, left, right, cover, .. } => {
                let (hot, cold) = if x[f] <= threshold { (left, right) } else { (right, left) };
                let (mut iz, mut io) = (1.0, 1.0);
                if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(f)) {
                    iz = path[k].zero;
                    io = path[k].one;
                    unwind(&mut path, k);
                }
                let ratio = |c: usize| if cover > 0.0 { tree.nodes[c].cover() / cover } else { 0.0 };
                recurse(tree, hot, x, phi, path.clone(), iz * ratio(hot), io, Some(f));
                recurse(tree, cold, x, phi, path, iz * ratio(cold), 0.0, Some(f));
            }
        }
    }
    recurse(tree, 0, x, phi, Vec::with_capacity(16), 1.0, 1.0, None);
}

/// Cover-weighted expected value of a tree.
pub fn tree_expected_value(tree: &Tree) -> f64 {
    fn go(t: &Tree, i: usize) -> f64 {
        match t.nodes[i] {
            Node::Leaf { value, .. } => value,
            Node::Split { left, right, cover, .. } => {
                if cover > 0.0 {
                    (t.nodes[left].cover() * go(t, left) + t.nodes[right].cover() * go(t, right)) / cover
                } else {
                    0.5 * (go(t, left) + go(t, right))
                }
            }
        }
    }
    go(tree, 0)
}

/// Path-dependent TreeSHAP using the covers recorded at training time.
pub fn tree_shap_path_dependent(model: &TrainedModel, x: &[f64]) -> Result<Attribution> {
    let gbdt = gbdt_of(model)?;
    check_len(model.feature_dim, x.len())?;
    Ok(gbdt_path_dependent(gbdt, x))
}

pub fn gbdt_path_dependent(model: &GbdtModel, x: &[f64]) -> Attribution {
    let mut phi = vec![0.0; x.len()];
    for tree in &model.trees {
        path_dependent_tree(tree, x, &mut phi);
    }
    let base = model.base_score + model.trees.iter().map(tree_expected_value).sum::<f64>();
    Attribution { contributions: phi, base_value: base, exact: true }
}

/// `φ_j = w_j (x_j - mean_j)`, base `w·mean + b`.
pub fn linear_shap_weights(weights: &[f64], bias: f64, x: &[f64], mean: &[f64]) -> Attribution {
    let contributions = weights.iter().zip(x.iter().zip(mean)).map(|(w, (v, m))| w * (v - m)).collect();
    let base_value = bias + weights.iter().zip(mean).map(|(w, m)| w * m).sum::<f64>();
    Attribution { contributions, base_value, exact: true }
}

/// Linear attribution for logistic regression, or the gradient surrogate
/// `∂f/∂x_j (x) · (x_j - mean_j)` for an RBF SVM (marked inexact).
pub fn linear_shap(model: &TrainedModel, x: &[f64], background_mean: &[f64]) -> Result<Attribution> {
    check_len(model.feature_dim, x.len())?;
    check_len(model.feature_dim, background_mean.len())?;
    match &model.params {
        ModelParams::Logreg(LinearModel { weights, bias, .. }) => Ok(linear_shap_weights(weights, *bias, x, background_mean)),
        ModelParams::Svm(m) => Ok(svm_surrogate(m, x, background_mean)),
        ModelParams::Gbdt(_) => Err(ExplainError::WrongModel("linear_shap needs logreg or svm; use tree_shap".into())),
    }
}

fn svm_surrogate(m: &SvmModel, x: &[f64], mean: &[f64]) -> Attribution {
    let g = m.decision_gradient(x);
    let contributions = g.iter().zip(x.iter().zip(mean)).map(|(g, (v, mu))| g * (v - mu)).collect();
    Attribution { contributions, base_value: m.decision(mean), exact: false }
}

/// Attribution for any model kind.
pub fn attribute(model: &TrainedModel, x: &[f64], background: &Background, method: TreeShapMethod) -> Result<Attribution> {
    match (&model.params, method) {
        (ModelParams::Gbdt(_), TreeShapMethod::Interventional) => tree_shap(model, x, background),
        (ModelParams::Gbdt(_), TreeShapMethod::PathDependent) => tree_shap_path_dependent(model, x),
        _ => linear_shap(model, x, &background.mean),
    }
}

/// Attributions of every row, computed in parallel and returned in row order.
pub fn attribute_rows(
    model: &TrainedModel,
    x: ArrayView2<f64>,
    background: &Background,
    method: TreeShapMethod,
) -> Result<Vec<Attribution>> {
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.par_iter().map(|r| attribute(model, r, background, method)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub rank: usize,
    pub feature: usize,
    pub label: String,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub w: usize,
    pub exact: bool,
    pub entries: Vec<ImportanceEntry>,
}

/// Mean absolute contribution per feature, ranked in decreasing order (ties
/// by feature index).
pub fn aggregate_importance(attributions: &[Attribution], w: usize) -> Result<ImportanceReport> {
    if attributions.is_empty() {
        return Err(ExplainError::NoAttributions);
    }
    let d = feature_dim(w);
    let mut sums = vec![0.0; d];
    for a in attributions {
        check_len(d, a.contributions.len())?;
        for (s, c) in sums.iter_mut().zip(&a.contributions) {
            *s += c.abs();
        }
    }
    let n = attributions.len() as f64;
    let index = PairIndex::new(w);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    let entries = order
        .into_iter()
        .enumerate()
        .map(|(rank, f)| ImportanceEntry {
            rank: rank + 1,
            feature: f,
            label: index.label(f).expect("feature within layout"),
            mean_abs: sums[f] / n,
        })
        .collect();
    Ok(ImportanceReport { w, exact: attributions.iter().all(|a| a.exact), entries })
}

impl ImportanceReport {
    /// CSV with columns `rank,feature,label,mean_abs_shap`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rank", "feature", "label", "mean_abs_shap"])?;
        for e in &self.entries {
            out.write_record([e.rank.to_string(), e.feature.to_string(), e.label.clone(), e.mean_abs.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelParams;

    fn model(trees: Vec<Tree>, dim: usize) -> TrainedModel {
        TrainedModel::new(dim, ModelParams::Gbdt(GbdtModel { base_score: 0.25, trees }))
    }

    fn stump(feature: usize, threshold: f64, lo: f64, hi: f64) -> Tree {
        Tree {
            nodes: vec![
                Node::Split { feature, threshold, left: 1, right: 2, gain: 1.0, cover: 4.0 },
                Node::Leaf { value: lo, cover: 3.0 },
                Node::Leaf { value: hi, cover: 1.0 },
            ],
        }
    }

    #[test]
    fn weights_match_factorials() {
        let f = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
        for k in 0..6 {
            for m in 0..6 {
                let exact = f(k) * f(m) / f(k + m + 1);
                assert!((weight(k, m) - exact).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_model_has_zero_contributions() {
        let m = model(vec![Tree::leaf(0.7)], 3);
        let bg = Background::new(Array2::zeros((2, 3))).unwrap();
        let a = tree_shap(&m, &[1.0, 2.0, 3.0], &bg).unwrap();
        assert_eq!(a.contributions, vec![0.0; 3]);
        let p = tree_shap_path_dependent(&m, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.contributions, vec![0.0; 3]);
        assert!((p.total() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn stump_only_credits_its_feature() {
        let m = model(vec![stump(1, 0.5, -1.0, 2.0)], 3);
        let bg = Background::new(Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let x = [0.0, 1.0, 0.0];
        let a = tree_shap(&m, &x, &bg).unwrap();
        assert_eq!(a.contributions[0], 0.0);
        assert_eq!(a.contributions[2], 0.0);
        assert!((a.contributions[1] - 1.5).abs() < 1e-12);
        assert!((a.total() - m.margin(&x).unwrap()).abs() < 1e-12);
        let p = tree_shap_path_dependent(&m, &x).unwrap();
        // expected value -1·3/4 + 2·1/4 = -0.25
        assert!((p.contributions[1] - 2.25).abs() < 1e-12);
        assert!((p.total() - m.margin(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wrong_model_kind() {
        let lin = TrainedModel::new(2, ModelParams::Logreg(LinearModel { weights: vec![1.0, -2.0], bias: 0.0, iterations: 0, converged: true }));
        let bg = Background::new(Array2::zeros((1, 2))).unwrap();
        assert!(matches!(tree_shap(&lin, &[0.0, 0.0], &bg), Err(ExplainError::WrongModel(_))));
        let tree = model(vec![Tree::leaf(0.0)], 2);
        assert!(linear_shap(&tree, &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn linear_hand_example() {
        let a = linear_shap_weights(&[1.0, -2.0], 0.3, &[1.5, 0.6], &[1.0, 0.5]);
        assert!((a.contributions[0] - 0.5).abs() < 1e-12);
        assert!((a.contributions[1] + 0.2).abs() < 1e-12);
        assert!((a.total() - (1.5 - 1.2 + 0.3)).abs() < 1e-12);
        let z = linear_shap_weights(&[0.0, 0.0], 0.0, &[4.0, 5.0], &[1.0, 1.0]);
        assert_eq!(z.contributions, vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_labels_and_ranking() {
        let d = feature_dim(4);
        let mut c = vec![0.0; d];
        c[5] = -3.0;
        c[0] = 1.0;
        let a = Attribution { contributions: c, base_value: 0.0, exact: true };
        let r = aggregate_importance(&[a], 4).unwrap();
        assert_eq!(r.entries.len(), 112);
        assert_eq!(r.entries[0].feature, 5);
        assert_eq!(r.entries[0].mean_abs, 3.0);
        assert_eq!(r.entries[1].label, "(L_4,L_3):behavior");
        assert!(r.entries.windows(2).all(|e| e[0].mean_abs >= e[1].mean_abs));
        assert!(r.entries.iter().any(|e| e.label == "(L_1,R_1):title"));
        assert!(aggregate_importance(&[], 4).is_err());
    }

    #[test]
    fn background_sampling_is_seeded() {
        let x = Array2::from_shape_fn((50, 2), |(i, j)| (i * 2 + j) as f64);
        let a = Background::sample(x.view(), 10, 7).unwrap();
        let b = Background::sample(x.view(), 10, 7).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.nrows(), 10);
        assert_eq!(Background::sample(x.view(), 100, 7).unwrap().rows.nrows(), 50);
    }
}
