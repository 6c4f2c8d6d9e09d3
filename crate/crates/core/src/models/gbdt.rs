//! Second-order gradient boosting on the logistic loss with histogram splits.
//!
//! Features are bucketed once into at most `max_bins` bins. Each tree is
//! grown either leaf-wise (best-gain leaf first, up to `num_leaves`) or
//! level-wise (every splittable node of a level, up to `max_depth`). Split
//! gain and leaf weights use the usual Newton formulas with L2 penalty
//! `l2_lambda` and minimum split gain `gamma`.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{logistic_loss, sigmoid, validate_training, ModelError, ModelParams, Result, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Growth {
    LeafWise { num_leaves: usize, max_depth: Option<usize> },
    LevelWise { max_depth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub learning_rate: f64,
    pub num_rounds: usize,
    pub growth: Growth,
    /// Fraction of features sampled per tree.
    pub feature_fraction: f64,
    /// Fraction of rows sampled (without replacement) per round.
    pub bagging_fraction: f64,
    pub l2_lambda: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// Minimum loss reduction for a split.
    pub gamma: f64,
    pub max_bins: usize,
    /// Gradient/hessian multiplier for positive rows.
    pub pos_weight: Option<f64>,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            num_rounds: 100,
            growth: Growth::LeafWise { num_leaves: 31, max_depth: None },
            feature_fraction: 1.0,
            bagging_fraction: 1.0,
            l2_lambda: 1.0,
            min_child_weight: 1e-3,
            gamma: 0.0,
            max_bins: 256,
            pos_weight: None,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        match self.growth {
            Growth::LeafWise { num_leaves, max_depth } => {
                if num_leaves < 2 {
                    return bad("num_leaves must be at least 2");
                }
                if max_depth == Some(0) {
                    return bad("max_depth must be at least 1");
                }
            }
            Growth::LevelWise { max_depth } => {
                if max_depth < 1 {
                    return bad("max_depth must be at least 1");
                }
            }
        }
        for (name, f) in [("feature_fraction", self.feature_fraction), ("bagging_fraction", self.bagging_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ModelError::Config(format!("{name} must be in (0, 1]")));
            }
        }
        if !(self.l2_lambda >= 0.0) || !(self.min_child_weight >= 0.0) || !(self.gamma >= 0.0) {
            return bad("l2_lambda, min_child_weight and gamma must be non-negative");
        }
        if self.max_bins < 2 || self.max_bins > u16::MAX as usize {
            return bad("max_bins must be in [2, 65535]");
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0) {
                return bad("pos_weight must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Leaf { value: f64, cover: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize, gain: f64, cover: f64 },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Leaf { cover, .. } | Node::Split { cover, .. } => cover,
        }
    }
}

/// A regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self { nodes: vec![Node::Leaf { value, cover: 1.0 }] }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    /// Initial log-odds.
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Per-feature cut points; a value goes to bin `#{cuts < value}`.
#[derive(Debug, Clone)]
pub(crate) struct BinMapper {
    pub cuts: Vec<Vec<f64>>,
}

impl BinMapper {
    pub fn fit(x: ArrayView2<f64>, max_bins: usize) -> Self {
        let cuts = x
            .columns()
            .into_iter()
            .map(|col| {
                let mut v: Vec<f64> = col.to_vec();
                v.sort_by(f64::total_cmp);
                let mut uniq = v.clone();
                uniq.dedup();
                if uniq.len() <= max_bins {
                    uniq.windows(2)
                        .map(|p| {
                            let mid = p[0] + (p[1] - p[0]) / 2.0;
                            if mid < p[1] {
                                mid
                            } else {
                                p[0]
                            }
                        })
                        .collect()
                } else {
                    let n = v.len();
                    let max = *uniq.last().expect("non-empty");
                    let mut cuts: Vec<f64> = (1..max_bins).map(|k| v[k * n / max_bins]).filter(|&c| c < max).collect();
                    cuts.dedup();
                    cuts
                }
            })
            .collect();
        Self { cuts }
    }

    pub fn bin(&self, feature: usize, value: f64) -> u16 {
        self.cuts[feature].partition_point(|&c| c < value) as u16
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.cuts[feature].len() + 1
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SplitCandidate {
    pub feature: usize,
    pub bin: usize,
    pub gain: f64,
}

struct Grower<'a> {
    cfg: &'a GbdtConfig,
    bins: &'a BinMapper,
    /// Column-major binned matrix: `binned[f * n + row]`.
    binned: &'a [u16],
    n: usize,
    grad: &'a [f64],
    hess: &'a [f64],
}

fn leaf_objective(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

impl Grower<'_> {
    fn sums(&self, rows: &[u32]) -> (f64, f64) {
        rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + self.grad[r as usize], h + self.hess[r as usize]))
    }

    fn best_for_feature(&self, f: usize, rows: &[u32], g_tot: f64, h_tot: f64) -> Option<SplitCandidate> {
        let nb = self.bins.n_bins(f);
        if nb < 2 {
            return None;
        }
        let mut hg = vec![0.0; nb];
        let mut hh = vec![0.0; nb];
        let mut hc = vec![0u32; nb];
        let col = &self.binned[f * self.n..(f + 1) * self.n];
        for &r in rows {
            let b = col[r as usize] as usize;
            hg[b] += self.grad[r as usize];
            hh[b] += self.hess[r as usize];
            hc[b] += 1;
        }
        let lambda = self.cfg.l2_lambda;
        let parent = leaf_objective(g_tot, h_tot, lambda);
        let total = rows.len() as u32;
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0u32);
        let mut best: Option<SplitCandidate> = None;
        for b in 0..nb - 1 {
            gl += hg[b];
            hl += hh[b];
            cl += hc[b];
            if hc[b] == 0 {
                continue;
            }
            let cr = total - cl;
            if cl == 0 || cr == 0 {
                continue;
            }
            let (gr, hr) = (g_tot - gl, h_tot - hl);
            if hl < self.cfg.min_child_weight || hr < self.cfg.min_child_weight {
                continue;
            }
            let gain = 0.5 * (leaf_objective(gl, hl, lambda) + leaf_objective(gr, hr, lambda) - parent) - self.cfg.gamma;
            if gain > 0.0 && best.is_none_or(|c| gain > c.gain) {
                best = Some(SplitCandidate { feature: f, bin: b, gain });
            }
        }
        best
    }

    fn best_split(&self, rows: &[u32], features: &[usize]) -> Option<SplitCandidate> {
        let (g, h) = self.sums(rows);
        let pick = |a: Option<SplitCandidate>, b: Option<SplitCandidate>| match (a, b) {
            (Some(x), Some(y)) => Some(if y.gain > x.gain || (y.gain == x.gain && y.feature < x.feature) { y } else { x }),
            (x, None) => x,
            (None, y) => y,
        };
        if rows.len() * features.len() >= 1 << 16 {
            features
                .par_iter()
                .map(|&f| self.best_for_feature(f, rows, g, h))
                .collect::<Vec<_>>()
                .into_iter()
                .fold(None, pick)
        } else {
            features.iter().map(|&f| self.best_for_feature(f, rows, g, h)).fold(None, pick)
        }
    }

    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let (g, h) = self.sums(rows);
        let denom = h + self.cfg.l2_lambda;
        if denom <= 0.0 {
            return 0.0;
        }
        -g / denom * self.cfg.learning_rate
    }

    fn partition(&self, rows: &[u32], split: &SplitCandidate) -> (Vec<u32>, Vec<u32>) {
        let col = &self.binned[split.feature * self.n..(split.feature + 1) * self.n];
        rows.iter().partition(|&&r| (col[r as usize] as usize) <= split.bin)
    }

    fn grow(&self, rows: Vec<u32>, features: &[usize]) -> Tree {
        let mut nodes = vec![Node::Leaf { value: self.leaf_value(&rows), cover: rows.len() as f64 }];
        let root = Pending { node: 0, split: self.best_split(&rows, features), rows, depth: 0 };
        match self.cfg.growth {
            Growth::LeafWise { num_leaves, max_depth } => {
                let max_depth = max_depth.unwrap_or(usize::MAX);
                let mut pending = vec![root];
                let mut leaves = 1;
                while leaves < num_leaves {
                    // highest gain first; ties go to the earlier node
                    let best = pending
                        .iter()
                        .enumerate()
                        .filter_map(|(i, p)| p.split.map(|s| (i, s.gain, p.node)))
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)));
                    let Some((i, _, _)) = best else { break };
                    let p = pending.swap_remove(i);
                    pending.extend(self.split_node(&mut nodes, p, features, max_depth));
                    leaves += 1;
                }
            }
            Growth::LevelWise { max_depth } => {
                let mut frontier = vec![root];
                while !frontier.is_empty() {
                    let mut next = Vec::new();
                    for p in frontier {
                        if p.split.is_some() {
                            next.extend(self.split_node(&mut nodes, p, features, max_depth));
                        }
                    }
                    frontier = next;
                }
            }
        }
        Tree { nodes }
    }

    /// Turns the pending leaf into a split node and returns its two children,
    /// each with its best split (none at `max_depth`).
    fn split_node(&self, nodes: &mut Vec<Node>, p: Pending, features: &[usize], max_depth: usize) -> [Pending; 2] {
        let split = p.split.expect("only nodes with a split are expanded");
        let (lrows, rrows) = self.partition(&p.rows, &split);
        let left = nodes.len();
        nodes.push(Node::Leaf { value: self.leaf_value(&lrows), cover: lrows.len() as f64 });
        nodes.push(Node::Leaf { value: self.leaf_value(&rrows), cover: rrows.len() as f64 });
        nodes[p.node] = Node::Split {
            feature: split.feature,
            threshold: self.bins.cuts[split.feature][split.bin],
            left,
            right: left + 1,
            gain: split.gain,
            cover: p.rows.len() as f64,
        };
        let depth = p.depth + 1;
        let child = |node: usize, rows: Vec<u32>| {
            let split = if depth < max_depth { self.best_split(&rows, features) } else { None };
            Pending { node, rows, depth, split }
        };
        [child(left, lrows), child(left + 1, rrows)]
    }
}

struct Pending {
    node: usize,
    rows: Vec<u32>,
    depth: usize,
    split: Option<SplitCandidate>,
}

/// Fitting trace: training logistic loss (mean over rows) before the first
/// round and after every round.
#[derive(Debug, Clone, PartialEq)]
pub struct GbdtTrace {
    pub train_loss: Vec<f64>,
}

pub fn fit_gbdt(x: ArrayView2<f64>, y: &[u8], cfg: &GbdtConfig) -> Result<TrainedModel> {
    fit_gbdt_traced(x, y, cfg).map(|(m, _)| m)
}

pub fn fit_gbdt_traced(x: ArrayView2<f64>, y: &[u8], cfg: &GbdtConfig) -> Result<(TrainedModel, GbdtTrace)> {
    cfg.validate()?;
    validate_training(x, y, 2)?;
    let (n, d) = x.dim();
    let pos_w = cfg.pos_weight.unwrap_or(1.0);
    let weight = |l: u8| if l == 1 { pos_w } else { 1.0 };
    let labels: Vec<f64> = y.iter().map(|&l| l as f64).collect();

    let wpos: f64 = y.iter().filter(|&&l| l == 1).map(|&l| weight(l)).sum();
    let wtot: f64 = y.iter().map(|&l| weight(l)).sum();
    let prior = wpos / wtot;
    let base_score = (prior / (1.0 - prior)).ln();

    let bins = BinMapper::fit(x, cfg.max_bins);
    let mut binned = vec![0u16; n * d];
    for f in 0..d {
        for r in 0..n {
            binned[f * n + r] = bins.bin(f, x[[r, f]]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.num_rounds);
    let loss = |m: &[f64]| m.iter().zip(&labels).map(|(&m, &t)| logistic_loss(m, t)).sum::<f64>() / n as f64;
    let mut trace = vec![loss(&margins)];

    let n_features = ((cfg.feature_fraction * d as f64).ceil() as usize).clamp(1, d);
    let n_rows = ((cfg.bagging_fraction * n as f64).ceil() as usize).clamp(1, n);

    for _ in 0..cfg.num_rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            let w = weight(y[i]);
            grad[i] = w * (p - labels[i]);
            hess[i] = w * (p * (1.0 - p)).max(1e-16);
        }
        let features: Vec<usize> = if n_features == d {
            (0..d).collect()
        } else {
            sample(&mut rng, d, n_features).into_iter().collect::<BTreeSet<_>>().into_iter().collect()
        };
        let rows: Vec<u32> = if n_rows == n {
            (0..n as u32).collect()
        } else {
            sample(&mut rng, n, n_rows).into_iter().map(|i| i as u32).collect::<BTreeSet<_>>().into_iter().collect()
        };
        let grower = Grower { cfg, bins: &bins, binned: &binned, n, grad: &grad, hess: &hess };
        let tree = grower.grow(rows, &features);
        for (i, m) in margins.iter_mut().enumerate() {
            let row = x.row(i);
            *m += match row.as_slice() {
                Some(s) => tree.predict(s),
                None => tree.predict(&row.to_vec()),
            };
        }
        trace.push(loss(&margins));
        trees.push(tree);
    }

    let model = TrainedModel::new(d, ModelParams::Gbdt(GbdtModel { base_score, trees }));
    Ok((model, GbdtTrace { train_loss: trace }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn accuracy(m: &TrainedModel, x: &Array2<f64>, y: &[u8]) -> f64 {
        let p = m.predict_proba_batch(x.view()).unwrap();
        p.iter().zip(y).filter(|(p, &y)| (**p >= 0.5) == (y == 1)).count() as f64 / y.len() as f64
    }

    #[test]
    fn separable_toy() {
        let mut x = Array2::zeros((40, 2));
        let mut y = vec![0u8; 40];
        for i in 0..40 {
            x[[i, 0]] = i as f64;
            x[[i, 1]] = ((i * 7) % 11) as f64;
            y[i] = (i >= 20) as u8;
        }
        let cfg = GbdtConfig { num_rounds: 50, ..Default::default() };
        let m = fit_gbdt(x.view(), &y, &cfg).unwrap();
        assert_eq!(accuracy(&m, &x, &y), 1.0);
    }

    #[test]
    fn xor_needs_depth_two() {
        let mut x = Array2::zeros((200, 2));
        let mut y = vec![0u8; 200];
        for i in 0..200 {
            let a = (i % 10) as f64 / 10.0 + 0.05;
            let b = (i / 10) as f64 / 20.0 + 0.025;
            x[[i, 0]] = a;
            x[[i, 1]] = b;
            y[i] = ((a > 0.5) ^ (b > 0.4)) as u8;
        }
        let cfg = GbdtConfig { num_rounds: 50, growth: Growth::LevelWise { max_depth: 2 }, ..Default::default() };
        let m = fit_gbdt(x.view(), &y, &cfg).unwrap();
        assert!(accuracy(&m, &x, &y) >= 0.95);
    }

    #[test]
    fn zero_learning_rate_is_prior() {
        let x = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let y: Vec<u8> = (0..10).map(|i| (i < 3) as u8).collect();
        let cfg = GbdtConfig { learning_rate: 0.0, num_rounds: 5, ..Default::default() };
        let m = fit_gbdt(x.view(), &y, &cfg).unwrap();
        for i in 0..10 {
            let p = m.predict_proba(&[i as f64]).unwrap();
            assert!((p - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let x = Array2::zeros((4, 1));
        assert!(matches!(fit_gbdt(x.view(), &[1, 1, 1, 1], &GbdtConfig::default()), Err(ModelError::SingleClass)));
        let mut x = Array2::zeros((4, 1));
        x[[2, 0]] = f64::NAN;
        assert!(matches!(fit_gbdt(x.view(), &[0, 1, 0, 1], &GbdtConfig::default()), Err(ModelError::NonFinite { .. })));
    }

    #[test]
    fn leaf_and_depth_limits() {
        let x = Array2::from_shape_fn((300, 3), |(i, j)| ((i * (j + 3) * 7919) % 101) as f64);
        let y: Vec<u8> = (0..300).map(|i| ((i * 31) % 7 < 3) as u8).collect();
        let cfg = GbdtConfig { num_rounds: 3, growth: Growth::LeafWise { num_leaves: 5, max_depth: None }, ..Default::default() };
        let (m, _) = fit_gbdt_traced(x.view(), &y, &cfg).unwrap();
        let ModelParams::Gbdt(g) = &m.params else { unreachable!() };
        assert!(g.trees.iter().all(|t| t.num_leaves() <= 5));
        let cfg = GbdtConfig { num_rounds: 3, growth: Growth::LevelWise { max_depth: 3 }, ..Default::default() };
        let m = fit_gbdt(x.view(), &y, &cfg).unwrap();
        let ModelParams::Gbdt(g) = &m.params else { unreachable!() };
        assert!(g.trees.iter().all(|t| t.depth() <= 3));
        assert!(g.trees.iter().any(|t| t.depth() == 3));
    }

    #[test]
    fn binning_respects_cut_semantics() {
        let x = Array2::from_shape_vec((5, 1), vec![1.0, 2.0, 2.0, 3.0, 10.0]).unwrap();
        let b = BinMapper::fit(x.view(), 256);
        assert_eq!(b.cuts[0], vec![1.5, 2.5, 6.5]);
        assert_eq!(b.bin(0, 1.0), 0);
        assert_eq!(b.bin(0, 2.0), 1);
        assert_eq!(b.bin(0, 2.5), 1);
        assert_eq!(b.bin(0, 10.0), 3);
        let x = Array2::from_shape_fn((1000, 1), |(i, _)| i as f64);
        let b = BinMapper::fit(x.view(), 16);
        assert!(b.n_bins(0) <= 16);
    }
}
