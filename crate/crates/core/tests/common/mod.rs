//! Brute-force oracles and random instance generators shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::Rng;
use sessionseg::models::gbdt::{Node, Tree};

/// ROC-AUC by counting every positive/negative pair; ties count one half.
pub fn roc_auc_pairs(y: &[u8], s: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision from a sweep over every distinct score used as a
/// `score >= t` threshold, highest first.
pub fn average_precision_sweep(y: &[u8], s: &[f64]) -> f64 {
    let total_pos = y.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (&l, &v) in y.iter().zip(s) {
            if v >= t {
                predicted += 1.0;
                if l == 1 {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

/// Random labels with both classes present and scores, optionally drawn
/// from a small grid to force ties.
pub fn random_instance<R: Rng>(rng: &mut R, ties: bool) -> (Vec<u8>, Vec<f64>) {
    loop {
        let n = rng.gen_range(2..=20);
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        if !y.contains(&0) || !y.contains(&1) {
            continue;
        }
        let s: Vec<f64> = if ties {
            (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect()
        } else {
            (0..n).map(|_| rng.gen::<f64>()).collect()
        };
        return (y, s);
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values of a set function over `m` players given as a
/// bitmask evaluator.
pub fn shapley<F: Fn(u32) -> f64>(m: usize, v: F) -> Vec<f64> {
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0u32..(1 << m) {
            if mask & (1 << i) != 0 {
                continue;
            }
            let k = mask.count_ones() as usize;
            let weight = factorial(k) * factorial(m - k - 1) / factorial(m);
            *p += weight * (v(mask | (1 << i)) - v(mask));
        }
    }
    phi
}

/// `x` on features in `mask`, `z` elsewhere.
pub fn hybrid(x: &[f64], z: &[f64], mask: u32) -> Vec<f64> {
    (0..x.len()).map(|j| if mask & (1 << j) != 0 { x[j] } else { z[j] }).collect()
}

/// Expected tree output given the features in `mask`, averaging unknown
/// splits by child cover.
pub fn cover_conditional(tree: &Tree, x: &[f64], mask: u32, node: usize) -> f64 {
    match tree.nodes[node] {
        Node::Leaf { value, .. } => value,
        Node::Split { feature, threshold, left, right, .. } => {
            if mask & (1 << feature) != 0 {
                let next = if x[feature] <= threshold { left } else { right };
                cover_conditional(tree, x, mask, next)
            } else {
                let cl = tree.nodes[left].cover();
                let cr = tree.nodes[right].cover();
                (cl * cover_conditional(tree, x, mask, left) + cr * cover_conditional(tree, x, mask, right)) / (cl + cr)
            }
        }
    }
}

/// Random tree over `d` features with thresholds in (0, 1) and consistent
/// covers.
pub fn random_tree<R: Rng>(rng: &mut R, d: usize, max_depth: usize) -> Tree {
    fn grow<R: Rng>(rng: &mut R, nodes: &mut Vec<Node>, d: usize, depth: usize, cover: f64) -> usize {
        let id = nodes.len();
        if depth == 0 || (depth < 3 && rng.gen_bool(0.25)) {
            nodes.push(Node::Leaf { value: rng.gen_range(-2.0..2.0), cover });
            return id;
        }
        nodes.push(Node::Leaf { value: 0.0, cover });
        let share = rng.gen_range(0.1..0.9);
        let left = grow(rng, nodes, d, depth - 1, cover * share);
        let right = grow(rng, nodes, d, depth - 1, cover * (1.0 - share));
        nodes[id] = Node::Split { feature: rng.gen_range(0..d), threshold: rng.gen_range(0.1..0.9), left, right, gain: 1.0, cover };
        id
    }
    let mut nodes = Vec::new();
    let cover = rng.gen_range(10.0..100.0);
    grow(rng, &mut nodes, d, max_depth, cover);
    Tree { nodes }
}

/// Best Newton gain over every feature and every cut between consecutive
/// distinct values.
pub fn exhaustive_best_gain(x: &[Vec<f64>], g: &[f64], h: &[f64], lambda: f64, min_child_weight: f64) -> f64 {
    let obj = |g: f64, h: f64| g * g / (h + lambda);
    let gt: f64 = g.iter().sum();
    let ht: f64 = h.iter().sum();
    let d = x[0].len();
    let mut best = 0.0f64;
    for f in 0..d {
        let mut values: Vec<f64> = x.iter().map(|r| r[f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for &cut in &values[..values.len() - 1] {
            let (mut gl, mut hl) = (0.0, 0.0);
            for (i, r) in x.iter().enumerate() {
                if r[f] <= cut {
                    gl += g[i];
                    hl += h[i];
                }
            }
            let hr = ht - hl;
            if hl < min_child_weight || hr < min_child_weight {
                continue;
            }
            best = best.max(0.5 * (obj(gl, hl) + obj(gt - gl, hr) - obj(gt, ht)));
        }
    }
    best
}

/// Log-loss mean of margins `m` against labels.
pub fn mean_logloss(m: &[f64], y: &[u8]) -> f64 {
    m.iter()
        .zip(y)
        .map(|(&m, &t)| {
            let p = 1.0 / (1.0 + (-m).exp());
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / m.len() as f64
}
