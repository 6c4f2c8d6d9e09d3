//! Soft-margin RBF-kernel SVM.
//!
//! The dual
//! `min ½ αᵀQα − eᵀα  s.t.  0 ≤ α_i ≤ C_i,  yᵀα = 0`, `Q_ij = y_i y_j K(x_i, x_j)`
//! is solved by SMO with second-order working-set selection. Decision values
//! are mapped to probabilities with a Platt sigmoid fitted on out-of-fold
//! decision values.

use std::collections::{HashMap, VecDeque};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate_training, ModelError, ModelParams, Result, TrainedModel};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    /// RBF width: `K(x, z) = exp(-gamma ||x - z||²)`.
    pub gamma: f64,
    /// KKT violation tolerance of the solver.
    pub tol: f64,
    /// Iteration cap; `None` means `max(10^7, 100 n)`.
    pub max_iter: Option<usize>,
    pub calibration_folds: usize,
    pub pos_weight: Option<f64>,
    pub max_samples: usize,
    /// Kernel row cache budget in megabytes.
    pub cache_mb: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: 0.1,
            tol: 1e-3,
            max_iter: None,
            calibration_folds: 3,
            pos_weight: None,
            max_samples: 50_000,
            cache_mb: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    /// Support vectors, row-major, `support_vectors.len() = n_sv * dim`.
    pub support_vectors: Vec<f64>,
    pub dim: usize,
    /// `y_i α_i` per support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub platt_a: f64,
    pub platt_b: f64,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl SvmModel {
    pub fn n_support(&self) -> usize {
        self.coef.len()
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .support_vectors
                .chunks_exact(self.dim)
                .zip(&self.coef)
                .map(|(sv, c)| c * rbf(sv, x, self.gamma))
                .sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        platt_probability(self.decision(x), self.platt_a, self.platt_b)
    }

    /// Gradient of the decision value with respect to `x`.
    pub fn decision_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (sv, c) in self.support_vectors.chunks_exact(self.dim).zip(&self.coef) {
            let k = c * rbf(sv, x, self.gamma);
            for j in 0..self.dim {
                g[j] += -2.0 * self.gamma * k * (x[j] - sv[j]);
            }
        }
        g
    }
}

/// `P(y = 1 | f) = 1 / (1 + exp(A f + B))`.
pub fn platt_probability(f: f64, a: f64, b: f64) -> f64 {
    let z = a * f + b;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Bounded FIFO cache of kernel rows.
struct KernelCache<'a> {
    x: ArrayView2<'a, f64>,
    gamma: f64,
    sq_norms: Vec<f64>,
    rows: HashMap<usize, Vec<f64>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    fn new(x: ArrayView2<'a, f64>, gamma: f64, cache_mb: usize) -> Self {
        let n = x.nrows();
        let sq_norms = x.rows().into_iter().map(|r| r.dot(&r)).collect();
        let capacity = ((cache_mb << 20) / (8 * n.max(1))).max(2);
        Self { x, gamma, sq_norms, rows: HashMap::new(), order: VecDeque::new(), capacity }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let xi = self.x.row(i);
            let row = self
                .x
                .rows()
                .into_iter()
                .enumerate()
                .map(|(j, xj)| {
                    let d2 = (self.sq_norms[i] + self.sq_norms[j] - 2.0 * xi.dot(&xj)).max(0.0);
                    (-self.gamma * d2).exp()
                })
                .collect();
            self.rows.insert(i, row);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

/// Solution of the dual problem on one training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Decision value is `Σ y_i α_i K(x_i, x) + bias`.
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn signs(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect()
}

fn upper_bounds(y: &[u8], cfg: &SvmConfig) -> Vec<f64> {
    let pw = cfg.pos_weight.unwrap_or(1.0);
    y.iter().map(|&l| if l == 1 { cfg.c * pw } else { cfg.c }).collect()
}

/// SMO with the second-order working set selection of Fan, Chen and Lin.
pub fn solve_dual(x: ArrayView2<f64>, y: &[u8], cfg: &SvmConfig) -> DualSolution {
    let n = x.nrows();
    let ys = signs(y);
    let cb = upper_bounds(y, cfg);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut cache = KernelCache::new(x, cfg.gamma, cfg.cache_mb);
    let max_iter = cfg.max_iter.unwrap_or_else(|| (100 * n).max(10_000_000));
    let is_up = |a: f64, yv: f64, c: f64| (yv > 0.0 && a < c) || (yv < 0.0 && a > 0.0);
    let is_low = |a: f64, yv: f64, c: f64| (yv > 0.0 && a > 0.0) || (yv < 0.0 && a < c);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        // i = argmax_{t in I_up} -y_t G_t
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if is_up(alpha[t], ys[t], cb[t]) {
                let v = -ys[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            let ki: Vec<f64> = cache.row(i).to_vec();
            for t in 0..n {
                if !is_low(alpha[t], ys[t], cb[t]) {
                    continue;
                }
                let v = -ys[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let mut a = ki[i] + 1.0 - 2.0 * ki[t];
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let obj = -(b * b) / a;
                    if obj < best {
                        best = obj;
                        j = t;
                    }
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let ki: Vec<f64> = cache.row(i).to_vec();
        let kj: Vec<f64> = cache.row(j).to_vec();
        let (ci, cj) = (cb[i], cb[j]);
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        let mut quad = ki[i] + kj[j] - 2.0 * ki[j];
        if quad <= 0.0 {
            quad = TAU;
        }
        if ys[i] != ys[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (dai, daj) = (alpha[i] - old_ai, alpha[j] - old_aj);
        for t in 0..n {
            grad[t] += ys[t] * (ys[i] * ki[t] * dai + ys[j] * kj[t] * daj);
        }
    }

    // rho as in libsvm: average of y_i G_i over free vectors, else midpoint
    let (mut ub, mut lb, mut sum, mut nfree) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = ys[t] * grad[t];
        if alpha[t] >= cb[t] {
            if ys[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if ys[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            nfree += 1;
            sum += yg;
        }
    }
    let rho = if nfree > 0 { sum / nfree as f64 } else { (ub + lb) / 2.0 };
    DualSolution { alpha, bias: -rho, iterations, converged }
}

impl DualSolution {
    /// Largest KKT violation `max_{I_up}(-y G) - min_{I_low}(-y G)` with the
    /// gradient recomputed from scratch, or infinity if a box or equality
    /// constraint is broken.
    pub fn kkt_violation(&self, x: ArrayView2<f64>, y: &[u8], cfg: &SvmConfig) -> f64 {
        let n = x.nrows();
        let ys = signs(y);
        let cb = upper_bounds(y, cfg);
        if self.alpha.iter().zip(&cb).any(|(&a, &c)| a < 0.0 || a > c) {
            return f64::INFINITY;
        }
        let eq: f64 = self.alpha.iter().zip(&ys).map(|(a, y)| a * y).sum();
        if eq.abs() > 1e-8 * cb.iter().cloned().fold(1.0, f64::max) * n as f64 {
            return f64::INFINITY;
        }
        let rows: Vec<_> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut up = f64::NEG_INFINITY;
        let mut low = f64::INFINITY;
        for t in 0..n {
            let g: f64 = (0..n).map(|s| ys[t] * ys[s] * rbf(&rows[t], &rows[s], cfg.gamma) * self.alpha[s]).sum::<f64>() - 1.0;
            let v = -ys[t] * g;
            let a = self.alpha[t];
            if (ys[t] > 0.0 && a < cb[t]) || (ys[t] < 0.0 && a > 0.0) {
                up = up.max(v);
            }
            if (ys[t] > 0.0 && a > 0.0) || (ys[t] < 0.0 && a < cb[t]) {
                low = low.min(v);
            }
        }
        (up - low).max(0.0)
    }
}

fn to_model(x: ArrayView2<f64>, y: &[u8], sol: &DualSolution, gamma: f64) -> SvmModel {
    let dim = x.ncols();
    let mut support_vectors = Vec::new();
    let mut coef = Vec::new();
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.extend(x.row(i).iter());
            coef.push(if y[i] == 1 { a } else { -a });
        }
    }
    SvmModel { gamma, support_vectors, dim, coef, bias: sol.bias, platt_a: -1.0, platt_b: 0.0 }
}

/// Platt sigmoid fit (Lin, Lin and Weng's Newton method with backtracking).
/// Returns `(A, B)`.
pub fn fit_platt(decisions: &[f64], y: &[u8]) -> (f64, f64) {
    let prior1 = y.iter().filter(|&&l| l == 1).count() as f64;
    let prior0 = y.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = y.iter().map(|&l| if l == 1 { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        decisions
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
    let mut fval = objective(a, b);
    const SIGMA: f64 = 1e-12;
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&f, &ti) in decisions.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            break;
        }
    }
    (a, b)
}

fn validate_config(cfg: &SvmConfig) -> Result<()> {
    if !(cfg.c > 0.0) || !(cfg.gamma > 0.0) || !cfg.c.is_finite() || !cfg.gamma.is_finite() {
        return Err(ModelError::Config("C and gamma must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(ModelError::Config("tol must be positive".into()));
    }
    Ok(())
}

/// Out-of-fold decision values for Platt calibration. Folds are dealt from a
/// seeded shuffle within each class so every training part has both classes.
fn out_of_fold_decisions(x: ArrayView2<f64>, y: &[u8], cfg: &SvmConfig) -> Option<Vec<f64>> {
    let k = cfg.calibration_folds;
    if k < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fold = vec![0usize; y.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for (r, i) in idx.into_iter().enumerate() {
            fold[i] = r % k;
        }
    }
    let mut dec = vec![0.0; y.len()];
    for f in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == f).collect();
        let ty: Vec<u8> = train.iter().map(|&i| y[i]).collect();
        if test.is_empty() || !(ty.contains(&0) && ty.contains(&1)) {
            return None;
        }
        let tx: Array2<f64> = x.select(ndarray::Axis(0), &train);
        let sol = solve_dual(tx.view(), &ty, cfg);
        let m = to_model(tx.view(), &ty, &sol, cfg.gamma);
        for &i in &test {
            dec[i] = m.decision(&x.row(i).to_vec());
        }
    }
    Some(dec)
}

pub fn fit_svm(x: ArrayView2<f64>, y: &[u8], cfg: &SvmConfig) -> Result<TrainedModel> {
    validate_config(cfg)?;
    validate_training(x, y, 2)?;
    if x.nrows() > cfg.max_samples {
        return Err(ModelError::TooLarge { rows: x.nrows(), limit: cfg.max_samples });
    }
    let sol = solve_dual(x, y, cfg);
    let mut model = to_model(x, y, &sol, cfg.gamma);
    let decisions = match out_of_fold_decisions(x, y, cfg) {
        Some(d) => d,
        // too few rows of a class to cross-fit; calibrate in-sample
        None => x.rows().into_iter().map(|r| model.decision(&r.to_vec())).collect(),
    };
    let (a, b) = fit_platt(&decisions, y);
    model.platt_a = a;
    model.platt_b = b;
    Ok(TrainedModel::new(x.ncols(), ModelParams::Svm(model)))
}
