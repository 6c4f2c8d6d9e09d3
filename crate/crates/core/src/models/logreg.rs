//! L2-regularized logistic regression fitted by damped Newton iterations.
//!
//! The objective, scaled by `1/n`, is
//! `(1/n) Σ s_i [log(1 + e^{m_i}) - y_i m_i] + ||w||² / (2 C n)` with
//! `m_i = w·x_i + b`; the bias is not penalized. It has the same minimizer
//! as the usual `C Σ loss + ||w||²/2` form.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{logistic_loss, sigmoid, validate_training, ModelError, ModelParams, Result, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogregConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub max_iter: usize,
    /// Stop once the max-abs gradient of the scaled objective is below this.
    pub tol: f64,
    pub pos_weight: Option<f64>,
}

impl Default for LogregConfig {
    fn default() -> Self {
        Self { c: 1.0, max_iter: 100, tol: 1e-8, pos_weight: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Value and gradient `(d/dw, d/db)` of the scaled objective.
pub fn logistic_objective(
    weights: &[f64],
    bias: f64,
    x: ArrayView2<f64>,
    y: &[u8],
    c: f64,
    pos_weight: f64,
) -> (f64, Vec<f64>, f64) {
    let (n, d) = x.dim();
    let nf = n as f64;
    let mut value = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = bias + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
        let t = y[i] as f64;
        let s = if y[i] == 1 { pos_weight } else { 1.0 };
        value += s * logistic_loss(m, t);
        let r = s * (sigmoid(m) - t);
        for (g, v) in gw.iter_mut().zip(row.iter()) {
            *g += r * v;
        }
        gb += r;
    }
    let reg = 1.0 / (c * nf);
    value = value / nf + 0.5 * reg * weights.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / nf + reg * w;
    }
    (value, gw, gb / nf)
}

pub fn fit_logreg(x: ArrayView2<f64>, y: &[u8], cfg: &LogregConfig) -> Result<TrainedModel> {
    if !(cfg.c > 0.0) || !cfg.c.is_finite() {
        return Err(ModelError::Config("C must be positive".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(ModelError::Config("tol must be positive".into()));
    }
    validate_training(x, y, 2)?;
    let (n, d) = x.dim();
    let nf = n as f64;
    let pw = cfg.pos_weight.unwrap_or(1.0);
    let wpos: f64 = y.iter().filter(|&&l| l == 1).count() as f64 * pw;
    let wneg = y.iter().filter(|&&l| l == 0).count() as f64;
    let mut w = vec![0.0; d];
    let mut b = (wpos / wneg).ln();
    let reg = 1.0 / (cfg.c * nf);

    let (mut f, mut gw, mut gb) = logistic_objective(&w, b, x, y, cfg.c, pw);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gmax <= cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        // Hessian over (w, b): X^T D X / n + reg on the weight block
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = sigmoid(m);
            let s = if y[i] == 1 { pw } else { 1.0 };
            let dii = s * p * (1.0 - p) / nf;
            for j in 0..d {
                let xj = row[j] * dii;
                if xj == 0.0 {
                    continue;
                }
                for k in j..d {
                    h[(j, k)] += xj * row[k];
                }
                h[(j, d)] += xj;
            }
            h[(d, d)] += dii;
        }
        for j in 0..=d {
            for k in 0..j {
                h[(j, k)] = h[(k, j)];
            }
        }
        for j in 0..d {
            h[(j, j)] += reg;
        }
        let grad = DVector::from_iterator(d + 1, gw.iter().copied().chain(std::iter::once(gb)));
        let mut jitter = 0.0;
        let step = loop {
            let mut hj = h.clone();
            for j in 0..=d {
                hj[(j, j)] += jitter;
            }
            if let Some(ch) = hj.cholesky() {
                break ch.solve(&grad);
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        };
        // backtracking line search on the objective
        let slope: f64 = -grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let nw: Vec<f64> = w.iter().enumerate().map(|(j, v)| v - t * step[j]).collect();
            let nb = b - t * step[d];
            let (nf_val, ngw, ngb) = logistic_objective(&nw, nb, x, y, cfg.c, pw);
            if nf_val <= f + 1e-4 * t * slope {
                w = nw;
                b = nb;
                f = nf_val;
                gw = ngw;
                gb = ngb;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no further decrease possible at this precision
            converged = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs())) <= cfg.tol;
            break;
        }
    }
    if !converged {
        converged = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs())) <= cfg.tol;
    }
    let model = LinearModel { weights: w, bias: b, iterations, converged };
    Ok(TrainedModel::new(d, ModelParams::Logreg(model)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn linear(m: &TrainedModel) -> &LinearModel {
        match &m.params {
            ModelParams::Logreg(l) => l,
            _ => unreachable!(),
        }
    }

    #[test]
    fn one_dimensional_fit() {
        let x = Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap();
        let m = fit_logreg(x.view(), &[0, 1], &LogregConfig { c: 100.0, ..Default::default() }).unwrap();
        assert!(linear(&m).weights[0] > 0.0);
        assert!(m.predict_proba(&[1.0]).unwrap() > 0.9);
        assert!(linear(&m).converged);
    }

    #[test]
    fn heavy_regularization_gives_prior() {
        let x = Array2::from_shape_fn((20, 2), |(i, j)| (i * (j + 1)) as f64 / 7.0);
        let y: Vec<u8> = (0..20).map(|i| (i % 4 == 0) as u8).collect();
        let m = fit_logreg(x.view(), &y, &LogregConfig { c: 1e-10, ..Default::default() }).unwrap();
        let l = linear(&m);
        assert!(l.weights.iter().all(|w| w.abs() < 1e-6), "{:?}", l.weights);
        assert!((m.predict_proba(&[0.0, 0.0]).unwrap() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let x = Array2::from_shape_fn((50, 3), |(i, j)| (((i * 37 + j * 11) % 17) as f64 - 8.0) / 4.0);
        let y: Vec<u8> = (0..50).map(|i| ((i * 13) % 5 < 2) as u8).collect();
        let cfg = LogregConfig { c: 2.0, ..Default::default() };
        let m = fit_logreg(x.view(), &y, &cfg).unwrap();
        let l = linear(&m);
        let (_, gw, gb) = logistic_objective(&l.weights, l.bias, x.view(), &y, cfg.c, 1.0);
        assert!(gw.iter().all(|g| g.abs() <= cfg.tol) && gb.abs() <= cfg.tol);
    }

    #[test]
    fn positive_weight_raises_probability_monotonically() {
        let x = Array2::from_shape_vec((4, 1), vec![-2.0, -1.0, 1.0, 2.0]).unwrap();
        let m = fit_logreg(x.view(), &[0, 1, 0, 1], &LogregConfig::default()).unwrap();
        assert!(linear(&m).weights[0] > 0.0);
        let ps: Vec<f64> = (-3..=3).map(|v| m.predict_proba(&[v as f64]).unwrap()).collect();
        assert!(ps.windows(2).all(|p| p[1] > p[0]));
    }
}
