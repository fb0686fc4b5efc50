//! Linear SVM in the primal with squared hinge loss, solved by Newton's method.
//!
//! Objective: `‖w‖² + (C/n) Σ max(0, 1 − yᵢ(xᵢ·w + b))²`; the bias is not penalised.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

pub const DEFAULT_C: f64 = 1000.0;
pub const GRAD_TOL: f64 = 1e-6;
const MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Only one class was present; the model predicts it everywhere.
    pub degenerate: bool,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// `+1` or `−1`; a zero score goes to `−1`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.decision(x) > 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn accuracy(&self, x: &Matrix, y: &[f64]) -> f64 {
        if y.is_empty() {
            return 1.0;
        }
        let hits = (0..x.rows()).filter(|&i| self.predict(x.row(i)) == y[i]).count();
        hits as f64 / y.len() as f64
    }
}

pub fn svm_objective(x: &Matrix, y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let n = y.len() as f64;
    let mut loss = 0.0;
    for i in 0..x.rows() {
        let m = 1.0 - y[i] * (dot(x.row(i), w) + b);
        if m > 0.0 {
            loss += m * m;
        }
    }
    dot(w, w) + c / n * loss
}

fn check_labels(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::Config(format!("{} rows but {} labels", x.rows(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::Degenerate("no training samples".into()));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Config("labels must be ±1".into()));
    }
    Ok(())
}

/// Deterministic fit from `w = 0, b = 0`. Labels must be ±1.
pub fn fit_linear_svm(x: &Matrix, y: &[f64], c: f64) -> Result<SvmModel> {
    check_labels(x, y)?;
    let p = x.cols();
    let n = y.len();
    let positives = y.iter().filter(|&&v| v > 0.0).count();
    if positives == 0 || positives == n {
        let class = if positives == n { 1.0 } else { -1.0 };
        return Ok(SvmModel {
            weights: vec![0.0; p],
            bias: class,
            c,
            objective: svm_objective(x, y, &vec![0.0; p], class, c),
            grad_norm: 0.0,
            iterations: 0,
            degenerate: true,
        });
    }

    let scale = 2.0 * c / n as f64;
    let mut theta = vec![0.0; p + 1];
    let mut f = svm_objective(x, y, &theta[..p], 0.0, c);
    let mut grad = vec![0.0; p + 1];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    while iterations < MAX_ITER {
        let mut hess = DMatrix::<f64>::zeros(p + 1, p + 1);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (k, g) in grad.iter_mut().take(p).enumerate() {
            *g = 2.0 * theta[k];
            hess[(k, k)] = 2.0;
        }
        let mut xt = vec![1.0; p + 1];
        for i in 0..n {
            let row = x.row(i);
            let m = 1.0 - y[i] * (dot(row, &theta[..p]) + theta[p]);
            if m <= 0.0 {
                continue;
            }
            xt[..p].copy_from_slice(row);
            for a in 0..=p {
                grad[a] -= scale * m * y[i] * xt[a];
                for b in 0..=a {
                    hess[(a, b)] += scale * xt[a] * xt[b];
                }
            }
        }
        grad_norm = dot(&grad, &grad).sqrt();
        if grad_norm <= GRAD_TOL {
            break;
        }
        for a in 0..=p {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let dir = newton_direction(hess, &grad);
        let slope = dot(&grad, &dir);
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; p + 1];
        for _ in 0..60 {
            for k in 0..=p {
                trial[k] = theta[k] + t * dir[k];
            }
            let ft = svm_objective(x, y, &trial[..p], trial[p], c);
            if ft <= f + 1e-4 * t * slope {
                theta.copy_from_slice(&trial);
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }

    let bias = theta[p];
    theta.truncate(p);
    Ok(SvmModel {
        weights: theta,
        bias,
        c,
        objective: f,
        grad_norm,
        iterations,
        degenerate: false,
    })
}

/// Solves `H d = −g`, adding diagonal jitter if the Hessian is singular
/// (an empty active set leaves the bias direction flat).
fn newton_direction(hess: DMatrix<f64>, grad: &[f64]) -> Vec<f64> {
    let rhs = -DVector::from_column_slice(grad);
    let trace = hess.trace().max(1.0);
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut h = hess.clone();
        for k in 0..h.nrows() {
            h[(k, k)] += jitter;
        }
        if let Some(ch) = h.cholesky() {
            return ch.solve(&rhs).as_slice().to_vec();
        }
        jitter = if jitter == 0.0 { 1e-12 * trace } else { jitter * 10.0 };
    }
    rhs.as_slice().to_vec()
}
