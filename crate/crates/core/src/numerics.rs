//! Dense kernels with hand-derived gradients, the Adam optimiser and a
//! central-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out = x · self` for a row vector `x` of length `rows`.
    pub fn vec_mul(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
    }

    /// `out += self · y` for a column vector `y` of length `cols`.
    pub fn mul_vec_acc(&self, y: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), y);
        }
    }

    /// `self += x ⊗ y` (outer product).
    pub fn add_outer(&mut self, x: &[f64], y: &[f64]) {
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (m, &yc) in self.row_mut(r).iter_mut().zip(y) {
                *m += xr * yc;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Masked, max-subtracted softmax. `mask[i] == true` marks an excluded entry.
/// Index of the first maximum.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    debug_assert_eq!(logits.len(), mask.len());
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { 0.0 } else { (l - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// `log softmax(z)[target]`, stable for large logits.
pub fn log_softmax_at(z: &[f64], target: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z[target] - lse
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Intermediate values kept for [`layernorm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// `(e − mean)/sqrt(var + 1e-5) ⊙ gamma + beta` with the biased (1/d) variance.
pub fn layernorm(e: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    layernorm_with_cache(e, gamma, beta).0
}

pub fn layernorm_with_cache(e: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let d = e.len() as f64;
    let mean = e.iter().sum::<f64>() / d;
    let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
    let normalized: Vec<f64> = e.iter().map(|x| (x - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(n, (g, b))| n * g + b)
        .collect();
    (out, LayerNormCache { normalized, inv_std })
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn layernorm_backward(
    dout: &[f64],
    gamma: &[f64],
    cache: &LayerNormCache,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let d = dout.len() as f64;
    let mut dn = vec![0.0; dout.len()];
    for i in 0..dout.len() {
        dgamma[i] += dout[i] * cache.normalized[i];
        dbeta[i] += dout[i];
        dn[i] = dout[i] * gamma[i];
    }
    let mean_dn = dn.iter().sum::<f64>() / d;
    let mean_dn_n = dot(&dn, &cache.normalized) / d;
    dn.iter()
        .zip(&cache.normalized)
        .map(|(g, n)| cache.inv_std * (g - mean_dn - n * mean_dn_n))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers sized after `shapes` (one entry per parameter tensor, in visit order).
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update with learning rate `lr` (pass
    /// `config.lr` unless a schedule is active). Gradients are checked for
    /// finiteness before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut [f64])],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        let named: Vec<(&str, &[f64])> = params.iter().map(|(n, _)| *n).zip(grads.iter().copied()).collect();
        self.begin_step(&named)?;
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(k, p, g, lr);
        }
        Ok(())
    }

    /// Validates all gradients and advances the step counter. Follow with one
    /// [`AdamState::update`] per tensor.
    pub fn begin_step(&mut self, grads: &[(&str, &[f64])]) -> Result<()> {
        for (name, g) in grads {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }
        self.step += 1;
        Ok(())
    }

    pub fn update(&mut self, tensor: usize, p: &mut [f64], g: &[f64], lr: f64) {
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let m = &mut self.first[tensor];
        let v = &mut self.second[tensor];
        assert_eq!(m.len(), p.len(), "moment shape mismatch");
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            if c.weight_decay != 0.0 {
                p[i] -= lr * c.weight_decay * p[i];
            }
            p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `loss` around `x`.
/// Relative error per entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = loss(&probe);
        probe[i] = x[i] - h;
        let down = loss(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: rel.max(report.max_rel_error),
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report
}
