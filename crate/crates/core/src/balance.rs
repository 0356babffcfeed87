//! Loss scalarization, Adam, and the multi-term balancing strategies.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::objective::{LossValues, Term};

/// Upper bound applied to adapted penalty weights.
pub const LAMBDA_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossVector {
    pub neg_elbo: f64,
    pub lyap: f64,
    pub energy: f64,
    pub vol: f64,
}

impl LossVector {
    pub fn penalties(&self) -> [f64; 3] {
        [self.lyap, self.energy, self.vol]
    }
}

impl From<&LossValues> for LossVector {
    fn from(l: &LossValues) -> Self {
        LossVector {
            neg_elbo: l.neg_elbo(),
            lyap: l.lyap,
            energy: l.energy,
            vol: l.vol,
        }
    }
}

/// Penalty weights `(λ₁, λ₂, λ₃)` for Lyapunov, energy and volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub lambda: [f64; 3],
}

impl Default for Weights {
    fn default() -> Self {
        Weights { lambda: [1.0; 3] }
    }
}

impl Weights {
    pub const ZERO: Weights = Weights { lambda: [0.0; 3] };
}

pub fn total_loss(lv: &LossVector, w: &Weights) -> f64 {
    lv.neg_elbo + w.lambda[0] * lv.lyap + w.lambda[1] * lv.energy + w.lambda[2] * lv.vol
}

/// `∂L/∂λ_k`, which by linearity is the k-th penalty value.
pub fn total_loss_lambda_grad(lv: &LossVector) -> [f64; 3] {
    lv.penalties()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdaMode {
    Ascent,
    Adam,
}

/// Ascent on the penalty weights, clamped to `[0, LAMBDA_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gda {
    pub mode: GdaMode,
    pub lr: f64,
    adam: Adam,
}

impl Gda {
    pub fn new(mode: GdaMode, lr: f64) -> Self {
        Gda {
            mode,
            lr,
            adam: Adam::new(3, lr),
        }
    }

    pub fn update(&mut self, w: &Weights, lv: &LossVector) -> Weights {
        let grad = total_loss_lambda_grad(lv);
        let mut lambda = w.lambda;
        match self.mode {
            GdaMode::Ascent => {
                for k in 0..3 {
                    lambda[k] += self.lr * grad[k];
                }
            }
            GdaMode::Adam => {
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.adam.step(&mut lambda, &neg);
            }
        }
        let mut out = Weights { lambda };
        for l in out.lambda.iter_mut() {
            if *l > LAMBDA_MAX {
                log::warn!("penalty weight capped at {LAMBDA_MAX}");
            }
            *l = l.clamp(0.0, LAMBDA_MAX);
        }
        out
    }
}

/// Single ascent step without optimizer state.
pub fn gda_update(w: &Weights, lv: &LossVector, lr2: f64) -> Weights {
    Gda::new(GdaMode::Ascent, lr2).update(w, lv)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-group gradient-magnitude normalization followed by one Adam step.
/// Row 0 is the anchor every other row is rescaled to.
#[derive(Debug, Clone, PartialEq)]
pub struct MtAdam {
    adam: Adam,
    beta: f64,
    /// Running magnitudes, `[group][row]`.
    mags: Vec<Vec<f64>>,
    steps: u64,
}

impl MtAdam {
    pub fn new(n: usize, lr: f64) -> Self {
        MtAdam {
            adam: Adam::new(n, lr),
            beta: 0.9,
            mags: Vec::new(),
            steps: 0,
        }
    }

    /// Combined direction for `rows` over the given group ranges.
    pub fn direction(&mut self, groups: &[Range<usize>], rows: &[Vec<f64>]) -> Vec<f64> {
        let n = rows.first().map_or(0, |r| r.len());
        if self.mags.len() != groups.len() || self.mags.first().map_or(0, |m| m.len()) != rows.len() {
            self.mags = vec![vec![0.0; rows.len()]; groups.len()];
            self.steps = 0;
        }
        self.steps += 1;
        let bc = 1.0 - self.beta.powi(self.steps as i32);
        let mut out = vec![0.0; n];
        for (gi, range) in groups.iter().enumerate() {
            let mags: Vec<f64> = rows
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let m = &mut self.mags[gi][k];
                    *m = self.beta * *m + (1.0 - self.beta) * norm(&r[range.clone()]);
                    *m / bc
                })
                .collect();
            for (k, r) in rows.iter().enumerate() {
                let scale = if k == 0 || mags[k] == 0.0 || mags[0] == 0.0 {
                    1.0
                } else {
                    mags[0] / mags[k]
                };
                for i in range.clone() {
                    out[i] += scale * r[i];
                }
            }
        }
        out
    }

    pub fn step(&mut self, params: &mut [f64], groups: &[Range<usize>], rows: &[Vec<f64>]) {
        let d = self.direction(groups, rows);
        self.adam.step(params, &d);
    }
}

/// Solves `min ½ wᵀQw` subject to `w ≥ e_i` by enumerating active sets.
fn dual_cone_weights(q: &DMatrix<f64>, i: usize) -> DVector<f64> {
    let k = q.nrows();
    let lower = DVector::from_fn(k, |j, _| if j == i { 1.0 } else { 0.0 });
    let tol = 1e-12;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut fallback: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << k) {
        let free: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let fixed: Vec<usize> = (0..k).filter(|j| mask & (1 << j) == 0).collect();
        let mut w = lower.clone();
        if !free.is_empty() {
            let qff = DMatrix::from_fn(free.len(), free.len(), |a, b| q[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -fixed.iter().map(|&f| q[(free[a], f)] * lower[f]).sum::<f64>()
            });
            let Ok(pinv) = qff.pseudo_inverse(1e-12) else { continue };
            let sol = pinv * rhs;
            for (a, &j) in free.iter().enumerate() {
                w[j] = sol[a];
            }
        }
        let grad = q * &w;
        let primal = free.iter().map(|&j| (lower[j] - w[j]).max(0.0)).fold(0.0, f64::max);
        let dual = fixed.iter().map(|&j| (-grad[j]).max(0.0)).fold(0.0, f64::max);
        let stationarity = free.iter().map(|&j| grad[j].abs()).fold(0.0, f64::max);
        let obj = 0.5 * w.dot(&grad);
        let violation = primal + dual + stationarity;
        if violation <= tol && best.as_ref().map_or(true, |(o, _)| obj < *o) {
            best = Some((obj, w.clone()));
        }
        if fallback.as_ref().map_or(true, |(v, _)| violation < *v) {
            fallback = Some((violation, w));
        }
    }
    best.or(fallback).map(|(_, w)| w).unwrap_or(lower)
}

/// UPGrad: mean of each row's projection onto the dual cone of all rows.
/// The result has a nonnegative inner product with every row.
pub fn upgrad_aggregate(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("upgrad needs at least one row"));
    };
    let n = first.len();
    if let Some(r) = rows.iter().find(|r| r.len() != n) {
        return Err(Error::dim("jacobian row", n, r.len()));
    }
    if rows.len() > 16 {
        return Err(Error::invalid("upgrad supports at most 16 rows"));
    }
    let active: Vec<&Vec<f64>> = rows.iter().filter(|r| r.iter().any(|v| *v != 0.0)).collect();
    if active.is_empty() {
        return Ok(vec![0.0; n]);
    }
    let k = active.len();
    let g = DMatrix::from_fn(k, n, |a, j| active[a][j]);
    let mut q = &g * g.transpose();
    let scale = q.diagonal().max();
    q /= scale;
    let mut w = DVector::zeros(k);
    for i in 0..k {
        w += dual_cone_weights(&q, i);
    }
    w /= k as f64;
    let u = g.transpose() * w;
    // an empty dual cone leaves solver residue pointing anywhere
    let row_norm = (0..k).map(|a| g.row(a).norm()).fold(0.0, f64::max);
    if u.norm() <= 1e-9 * row_norm {
        return Ok(vec![0.0; n]);
    }
    Ok(u.iter().copied().collect())
}

/// How the parameter update combines the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balance {
    /// Fixed `λ = (1, 1, 1)`.
    Equal,
    /// Gradient ascent on `λ`.
    Gda,
    /// Adam ascent on `λ`.
    GdaAdam,
    MtAdam,
    /// UPGrad over `[neg_elbo, lyap, energy, vol]`.
    Jd,
    /// UPGrad with the ELBO split into `nll`, `kl_w`, `kl_x0`.
    Jd2,
}

impl Balance {
    pub fn as_str(self) -> &'static str {
        match self {
            Balance::Equal => "equal",
            Balance::Gda => "gda",
            Balance::GdaAdam => "gda-adam",
            Balance::MtAdam => "mtadam",
            Balance::Jd => "jd",
            Balance::Jd2 => "jd2",
        }
    }

    pub fn adapts_lambda(self) -> bool {
        matches!(self, Balance::Gda | Balance::GdaAdam)
    }
}

impl fmt::Display for Balance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Balance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "equal" => Balance::Equal,
            "gda" => Balance::Gda,
            "gda-adam" | "gda_adam" => Balance::GdaAdam,
            "mtadam" => Balance::MtAdam,
            "jd" => Balance::Jd,
            "jd2" => Balance::Jd2,
            other => return Err(Error::invalid(format!("unknown balance mode `{other}`"))),
        })
    }
}

/// Rows of the loss Jacobian for the given balance mode, built from
/// per-term flat gradients indexed by [`Term`].
pub fn jacobian_rows(balance: Balance, term_grads: &[Vec<f64>], active_penalties: [bool; 3]) -> Vec<Vec<f64>> {
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let elbo = add(&add(&term_grads[Term::Nll.index()], &term_grads[Term::KlW.index()]), &term_grads[Term::KlX0.index()]);
    let mut rows = if balance == Balance::Jd2 {
        vec![
            term_grads[Term::Nll.index()].clone(),
            term_grads[Term::KlW.index()].clone(),
            term_grads[Term::KlX0.index()].clone(),
        ]
    } else {
        vec![elbo]
    };
    for (on, term) in active_penalties.iter().zip([Term::Lyap, Term::Energy, Term::Vol]) {
        if *on {
            rows.push(term_grads[term.index()].clone());
        }
    }
    rows
}

/// `∇(neg_elbo) + Σ λ_k ∇L_k`.
pub fn weighted_gradient(term_grads: &[Vec<f64>], w: &Weights) -> Vec<f64> {
    let coeff = [1.0, 1.0, 1.0, w.lambda[0], w.lambda[1], w.lambda[2]];
    let n = term_grads[0].len();
    let mut out = vec![0.0; n];
    for (c, g) in coeff.iter().zip(term_grads) {
        if *c != 0.0 {
            for (o, v) in out.iter_mut().zip(g) {
                *o += c * v;
            }
        }
    }
    out
}
