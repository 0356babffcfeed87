//! Random-Fourier-feature Hamiltonian surrogate.
//!
//! `H(x) = Σ_m w_mᵀ φ_m(x)` with `φ_m(x) = (cos ω_mᵀx, sin ω_mᵀx)`. The
//! posterior over `w_m` is `N(b_m, L_m L_mᵀ)` with `L_m` lower triangular,
//! and frequencies are `ω_m = Λ^{-1/2} ε_m`. All derivatives (in `x`, `w`,
//! `ω`) are analytic; the vector-Jacobian products here are what the
//! discrete adjoint in [`crate::ode`] pulls cotangents through.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ode::{DiffField, Field};
use crate::types::DynamicsClass;

/// Variational parameters of the RFF surrogate, stored unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct RffParams {
    /// Phase-space dimension `2d`.
    pub dim: usize,
    /// Posterior means `b_m`.
    pub b: Vec<[f64; 2]>,
    /// Lower-triangular factors `[l11, l21, l22]` of `C_m`.
    pub sqrt_c: Vec<[f64; 3]>,
    pub log_sigma0: f64,
    /// `ln Λ_k`, one per phase-space dimension.
    pub log_lambda: Vec<f64>,
    /// Base standard-normal frequency draw `ε`, `M × 2d` row-major.
    pub omega_eps: Vec<f64>,
}

impl RffParams {
    /// `b = 0`, `√C = σ₀ I`, `Λ = I`, frequencies drawn from `rng`.
    pub fn init<R: Rng>(num_bases: usize, dim: usize, sigma0: f64, rng: &mut R) -> Self {
        RffParams {
            dim,
            b: vec![[0.0; 2]; num_bases],
            sqrt_c: vec![[sigma0, 0.0, sigma0]; num_bases],
            log_sigma0: sigma0.ln(),
            log_lambda: vec![0.0; dim],
            omega_eps: (0..num_bases * dim).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    pub fn num_bases(&self) -> usize {
        self.b.len()
    }

    pub fn sigma0(&self) -> f64 {
        self.log_sigma0.exp()
    }

    pub fn lambda_diag(&self) -> Vec<f64> {
        self.log_lambda.iter().map(|l| l.exp()).collect()
    }

    /// `C_m = L_m L_mᵀ` as `[[c11, c12], [c21, c22]]`.
    pub fn covariance(&self, m: usize) -> [[f64; 2]; 2] {
        let [l11, l21, l22] = self.sqrt_c[m];
        [[l11 * l11, l11 * l21], [l11 * l21, l21 * l21 + l22 * l22]]
    }

    pub(crate) fn zeros_like(&self) -> Self {
        RffParams {
            dim: self.dim,
            b: vec![[0.0; 2]; self.b.len()],
            sqrt_c: vec![[0.0; 3]; self.sqrt_c.len()],
            log_sigma0: 0.0,
            log_lambda: vec![0.0; self.dim],
            omega_eps: vec![0.0; self.omega_eps.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.b.len();
        if self.sqrt_c.len() != m {
            return Err(Error::dim("sqrtC rows", m, self.sqrt_c.len()));
        }
        if self.log_lambda.len() != self.dim {
            return Err(Error::dim("Lambda_diag", self.dim, self.log_lambda.len()));
        }
        if self.omega_eps.len() != m * self.dim {
            return Err(Error::dim("omega base draw", m * self.dim, self.omega_eps.len()));
        }
        let all = self
            .b
            .iter()
            .flatten()
            .chain(self.sqrt_c.iter().flatten())
            .chain(self.log_lambda.iter())
            .chain(self.omega_eps.iter())
            .chain(std::iter::once(&self.log_sigma0));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("RFF parameters must be finite"));
        }
        Ok(())
    }
}

/// One realization `(w, ω)` of the surrogate, fixed along a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSample {
    pub dim: usize,
    pub w: Vec<[f64; 2]>,
    /// `M × 2d` row-major.
    pub omega: Vec<f64>,
}

impl SurrogateSample {
    pub fn num_bases(&self) -> usize {
        self.w.len()
    }

    pub fn omega_row(&self, m: usize) -> &[f64] {
        &self.omega[m * self.dim..(m + 1) * self.dim]
    }

    #[inline]
    fn phase(&self, m: usize, x: &[f64]) -> f64 {
        self.omega_row(m).iter().zip(x).map(|(o, v)| o * v).sum()
    }
}

/// Cotangents with respect to a sample's `w` and `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub w: Vec<[f64; 2]>,
    pub omega: Vec<f64>,
}

impl SampleGrad {
    pub fn zeros(sample: &SurrogateSample) -> Self {
        SampleGrad {
            w: vec![[0.0; 2]; sample.w.len()],
            omega: vec![0.0; sample.omega.len()],
        }
    }
}

/// Row `m` is `(cos ω_mᵀx, sin ω_mᵀx)`.
pub fn features(omega: &[f64], x: &[f64]) -> Vec<[f64; 2]> {
    let n = x.len();
    omega
        .chunks_exact(n)
        .map(|row| {
            let s: f64 = row.iter().zip(x).map(|(o, v)| o * v).sum();
            [s.cos(), s.sin()]
        })
        .collect()
}

/// Jacobians `∂φ_m/∂x`: `[-sin(ω_mᵀx) ω_mᵀ, cos(ω_mᵀx) ω_mᵀ]` per basis.
pub fn grad_features(omega: &[f64], x: &[f64]) -> Vec<[Vec<f64>; 2]> {
    let n = x.len();
    omega
        .chunks_exact(n)
        .map(|row| {
            let s: f64 = row.iter().zip(x).map(|(o, v)| o * v).sum();
            let (sn, c) = s.sin_cos();
            [row.iter().map(|o| -sn * o).collect(), row.iter().map(|o| c * o).collect()]
        })
        .collect()
}

pub fn hamiltonian(sample: &SurrogateSample, x: &[f64]) -> f64 {
    (0..sample.num_bases())
        .map(|m| {
            let (sn, c) = sample.phase(m, x).sin_cos();
            sample.w[m][0] * c + sample.w[m][1] * sn
        })
        .sum()
}

/// `∇H = Σ_m a_m ω_m` with `a_m = -w_m1 sin s_m + w_m2 cos s_m`.
pub fn grad_hamiltonian(sample: &SurrogateSample, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    grad_hamiltonian_into(sample, x, &mut g);
    g
}

#[inline]
fn grad_hamiltonian_into(sample: &SurrogateSample, x: &[f64], g: &mut [f64]) {
    g.iter_mut().for_each(|v| *v = 0.0);
    for m in 0..sample.num_bases() {
        let (sn, c) = sample.phase(m, x).sin_cos();
        let a = -sample.w[m][0] * sn + sample.w[m][1] * c;
        for (gi, o) in g.iter_mut().zip(sample.omega_row(m)) {
            *gi += a * o;
        }
    }
}

/// Diagonal momentum second derivatives `∂²H/∂p_i²`.
pub fn hess_pp_hamiltonian(sample: &SurrogateSample, x: &[f64]) -> Vec<f64> {
    let d = x.len() / 2;
    let mut out = vec![0.0; d];
    for m in 0..sample.num_bases() {
        let (sn, c) = sample.phase(m, x).sin_cos();
        let a_prime = -sample.w[m][0] * c - sample.w[m][1] * sn;
        let row = sample.omega_row(m);
        for i in 0..d {
            out[i] += a_prime * row[d + i] * row[d + i];
        }
    }
    out
}

/// Pulls `h_bar` on `H(x)` back to `x` and to the sample.
pub fn hamiltonian_vjp(sample: &SurrogateSample, x: &[f64], h_bar: f64, x_bar: &mut [f64], sg: &mut SampleGrad) {
    let n = x.len();
    for m in 0..sample.num_bases() {
        let (sn, c) = sample.phase(m, x).sin_cos();
        let [w1, w2] = sample.w[m];
        let a = -w1 * sn + w2 * c;
        sg.w[m][0] += h_bar * c;
        sg.w[m][1] += h_bar * sn;
        let row = sample.omega_row(m);
        let og = &mut sg.omega[m * n..(m + 1) * n];
        for k in 0..n {
            x_bar[k] += h_bar * a * row[k];
            og[k] += h_bar * a * x[k];
        }
    }
}

/// Reparameterized draw: `w_m = b_m + L_m ε^w_m`, `ω_m = Λ^{-1/2} ε^ω_m`.
pub fn sample_posterior(params: &RffParams, noise_w: &[[f64; 2]], noise_omega: &[f64]) -> SurrogateSample {
    let n = params.dim;
    let w = params
        .b
        .iter()
        .zip(&params.sqrt_c)
        .zip(noise_w)
        .map(|((b, l), e)| [b[0] + l[0] * e[0], b[1] + l[1] * e[0] + l[2] * e[1]])
        .collect();
    let scale: Vec<f64> = params.log_lambda.iter().map(|l| (-0.5 * l).exp()).collect();
    let omega = noise_omega
        .iter()
        .enumerate()
        .map(|(i, e)| scale[i % n] * e)
        .collect();
    SurrogateSample { dim: n, w, omega }
}

/// Chain rule through [`sample_posterior`] into `(b, √C, ln Λ)`.
pub fn sample_posterior_vjp(
    sample: &SurrogateSample,
    noise_w: &[[f64; 2]],
    sg: &SampleGrad,
    grad: &mut RffParams,
) {
    for m in 0..sg.w.len() {
        let [gw1, gw2] = sg.w[m];
        let [e1, e2] = noise_w[m];
        grad.b[m][0] += gw1;
        grad.b[m][1] += gw2;
        grad.sqrt_c[m][0] += gw1 * e1;
        grad.sqrt_c[m][1] += gw2 * e1;
        grad.sqrt_c[m][2] += gw2 * e2;
    }
    let n = sample.dim;
    for (i, (go, o)) in sg.omega.iter().zip(&sample.omega).enumerate() {
        grad.log_lambda[i % n] += -0.5 * o * go;
    }
}

/// Single-hidden-layer tanh perceptron `t ↦ F_ϑ(t) ∈ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d × H` row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ForcingNet {
    pub fn init<R: Rng>(hidden: usize, d: usize, rng: &mut R) -> Self {
        let mut normal = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        };
        ForcingNet {
            w1: (0..hidden).map(|_| normal(0.3)).collect(),
            b1: (0..hidden).map(|_| normal(1.0)).collect(),
            w2: (0..d * hidden).map(|_| normal(0.01)).collect(),
            b2: vec![0.0; d],
        }
    }

    pub fn zeros(hidden: usize, d: usize) -> Self {
        ForcingNet {
            w1: vec![0.0; hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d * hidden],
            b2: vec![0.0; d],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn out_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.b1.len() != h {
            return Err(Error::dim("forcing b1", h, self.b1.len()));
        }
        if self.w2.len() != h * self.out_dim() {
            return Err(Error::dim("forcing w2", h * self.out_dim(), self.w2.len()));
        }
        Ok(())
    }

    /// Perceptron output `F_ϑ(t)` (momentum channels only).
    pub fn forward(&self, t: f64) -> Vec<f64> {
        let h = self.hidden();
        let act: Vec<f64> = (0..h).map(|j| (self.w1[j] * t + self.b1[j]).tanh()).collect();
        (0..self.out_dim())
            .map(|i| self.b2[i] + self.w2[i * h..(i + 1) * h].iter().zip(&act).map(|(w, a)| w * a).sum::<f64>())
            .collect()
    }

    /// Accumulates `cotᵀ ∂F/∂ϑ` into `grad`.
    pub fn backward(&self, t: f64, cot: &[f64], grad: &mut ForcingNet) {
        let h = self.hidden();
        for j in 0..h {
            let a = (self.w1[j] * t + self.b1[j]).tanh();
            let mut a_bar = 0.0;
            for (i, c) in cot.iter().enumerate() {
                grad.w2[i * h + j] += c * a;
                a_bar += self.w2[i * h + j] * c;
            }
            let z_bar = a_bar * (1.0 - a * a);
            grad.w1[j] += z_bar * t;
            grad.b1[j] += z_bar;
        }
        for (g, c) in grad.b2.iter_mut().zip(cot) {
            *g += c;
        }
    }
}

/// `F(t) = [0; F_ϑ(t)]` as a full phase-space vector.
pub fn forcing_eval(net: &ForcingNet, t: f64) -> Vec<f64> {
    let f = net.forward(t);
    let mut out = vec![0.0; f.len()];
    out.extend(f);
    out
}

/// Full model parameter set θ, filtered by dynamics class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub class: DynamicsClass,
    pub d: usize,
    pub rff: RffParams,
    pub log_a: f64,
    pub log_sigma: f64,
    pub eta: Option<Vec<f64>>,
    pub forcing: Option<ForcingNet>,
}

/// Initialization knobs for [`ModelParams::init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub num_bases: usize,
    pub sigma0: f64,
    /// Diagonal of the initial `√C`.
    pub sqrt_c: f64,
    pub a: f64,
    pub sigma: f64,
    pub eta: f64,
    pub forcing_hidden: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            num_bases: 100,
            sigma0: 1.0,
            sqrt_c: 1.0,
            a: 1.0,
            sigma: 0.1,
            eta: 0.1,
            forcing_hidden: 100,
        }
    }
}

impl ModelParams {
    pub fn init<R: Rng>(class: DynamicsClass, d: usize, cfg: &InitConfig, rng: &mut R) -> Self {
        let mut rff = RffParams::init(cfg.num_bases, 2 * d, cfg.sigma0, rng);
        rff.sqrt_c.iter_mut().for_each(|l| *l = [cfg.sqrt_c, 0.0, cfg.sqrt_c]);
        let forcing = class.has_forcing().then(|| ForcingNet::init(cfg.forcing_hidden, d, rng));
        ModelParams {
            class,
            d,
            rff,
            log_a: cfg.a.ln(),
            log_sigma: cfg.sigma.ln(),
            eta: class.has_dissipation().then(|| vec![cfg.eta; d]),
            forcing,
        }
    }

    pub fn a(&self) -> f64 {
        self.log_a.exp()
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn validate(&self) -> Result<()> {
        self.rff.validate()?;
        if self.rff.dim != 2 * self.d {
            return Err(Error::dim("RFF dimension", 2 * self.d, self.rff.dim));
        }
        if self.class.has_dissipation() != self.eta.is_some() {
            return Err(Error::invalid("eta must be present iff the class is dissipative or port"));
        }
        if self.class.has_forcing() != self.forcing.is_some() {
            return Err(Error::invalid("forcing net must be present iff the class is port-Hamiltonian"));
        }
        if let Some(eta) = &self.eta {
            if eta.len() != self.d {
                return Err(Error::dim("eta", self.d, eta.len()));
            }
        }
        if let Some(net) = &self.forcing {
            net.validate()?;
            if net.out_dim() != self.d {
                return Err(Error::dim("forcing output", self.d, net.out_dim()));
            }
        }
        Ok(())
    }

    /// Same shape, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            class: self.class,
            d: self.d,
            rff: self.rff.zeros_like(),
            log_a: 0.0,
            log_sigma: 0.0,
            eta: self.eta.as_ref().map(|e| vec![0.0; e.len()]),
            forcing: self.forcing.as_ref().map(|f| ForcingNet::zeros(f.hidden(), f.out_dim())),
        }
    }

    /// Mean-path sample: `w = b` and frequencies from the stored base draw.
    pub fn mean_sample(&self) -> SurrogateSample {
        let zeros = vec![[0.0; 2]; self.rff.num_bases()];
        sample_posterior(&self.rff, &zeros, &self.rff.omega_eps)
    }

    /// Copy with dissipation switched off (`η = 0`), class unchanged.
    pub fn without_dissipation(&self) -> Self {
        let mut p = self.clone();
        if let Some(eta) = p.eta.as_mut() {
            eta.iter_mut().for_each(|e| *e = 0.0);
        }
        p
    }
}

/// The learned vector field for one surrogate realization.
#[derive(Debug, Clone, Copy)]
pub struct ModelField<'a> {
    pub params: &'a ModelParams,
    pub sample: &'a SurrogateSample,
    /// Keep only the `J∇H` part regardless of class.
    pub conservative_only: bool,
}

impl<'a> ModelField<'a> {
    pub fn new(params: &'a ModelParams, sample: &'a SurrogateSample) -> Self {
        ModelField {
            params,
            sample,
            conservative_only: false,
        }
    }

    pub fn conservative(params: &'a ModelParams, sample: &'a SurrogateSample) -> Self {
        ModelField {
            params,
            sample,
            conservative_only: true,
        }
    }

    fn eta(&self) -> Option<&'a [f64]> {
        if self.conservative_only {
            None
        } else {
            self.params.eta.as_deref()
        }
    }

    fn forcing(&self) -> Option<&'a ForcingNet> {
        if self.conservative_only {
            None
        } else {
            self.params.forcing.as_ref()
        }
    }
}

/// Cotangents of the field with respect to everything it closes over.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub sample: SampleGrad,
    pub eta: Vec<f64>,
    pub forcing: Option<ForcingNet>,
}

impl FieldGrad {
    pub fn zeros(params: &ModelParams, sample: &SurrogateSample) -> Self {
        FieldGrad {
            sample: SampleGrad::zeros(sample),
            eta: vec![0.0; params.d],
            forcing: params.forcing.as_ref().map(|f| ForcingNet::zeros(f.hidden(), f.out_dim())),
        }
    }

    /// Pushes these cotangents into a [`ModelParams`]-shaped gradient.
    pub fn accumulate(&self, sample: &SurrogateSample, noise_w: &[[f64; 2]], grad: &mut ModelParams) {
        sample_posterior_vjp(sample, noise_w, &self.sample, &mut grad.rff);
        if let Some(ge) = grad.eta.as_mut() {
            for (g, v) in ge.iter_mut().zip(&self.eta) {
                *g += v;
            }
        }
        if let (Some(gf), Some(f)) = (grad.forcing.as_mut(), self.forcing.as_ref()) {
            add_net(gf, f);
        }
    }
}

pub(crate) fn add_net(acc: &mut ForcingNet, other: &ForcingNet) {
    for (a, b) in acc
        .w1
        .iter_mut()
        .chain(acc.b1.iter_mut())
        .chain(acc.w2.iter_mut())
        .chain(acc.b2.iter_mut())
        .zip(other.w1.iter().chain(&other.b1).chain(&other.w2).chain(&other.b2))
    {
        *a += b;
    }
}

impl Field for ModelField<'_> {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let n = x.len();
        let d = n / 2;
        let mut g = [0.0f64; 16];
        let mut g_heap;
        let g: &mut [f64] = if n <= 16 {
            &mut g[..n]
        } else {
            g_heap = vec![0.0; n];
            &mut g_heap
        };
        grad_hamiltonian_into(self.sample, x, g);
        for i in 0..d {
            out[i] = g[d + i];
            out[d + i] = -g[i];
        }
        if let Some(eta) = self.eta() {
            for i in 0..d {
                out[d + i] -= eta[i] * eta[i] * g[d + i];
            }
        }
        if let Some(net) = self.forcing() {
            for (o, f) in out[d..].iter_mut().zip(net.forward(t)) {
                *o += f;
            }
        }
    }
}

impl DiffField for ModelField<'_> {
    type Tangent = FieldGrad;

    fn vjp(&self, x: &[f64], t: f64, cot: &[f64], x_bar: &mut [f64], theta_bar: &mut FieldGrad) {
        let n = x.len();
        let d = n / 2;
        // u = (J + D)ᵀ cot is the cotangent on ∇H.
        let mut u = vec![0.0; n];
        for i in 0..d {
            u[i] = -cot[d + i];
            u[d + i] = cot[i];
        }
        let eta = self.eta();
        if let Some(eta) = eta {
            for i in 0..d {
                u[d + i] -= eta[i] * eta[i] * cot[d + i];
            }
        }
        let s = self.sample;
        let mut gp = vec![0.0; if eta.is_some() { d } else { 0 }];
        for m in 0..s.num_bases() {
            let row = s.omega_row(m);
            let (sn, c) = s.phase(m, x).sin_cos();
            let [w1, w2] = s.w[m];
            let a = -w1 * sn + w2 * c;
            let a_prime = -w1 * c - w2 * sn;
            let ou: f64 = row.iter().zip(&u).map(|(o, v)| o * v).sum();
            theta_bar.sample.w[m][0] -= sn * ou;
            theta_bar.sample.w[m][1] += c * ou;
            let og = &mut theta_bar.sample.omega[m * n..(m + 1) * n];
            for k in 0..n {
                x_bar[k] += a_prime * ou * row[k];
                og[k] += a * u[k] + a_prime * ou * x[k];
            }
            for (i, g) in gp.iter_mut().enumerate() {
                *g += a * row[d + i];
            }
        }
        if let Some(eta) = eta {
            for i in 0..d {
                theta_bar.eta[i] -= 2.0 * eta[i] * gp[i] * cot[d + i];
            }
        }
        if let (Some(net), Some(g)) = (self.forcing(), theta_bar.forcing.as_mut()) {
            net.backward(t, &cot[d..], g);
        }
    }
}

/// Class-appropriate (or conservative-only) velocity at `(x, t)`.
pub fn vector_field(params: &ModelParams, sample: &SurrogateSample, x: &[f64], t: f64, conservative_only: bool) -> Vec<f64> {
    let field = ModelField {
        params,
        sample,
        conservative_only,
    };
    let mut out = vec![0.0; x.len()];
    field.eval(x, t, &mut out);
    out
}
