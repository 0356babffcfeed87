//! Physics penalties (energy, volume, Lyapunov) and identity diagnostics.
//!
//! The scalar functions here are the reference definitions; the training
//! objective reuses the `*_terms` helpers so values and cotangents come
//! from the same arithmetic.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ode::{integrate, Field, IntegrationConfig, Rollout};
use crate::rff::{grad_hamiltonian, hamiltonian, hess_pp_hamiltonian, ModelField, ModelParams, SurrogateSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConfig {
    /// Weight of the `relu(dH/dt)` term.
    pub lambda_11: f64,
    /// Weight of the `relu(-H)` term.
    pub lambda_12: f64,
    /// Decay rate; stability only needs 0.
    pub alpha: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            lambda_11: 0.0,
            lambda_12: 1.0,
            alpha: 0.0,
        }
    }
}

/// How per-point indicator differences are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VolumeForm {
    /// `(1/N) [Σ_n (𝟙_A(x_n) − 𝟙_A(ρ_t x_n))]²`
    #[default]
    SquaredSum,
    /// `(1/N) Σ_n (𝟙_A(x_n) − 𝟙_A(ρ_t x_n))²`
    MeanOfSquares,
}

/// Probe set for the volume penalty: box `A`, points, times, temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeProbe {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// Strictly increasing and positive.
    pub times: Vec<f64>,
    /// Smoothing temperature per dimension.
    pub tau: Vec<f64>,
}

impl VolumeProbe {
    pub fn validate(&self) -> Result<()> {
        let n = self.lo.len();
        if self.hi.len() != n || self.tau.len() != n {
            return Err(Error::dim("volume probe box", n, self.hi.len().min(self.tau.len())));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid("volume probe needs lo < hi in every dimension"));
        }
        if self.tau.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid("volume probe temperature must be positive"));
        }
        if self.points.is_empty() {
            return Err(Error::invalid("volume probe needs at least one point"));
        }
        if let Some(p) = self.points.iter().find(|p| p.len() != n) {
            return Err(Error::dim("volume probe point", n, p.len()));
        }
        if self.times.is_empty() || !(self.times[0] > 0.0) {
            return Err(Error::invalid("volume probe times must be positive"));
        }
        crate::types::check_increasing(&self.times)
    }

    /// Random box covering `cover` of each bounding-box side, points
    /// uniform in the bounding box, times uniform in `(0, t_end]`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<R: Rng>(
        bbox: &[(f64, f64)],
        t_end: f64,
        n_points: usize,
        n_times: usize,
        cover: (f64, f64),
        tau_frac: f64,
        rng: &mut R,
    ) -> VolumeProbe {
        let mut lo = Vec::with_capacity(bbox.len());
        let mut hi = Vec::with_capacity(bbox.len());
        let mut tau = Vec::with_capacity(bbox.len());
        for &(l, u) in bbox {
            let width = (u - l).max(1e-9);
            let f: f64 = rng.gen_range(cover.0..=cover.1);
            let w = f * width;
            let start = l + rng.gen::<f64>() * (width - w);
            lo.push(start);
            hi.push(start + w);
            tau.push(tau_frac * w);
        }
        let points = (0..n_points)
            .map(|_| bbox.iter().map(|&(l, u)| l + rng.gen::<f64>() * (u - l).max(1e-9)).collect())
            .collect();
        let mut times: Vec<f64> = (0..n_times).map(|_| t_end * (1.0 - rng.gen::<f64>())).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        VolumeProbe {
            lo,
            hi,
            points,
            times,
            tau,
        }
    }

    pub fn hard_indicator(&self, x: &[f64]) -> f64 {
        let inside = x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h);
        if inside {
            1.0
        } else {
            0.0
        }
    }

    /// `Π_k σ((x_k − lo_k)/τ_k) σ((hi_k − x_k)/τ_k)`.
    pub fn smooth_indicator(&self, x: &[f64]) -> f64 {
        (0..x.len())
            .map(|k| sigmoid((x[k] - self.lo[k]) / self.tau[k]) * sigmoid((self.hi[k] - x[k]) / self.tau[k]))
            .product()
    }

    /// Adds `scale · ∇ smooth_indicator(x)` into `out`.
    pub fn smooth_indicator_grad(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let n = x.len();
        let factors: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let a = sigmoid((x[k] - self.lo[k]) / self.tau[k]);
                let b = sigmoid((self.hi[k] - x[k]) / self.tau[k]);
                // d/dx of a·b
                let da = a * (1.0 - a) / self.tau[k];
                let db = -b * (1.0 - b) / self.tau[k];
                (a * b, da * b + a * db)
            })
            .collect();
        for k in 0..n {
            let others: f64 = factors.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, f)| f.0).product();
            out[k] += scale * factors[k].1 * others;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Value of one volume term from per-point differences `d_n`, and `∂/∂d_n`.
pub fn volume_terms(diffs: &[f64], form: VolumeForm) -> (f64, Vec<f64>) {
    let n = diffs.len() as f64;
    match form {
        VolumeForm::SquaredSum => {
            let s: f64 = diffs.iter().sum();
            (s * s / n, vec![2.0 * s / n; diffs.len()])
        }
        VolumeForm::MeanOfSquares => (
            diffs.iter().map(|d| d * d).sum::<f64>() / n,
            diffs.iter().map(|d| 2.0 * d / n).collect(),
        ),
    }
}

/// `Σ_{j≥1} (H_j − H_0)²` and its gradient with respect to each `H_j`.
pub fn energy_terms(h: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; h.len()];
    let mut sum = 0.0;
    for j in 1..h.len() {
        let d = h[j] - h[0];
        sum += d * d;
        grad[j] = 2.0 * d;
        grad[0] -= 2.0 * d;
    }
    (sum, grad)
}

/// Sums of `relu(−H_j)` over all points and `relu((H_{j+1} − H_j)/Δt_j)`
/// over all intervals, with gradients `(∂pos/∂H, ∂rate/∂H)`.
pub fn lyapunov_terms(h: &[f64], times: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let mut pos = 0.0;
    let mut rate = 0.0;
    let mut g_pos = vec![0.0; h.len()];
    let mut g_rate = vec![0.0; h.len()];
    for j in 0..h.len() {
        if -h[j] > 0.0 {
            pos += -h[j];
            g_pos[j] = -1.0;
        }
        if j + 1 < h.len() {
            let dt = times[j + 1] - times[j];
            let r = (h[j + 1] - h[j]) / dt;
            if r > 0.0 {
                rate += r;
                g_rate[j + 1] += 1.0 / dt;
                g_rate[j] -= 1.0 / dt;
            }
        }
    }
    (pos, rate, g_pos, g_rate)
}

/// Integrates `J∇H` only, for every realization `k` and start `i`.
pub fn conservative_rollouts(
    params: &ModelParams,
    samples: &[SurrogateSample],
    x0_batch: &[Vec<f64>],
    times: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Vec<Vec<Rollout>>> {
    samples
        .iter()
        .map(|s| {
            let field = ModelField::conservative(params, s);
            x0_batch
                .iter()
                .enumerate()
                .map(|(i, x0)| {
                    integrate(&field, x0, times, cfg).map_err(|e| Error::Trajectory {
                        index: i,
                        source: Box::new(e),
                    })
                })
                .collect()
        })
        .collect()
}

fn rollout_energies(sample: &SurrogateSample, r: &Rollout) -> Vec<f64> {
    r.states.iter().map(|x| hamiltonian(sample, x)).collect()
}

/// Mean squared energy drift from each rollout's start; `rollouts[k][i]`
/// pairs with `samples[k]`.
pub fn energy_loss(samples: &[SurrogateSample], rollouts: &[Vec<Rollout>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, rs) in samples.iter().zip(rollouts) {
        for r in rs {
            sum += energy_terms(&rollout_energies(s, r)).0;
            count += r.states.len() - 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Positivity and non-increase penalties, each averaged over its own count.
pub fn lyapunov_loss(samples: &[SurrogateSample], rollouts: &[Vec<Rollout>], cfg: &LyapunovConfig) -> f64 {
    let (mut pos, mut rate, mut n_pos, mut n_rate) = (0.0, 0.0, 0usize, 0usize);
    for (s, rs) in samples.iter().zip(rollouts) {
        for r in rs {
            let (p, q, _, _) = lyapunov_terms(&rollout_energies(s, r), &r.times);
            pos += p;
            rate += q;
            n_pos += r.states.len();
            n_rate += r.states.len() - 1;
        }
    }
    let mean = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
    cfg.lambda_12 * mean(pos, n_pos) + cfg.lambda_11 * mean(rate, n_rate)
}

/// Volume penalty under the conservative flow of each sample, averaged
/// over samples and probe times.
pub fn volume_loss(
    params: &ModelParams,
    samples: &[SurrogateSample],
    probe: &VolumeProbe,
    form: VolumeForm,
    smooth: bool,
    cfg: &IntegrationConfig,
) -> Result<f64> {
    probe.validate()?;
    let ind = |x: &[f64]| if smooth { probe.smooth_indicator(x) } else { probe.hard_indicator(x) };
    let mut grid = vec![0.0];
    grid.extend_from_slice(&probe.times);
    let start: Vec<f64> = probe.points.iter().map(|x| ind(x)).collect();
    let mut total = 0.0;
    for s in samples {
        let field = ModelField::conservative(params, s);
        let flows = probe
            .points
            .iter()
            .map(|x| integrate(&field, x, &grid, cfg))
            .collect::<Result<Vec<_>>>()?;
        for j in 1..grid.len() {
            let diffs: Vec<f64> = flows.iter().zip(&start).map(|(r, s0)| s0 - ind(&r.states[j])).collect();
            total += volume_terms(&diffs, form).0;
        }
    }
    Ok(total / (samples.len() * probe.times.len()) as f64)
}

fn structured_gradient(params: &ModelParams, sample: &SurrogateSample, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let g = grad_hamiltonian(sample, x);
    let d = params.d;
    let mut f = vec![0.0; 2 * d];
    let mut diss = 0.0;
    for i in 0..d {
        f[i] = g[d + i];
        f[d + i] = -g[i];
    }
    if let Some(eta) = &params.eta {
        for i in 0..d {
            f[d + i] -= eta[i] * eta[i] * g[d + i];
            diss += (eta[i] * g[d + i]).powi(2);
        }
    }
    (g, f, diss)
}

/// `∇H·(J+D)∇H + Σ(η_i ∂H/∂p_i)²`, zero by construction.
pub fn dissipation_energy_residual(params: &ModelParams, sample: &SurrogateSample, x: &[f64]) -> f64 {
    let (g, f, diss) = structured_gradient(params, sample, x);
    g.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>() + diss
}

/// `dH/dt + Σ(η_i ∂H/∂p_i)² − ∇Hᵀ F(t)` along the full field.
pub fn port_energy_residual(params: &ModelParams, sample: &SurrogateSample, x: &[f64], t: f64) -> f64 {
    let g = grad_hamiltonian(sample, x);
    let mut v = vec![0.0; x.len()];
    ModelField::new(params, sample).eval(x, t, &mut v);
    let dh_dt: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
    let d = params.d;
    let diss: f64 = params
        .eta
        .as_ref()
        .map_or(0.0, |eta| (0..d).map(|i| (eta[i] * g[d + i]).powi(2)).sum());
    let forcing: f64 = params
        .forcing
        .as_ref()
        .map_or(0.0, |net| net.forward(t).iter().zip(&g[d..]).map(|(f, gp)| f * gp).sum());
    dh_dt + diss - forcing
}

/// Central-difference divergence of the full field at `(x, t)`.
pub fn numerical_divergence<F: Field + ?Sized>(field: &F, x: &[f64], t: f64, h: f64) -> f64 {
    let n = x.len();
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    let mut xp = x.to_vec();
    let mut div = 0.0;
    for k in 0..n {
        xp[k] = x[k] + h;
        field.eval(&xp, t, &mut plus);
        xp[k] = x[k] - h;
        field.eval(&xp, t, &mut minus);
        xp[k] = x[k];
        div += (plus[k] - minus[k]) / (2.0 * h);
    }
    div
}

/// `∇·f + Σ η_i² ∂²H/∂p_i²`, with the divergence taken numerically.
pub fn divergence_residual(params: &ModelParams, sample: &SurrogateSample, x: &[f64], t: f64) -> f64 {
    let div = numerical_divergence(&ModelField::new(params, sample), x, t, 1e-5);
    let correction: f64 = params.eta.as_ref().map_or(0.0, |eta| {
        hess_pp_hamiltonian(sample, x)
            .iter()
            .zip(eta)
            .map(|(h, e)| e * e * h)
            .sum()
    });
    div + correction
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rff::{sample_posterior, InitConfig};
    use crate::types::DynamicsClass;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn model(class: DynamicsClass, seed: u64) -> (ModelParams, SurrogateSample) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = InitConfig {
            num_bases: 8,
            forcing_hidden: 4,
            eta: 0.7,
            ..InitConfig::default()
        };
        let mut p = ModelParams::init(class, 1, &cfg, &mut rng);
        for b in p.rff.b.iter_mut().flatten() {
            *b = rng.gen_range(-1.0..1.0);
        }
        if let Some(f) = p.forcing.as_mut() {
            f.w2.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        }
        let noise: Vec<[f64; 2]> = (0..8)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let s = sample_posterior(&p.rff, &noise, &p.rff.omega_eps);
        (p, s)
    }

    #[test]
    fn energy_terms_example() {
        let (sum, _) = energy_terms(&[1.0, 1.1, 1.2]);
        assert_abs_diff_eq!(sum / 2.0, 0.025, epsilon = 1e-15);
        let (shifted, _) = energy_terms(&[6.0, 6.1, 6.2]);
        assert_abs_diff_eq!(shifted, sum, epsilon = 1e-12);
        assert_eq!(energy_terms(&[3.0]).0, 0.0);
        assert_eq!(energy_terms(&[2.0, 2.0, 2.0]).0, 0.0);
    }

    #[test]
    fn lyapunov_terms_example() {
        let (pos, rate, _, _) = lyapunov_terms(&[-0.5, 1.0], &[0.0, 0.1]);
        assert_abs_diff_eq!(pos / 2.0, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(rate, 15.0, epsilon = 1e-12);
        let (pos, _, _, _) = lyapunov_terms(&[0.5, 1.0, 0.0], &[0.0, 1.0, 2.0]);
        assert_eq!(pos, 0.0);
    }

    #[test]
    fn volume_terms_example() {
        // two points inside initially, one after the flow
        let start = [1.0, 1.0, 0.0, 0.0];
        let after = [1.0, 0.0, 0.0, 0.0];
        let diffs: Vec<f64> = start.iter().zip(&after).map(|(a, b)| a - b).collect();
        assert_abs_diff_eq!(volume_terms(&diffs, VolumeForm::SquaredSum).0, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(volume_terms(&diffs, VolumeForm::MeanOfSquares).0, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn smooth_indicator_gradient_matches_fd() {
        let probe = VolumeProbe {
            lo: vec![-0.5, 0.0],
            hi: vec![0.5, 1.0],
            points: vec![vec![0.0, 0.0]],
            times: vec![1.0],
            tau: vec![0.05, 0.1],
        };
        let x = [0.47, 0.93];
        let mut g = vec![0.0; 2];
        probe.smooth_indicator_grad(&x, 1.0, &mut g);
        let h = 1e-7;
        for k in 0..2 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (probe.smooth_indicator(&xp) - probe.smooth_indicator(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-6);
        }
        assert!(probe.smooth_indicator(&[0.0, 0.5]) > 0.98);
        assert!(probe.smooth_indicator(&[3.0, 0.5]) < 1e-10);
    }

    #[test]
    fn quarter_rotation_maps_centered_box_onto_itself() {
        let probe = VolumeProbe {
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
            points: vec![],
            times: vec![1.0],
            tau: vec![0.05, 0.05],
        };
        let pts: Vec<[f64; 2]> = (0..50).map(|i| [-2.0 + 0.08 * i as f64, 1.5 - 0.06 * i as f64]).collect();
        let diffs: Vec<f64> = pts
            .iter()
            .map(|x| probe.hard_indicator(x) - probe.hard_indicator(&[x[1], -x[0]]))
            .collect();
        assert_eq!(volume_terms(&diffs, VolumeForm::SquaredSum).0, 0.0);
    }

    #[test]
    fn identity_flow_has_zero_volume_loss() {
        let (p, _) = model(DynamicsClass::Conservative, 1);
        let zero = SurrogateSample {
            dim: 2,
            w: vec![[0.0; 2]; 8],
            omega: vec![0.0; 16],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe = VolumeProbe::sample(&[(-2.0, 2.0), (-1.0, 1.0)], 5.0, 32, 4, (0.1, 0.5), 0.05, &mut rng);
        let cfg = IntegrationConfig::default();
        for smooth in [false, true] {
            assert_eq!(volume_loss(&p, &[zero.clone()], &probe, VolumeForm::SquaredSum, smooth, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn smooth_volume_loss_converges_to_hard() {
        let (p, s) = model(DynamicsClass::Conservative, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bbox = vec![(-2.0, 2.0), (-2.0, 2.0)];
        let mut probe = VolumeProbe::sample(&bbox, 2.0, 64, 2, (0.3, 0.5), 0.05, &mut rng);
        let cfg = IntegrationConfig {
            substeps: 1,
            max_step: Some(0.05),
        };
        let hard = volume_loss(&p, &[s.clone()], &probe, VolumeForm::MeanOfSquares, false, &cfg).unwrap();
        let mut errs = Vec::new();
        for tau in [0.1, 0.01, 0.001] {
            probe.tau = vec![tau; 2];
            let smooth = volume_loss(&p, &[s.clone()], &probe, VolumeForm::MeanOfSquares, true, &cfg).unwrap();
            errs.push((smooth - hard).abs());
        }
        assert!(errs[2] <= errs[1] && errs[1] <= errs[0], "{errs:?}");
        assert!(errs[2] < 1e-3);
    }

    #[test]
    fn identities_hold_for_every_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for class in [DynamicsClass::Conservative, DynamicsClass::Dissipative, DynamicsClass::PortHamiltonian] {
            for seed in 0..20 {
                let (p, s) = model(class, seed);
                let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let t = rng.gen_range(0.0..10.0);
                assert!(dissipation_energy_residual(&p, &s, &x).abs() < 1e-10);
                assert!(port_energy_residual(&p, &s, &x, t).abs() < 1e-10);
                assert!(divergence_residual(&p, &s, &x, t).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conservative_rollouts_ignore_eta() {
        let (p, s) = model(DynamicsClass::Dissipative, 5);
        let mut q = p.clone();
        q.eta = Some(vec![3.0]);
        let times: Vec<f64> = (0..20).map(|j| 0.1 * j as f64).collect();
        let x0 = vec![vec![0.3, -0.2]];
        let cfg = IntegrationConfig::default();
        let a = conservative_rollouts(&p, &[s.clone()], &x0, &times, &cfg).unwrap();
        let b = conservative_rollouts(&q, &[s.clone()], &x0, &times, &cfg).unwrap();
        assert_eq!(a[0][0].states, b[0][0].states);
        let field = ModelField::conservative(&p, &s);
        for x in &a[0][0].states {
            assert!(numerical_divergence(&field, x, 0.0, 1e-5).abs() < 1e-7);
        }
        assert_eq!(energy_loss(&[s.clone()], &[vec![a[0][0].clone()]]) >= 0.0, true);
    }

    #[test]
    fn lyapunov_loss_is_order_invariant_and_linear() {
        let (p, s) = model(DynamicsClass::Dissipative, 6);
        let times: Vec<f64> = (0..30).map(|j| 0.1 * j as f64).collect();
        let field = ModelField::new(&p, &s);
        let rs: Vec<Rollout> = [[0.5, 0.1], [-1.0, 0.4], [2.0, -1.0]]
            .iter()
            .map(|x0| integrate(&field, x0, &times, &IntegrationConfig::default()).unwrap())
            .collect();
        let cfg = LyapunovConfig::default();
        let a = lyapunov_loss(&[s.clone()], &[rs.clone()], &cfg);
        let mut rev = rs.clone();
        rev.reverse();
        assert_abs_diff_eq!(a, lyapunov_loss(&[s.clone()], &[rev], &cfg), epsilon = 1e-14);
        let double = LyapunovConfig { lambda_12: 2.0, ..cfg };
        assert_abs_diff_eq!(2.0 * a, lyapunov_loss(&[s.clone()], &[rs], &double), epsilon = 1e-14);
    }
}
