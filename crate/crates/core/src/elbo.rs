//! Variational objective: Gaussian likelihood and the two closed-form KLs.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::objective::{self, GradMode, NoiseModel, ObjectiveConfig, TermSet};
use crate::rff::{ModelParams, RffParams};
use crate::types::ObservedDataset;

pub use crate::objective::EpochNoise;

/// Diagonal Gaussian `q(x_{i0}) = N(μ_i, diag σ_i²)` for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct InitPosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl InitPosterior {
    /// Centered on the first observation.
    pub fn at(y0: &[f64], sigma: f64) -> Self {
        InitPosterior {
            mu: y0.to_vec(),
            log_sigma: vec![sigma.ln(); y0.len()],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        InitPosterior {
            mu: vec![0.0; dim],
            log_sigma: vec![0.0; dim],
        }
    }

    /// Reparameterized draw `μ + σ ⊙ ε`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect()
    }

    /// Chain rule through [`InitPosterior::sample`].
    pub fn sample_vjp(&self, eps: &[f64], x0_bar: &[f64], grad: &mut InitPosterior) {
        for k in 0..self.mu.len() {
            grad.mu[k] += x0_bar[k];
            grad.log_sigma[k] += x0_bar[k] * self.log_sigma[k].exp() * eps[k];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub nll: f64,
    pub kl_w: f64,
    pub kl_x0: f64,
    pub neg_elbo: f64,
}

impl ElboEstimate {
    pub fn new(nll: f64, kl_w: f64, kl_x0: f64) -> Self {
        ElboEstimate {
            nll,
            kl_w,
            kl_x0,
            neg_elbo: nll + kl_w + kl_x0,
        }
    }
}

/// `KL(q(W) ‖ N(0, σ₀² I))`, summed over bases.
pub fn kl_weights(rff: &RffParams) -> Result<f64> {
    let s2 = rff.sigma0().powi(2);
    let ln_s2 = 2.0 * rff.log_sigma0;
    let mut total = 0.0;
    for (m, (b, l)) in rff.b.iter().zip(&rff.sqrt_c).enumerate() {
        let [l11, l21, l22] = *l;
        let det = (l11 * l22).powi(2);
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::SingularCovariance(m));
        }
        let tr = l11 * l11 + l21 * l21 + l22 * l22;
        let bb = b[0] * b[0] + b[1] * b[1];
        total += 0.5 * (tr / s2 + bb / s2 - 2.0 + 2.0 * ln_s2 - det.ln());
    }
    Ok(total)
}

/// Adds `scale · ∂KL_w/∂(b, √C, ln σ₀)` into `grad`.
pub fn kl_weights_grad(rff: &RffParams, scale: f64, grad: &mut RffParams) {
    let s2 = rff.sigma0().powi(2);
    for m in 0..rff.b.len() {
        let [l11, l21, l22] = rff.sqrt_c[m];
        let b = rff.b[m];
        grad.b[m][0] += scale * b[0] / s2;
        grad.b[m][1] += scale * b[1] / s2;
        grad.sqrt_c[m][0] += scale * (l11 / s2 - 1.0 / l11);
        grad.sqrt_c[m][1] += scale * (l21 / s2);
        grad.sqrt_c[m][2] += scale * (l22 / s2 - 1.0 / l22);
        let tr = l11 * l11 + l21 * l21 + l22 * l22;
        let bb = b[0] * b[0] + b[1] * b[1];
        grad.log_sigma0 += scale * (2.0 - (tr + bb) / s2);
    }
}

/// `KL(N(μ, diag σ²) ‖ N(0, a² I))` for one trajectory.
pub fn kl_init(post: &InitPosterior, a: f64) -> f64 {
    let a2 = a * a;
    post.mu
        .iter()
        .zip(&post.log_sigma)
        .map(|(m, ls)| {
            let s2 = (2.0 * ls).exp();
            0.5 * (s2 / a2 + m * m / a2 - 1.0 + a2.ln() - 2.0 * ls)
        })
        .sum()
}

/// Gradient of [`kl_init`] into the posterior and into `ln a`.
pub fn kl_init_grad(post: &InitPosterior, a: f64, scale: f64, grad: &mut InitPosterior, log_a_grad: &mut f64) {
    let a2 = a * a;
    for k in 0..post.mu.len() {
        let s2 = (2.0 * post.log_sigma[k]).exp();
        let m = post.mu[k];
        grad.mu[k] += scale * m / a2;
        grad.log_sigma[k] += scale * (s2 / a2 - 1.0);
        *log_a_grad += scale * (1.0 - (s2 + m * m) / a2);
    }
}

/// `-log N(y | x, σ² I)`.
pub fn gaussian_nll(y: &[f64], x: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("observation noise must be positive, got {sigma}")));
    }
    if y.len() != x.len() {
        return Err(Error::dim("gaussian_nll state", y.len(), x.len()));
    }
    let r2: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = y.len() as f64;
    Ok(0.5 * n * (2.0 * PI * sigma * sigma).ln() + r2 / (2.0 * sigma * sigma))
}

fn check_shapes(dataset: &ObservedDataset, params: &ModelParams, posts: &[InitPosterior]) -> Result<()> {
    dataset.validate()?;
    params.validate()?;
    if dataset.d != params.d {
        return Err(Error::dim("dataset vs model d", params.d, dataset.d));
    }
    if posts.len() != dataset.num_trajectories() {
        return Err(Error::dim("initial-state posteriors", dataset.num_trajectories(), posts.len()));
    }
    Ok(())
}

/// Monte Carlo estimate of the negative ELBO under the supplied noise.
pub fn elbo_estimate(
    dataset: &ObservedDataset,
    params: &ModelParams,
    posts: &[InitPosterior],
    noise: &EpochNoise,
    cfg: &ObjectiveConfig,
) -> Result<ElboEstimate> {
    check_shapes(dataset, params, posts)?;
    let cfg = ObjectiveConfig {
        terms: TermSet::NONE,
        noise: NoiseModel::Learned,
        ..cfg.clone()
    };
    let ev = objective::evaluate(dataset, params, posts, noise, &cfg, GradMode::None)?;
    Ok(ElboEstimate::new(ev.losses.nll, ev.losses.kl_w, ev.losses.kl_x0))
}

/// Variant with known noise level: no `a`, no `σ`, no initial-state KL.
/// A zero noise level turns the data term into a mean squared error.
pub fn elbo_noise_prior(
    dataset: &ObservedDataset,
    params: &ModelParams,
    posts: &[InitPosterior],
    sigma_true: f64,
    noise: &EpochNoise,
    cfg: &ObjectiveConfig,
) -> Result<ElboEstimate> {
    check_shapes(dataset, params, posts)?;
    if !(sigma_true >= 0.0) {
        return Err(Error::invalid("known noise level must be nonnegative"));
    }
    let cfg = ObjectiveConfig {
        terms: TermSet::NONE,
        noise: NoiseModel::Known { sigma: sigma_true },
        ..cfg.clone()
    };
    let ev = objective::evaluate(dataset, params, posts, noise, &cfg, GradMode::None)?;
    Ok(ElboEstimate::new(ev.losses.nll, ev.losses.kl_w, ev.losses.kl_x0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rff(m: usize) -> RffParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        RffParams::init(m, 2, 1.0, &mut rng)
    }

    #[test]
    fn kl_weights_examples() {
        assert_eq!(kl_weights(&rff(5)).unwrap(), 0.0);
        let mut p = rff(1);
        p.b[0] = [1.0, 0.0];
        assert_abs_diff_eq!(kl_weights(&p).unwrap(), 0.5, epsilon = 1e-15);
        p.sqrt_c[0] = [0.0, 1.0, 1.0];
        assert!(matches!(kl_weights(&p), Err(Error::SingularCovariance(0))));
    }

    #[test]
    fn kl_weights_nonnegative_on_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut p = rff(4);
            p.log_sigma0 = rng.gen_range(-1.0..1.0);
            for m in 0..4 {
                p.b[m] = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                p.sqrt_c[m] = [rng.gen_range(0.1..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..-0.1)];
            }
            assert!(kl_weights(&p).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_init_examples() {
        let post = InitPosterior {
            mu: vec![0.0; 2],
            log_sigma: vec![0.7f64.ln(); 2],
        };
        assert_abs_diff_eq!(kl_init(&post, 0.7), 0.0, epsilon = 1e-15);
        let post = InitPosterior {
            mu: vec![1.0, 0.0],
            log_sigma: vec![0.0; 2],
        };
        assert_abs_diff_eq!(kl_init(&post, 1.0), 0.5, epsilon = 1e-15);
        let mut prev = -1.0;
        for r in [0.0, 0.5, 1.0, 2.0] {
            let v = kl_init(
                &InitPosterior {
                    mu: vec![r, 0.0],
                    log_sigma: vec![0.0; 2],
                },
                1.0,
            );
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn gaussian_nll_examples() {
        assert_abs_diff_eq!(gaussian_nll(&[0.3, 0.1], &[0.3, 0.1], 1.0).unwrap(), 1.837877066409345, epsilon = 1e-12);
        let c = gaussian_nll(&[0.0, 0.0], &[0.0, 0.0], 0.5).unwrap();
        let q1 = gaussian_nll(&[0.1, 0.0], &[0.0, 0.0], 0.5).unwrap() - c;
        let q2 = gaussian_nll(&[0.2, 0.0], &[0.0, 0.0], 0.5).unwrap() - c;
        assert_abs_diff_eq!(q2, 4.0 * q1, epsilon = 1e-14);
        assert!(gaussian_nll(&[0.0], &[0.0], 0.0).is_err());
        let big = 1e6;
        let v = gaussian_nll(&[1.0, 1.0], &[0.0, 0.0], big).unwrap();
        assert!((v - (2.0 * PI * big * big).ln()).abs() < 1e-11);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = rff(3);
        p.log_sigma0 = 0.3;
        for m in 0..3 {
            p.b[m] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            p.sqrt_c[m] = [rng.gen_range(0.5..1.5), rng.gen_range(-0.5..0.5), rng.gen_range(0.5..1.5)];
        }
        let mut g = p.zeros_like();
        kl_weights_grad(&p, 1.0, &mut g);
        let h = 1e-6;
        let fd = |f: &dyn Fn(&mut RffParams)| {
            let mut a = p.clone();
            f(&mut a);
            (kl_weights(&a).unwrap() - kl_weights(&p).unwrap()) / h
        };
        assert_abs_diff_eq!(g.log_sigma0, fd(&|q| q.log_sigma0 += h), epsilon = 1e-4);
        assert_abs_diff_eq!(g.sqrt_c[1][0], fd(&|q| q.sqrt_c[1][0] += h), epsilon = 1e-4);
        assert_abs_diff_eq!(g.sqrt_c[2][1], fd(&|q| q.sqrt_c[2][1] += h), epsilon = 1e-4);
        assert_abs_diff_eq!(g.b[0][1], fd(&|q| q.b[0][1] += h), epsilon = 1e-4);

        let post = InitPosterior {
            mu: vec![0.4, -1.2],
            log_sigma: vec![-0.5, 0.2],
        };
        let a = 1.3;
        let mut gp = InitPosterior::zeros(2);
        let mut ga = 0.0;
        kl_init_grad(&post, a, 1.0, &mut gp, &mut ga);
        let fd_a = (kl_init(&post, (a.ln() + h).exp()) - kl_init(&post, (a.ln() - h).exp())) / (2.0 * h);
        assert_abs_diff_eq!(ga, fd_a, epsilon = 1e-7);
        let mut q = post.clone();
        q.log_sigma[1] += h;
        let mut r = post.clone();
        r.log_sigma[1] -= h;
        assert_abs_diff_eq!(gp.log_sigma[1], (kl_init(&q, a) - kl_init(&r, a)) / (2.0 * h), epsilon = 1e-7);
    }
}
