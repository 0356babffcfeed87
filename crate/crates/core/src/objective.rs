//! The full multi-term training objective with per-term gradients.
//!
//! Each term is backpropagated separately through the shared rollouts so
//! balancers that need a Jacobian (MTAdam, UPGrad) get one.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::elbo::{kl_init, kl_init_grad, kl_weights, kl_weights_grad, InitPosterior};
use crate::error::{Error, Result};
use crate::ode::{backprop, integrate, IntegrationConfig, Rollout};
use crate::params::TrainState;
use crate::regularizers::{energy_terms, lyapunov_terms, volume_terms, LyapunovConfig, VolumeForm, VolumeProbe};
use crate::rff::{hamiltonian, hamiltonian_vjp, sample_posterior, FieldGrad, ModelField, ModelParams, SampleGrad, SurrogateSample};
use crate::types::{DynamicsClass, ObservedDataset};

/// The six scalar terms, in Jacobian-row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Nll,
    KlW,
    KlX0,
    Lyap,
    Energy,
    Vol,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Nll, Term::KlW, Term::KlX0, Term::Lyap, Term::Energy, Term::Vol];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Term::Nll => "nll",
            Term::KlW => "kl_w",
            Term::KlX0 => "kl_x0",
            Term::Lyap => "lyap",
            Term::Energy => "energy",
            Term::Vol => "vol",
        }
    }
}

/// Which physics penalties are computed at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSet {
    pub lyap: bool,
    pub energy: bool,
    pub vol: bool,
}

impl TermSet {
    pub const NONE: TermSet = TermSet {
        lyap: false,
        energy: false,
        vol: false,
    };
    pub const ALL: TermSet = TermSet {
        lyap: true,
        energy: true,
        vol: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.lyap || self.energy || self.vol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `σ` and `a` are learned.
    Learned,
    /// Known observation noise; zero means plain MSE.
    Known { sigma: f64 },
}

/// Whether one surrogate realization serves all trajectories in an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleSharing {
    #[default]
    PerEpoch,
    PerTrajectory,
}

/// Source of the frequency base draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OmegaMode {
    /// The draw stored with the model.
    #[default]
    FixedBase,
    ResampledPerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeConfig {
    pub n_points: usize,
    pub n_times: usize,
    /// Fraction range of each bounding-box side covered by `A`.
    pub cover: (f64, f64),
    /// Temperature as a fraction of `A`'s side.
    pub tau_frac: f64,
    pub form: VolumeForm,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            n_points: 256,
            n_times: 4,
            cover: (0.1, 0.5),
            tau_frac: 0.05,
            form: VolumeForm::SquaredSum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub integration: IntegrationConfig,
    pub terms: TermSet,
    pub noise: NoiseModel,
    pub lyapunov: LyapunovConfig,
    pub volume: VolumeConfig,
    /// Monte Carlo realizations per epoch.
    pub n_x: usize,
    pub sharing: SampleSharing,
    pub omega_mode: OmegaMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            integration: IntegrationConfig::default(),
            terms: TermSet::ALL,
            noise: NoiseModel::Learned,
            lyapunov: LyapunovConfig::default(),
            volume: VolumeConfig::default(),
            n_x: 1,
            sharing: SampleSharing::PerEpoch,
            omega_mode: OmegaMode::FixedBase,
        }
    }
}

/// Standard-normal draws behind one surrogate realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub noise_w: Vec<[f64; 2]>,
    /// `None` uses the model's stored base draw.
    pub omega_eps: Option<Vec<f64>>,
}

/// All randomness consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochNoise {
    /// `N_x` entries, or `N_x · I` (index `k·I + i`) when sampled per trajectory.
    pub realizations: Vec<Realization>,
    /// `x0_eps[k][i]`
    pub x0_eps: Vec<Vec<Vec<f64>>>,
    pub probe: Option<VolumeProbe>,
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl EpochNoise {
    pub fn draw<R: Rng>(rng: &mut R, params: &ModelParams, dataset: &ObservedDataset, cfg: &ObjectiveConfig) -> Self {
        let n_traj = dataset.num_trajectories();
        let m = params.rff.num_bases();
        let dim = 2 * params.d;
        let count = match cfg.sharing {
            SampleSharing::PerEpoch => cfg.n_x,
            SampleSharing::PerTrajectory => cfg.n_x * n_traj,
        };
        let realizations = (0..count)
            .map(|_| {
                let w = normals(rng, 2 * m);
                Realization {
                    noise_w: w.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                    omega_eps: (cfg.omega_mode == OmegaMode::ResampledPerEpoch).then(|| normals(rng, m * dim)),
                }
            })
            .collect();
        let x0_eps = (0..cfg.n_x)
            .map(|_| (0..n_traj).map(|_| normals(rng, dim)).collect())
            .collect();
        let probe = cfg.terms.vol.then(|| {
            let t_span = dataset.times.last().unwrap() - dataset.times[0];
            VolumeProbe::sample(
                &dataset.bounding_box(),
                t_span,
                cfg.volume.n_points,
                cfg.volume.n_times,
                cfg.volume.cover,
                cfg.volume.tau_frac,
                rng,
            )
        });
        EpochNoise {
            realizations,
            x0_eps,
            probe,
        }
    }

    /// Mean path: zero weight noise, base frequencies, `x0 = μ_i`.
    pub fn mean(params: &ModelParams, n_traj: usize) -> Self {
        EpochNoise {
            realizations: vec![Realization {
                noise_w: vec![[0.0; 2]; params.rff.num_bases()],
                omega_eps: None,
            }],
            x0_eps: vec![vec![vec![0.0; 2 * params.d]; n_traj]],
            probe: None,
        }
    }

    pub fn n_x(&self) -> usize {
        self.x0_eps.len()
    }

    fn realization_index(&self, k: usize, i: usize, n_traj: usize) -> usize {
        if self.realizations.len() == self.n_x() {
            k
        } else {
            k * n_traj + i
        }
    }
}

/// Values of every term (zero when not computed).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub nll: f64,
    pub kl_w: f64,
    pub kl_x0: f64,
    pub lyap: f64,
    pub energy: f64,
    pub vol: f64,
}

impl LossValues {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Nll => self.nll,
            Term::KlW => self.kl_w,
            Term::KlX0 => self.kl_x0,
            Term::Lyap => self.lyap,
            Term::Energy => self.energy,
            Term::Vol => self.vol,
        }
    }

    pub fn neg_elbo(&self) -> f64 {
        self.nll + self.kl_w + self.kl_x0
    }

    pub fn is_finite(&self) -> bool {
        Term::ALL.iter().all(|t| self.get(*t).is_finite())
    }

    /// `self += s · other`, term by term.
    pub fn accumulate(&mut self, other: &LossValues, s: f64) {
        self.nll += s * other.nll;
        self.kl_w += s * other.kl_w;
        self.kl_x0 += s * other.kl_x0;
        self.lyap += s * other.lyap;
        self.energy += s * other.energy;
        self.vol += s * other.vol;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    None,
    PerTerm,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: LossValues,
    /// One gradient per [`Term`], in [`Term::ALL`] order.
    pub grads: Option<Vec<TrainState>>,
}

struct TrajOut {
    nll: f64,
    log_sigma_grad: f64,
    lyap_pos: f64,
    lyap_rate: f64,
    energy: f64,
    g_nll: Option<FieldGrad>,
    g_lyap: Option<FieldGrad>,
    g_energy: Option<FieldGrad>,
    /// Initial-state posterior gradients for nll, lyap, energy.
    g_post: [Option<InitPosterior>; 3],
}

struct Shared<'a> {
    dataset: &'a ObservedDataset,
    params: &'a ModelParams,
    cfg: &'a ObjectiveConfig,
    grads: bool,
    n_x: f64,
    /// Normalizers for the data term and the regularizer means.
    mse_count: f64,
    n_pos: f64,
    n_rate: f64,
    n_energy: f64,
}

fn energies(sample: &SurrogateSample, r: &Rollout) -> Vec<f64> {
    r.states.iter().map(|x| hamiltonian(sample, x)).collect()
}

/// Pulls cotangents on `H(x_j)` back into state cotangents and the sample.
fn h_cotangents(sample: &SurrogateSample, r: &Rollout, h_bar: &[f64], sg: &mut SampleGrad) -> Vec<Vec<f64>> {
    r.states
        .iter()
        .zip(h_bar)
        .map(|(x, &hb)| {
            if hb == 0.0 {
                return Vec::new();
            }
            let mut xb = vec![0.0; x.len()];
            hamiltonian_vjp(sample, x, hb, &mut xb, sg);
            xb
        })
        .collect()
}

fn run_trajectory(sh: &Shared, sample: &SurrogateSample, post: &InitPosterior, eps: &[f64], i: usize) -> Result<TrajOut> {
    let params = sh.params;
    let cfg = sh.cfg;
    let traj_err = |e: Error| Error::Trajectory {
        index: i,
        source: Box::new(e),
    };
    let x0 = post.sample(eps);
    let field = ModelField::new(params, sample);
    let times = &sh.dataset.times;
    let rollout = integrate(&field, &x0, times, &cfg.integration).map_err(traj_err)?;
    let ys = &sh.dataset.observations[i];
    let n = x0.len() as f64;

    let mut out = TrajOut {
        nll: 0.0,
        log_sigma_grad: 0.0,
        lyap_pos: 0.0,
        lyap_rate: 0.0,
        energy: 0.0,
        g_nll: None,
        g_lyap: None,
        g_energy: None,
        g_post: [None, None, None],
    };
    let post_grad = |x0_bar: &[f64]| {
        let mut gp = InitPosterior::zeros(x0_bar.len());
        post.sample_vjp(eps, x0_bar, &mut gp);
        Some(gp)
    };

    let mut nll_cot = Vec::with_capacity(ys.len());
    for (y, x) in ys.iter().zip(&rollout.states) {
        let r: Vec<f64> = x.iter().zip(y.as_slice()).map(|(a, b)| a - b).collect();
        let r2: f64 = r.iter().map(|v| v * v).sum();
        let (value, scale) = match cfg.noise {
            NoiseModel::Learned => {
                let s2 = params.sigma().powi(2);
                out.log_sigma_grad += (n - r2 / s2) / sh.n_x;
                (0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() + r2 / (2.0 * s2), 1.0 / s2)
            }
            NoiseModel::Known { sigma } if sigma > 0.0 => {
                let s2 = sigma * sigma;
                (r2 / (2.0 * s2), 1.0 / s2)
            }
            NoiseModel::Known { .. } => (r2 / sh.mse_count, 2.0 / sh.mse_count),
        };
        out.nll += value / sh.n_x;
        nll_cot.push(r.iter().map(|v| v * scale / sh.n_x).collect::<Vec<f64>>());
    }
    if sh.grads {
        let mut g = FieldGrad::zeros(params, sample);
        let x0_bar = backprop(&field, &rollout, &nll_cot, &mut g);
        out.g_nll = Some(g);
        out.g_post[0] = post_grad(&x0_bar);
    }

    if cfg.terms.lyap {
        let h = energies(sample, &rollout);
        let (pos, rate, g_pos, g_rate) = lyapunov_terms(&h, times);
        out.lyap_pos = pos;
        out.lyap_rate = rate;
        if sh.grads {
            let lc = &cfg.lyapunov;
            let h_bar: Vec<f64> = g_pos
                .iter()
                .zip(&g_rate)
                .map(|(p, r)| {
                    let a = if sh.n_pos > 0.0 { lc.lambda_12 * p / sh.n_pos } else { 0.0 };
                    let b = if sh.n_rate > 0.0 { lc.lambda_11 * r / sh.n_rate } else { 0.0 };
                    a + b
                })
                .collect();
            let mut g = FieldGrad::zeros(params, sample);
            let cots = h_cotangents(sample, &rollout, &h_bar, &mut g.sample);
            let x0_bar = backprop(&field, &rollout, &cots, &mut g);
            out.g_lyap = Some(g);
            out.g_post[1] = post_grad(&x0_bar);
        }
    }

    if cfg.terms.energy {
        let cons_field = ModelField::conservative(params, sample);
        let cons = if params.class == DynamicsClass::Conservative {
            rollout
        } else {
            integrate(&cons_field, &x0, times, &cfg.integration).map_err(traj_err)?
        };
        let h = energies(sample, &cons);
        let (sum, grad) = energy_terms(&h);
        out.energy = sum;
        if sh.grads && sh.n_energy > 0.0 {
            let h_bar: Vec<f64> = grad.iter().map(|g| g / sh.n_energy).collect();
            let mut g = FieldGrad::zeros(params, sample);
            let cots = h_cotangents(sample, &cons, &h_bar, &mut g.sample);
            let x0_bar = backprop(&cons_field, &cons, &cots, &mut g);
            out.g_energy = Some(g);
            out.g_post[2] = post_grad(&x0_bar);
        }
    }
    Ok(out)
}

fn probe_grid(probe: &VolumeProbe) -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend_from_slice(&probe.times);
    grid
}

/// Volume term for one realization: value and (optionally) its gradient.
fn volume_for_sample(
    params: &ModelParams,
    sample: &SurrogateSample,
    probe: &VolumeProbe,
    cfg: &ObjectiveConfig,
    max_step: f64,
    scale: f64,
    grads: bool,
) -> Result<(f64, Option<FieldGrad>)> {
    let field = ModelField::conservative(params, sample);
    let grid = probe_grid(probe);
    let icfg = IntegrationConfig {
        substeps: 1,
        max_step: Some(max_step),
    };
    let flows: Vec<Rollout> = probe
        .points
        .par_iter()
        .map(|x| integrate(&field, x, &grid, &icfg))
        .collect::<Result<_>>()?;
    let start: Vec<f64> = probe.points.iter().map(|x| probe.smooth_indicator(x)).collect();
    let mut value = 0.0;
    // dL/d indicator(ρ_t x_n), per time then point
    let mut ind_bar = vec![vec![0.0; flows.len()]; grid.len()];
    for j in 1..grid.len() {
        let diffs: Vec<f64> = flows
            .iter()
            .zip(&start)
            .map(|(r, s0)| s0 - probe.smooth_indicator(&r.states[j]))
            .collect();
        let (v, dv) = volume_terms(&diffs, cfg.volume.form);
        value += scale * v;
        for (n, d) in dv.iter().enumerate() {
            ind_bar[j][n] = -scale * d;
        }
    }
    if !grads {
        return Ok((value, None));
    }
    let parts: Vec<FieldGrad> = flows
        .par_iter()
        .enumerate()
        .map(|(n, r)| {
            let cots: Vec<Vec<f64>> = (0..grid.len())
                .map(|j| {
                    if j == 0 || ind_bar[j][n] == 0.0 {
                        return Vec::new();
                    }
                    let mut c = vec![0.0; r.dim()];
                    probe.smooth_indicator_grad(&r.states[j], ind_bar[j][n], &mut c);
                    c
                })
                .collect();
            let mut g = FieldGrad::zeros(params, sample);
            backprop(&field, r, &cots, &mut g);
            g
        })
        .collect();
    let mut total = FieldGrad::zeros(params, sample);
    for g in &parts {
        add_field_grad(&mut total, g);
    }
    Ok((value, Some(total)))
}

fn add_field_grad(acc: &mut FieldGrad, g: &FieldGrad) {
    for (a, b) in acc.sample.w.iter_mut().flatten().zip(g.sample.w.iter().flatten()) {
        *a += b;
    }
    for (a, b) in acc.sample.omega.iter_mut().zip(&g.sample.omega) {
        *a += b;
    }
    for (a, b) in acc.eta.iter_mut().zip(&g.eta) {
        *a += b;
    }
    if let (Some(a), Some(b)) = (acc.forcing.as_mut(), g.forcing.as_ref()) {
        crate::rff::add_net(a, b);
    }
}

/// Evaluates every active term under frozen noise, optionally with
/// per-term gradients over the full [`TrainState`].
pub fn evaluate(
    dataset: &ObservedDataset,
    params: &ModelParams,
    posts: &[InitPosterior],
    noise: &EpochNoise,
    cfg: &ObjectiveConfig,
    mode: GradMode,
) -> Result<Evaluation> {
    let n_traj = dataset.num_trajectories();
    let n_x = noise.n_x();
    if n_x == 0 {
        return Err(Error::invalid("need at least one Monte Carlo realization"));
    }
    if noise.x0_eps.iter().any(|e| e.len() != n_traj) {
        return Err(Error::dim("initial-state noise", n_traj, noise.x0_eps[0].len()));
    }
    let expect = [n_x, n_x * n_traj];
    if !expect.contains(&noise.realizations.len()) {
        return Err(Error::dim("surrogate realizations", n_x, noise.realizations.len()));
    }
    let grads = mode == GradMode::PerTerm;
    let j = dataset.times.len() as f64;
    let dim = 2.0 * dataset.d as f64;
    let cnt = (n_traj * n_x) as f64;
    let sh = Shared {
        dataset,
        params,
        cfg,
        grads,
        n_x: n_x as f64,
        mse_count: n_traj as f64 * j * dim,
        n_pos: cnt * j,
        n_rate: cnt * (j - 1.0),
        n_energy: cnt * (j - 1.0),
    };

    let samples: Vec<SurrogateSample> = noise
        .realizations
        .iter()
        .map(|r| sample_posterior(&params.rff, &r.noise_w, r.omega_eps.as_deref().unwrap_or(&params.rff.omega_eps)))
        .collect();

    let tasks: Vec<(usize, usize)> = (0..n_x).flat_map(|k| (0..n_traj).map(move |i| (k, i))).collect();
    let outs: Vec<TrajOut> = tasks
        .par_iter()
        .map(|&(k, i)| {
            let s = &samples[noise.realization_index(k, i, n_traj)];
            run_trajectory(&sh, s, &posts[i], &noise.x0_eps[k][i], i)
        })
        .collect::<Result<_>>()?;

    let mut losses = LossValues {
        kl_w: kl_weights(&params.rff)?,
        ..LossValues::default()
    };
    if cfg.noise == NoiseModel::Learned {
        losses.kl_x0 = posts.iter().map(|p| kl_init(p, params.a())).sum();
    }
    let mut pos = 0.0;
    let mut rate = 0.0;
    for o in &outs {
        losses.nll += o.nll;
        pos += o.lyap_pos;
        rate += o.lyap_rate;
        losses.energy += o.energy;
    }
    if cfg.terms.lyap {
        let lc = &cfg.lyapunov;
        let mean = |v: f64, c: f64| if c > 0.0 { v / c } else { 0.0 };
        losses.lyap = lc.lambda_12 * mean(pos, sh.n_pos) + lc.lambda_11 * mean(rate, sh.n_rate);
    }
    losses.energy = if sh.n_energy > 0.0 { losses.energy / sh.n_energy } else { 0.0 };

    let mut grad_states = None;
    if grads {
        let template = TrainState {
            model: params.clone(),
            posts: posts.to_vec(),
        };
        let mut g: Vec<TrainState> = Term::ALL.iter().map(|_| template.zeros_like()).collect();
        for (&(k, i), o) in tasks.iter().zip(&outs) {
            let r = noise.realization_index(k, i, n_traj);
            let (s, nw) = (&samples[r], &noise.realizations[r].noise_w);
            if let Some(fg) = &o.g_nll {
                fg.accumulate(s, nw, &mut g[Term::Nll.index()].model);
            }
            for (term, gp) in [Term::Nll, Term::Lyap, Term::Energy].iter().zip(&o.g_post) {
                if let Some(gp) = gp {
                    let acc = &mut g[term.index()].posts[i];
                    for (a, b) in acc.mu.iter_mut().zip(&gp.mu) {
                        *a += b;
                    }
                    for (a, b) in acc.log_sigma.iter_mut().zip(&gp.log_sigma) {
                        *a += b;
                    }
                }
            }
            if cfg.noise == NoiseModel::Learned {
                g[Term::Nll.index()].model.log_sigma += o.log_sigma_grad;
            }
            if let Some(fg) = &o.g_lyap {
                fg.accumulate(s, nw, &mut g[Term::Lyap.index()].model);
            }
            if let Some(fg) = &o.g_energy {
                fg.accumulate(s, nw, &mut g[Term::Energy.index()].model);
            }
        }
        kl_weights_grad(&params.rff, 1.0, &mut g[Term::KlW.index()].model.rff);
        if cfg.noise == NoiseModel::Learned {
            let gk = &mut g[Term::KlX0.index()];
            let mut log_a = 0.0;
            for (p, gp) in posts.iter().zip(gk.posts.iter_mut()) {
                kl_init_grad(p, params.a(), 1.0, gp, &mut log_a);
            }
            gk.model.log_a += log_a;
        }
        grad_states = Some(g);
    }

    if cfg.terms.vol {
        let probe = noise
            .probe
            .as_ref()
            .ok_or_else(|| Error::invalid("volume term is active but no probe was drawn"))?;
        probe.validate()?;
        let max_step = dataset
            .times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let scale = 1.0 / (n_x * probe.times.len()) as f64;
        for k in 0..n_x {
            let r = noise.realization_index(k, 0, n_traj);
            let (v, fg) = volume_for_sample(params, &samples[r], probe, cfg, max_step, scale, grads)?;
            losses.vol += v;
            if let (Some(fg), Some(g)) = (fg, grad_states.as_mut()) {
                fg.accumulate(&samples[r], &noise.realizations[r].noise_w, &mut g[Term::Vol.index()].model);
            }
        }
    }

    Ok(Evaluation {
        losses,
        grads: grad_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::rff::InitConfig;
    use crate::systems::{generate_dataset, GenConfig, SystemName, SystemSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(name: SystemName) -> (ObservedDataset, TrainState) {
        let ds = generate_dataset(
            &SystemSpec::preset(name),
            &GenConfig {
                trajectories: 3,
                steps: 8,
                t_end: 0.7,
                ..GenConfig::preset(name)
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = InitConfig {
            num_bases: 6,
            forcing_hidden: 4,
            sigma0: 0.8,
            ..InitConfig::default()
        };
        let mut model = ModelParams::init(ds.class, ds.d, &cfg, &mut rng);
        for (m, b) in model.rff.b.iter_mut().enumerate() {
            *b = [0.3 * (m as f64).sin(), 0.2 * (m as f64).cos()];
        }
        let posts = ds.observations.iter().map(|o| InitPosterior::at(o[0].as_slice(), 0.1)).collect();
        (ds, TrainState { model, posts })
    }

    fn eval(ds: &ObservedDataset, s: &TrainState, noise: &EpochNoise, cfg: &ObjectiveConfig) -> LossValues {
        evaluate(ds, &s.model, &s.posts, noise, cfg, GradMode::None).unwrap().losses
    }

    #[test]
    fn per_term_gradients_match_finite_differences() {
        for name in [SystemName::S, SystemName::DP, SystemName::FS] {
            let (ds, state) = toy(name);
            let cfg = ObjectiveConfig {
                volume: VolumeConfig {
                    n_points: 8,
                    ..VolumeConfig::default()
                },
                ..ObjectiveConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let noise = EpochNoise::draw(&mut rng, &state.model, &ds, &cfg);
            let ev = evaluate(&ds, &state.model, &state.posts, &noise, &cfg, GradMode::PerTerm).unwrap();
            let grads = ev.grads.unwrap();
            let flat0 = state.flatten(false);
            let layout = state.layout(false);
            let h = 1e-6;
            for term in Term::ALL {
                let g = grads[term.index()].flatten(false);
                for (group, range) in &layout.groups {
                    // probe a few coordinates per group
                    for idx in range.clone().step_by((range.len() / 3).max(1)) {
                        let mut plus = state.clone();
                        let mut fp = flat0.clone();
                        fp[idx] += h;
                        plus.assign(false, &fp);
                        let mut minus = state.clone();
                        let mut fm = flat0.clone();
                        fm[idx] -= h;
                        minus.assign(false, &fm);
                        let fd = (eval(&ds, &plus, &noise, &cfg).get(term) - eval(&ds, &minus, &noise, &cfg).get(term)) / (2.0 * h);
                        let an = g[idx];
                        let tol = 1e-5 * (1.0 + fd.abs().max(an.abs()));
                        assert!(
                            (an - fd).abs() < tol,
                            "{name} {} {:?}[{idx}]: analytic {an} vs fd {fd}",
                            term.as_str(),
                            group
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dependence_structure_is_exact() {
        let (ds, state) = toy(SystemName::FS);
        let cfg = ObjectiveConfig {
            volume: VolumeConfig {
                n_points: 8,
                ..VolumeConfig::default()
            },
            ..ObjectiveConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = EpochNoise::draw(&mut rng, &state.model, &ds, &cfg);
        let grads = evaluate(&ds, &state.model, &state.posts, &noise, &cfg, GradMode::PerTerm)
            .unwrap()
            .grads
            .unwrap();
        let layout = state.layout(false);
        let allowed: &[(Term, &[ParamGroup])] = &[
            (Term::KlX0, &[ParamGroup::A, ParamGroup::InitPosterior]),
            (Term::KlW, &[ParamGroup::Weights]),
            (
                Term::Nll,
                &[ParamGroup::Weights, ParamGroup::Lambda, ParamGroup::Eta, ParamGroup::Forcing, ParamGroup::InitPosterior, ParamGroup::Sigma],
            ),
            // energy and Lyapunov reuse the sampled ELBO initial states
            (Term::Energy, &[ParamGroup::Weights, ParamGroup::Lambda, ParamGroup::InitPosterior]),
            (Term::Vol, &[ParamGroup::Weights, ParamGroup::Lambda]),
            (
                Term::Lyap,
                &[ParamGroup::Weights, ParamGroup::Lambda, ParamGroup::Eta, ParamGroup::Forcing, ParamGroup::InitPosterior],
            ),
        ];
        for (term, groups) in allowed {
            let g = grads[term.index()].flatten(false);
            for (group, range) in &layout.groups {
                let nonzero = g[range.clone()].iter().any(|v| *v != 0.0);
                if !groups.contains(group) {
                    assert!(!nonzero, "{} must not depend on {:?}", term.as_str(), group);
                }
            }
        }
        // σ₀ enters only the weight KL
        let sigma0_index = layout.range(ParamGroup::Weights).unwrap().end - 1;
        for term in [Term::Nll, Term::Energy, Term::Vol, Term::Lyap] {
            assert_eq!(grads[term.index()].flatten(false)[sigma0_index], 0.0);
        }
    }

    #[test]
    fn identical_noise_gives_identical_estimate() {
        let (ds, state) = toy(SystemName::DP);
        let cfg = ObjectiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noise = EpochNoise::draw(&mut rng, &state.model, &ds, &cfg);
        assert_eq!(eval(&ds, &state, &noise, &cfg), eval(&ds, &state, &noise, &cfg));
    }

    #[test]
    fn known_noise_matches_learned_up_to_constant() {
        let (ds, mut state) = toy(SystemName::DP);
        state.model.log_sigma = 0.05f64.ln();
        let base = ObjectiveConfig {
            terms: TermSet::NONE,
            ..ObjectiveConfig::default()
        };
        let noise = EpochNoise::mean(&state.model, ds.num_trajectories());
        let learned = eval(&ds, &state, &noise, &base);
        let known = eval(
            &ds,
            &state,
            &noise,
            &ObjectiveConfig {
                noise: NoiseModel::Known { sigma: 0.05 },
                ..base.clone()
            },
        );
        let n_obs = (ds.num_trajectories() * ds.times.len()) as f64;
        let constant = n_obs * (2.0 * std::f64::consts::PI * 0.05f64.powi(2)).ln();
        approx::assert_relative_eq!(learned.nll - constant, known.nll, max_relative = 1e-12);
        assert_eq!(known.kl_x0, 0.0);
    }

    #[test]
    fn zero_known_noise_is_mse() {
        let (ds, state) = toy(SystemName::S);
        let cfg = ObjectiveConfig {
            terms: TermSet::NONE,
            noise: NoiseModel::Known { sigma: 0.0 },
            ..ObjectiveConfig::default()
        };
        let noise = EpochNoise::mean(&state.model, ds.num_trajectories());
        let v = eval(&ds, &state, &noise, &cfg);
        assert!(v.nll > 0.0);
        // replace observations by the model's own mean-path prediction
        let s = state.model.mean_sample();
        let field = ModelField::new(&state.model, &s);
        let mut perfect = ds.clone();
        for (i, obs) in perfect.observations.iter_mut().enumerate() {
            let r = integrate(&field, &state.posts[i].mu, &ds.times, &IntegrationConfig::default()).unwrap();
            *obs = r.to_trajectory().unwrap().states;
        }
        assert_eq!(eval(&perfect, &state, &noise, &cfg).nll, 0.0);
    }
}
