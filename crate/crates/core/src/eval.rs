//! Test-time metrics and diagnostics on trained models.

use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ode::{integrate, Field, IntegrationConfig};
use crate::regularizers::{dissipation_energy_residual, divergence_residual, port_energy_residual};
use crate::rff::{hamiltonian, sample_posterior, InitConfig, ModelField, ModelParams, SurrogateSample};
use crate::systems::SystemSpec;
use crate::types::{DynamicsClass, ObservedDataset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ensemble {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalConfig {
    pub integration: IntegrationConfig,
    /// Average `size` sampled rollouts instead of the mean path.
    pub ensemble: Option<Ensemble>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_trajectory: Vec<f64>,
    pub mean: f64,
    /// Population std across trajectories.
    pub std: f64,
    pub system: String,
    pub seed: u64,
    pub config_hash: u64,
}

impl EvalReport {
    pub fn from_values(per_trajectory: Vec<f64>, system: String, seed: u64, config_hash: u64) -> Self {
        let (mean, std) = mean_std(&per_trajectory);
        EvalReport {
            per_trajectory,
            mean,
            std,
            system,
            seed,
            config_hash,
        }
    }

    /// `traj_id, mse`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["traj_id", "mse"])?;
        for (i, v) in self.per_trajectory.iter().enumerate() {
            w.write_record([i.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn config_hash(params: &ModelParams, cfg: &EvalConfig) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    params.class.as_str().hash(&mut h);
    params.d.hash(&mut h);
    params.rff.num_bases().hash(&mut h);
    cfg.integration.substeps.hash(&mut h);
    cfg.integration.max_step.map(f64::to_bits).hash(&mut h);
    cfg.ensemble.map(|e| (e.size, e.seed)).hash(&mut h);
    h.finish()
}

fn rollout_mse(params: &ModelParams, samples: &[SurrogateSample], ds: &ObservedDataset, i: usize, cfg: &EvalConfig) -> f64 {
    let obs = &ds.observations[i];
    let x0 = obs[0].as_slice();
    let mut mean_path = vec![vec![0.0; x0.len()]; obs.len()];
    for s in samples {
        match integrate(&ModelField::new(params, s), x0, &ds.times, &cfg.integration) {
            Ok(r) => {
                for (acc, x) in mean_path.iter_mut().zip(&r.states) {
                    for (a, v) in acc.iter_mut().zip(x) {
                        *a += v / samples.len() as f64;
                    }
                }
            }
            Err(e) => {
                log::warn!("test trajectory {i} diverged: {e}");
                return f64::INFINITY;
            }
        }
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for (pred, y) in mean_path.iter().zip(obs) {
        for (a, b) in pred.iter().zip(y.as_slice()) {
            se += (a - b).powi(2);
            n += 1;
        }
    }
    se / n as f64
}

/// Rolls the model out from each trajectory's first observation and
/// reports the per-trajectory mean squared error over all states.
pub fn evaluate_mse(params: &ModelParams, test: &ObservedDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    params.validate()?;
    test.validate()?;
    if test.d != params.d {
        return Err(Error::dim("test dataset d", params.d, test.d));
    }
    let samples = match cfg.ensemble {
        None => vec![params.mean_sample()],
        Some(e) if e.size == 0 => return Err(Error::invalid("ensemble size must be positive")),
        Some(e) => {
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
            (0..e.size)
                .map(|_| {
                    let w: Vec<[f64; 2]> = (0..params.rff.num_bases())
                        .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
                        .collect();
                    sample_posterior(&params.rff, &w, &params.rff.omega_eps)
                })
                .collect()
        }
    };
    let per: Vec<f64> = (0..test.num_trajectories())
        .into_par_iter()
        .map(|i| rollout_mse(params, &samples, test, i, cfg))
        .collect();
    Ok(EvalReport::from_values(per, test.system.clone(), test.seed, config_hash(params, cfg)))
}

/// A 2-D slice of phase space over `(q₁, p₁)`; other coordinates come
/// from `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMapSpec {
    pub q_range: (f64, f64),
    pub p_range: (f64, f64),
    pub resolution: (usize, usize),
    /// Full state of length `2d`; entries `0` and `d` are overwritten.
    pub base: Vec<f64>,
}

impl PhaseMapSpec {
    pub fn square(d: usize, half_width: f64, resolution: usize) -> Self {
        PhaseMapSpec {
            q_range: (-half_width, half_width),
            p_range: (-half_width, half_width),
            resolution: (resolution, resolution),
            base: vec![0.0; 2 * d],
        }
    }

    fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (range.0 + range.1)];
        }
        (0..n).map(|k| range.0 + (range.1 - range.0) * k as f64 / (n - 1) as f64).collect()
    }
}

/// Row-major grids, `q` outer.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMapGrid {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub h_learned: Vec<f64>,
    pub h_true: Option<Vec<f64>>,
    /// Centered learned minus centered true.
    pub error: Option<Vec<f64>>,
}

impl PhaseMapGrid {
    /// `q, p, h_learned, h_true, error`; the last two are empty without a reference.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["q", "p", "h_learned", "h_true", "error"])?;
        let np = self.p.len();
        for (k, h) in self.h_learned.iter().enumerate() {
            let opt = |v: &Option<Vec<f64>>| v.as_ref().map(|v| format!("{:e}", v[k])).unwrap_or_default();
            w.write_record([
                format!("{:e}", self.q[k / np]),
                format!("{:e}", self.p[k % np]),
                format!("{h:e}"),
                opt(&self.h_true),
                opt(&self.error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Grid evaluation of arbitrary Hamiltonians with gauge alignment.
pub fn phase_map_fn(
    spec: &PhaseMapSpec,
    learned: &(dyn Fn(&[f64]) -> f64 + Sync),
    truth: Option<&(dyn Fn(&[f64]) -> Result<f64> + Sync)>,
) -> Result<PhaseMapGrid> {
    let (nq, np) = spec.resolution;
    if nq == 0 || np == 0 {
        return Err(Error::invalid("phase-map resolution must be positive"));
    }
    let dim = spec.base.len();
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid("phase-map base state must have even, nonzero length"));
    }
    let d = dim / 2;
    let q = PhaseMapSpec::axis(spec.q_range, nq);
    let p = PhaseMapSpec::axis(spec.p_range, np);
    let points: Vec<Vec<f64>> = (0..nq * np)
        .map(|k| {
            let mut x = spec.base.clone();
            x[0] = q[k / np];
            x[d] = p[k % np];
            x
        })
        .collect();
    let h_learned: Vec<f64> = points.par_iter().map(|x| learned(x)).collect();
    let h_true = truth
        .map(|f| points.iter().map(|x| f(x)).collect::<Result<Vec<f64>>>())
        .transpose()?;
    let error = h_true.as_ref().map(|t| {
        centered(&h_learned)
            .iter()
            .zip(centered(t))
            .map(|(a, b)| a - b)
            .collect()
    });
    Ok(PhaseMapGrid {
        q,
        p,
        h_learned,
        h_true,
        error,
    })
}

/// Mean-model Hamiltonian on a `(q₁, p₁)` grid, compared to `truth` if given.
pub fn phase_map(params: &ModelParams, spec: &PhaseMapSpec, truth: Option<&SystemSpec>) -> Result<PhaseMapGrid> {
    params.validate()?;
    if spec.base.len() != 2 * params.d {
        return Err(Error::dim("phase-map base state", 2 * params.d, spec.base.len()));
    }
    if let Some(t) = truth {
        if t.d() != params.d {
            return Err(Error::dim("reference system d", params.d, t.d()));
        }
    }
    let sample = params.mean_sample();
    let learned = |x: &[f64]| hamiltonian(&sample, x);
    let true_h = truth.map(|t| move |x: &[f64]| t.hamiltonian(x));
    phase_map_fn(spec, &learned, true_h.as_ref().map(|f| f as &(dyn Fn(&[f64]) -> Result<f64> + Sync)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    pub times: Vec<f64>,
    pub area: Vec<f64>,
    /// `area(t) / area(0)`
    pub ratio: Vec<f64>,
    pub self_intersecting: Vec<bool>,
}

impl VolumeSeries {
    pub fn max_deviation(&self) -> f64 {
        self.ratio.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `t, area, ratio, self_intersecting`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "area", "ratio", "self_intersecting"])?;
        for k in 0..self.times.len() {
            w.write_record([
                format!("{:e}", self.times[k]),
                format!("{:e}", self.area[k]),
                format!("{:e}", self.ratio[k]),
                self.self_intersecting[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Signed shoelace area of a closed polygon.
pub fn shoelace_area(pts: &[[f64; 2]]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for k in 0..n {
        let a = pts[k];
        let b = pts[(k + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// True if two non-adjacent edges properly cross.
pub fn polygon_self_intersects(pts: &[[f64; 2]]) -> bool {
    let n = pts.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (pts[j], pts[(j + 1) % n]);
            let d1 = orient(a, b, c);
            let d2 = orient(a, b, d);
            let d3 = orient(c, d, a);
            let d4 = orient(c, d, b);
            if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
                return true;
            }
        }
    }
    false
}

/// Area evolution of a circle of boundary points under `field` (`d = 1`).
pub fn volume_series<F: Field + Sync + ?Sized>(
    field: &F,
    center: [f64; 2],
    radius: f64,
    times: &[f64],
    n_points: usize,
    cfg: &IntegrationConfig,
) -> Result<VolumeSeries> {
    if n_points < 3 {
        return Err(Error::invalid("need at least three boundary points"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let rollouts = (0..n_points)
        .into_par_iter()
        .map(|k| {
            let th = std::f64::consts::TAU * k as f64 / n_points as f64;
            let x0 = [center[0] + radius * th.cos(), center[1] + radius * th.sin()];
            integrate(field, &x0, times, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut area = Vec::with_capacity(times.len());
    let mut self_intersecting = Vec::with_capacity(times.len());
    for j in 0..times.len() {
        let pts: Vec<[f64; 2]> = rollouts.iter().map(|r| [r.states[j][0], r.states[j][1]]).collect();
        area.push(shoelace_area(&pts).abs());
        let crossed = polygon_self_intersects(&pts);
        if crossed {
            log::warn!("boundary polygon self-intersects at t={}", times[j]);
        }
        self_intersecting.push(crossed);
    }
    let ratio = area.iter().map(|a| a / area[0]).collect();
    Ok(VolumeSeries {
        times: times.to_vec(),
        area,
        ratio,
        self_intersecting,
    })
}

/// Volume evolution under the checkpoint's conservative part (`η = 0`, no forcing).
pub fn volume_diagnostic(
    params: &ModelParams,
    center: [f64; 2],
    radius: f64,
    times: &[f64],
    n_points: usize,
    cfg: &IntegrationConfig,
) -> Result<VolumeSeries> {
    params.validate()?;
    if params.d != 1 {
        return Err(Error::invalid("volume diagnostic needs a 2-D phase space (d = 1)"));
    }
    let sample = params.mean_sample();
    volume_series(&ModelField::conservative(params, &sample), center, radius, times, n_points, cfg)
}

/// Worst-case identity residuals over random parameters and states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    pub class: DynamicsClass,
    pub draws: usize,
    pub max_energy_residual: f64,
    pub max_port_residual: f64,
    pub max_divergence_residual: f64,
}

/// A model with every parameter group randomized.
pub fn random_model<R: Rng>(class: DynamicsClass, d: usize, num_bases: usize, rng: &mut R) -> ModelParams {
    let cfg = InitConfig {
        num_bases,
        forcing_hidden: 8,
        ..InitConfig::default()
    };
    let mut p = ModelParams::init(class, d, &cfg, rng);
    let mut n = |s: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        s * z
    };
    for b in p.rff.b.iter_mut().flatten() {
        *b = n(0.5);
    }
    for l in p.rff.sqrt_c.iter_mut() {
        *l = [1.0 + 0.2 * n(1.0).abs(), n(0.2), 1.0 + 0.2 * n(1.0).abs()];
    }
    for l in p.rff.log_lambda.iter_mut() {
        *l = n(0.5);
    }
    if let Some(eta) = p.eta.as_mut() {
        for e in eta.iter_mut() {
            *e = n(0.5);
        }
    }
    if let Some(f) = p.forcing.as_mut() {
        for v in f.w1.iter_mut().chain(f.b1.iter_mut()).chain(f.w2.iter_mut()).chain(f.b2.iter_mut()) {
            *v = n(0.5);
        }
    }
    p
}

pub fn identity_check(class: DynamicsClass, d: usize, draws: usize, seed: u64) -> Result<IdentityReport> {
    if d == 0 || draws == 0 {
        return Err(Error::invalid("d and draws must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        class,
        draws,
        max_energy_residual: 0.0,
        max_port_residual: 0.0,
        max_divergence_residual: 0.0,
    };
    for _ in 0..draws {
        let params = random_model(class, d, 20, &mut rng);
        let w: Vec<[f64; 2]> = (0..20)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let sample = sample_posterior(&params.rff, &w, &params.rff.omega_eps);
        let x: Vec<f64> = (0..2 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = rng.gen_range(0.0..10.0);
        report.max_energy_residual = report.max_energy_residual.max(dissipation_energy_residual(&params, &sample, &x).abs());
        report.max_port_residual = report.max_port_residual.max(port_energy_residual(&params, &sample, &x, t).abs());
        report.max_divergence_residual = report.max_divergence_residual.max(divergence_residual(&params, &sample, &x, t).abs());
    }
    Ok(report)
}
