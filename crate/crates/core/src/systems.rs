//! Ground-truth benchmark systems and noisy dataset generation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{integrate, IntegrationConfig};
use crate::types::{DynamicsClass, ObservedDataset, PhaseState};

/// The nine benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemName {
    /// Single pendulum
    P,
    /// Simple spring
    S,
    /// Hénon–Heiles
    HH,
    /// Damped pendulum
    DP,
    /// Damped spring
    DS,
    /// Unforced Duffing
    UD,
    /// Windy pendulum
    WP,
    /// Forced spring
    FS,
    /// Forced Duffing
    DE,
}

impl SystemName {
    pub const ALL: [SystemName; 9] = [
        SystemName::P,
        SystemName::S,
        SystemName::HH,
        SystemName::DP,
        SystemName::DS,
        SystemName::UD,
        SystemName::WP,
        SystemName::FS,
        SystemName::DE,
    ];

    pub fn class(self) -> DynamicsClass {
        use SystemName::*;
        match self {
            P | S | HH => DynamicsClass::Conservative,
            DP | DS | UD => DynamicsClass::Dissipative,
            WP | FS | DE => DynamicsClass::PortHamiltonian,
        }
    }

    pub fn d(self) -> usize {
        if self == SystemName::HH {
            2
        } else {
            1
        }
    }

    pub fn as_str(self) -> &'static str {
        use SystemName::*;
        match self {
            P => "P",
            S => "S",
            HH => "HH",
            DP => "DP",
            DS => "DS",
            UD => "UD",
            WP => "WP",
            FS => "FS",
            DE => "DE",
        }
    }

    fn family(self) -> Family {
        use SystemName::*;
        match self {
            P | DP | WP => Family::Pendulum,
            S | DS | FS => Family::Spring,
            HH => Family::HenonHeiles,
            UD | DE => Family::Duffing,
        }
    }
}

impl fmt::Display for SystemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown system `{s}` (expected one of P,S,HH,DP,DS,UD,WP,FS,DE)")))
    }
}

#[derive(Clone, Copy)]
enum Family {
    Pendulum,
    Spring,
    HenonHeiles,
    Duffing,
}

/// Time-dependent forcing on the momentum channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ForcingSpec {
    /// `F(t) = v t`
    LinearRamp { v: f64 },
    /// `F(t) = F0 sin(ωt) sin(2ωt)`
    SineProduct { f0: f64, omega: f64 },
    /// `F(t) = F_ext`
    Constant { f_ext: f64 },
}

impl ForcingSpec {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            ForcingSpec::LinearRamp { v } => v * t,
            ForcingSpec::SineProduct { f0, omega } => f0 * (omega * t).sin() * (2.0 * omega * t).sin(),
            ForcingSpec::Constant { f_ext } => f_ext,
        }
    }
}

/// Physical constants; only the subset used by a system is set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub m: Option<f64>,
    pub g: Option<f64>,
    pub l: Option<f64>,
    pub k: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: SystemName,
    pub constants: Constants,
    pub forcing: Option<ForcingSpec>,
}

fn need(v: Option<f64>, what: &str, name: SystemName) -> Result<f64> {
    v.ok_or_else(|| Error::invalid(format!("system {name} is missing constant `{what}`")))
}

impl SystemSpec {
    pub fn class(&self) -> DynamicsClass {
        self.name.class()
    }

    pub fn d(&self) -> usize {
        self.name.d()
    }

    /// Checks that damping and forcing match the dynamics class.
    pub fn validate(&self) -> Result<()> {
        let class = self.class();
        if class.has_dissipation() != self.constants.gamma.is_some() {
            return Err(Error::invalid(format!(
                "system {}: damping gamma must be present iff the class is dissipative or port",
                self.name
            )));
        }
        if class.has_forcing() != self.forcing.is_some() {
            return Err(Error::invalid(format!(
                "system {}: forcing must be present iff the class is port-Hamiltonian",
                self.name
            )));
        }
        let c = &self.constants;
        match self.name.family() {
            Family::Pendulum => {
                need(c.m, "m", self.name)?;
                need(c.g, "g", self.name)?;
                need(c.l, "l", self.name)?;
            }
            Family::Spring => {
                need(c.m, "m", self.name)?;
                need(c.k, "k", self.name)?;
            }
            Family::Duffing => {
                need(c.alpha, "alpha", self.name)?;
                need(c.beta, "beta", self.name)?;
            }
            Family::HenonHeiles => {}
        }
        Ok(())
    }

    /// The benchmark configuration for `name` (physical constants only).
    pub fn preset(name: SystemName) -> SystemSpec {
        use SystemName::*;
        let pendulum = Constants {
            m: Some(1.0),
            g: Some(9.81),
            l: Some(1.0),
            ..Constants::default()
        };
        let spring = Constants {
            m: Some(1.0),
            k: Some(1.0),
            ..Constants::default()
        };
        let duffing = Constants {
            m: Some(1.0),
            alpha: Some(-1.0),
            beta: Some(1.0),
            ..Constants::default()
        };
        let damped = |c: Constants, gamma: f64| Constants { gamma: Some(gamma), ..c };
        let (constants, forcing) = match name {
            P => (pendulum, None),
            S => (spring, None),
            HH => (
                Constants {
                    m: Some(1.0),
                    alpha: Some(1.0),
                    ..Constants::default()
                },
                None,
            ),
            DP => (damped(pendulum, 0.1), None),
            DS => (damped(spring, 0.1), None),
            UD => (damped(duffing, 0.3), None),
            WP => (damped(pendulum, 0.1), Some(ForcingSpec::LinearRamp { v: 0.1 })),
            FS => (
                damped(spring, 0.1),
                Some(ForcingSpec::SineProduct { f0: 0.1, omega: 1.0 }),
            ),
            DE => (damped(duffing, 0.1), Some(ForcingSpec::Constant { f_ext: 0.39 })),
        };
        SystemSpec {
            name,
            constants,
            forcing,
        }
    }

    /// Hénon–Heiles orbits stay bounded only below energy 1/6 inside the
    /// potential triangle; other systems accept any start.
    fn is_bounded_start(&self, x: &[f64]) -> bool {
        if self.name != SystemName::HH {
            return true;
        }
        let inside = x[0] * x[0] + x[1] * x[1] < 0.25;
        inside && self.hamiltonian(x).map_or(false, |h| h < 1.0 / 6.0)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != 2 * self.d() {
            return Err(Error::dim(format!("state for system {}", self.name), 2 * self.d(), x.len()));
        }
        Ok(())
    }

    /// Closed-form energy.
    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let c = &self.constants;
        let n = self.name;
        Ok(match n.family() {
            Family::Pendulum => {
                let (m, g, l) = (need(c.m, "m", n)?, need(c.g, "g", n)?, need(c.l, "l", n)?);
                x[1] * x[1] / (2.0 * m * l * l) - m * g * l * x[0].cos()
            }
            Family::Spring => {
                let (m, k) = (need(c.m, "m", n)?, need(c.k, "k", n)?);
                0.5 * k * x[0] * x[0] + x[1] * x[1] / (2.0 * m)
            }
            Family::HenonHeiles => {
                let (q1, q2, p1, p2) = (x[0], x[1], x[2], x[3]);
                0.5 * (p1 * p1 + p2 * p2) + 0.5 * (q1 * q1 + q2 * q2) + q1 * q1 * q2 - q2.powi(3) / 3.0
            }
            Family::Duffing => {
                let m = c.m.unwrap_or(1.0);
                let (a, b) = (need(c.alpha, "alpha", n)?, need(c.beta, "beta", n)?);
                x[1] * x[1] / (2.0 * m) + a * x[0] * x[0] / 2.0 + b * x[0].powi(4) / 4.0
            }
        })
    }

    /// Analytic `∇H` in `[∂/∂q; ∂/∂p]` order.
    pub fn grad_hamiltonian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let c = &self.constants;
        let n = self.name;
        Ok(match n.family() {
            Family::Pendulum => {
                let (m, g, l) = (need(c.m, "m", n)?, need(c.g, "g", n)?, need(c.l, "l", n)?);
                vec![m * g * l * x[0].sin(), x[1] / (m * l * l)]
            }
            Family::Spring => {
                let (m, k) = (need(c.m, "m", n)?, need(c.k, "k", n)?);
                vec![k * x[0], x[1] / m]
            }
            Family::HenonHeiles => {
                let (q1, q2) = (x[0], x[1]);
                vec![q1 + 2.0 * q1 * q2, q2 + q1 * q1 - q2 * q2, x[2], x[3]]
            }
            Family::Duffing => {
                let m = c.m.unwrap_or(1.0);
                let (a, b) = (need(c.alpha, "alpha", n)?, need(c.beta, "beta", n)?);
                vec![a * x[0] + b * x[0].powi(3), x[1] / m]
            }
        })
    }

    /// Exact `(q̇, ṗ)` including damping `-γ ∂H/∂p` and momentum forcing.
    pub fn vector_field(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let g = self.grad_hamiltonian(x)?;
        let d = self.d();
        let gamma = self.constants.gamma.unwrap_or(0.0);
        let force = self.forcing.map(|f| f.eval(t)).unwrap_or(0.0);
        let mut out = vec![0.0; 2 * d];
        for i in 0..d {
            out[i] = g[d + i];
            out[d + i] = -g[i] - gamma * g[d + i] + force;
        }
        Ok(out)
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub trajectories: usize,
    /// Number of grid points, including `t = 0` and `t = t_end`.
    pub steps: usize,
    pub t_end: f64,
    pub noise_sigma: f64,
    /// Standard deviation of the initial-condition distribution.
    pub init_scale: f64,
    pub seed: u64,
    /// Reference RK4 steps per grid interval.
    pub substeps: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            trajectories: 100,
            steps: 100,
            t_end: 10.0,
            noise_sigma: 0.1,
            init_scale: 1.0,
            seed: 0,
            substeps: 10,
        }
    }
}

impl GenConfig {
    /// Per-system row of the benchmark configuration table.
    pub fn preset(name: SystemName) -> GenConfig {
        let noise_sigma = if name == SystemName::WP { 0.01 } else { 0.1 };
        GenConfig {
            noise_sigma,
            ..GenConfig::default()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        let n = self.steps;
        (0..n).map(|j| self.t_end * j as f64 / (n - 1) as f64).collect()
    }
}

/// Uniform grid, reference integration, then i.i.d. Gaussian observation
/// noise on every component. Each trajectory owns the RNG stream
/// `(seed, index)`, so output is independent of thread count.
pub fn generate_dataset(spec: &SystemSpec, gen: &GenConfig) -> Result<ObservedDataset> {
    spec.validate()?;
    if gen.trajectories == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    if gen.steps < 2 {
        return Err(Error::invalid("need at least two time steps"));
    }
    if !(gen.t_end > 0.0) {
        return Err(Error::invalid("t_end must be positive"));
    }
    if !(gen.noise_sigma >= 0.0) || !(gen.init_scale >= 0.0) {
        return Err(Error::invalid("noise and init scale must be nonnegative"));
    }
    let d = spec.d();
    let times = gen.times();
    let cfg = IntegrationConfig::with_substeps(gen.substeps.max(1));
    let field = |x: &[f64], t: f64, out: &mut [f64]| {
        let v = spec.vector_field(x, t).expect("dimension checked");
        out.copy_from_slice(&v);
    };
    let observations = (0..gen.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(gen.seed);
            rng.set_stream(i as u64);
            let x0 = loop {
                let x0: Vec<f64> = (0..2 * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        gen.init_scale * z
                    })
                    .collect();
                if spec.is_bounded_start(&x0) {
                    break x0;
                }
            };
            let rollout = integrate(&field, &x0, &times, &cfg).map_err(|e| Error::Trajectory {
                index: i,
                source: Box::new(e),
            })?;
            rollout
                .states
                .into_iter()
                .map(|mut s| {
                    for v in s.iter_mut() {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        *v += gen.noise_sigma * eps;
                    }
                    PhaseState::from_flat(s)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObservedDataset {
        system: spec.name.to_string(),
        class: spec.class(),
        d,
        noise_sigma: gen.noise_sigma,
        seed: gen.seed,
        times,
        observations,
    })
}
