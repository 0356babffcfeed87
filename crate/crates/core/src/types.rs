//! Phase-space data model shared by every other module.
//!
//! States are stored flat as `x = [q; p]` of length `2d`; [`PhaseState`]
//! offers the `(q, p)` view on top of that layout.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which generalized Hamiltonian form the dynamics take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DynamicsClass {
    /// `ẋ = J∇H`
    Conservative,
    /// `ẋ = (J + D)∇H`
    Dissipative,
    /// `ẋ = (J + D)∇H + F(t)`
    PortHamiltonian,
}

impl DynamicsClass {
    pub fn has_dissipation(self) -> bool {
        !matches!(self, DynamicsClass::Conservative)
    }

    pub fn has_forcing(self) -> bool {
        matches!(self, DynamicsClass::PortHamiltonian)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DynamicsClass::Conservative => "Conservative",
            DynamicsClass::Dissipative => "Dissipative",
            DynamicsClass::PortHamiltonian => "PortHamiltonian",
        }
    }
}

impl fmt::Display for DynamicsClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DynamicsClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conservative" | "cons" => Ok(DynamicsClass::Conservative),
            "dissipative" | "diss" => Ok(DynamicsClass::Dissipative),
            "porthamiltonian" | "port-hamiltonian" | "port" => Ok(DynamicsClass::PortHamiltonian),
            other => Err(Error::invalid(format!("unknown dynamics class `{other}`"))),
        }
    }
}

/// A point in `2d`-dimensional phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    x: Vec<f64>,
}

impl PhaseState {
    pub fn new(q: &[f64], p: &[f64]) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::dim("PhaseState momentum", q.len(), p.len()));
        }
        let mut x = Vec::with_capacity(2 * q.len());
        x.extend_from_slice(q);
        x.extend_from_slice(p);
        Self::from_flat(x)
    }

    /// Builds a state from the flat `[q; p]` layout.
    pub fn from_flat(x: Vec<f64>) -> Result<Self> {
        if x.is_empty() || x.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "phase state needs an even, positive length, got {}",
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("phase state component {i} is not finite")));
        }
        Ok(PhaseState { x })
    }

    pub fn d(&self) -> usize {
        self.x.len() / 2
    }

    pub fn q(&self) -> &[f64] {
        &self.x[..self.d()]
    }

    pub fn p(&self) -> &[f64] {
        &self.x[self.d()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.x
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.x
    }
}

/// A time-indexed path through phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<PhaseState>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::dim("trajectory states", times.len(), states.len()));
        }
        check_increasing(&times)?;
        if let Some(first) = states.first() {
            let d = first.d();
            if let Some(bad) = states.iter().find(|s| s.d() != d) {
                return Err(Error::dim("trajectory state dimension", d, bad.d()));
            }
        }
        Ok(Trajectory { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) fn check_increasing(times: &[f64]) -> Result<()> {
    if let Some(i) = times.iter().position(|t| !t.is_finite()) {
        return Err(Error::invalid(format!("time {i} is not finite")));
    }
    for (i, w) in times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::invalid(format!(
                "times must be strictly increasing: t[{}]={} is not after t[{}]={}",
                i + 1,
                w[1],
                i,
                w[0]
            )));
        }
    }
    Ok(())
}

/// `I` noisy trajectories on one shared time grid, plus generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedDataset {
    pub system: String,
    pub class: DynamicsClass,
    pub d: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    /// `observations[i][j]` is `y_ij`.
    pub observations: Vec<Vec<PhaseState>>,
}

impl ObservedDataset {
    /// Validates every invariant (shared `d`, shared grid length, increasing times).
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("dataset dimension d must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be nonnegative"));
        }
        check_increasing(&self.times)?;
        for (i, traj) in self.observations.iter().enumerate() {
            if traj.len() != self.times.len() {
                return Err(Error::dim(
                    format!("trajectory {i} length"),
                    self.times.len(),
                    traj.len(),
                ));
            }
            if let Some(s) = traj.iter().find(|s| s.d() != self.d) {
                return Err(Error::dim(format!("trajectory {i} state dimension"), self.d, s.d()));
            }
        }
        Ok(())
    }

    pub fn num_trajectories(&self) -> usize {
        self.observations.len()
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            states: self.observations[i].clone(),
        }
    }

    /// Per-dimension `(lo, hi)` over every observed state.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); 2 * self.d];
        for s in self.observations.iter().flatten() {
            for (b, &v) in bounds.iter_mut().zip(s.as_slice()) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        bounds
    }

    /// Keeps only the listed trajectories, in the given order.
    pub fn select(&self, indices: &[usize]) -> ObservedDataset {
        ObservedDataset {
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    /// Keeps the first `steps` time points of every trajectory.
    pub fn truncate(&self, steps: usize) -> ObservedDataset {
        let steps = steps.min(self.times.len());
        ObservedDataset {
            times: self.times[..steps].to_vec(),
            observations: self.observations.iter().map(|o| o[..steps].to_vec()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> ObservedDataset {
        ObservedDataset {
            system: self.system.clone(),
            class: self.class,
            d: self.d,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            times: self.times.clone(),
            observations: Vec::new(),
        }
    }
}

/// Canonical symplectic matrix `[[0, I], [-I, 0]]` of size `2d × 2d`.
pub fn make_j(d: usize) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::invalid("make_j requires d >= 1"));
    }
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        j[(i, d + i)] = 1.0;
        j[(d + i, i)] = -1.0;
    }
    Ok(j)
}

/// Dissipation matrix `diag(0, …, 0, -η₁², …, -η_d²)`.
pub fn make_d(eta: &[f64]) -> DMatrix<f64> {
    let d = eta.len();
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    for (i, e) in eta.iter().enumerate() {
        m[(d + i, d + i)] = -e * e;
    }
    m
}
