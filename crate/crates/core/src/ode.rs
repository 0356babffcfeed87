//! Fixed-step RK4 integration with a discrete adjoint.
//!
//! [`integrate`] records every stage input, so [`backprop`] can return the
//! exact reverse-mode sensitivities of the discrete trajectory with respect
//! to the initial state and to any parameters the field closes over.

use crate::error::{Error, Result};
use crate::types::{check_increasing, PhaseState, Trajectory};

/// A time-dependent vector field `ẋ = f(x, t)`.
pub trait Field {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
}

impl<F> Field for F
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self(x, t, out)
    }
}

/// A field that can pull a cotangent on `f(x, t)` back to `x` and to its
/// own parameters.
pub trait DiffField: Field {
    /// Parameter cotangent accumulator.
    type Tangent;

    /// Adds `cotᵀ ∂f/∂x` into `x_bar` and `cotᵀ ∂f/∂θ` into `theta_bar`.
    fn vjp(&self, x: &[f64], t: f64, cot: &[f64], x_bar: &mut [f64], theta_bar: &mut Self::Tangent);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    /// RK4 steps per output interval (at least 1).
    pub substeps: usize,
    /// Optional cap on the internal step; raises the per-interval step count
    /// when an interval is long.
    pub max_step: Option<f64>,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig {
            substeps: 1,
            max_step: None,
        }
    }
}

impl IntegrationConfig {
    pub fn with_substeps(substeps: usize) -> Self {
        IntegrationConfig {
            substeps,
            max_step: None,
        }
    }

    fn steps_for(&self, interval: f64) -> usize {
        let mut n = self.substeps.max(1);
        if let Some(h) = self.max_step {
            n = n.max((interval / h).ceil() as usize);
        }
        n
    }
}

/// One classical Runge–Kutta step. Errors name the time and stage (1–4)
/// that produced a non-finite value.
pub fn rk4_step<F: Field + ?Sized>(field: &F, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {h}")));
    }
    let mut ws = Workspace::new(x.len());
    let mut out = x.to_vec();
    ws.step(field, &mut out, t, h, None)?;
    Ok(out)
}

struct Workspace {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            stage: vec![0.0; n],
        }
    }

    /// Advances `x` in place; optionally appends the four stage inputs.
    fn step<F: Field + ?Sized>(
        &mut self,
        field: &F,
        x: &mut [f64],
        t: f64,
        h: f64,
        mut record: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        let coeffs = [0.0, 0.5, 0.5, 1.0];
        for s in 0..4 {
            if s == 0 {
                self.stage.copy_from_slice(x);
            } else {
                let (prev, c) = (&self.k[s - 1], coeffs[s] * h);
                for ((st, xi), ki) in self.stage.iter_mut().zip(x.iter()).zip(prev) {
                    *st = xi + c * ki;
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.extend_from_slice(&self.stage);
            }
            field.eval(&self.stage, t + coeffs[s] * h, &mut self.k[s]);
            if self.k[s].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { t, stage: s + 1 });
            }
        }
        let [k1, k2, k3, k4] = &self.k;
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t + h, stage: 4 });
        }
        Ok(())
    }
}

/// Output of [`integrate`]: states on the requested grid plus the stage
/// record needed by [`backprop`].
#[derive(Debug, Clone)]
pub struct Rollout {
    pub times: Vec<f64>,
    /// `states[j]` is the flat state at `times[j]`.
    pub states: Vec<Vec<f64>>,
    dim: usize,
    step_t: Vec<f64>,
    step_h: Vec<f64>,
    /// Four stage inputs per step, flattened.
    stages: Vec<f64>,
    /// Number of steps taken before reaching output `j`.
    steps_before: Vec<usize>,
}

impl Rollout {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_steps(&self) -> usize {
        self.step_t.len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("rollout has at least one state")
    }

    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let states = self
            .states
            .iter()
            .map(|s| PhaseState::from_flat(s.clone()))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(self.times.clone(), states)
    }

    fn stage(&self, step: usize, s: usize) -> &[f64] {
        let off = (step * 4 + s) * self.dim;
        &self.stages[off..off + self.dim]
    }
}

/// Integrates from `x0` at `times[0]` and reports the state at every entry
/// of `times`.
pub fn integrate<F: Field + ?Sized>(
    field: &F,
    x0: &[f64],
    times: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Rollout> {
    if times.is_empty() {
        return Err(Error::invalid("integrate needs at least one time point"));
    }
    if cfg.substeps == 0 {
        return Err(Error::invalid("substeps must be at least 1"));
    }
    check_increasing(times)?;
    let n = x0.len();
    let mut ws = Workspace::new(n);
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(times.len());
    states.push(x.clone());
    let mut rollout = Rollout {
        times: times.to_vec(),
        states: Vec::new(),
        dim: n,
        step_t: Vec::new(),
        step_h: Vec::new(),
        stages: Vec::new(),
        steps_before: vec![0],
    };
    for w in times.windows(2) {
        let steps = cfg.steps_for(w[1] - w[0]);
        let h = (w[1] - w[0]) / steps as f64;
        for s in 0..steps {
            let t = w[0] + s as f64 * h;
            ws.step(field, &mut x, t, h, Some(&mut rollout.stages))?;
            rollout.step_t.push(t);
            rollout.step_h.push(h);
        }
        rollout.steps_before.push(rollout.step_t.len());
        states.push(x.clone());
    }
    rollout.states = states;
    Ok(rollout)
}

/// Reverse pass through a recorded rollout.
///
/// `state_cot[j]` is the cotangent on `states[j]`; an empty vector stands
/// for zero. Parameter cotangents accumulate into `theta_bar`; the
/// cotangent on `x0` is returned.
pub fn backprop<F: DiffField + ?Sized>(
    field: &F,
    rollout: &Rollout,
    state_cot: &[Vec<f64>],
    theta_bar: &mut F::Tangent,
) -> Vec<f64> {
    let n = rollout.dim;
    assert_eq!(state_cot.len(), rollout.states.len(), "one cotangent per output state");
    let mut x_bar = vec![0.0; n];
    let add = |acc: &mut [f64], c: &[f64]| {
        if !c.is_empty() {
            for (a, v) in acc.iter_mut().zip(c) {
                *a += v;
            }
        }
    };
    let mut kb = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut z = vec![0.0; n];
    for j in (1..rollout.states.len()).rev() {
        add(&mut x_bar, &state_cot[j]);
        for step in (rollout.steps_before[j - 1]..rollout.steps_before[j]).rev() {
            let t = rollout.step_t[step];
            let h = rollout.step_h[step];
            for i in 0..n {
                kb[0][i] = h / 6.0 * x_bar[i];
                kb[1][i] = h / 3.0 * x_bar[i];
                kb[2][i] = h / 3.0 * x_bar[i];
                kb[3][i] = h / 6.0 * x_bar[i];
            }
            let stage_t = [t, t + 0.5 * h, t + 0.5 * h, t + h];
            // stage s input = x_n + c_s h k_{s-1}
            let feed = [0.0, 0.5 * h, 0.5 * h, h];
            for s in (0..4).rev() {
                z.iter_mut().for_each(|v| *v = 0.0);
                field.vjp(rollout.stage(step, s), stage_t[s], &kb[s], &mut z, theta_bar);
                for i in 0..n {
                    x_bar[i] += z[i];
                }
                if s > 0 {
                    for i in 0..n {
                        kb[s - 1][i] += feed[s] * z[i];
                    }
                }
            }
        }
    }
    add(&mut x_bar, &state_cot[0]);
    x_bar
}
