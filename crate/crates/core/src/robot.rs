//! Two-link planar manipulator with point masses at the link ends, driven to
//! a joint-space set point by a PID controller with gravity compensation.
//! Used to produce position-only training trajectories.
//!
//! ```text
//! M(q) qdd + C(q, qd) qd + G(q) = u
//! ```
//!
//! Joint angles are absolute for the first link and relative for the
//! second, measured from the horizontal.

use nalgebra::{DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{barrier_value, SafetySpec};
use crate::dataset::TrajectoryDataset;
use crate::error::{check_dim, Error, Result};

/// Largest admissible joint angle magnitude (rad).
pub const JOINT_LIMIT: f64 = 1.90;

/// Largest admissible final distance to the set point (rad).
pub const CONVERGENCE_TOL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLinkParams {
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    pub gravity: f64,
    /// Integration step (s).
    pub dt: f64,
}

impl Default for TwoLinkParams {
    fn default() -> Self {
        TwoLinkParams {
            l1: 1.0,
            l2: 1.0,
            m1: 1.0,
            m2: 1.0,
            gravity: 9.81,
            dt: 1e-3,
        }
    }
}

impl TwoLinkParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.l1, self.l2, self.m1, self.m2, self.dt];
        if fields.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "link lengths, masses and dt must be positive: {self:?}"
            )));
        }
        if !(self.gravity >= 0.0) || !self.gravity.is_finite() {
            return Err(Error::InvalidInput(format!("gravity must be >= 0, got {}", self.gravity)));
        }
        Ok(())
    }

    pub fn mass_matrix(&self, q: &Vector2<f64>) -> Matrix2<f64> {
        let c2 = q[1].cos();
        let l12 = self.m2 * self.l1 * self.l2;
        let m22 = self.m2 * self.l2 * self.l2;
        let m12 = m22 + l12 * c2;
        let m11 = (self.m1 + self.m2) * self.l1 * self.l1 + m22 + 2.0 * l12 * c2;
        Matrix2::new(m11, m12, m12, m22)
    }

    /// Coriolis and centrifugal torques `C(q, qd) qd`.
    pub fn coriolis(&self, q: &Vector2<f64>, qd: &Vector2<f64>) -> Vector2<f64> {
        let h = self.m2 * self.l1 * self.l2 * q[1].sin();
        Vector2::new(-h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]), h * qd[0] * qd[0])
    }

    pub fn gravity_torque(&self, q: &Vector2<f64>) -> Vector2<f64> {
        let outer = self.m2 * self.gravity * self.l2 * (q[0] + q[1]).cos();
        Vector2::new((self.m1 + self.m2) * self.gravity * self.l1 * q[0].cos() + outer, outer)
    }

    /// `0.5 qd^T M(q) qd`.
    pub fn kinetic_energy(&self, q: &Vector2<f64>, qd: &Vector2<f64>) -> f64 {
        0.5 * qd.dot(&(self.mass_matrix(q) * qd))
    }
}

/// Joint accelerations `M(q)^{-1} (u - C(q, qd) qd - G(q))`.
pub fn el_dynamics(
    params: &TwoLinkParams,
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
    u: &Vector2<f64>,
) -> Result<Vector2<f64>> {
    let rhs = u - params.coriolis(q, qd) - params.gravity_torque(q);
    params
        .mass_matrix(q)
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Numerical(format!("mass matrix singular at q = {q:?}")))
}

/// One classical Runge-Kutta step of `x' = f(x)`.
pub fn rk4_step<const N: usize>(
    x: &nalgebra::SVector<f64, N>,
    dt: f64,
    f: impl Fn(&nalgebra::SVector<f64, N>) -> Result<nalgebra::SVector<f64, N>>,
) -> Result<nalgebra::SVector<f64, N>> {
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * dt)))?;
    let k3 = f(&(x + k2 * (0.5 * dt)))?;
    let k4 = f(&(x + k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: [f64; 2],
    pub ki: [f64; 2],
    pub kd: [f64; 2],
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: [60.0; 2],
            ki: [5.0; 2],
            kd: [20.0; 2],
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        let all = self.kp.iter().chain(&self.ki).chain(&self.kd);
        if all.clone().any(|v| !v.is_finite()) || self.kp.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput(format!("PID gains must be finite with kp >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Closed-loop state `[q, qd, integral of (target - q)]`.
type Closed = nalgebra::SVector<f64, 6>;

fn closed_loop(params: &TwoLinkParams, gains: &PidGains, target: &Vector2<f64>, s: &Closed) -> Result<Closed> {
    let q = Vector2::new(s[0], s[1]);
    let qd = Vector2::new(s[2], s[3]);
    let err = target - q;
    let pid = Vector2::from_fn(|j, _| gains.kp[j] * err[j] + gains.ki[j] * s[4 + j] - gains.kd[j] * qd[j]);
    let u = pid + params.gravity_torque(&q);
    let qdd = el_dynamics(params, &q, &qd, &u)?;
    Ok(Closed::from_column_slice(&[qd[0], qd[1], qdd[0], qdd[1], err[0], err[1]]))
}

/// Simulates the PID loop from rest at `initial` and records the joint
/// angles every `period` seconds, `steps + 1` samples in total.
pub fn simulate_pid(
    params: &TwoLinkParams,
    gains: &PidGains,
    initial: &Vector2<f64>,
    target: &Vector2<f64>,
    steps: usize,
    period: f64,
) -> Result<Vec<Vector2<f64>>> {
    params.validate()?;
    gains.validate()?;
    if !(period > 0.0) || !period.is_finite() {
        return Err(Error::InvalidInput(format!("period must be positive, got {period}")));
    }
    let substeps = (period / params.dt).round().max(1.0) as usize;
    let dt = period / substeps as f64;
    let mut s = Closed::zeros();
    s[0] = initial[0];
    s[1] = initial[1];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(*initial);
    for _ in 0..steps {
        for _ in 0..substeps {
            s = rk4_step(&s, dt, |x| closed_loop(params, gains, target, x))?;
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("simulation diverged".into()));
        }
        out.push(Vector2::new(s[0], s[1]));
    }
    Ok(out)
}

/// Where a generated trajectory must stay.
#[derive(Debug, Clone, Default)]
pub struct GenerationLimits<'a> {
    /// Every sample must satisfy `h >= 0` for this barrier, if given.
    pub safe_set: Option<&'a SafetySpec>,
}

fn check_trajectory(
    samples: &[Vector2<f64>],
    target: &Vector2<f64>,
    limits: &GenerationLimits,
) -> std::result::Result<(), String> {
    for (k, q) in samples.iter().enumerate() {
        if q.iter().any(|v| v.abs() > JOINT_LIMIT) {
            return Err(format!("sample {k} at {:?} exceeds the joint limit {JOINT_LIMIT}", q.as_slice()));
        }
        if let Some(spec) = limits.safe_set {
            let h = barrier_value(spec, &DVector::from_column_slice(q.as_slice()));
            if h < 0.0 {
                return Err(format!("sample {k} at {:?} leaves the safe set (h = {h:.3e})", q.as_slice()));
            }
        }
    }
    let last = samples.last().expect("at least the initial sample");
    let dist = (last - target).norm();
    if dist > CONVERGENCE_TOL {
        return Err(format!("final distance {dist:.3e} rad exceeds {CONVERGENCE_TOL}"));
    }
    Ok(())
}

/// One PID trajectory per initial condition, simulated in parallel. Each run
/// must converge to `target`, respect the joint limits and stay in the safe
/// set; otherwise the first failing initial condition is reported.
#[allow(clippy::too_many_arguments)]
pub fn generate_robot_data(
    params: &TwoLinkParams,
    gains: &PidGains,
    initial_conditions: &[Vector2<f64>],
    target: &Vector2<f64>,
    steps: usize,
    period: f64,
    limits: &GenerationLimits,
) -> Result<TrajectoryDataset> {
    if initial_conditions.is_empty() {
        return Err(Error::InvalidInput("no initial conditions".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be >= 1".into()));
    }
    if let Some(spec) = limits.safe_set {
        check_dim(2, spec.dim(), "safe set dimension")?;
    }
    let runs: Vec<Vec<Vector2<f64>>> = initial_conditions
        .par_iter()
        .map(|q0| {
            let samples = simulate_pid(params, gains, q0, target, steps, period).map_err(|e| Error::Generation {
                initial: q0.as_slice().to_vec(),
                reason: e.to_string(),
            })?;
            check_trajectory(&samples, target, limits).map_err(|reason| Error::Generation {
                initial: q0.as_slice().to_vec(),
                reason,
            })?;
            Ok(samples)
        })
        .collect::<Result<_>>()?;
    let demos = runs
        .into_iter()
        .map(|run| run.iter().map(|q| DVector::from_column_slice(q.as_slice())).collect())
        .collect();
    TrajectoryDataset::new(demos, DVector::from_column_slice(target.as_slice()), period)
}

/// Draws initial conditions uniformly inside the safe ellipse with
/// `h >= min_barrier` and keeps those whose PID trajectory passes every
/// check of [`generate_robot_data`], until `count` are found.
#[allow(clippy::too_many_arguments)]
pub fn sample_initial_conditions(
    params: &TwoLinkParams,
    gains: &PidGains,
    safety: &SafetySpec,
    target: &Vector2<f64>,
    count: usize,
    steps: usize,
    period: f64,
    min_barrier: f64,
    seed: u64,
) -> Result<Vec<Vector2<f64>>> {
    check_dim(2, safety.dim(), "safe set dimension")?;
    if !(0.0..1.0).contains(&min_barrier) {
        return Err(Error::InvalidInput(format!("min_barrier must be in [0, 1), got {min_barrier}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = safety.bounding_half_widths();
    let c = safety.center();
    let limits = GenerationLimits { safe_set: Some(safety) };
    let max_attempts = 1000 * count.max(1);
    let mut accepted = Vec::with_capacity(count);
    for _ in 0..max_attempts {
        if accepted.len() == count {
            break;
        }
        let q0 = Vector2::new(
            rng.random_range(c[0] - half[0]..c[0] + half[0]),
            rng.random_range(c[1] - half[1]..c[1] + half[1]),
        );
        if barrier_value(safety, &DVector::from_column_slice(q0.as_slice())) < min_barrier {
            continue;
        }
        let Ok(samples) = simulate_pid(params, gains, &q0, target, steps, period) else {
            continue;
        };
        if check_trajectory(&samples, target, &limits).is_ok() {
            accepted.push(q0);
        }
    }
    if accepted.len() < count {
        return Err(Error::Generation {
            initial: vec![],
            reason: format!("only {} of {count} sampled initial conditions produced valid trajectories", accepted.len()),
        });
    }
    Ok(accepted)
}
