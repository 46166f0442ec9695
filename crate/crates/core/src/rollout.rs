//! Trajectory reproduction from a learned model, Monte Carlo perturbation
//! studies and a one-step audit of the barrier and Lyapunov conditions.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{barrier_value, lyapunov_value, ConstraintSpecs, Margins, SafetySpec, StabilitySpec};
use crate::elm::{ElmModel, InputVector};
use crate::error::{check_dim, Error, Result};
use crate::sampler::SampleSet;

/// States with a larger norm count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Add the model's Gaussian noise at every step.
    pub noise: bool,
    pub initial_perturbation_radius: f64,
    pub mc_runs: usize,
    pub convergence_radius: f64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            horizon: 1000,
            noise: false,
            initial_perturbation_radius: 5e-4,
            mc_runs: 100,
            convergence_radius: 0.05,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_runs == 0 {
            return Err(Error::InvalidInput("mc_runs must be >= 1".into()));
        }
        if !(self.initial_perturbation_radius >= 0.0) || !self.initial_perturbation_radius.is_finite() {
            return Err(Error::InvalidInput("initial_perturbation_radius must be >= 0".into()));
        }
        if !(self.convergence_radius > 0.0) || !self.convergence_radius.is_finite() {
            return Err(Error::InvalidInput("convergence_radius must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `horizon + 1` states unless the run diverged.
    pub states: Vec<DVector<f64>>,
    pub diverged: bool,
}

/// Iterates the model from `x0` for `config.horizon` steps, with the error
/// input measured from `equilibrium`. With noise on, the draws come from
/// `rng`. A non-finite or huge state ends the run early and sets `diverged`.
pub fn rollout_with<R: Rng + ?Sized>(
    model: &ElmModel,
    x0: &DVector<f64>,
    equilibrium: &DVector<f64>,
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<Trajectory> {
    check_dim(model.dims().n, x0.len(), "initial state")?;
    check_dim(model.dims().n, equilibrium.len(), "equilibrium")?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state not finite".into()));
    }
    let noise = if config.noise { model.noise() } else { crate::elm::NoiseSpec { sigma: 0.0 } };
    let mut states = Vec::with_capacity(config.horizon + 1);
    states.push(x0.clone());
    for _ in 0..config.horizon {
        let x = states.last().expect("non-empty");
        let next = model.predict_stochastic_with(&InputVector::from_state(x, equilibrium), noise, rng)?;
        if next.iter().any(|v| !v.is_finite()) || next.norm() > DIVERGENCE_NORM {
            return Ok(Trajectory { states, diverged: true });
        }
        states.push(next);
    }
    Ok(Trajectory { states, diverged: false })
}

/// [`rollout_with`] using a generator seeded from `config.seed`.
pub fn rollout(model: &ElmModel, x0: &DVector<f64>, equilibrium: &DVector<f64>, config: &RolloutConfig) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rollout_with(model, x0, equilibrium, config, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub initial: Vec<f64>,
    pub min_barrier: f64,
    pub final_distance: f64,
    pub violation: bool,
    pub converged: bool,
    pub diverged: bool,
    /// First step after which the state stays within the convergence radius.
    pub steps_to_converge: Option<usize>,
    /// Largest `V(x+) - (1 - rho) V(x) - delta` along the run.
    pub max_lyapunov_excess: f64,
    /// Steps where that quantity is positive.
    pub lyapunov_exceedances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub runs: Vec<RunSummary>,
    pub violation_count: usize,
    pub converged_count: usize,
    pub diverged_count: usize,
    pub max_final_distance: f64,
    /// Mean over converged runs; `None` when no run converged.
    pub mean_steps_to_converge: Option<f64>,
    pub config: RolloutConfig,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

impl RolloutReport {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes one `{run_id}.csv` per run into `dir` with columns
    /// `step, x0.., h, V`.
    pub fn write_runs(&self, dir: &Path, safety: &SafetySpec, stability: &StabilitySpec) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, traj) in self.trajectories.iter().enumerate() {
            let path = dir.join(format!("run_{i:03}.csv"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut out = std::io::BufWriter::new(file);
            let n = safety.dim();
            let cols: Vec<String> = (0..n).map(|j| format!("x{j}")).collect();
            writeln!(out, "step,{},h,V", cols.join(",")).map_err(|e| Error::io(&path, e))?;
            for (k, x) in traj.states.iter().enumerate() {
                let vals: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                writeln!(
                    out,
                    "{k},{},{},{}",
                    vals.join(","),
                    barrier_value(safety, x),
                    lyapunov_value(stability, x)
                )
                .map_err(|e| Error::io(&path, e))?;
            }
            out.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Uniform draw from the ball of `radius` around `center`.
fn perturb<R: Rng + ?Sized>(center: &DVector<f64>, radius: f64, rng: &mut R) -> DVector<f64> {
    if radius == 0.0 {
        return center.clone();
    }
    let n = center.len();
    let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return center.clone();
    }
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    center + dir * (r / norm)
}

/// Summary statistics of one trajectory.
pub fn summarize_run(
    run: usize,
    traj: &Trajectory,
    safety: &SafetySpec,
    stability: &StabilitySpec,
    convergence_radius: f64,
) -> RunSummary {
    let eq = stability.equilibrium();
    let min_barrier = traj.states.iter().map(|x| barrier_value(safety, x)).fold(f64::INFINITY, f64::min);
    let last = traj.states.last().expect("non-empty");
    let final_distance = if traj.diverged { f64::INFINITY } else { (last - eq).norm() };
    let converged = final_distance <= convergence_radius;
    let steps_to_converge = converged.then(|| {
        traj.states
            .iter()
            .rposition(|x| (x - eq).norm() > convergence_radius)
            .map_or(0, |k| k + 1)
    });
    let excess: Vec<f64> = traj
        .states
        .windows(2)
        .map(|w| {
            lyapunov_value(stability, &w[1]) - (1.0 - stability.rho()) * lyapunov_value(stability, &w[0])
                - stability.delta()
        })
        .collect();
    RunSummary {
        run,
        initial: traj.states[0].iter().copied().collect(),
        min_barrier,
        final_distance,
        violation: min_barrier < 0.0 || traj.diverged,
        converged,
        diverged: traj.diverged,
        steps_to_converge,
        max_lyapunov_excess: excess.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        lyapunov_exceedances: excess.iter().filter(|v| **v > 0.0).count(),
    }
}

/// Runs `config.mc_runs` rollouts. Run `i` starts from a uniform draw in the
/// ball of radius `initial_perturbation_radius` around
/// `nominal_x0[i % nominal_x0.len()]` and owns a generator derived from
/// `(config.seed, i)`, so the report does not depend on scheduling.
pub fn monte_carlo_verify(
    model: &ElmModel,
    safety: &SafetySpec,
    stability: &StabilitySpec,
    nominal_x0: &[DVector<f64>],
    config: &RolloutConfig,
) -> Result<RolloutReport> {
    config.validate()?;
    if nominal_x0.is_empty() {
        return Err(Error::InvalidInput("no nominal initial states".into()));
    }
    check_dim(safety.dim(), stability.equilibrium().len(), "stability dimension")?;
    for x in nominal_x0 {
        if barrier_value(safety, x) < 0.0 {
            log::warn!("nominal initial state {:?} lies outside the safe set", x.as_slice());
        }
    }
    let eq = stability.equilibrium();
    let trajectories: Vec<Trajectory> = (0..config.mc_runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let x0 = perturb(&nominal_x0[i % nominal_x0.len()], config.initial_perturbation_radius, &mut rng);
            rollout_with(model, &x0, eq, config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let runs: Vec<RunSummary> = trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| summarize_run(i, t, safety, stability, config.convergence_radius))
        .collect();
    let steps: Vec<f64> = runs.iter().filter_map(|r| r.steps_to_converge.map(|s| s as f64)).collect();
    Ok(RolloutReport {
        violation_count: runs.iter().filter(|r| r.violation).count(),
        converged_count: runs.iter().filter(|r| r.converged).count(),
        diverged_count: runs.iter().filter(|r| r.diverged).count(),
        max_final_distance: runs.iter().map(|r| r.final_distance).fold(0.0, f64::max),
        mean_steps_to_converge: (!steps.is_empty()).then(|| steps.iter().sum::<f64>() / steps.len() as f64),
        runs,
        config: *config,
        trajectories,
    })
}

/// One row of [`one_step_constraint_audit`], evaluated at the mean prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub state: Vec<f64>,
    pub barrier: f64,
    /// `h(x+) - h(x) + gamma h(x)`.
    pub barrier_condition: f64,
    pub lyapunov: f64,
    /// `V(x+) - V(x) + rho V(x)`.
    pub lyapunov_condition: f64,
    /// Value `lhs - bound` of the tightened safety constraint; `<= 0` holds.
    pub safety_value: f64,
    pub stability_value: f64,
    pub barrier_failure: bool,
    pub lyapunov_failure: bool,
    pub safety_failure: bool,
    pub stability_failure: bool,
}

impl AuditRow {
    pub fn failed(&self) -> bool {
        self.barrier_failure || self.lyapunov_failure || self.safety_failure || self.stability_failure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub rows: Vec<AuditRow>,
    pub tolerance: f64,
    pub failures: usize,
}

impl Audit {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let n = self.rows.first().map_or(0, |r| r.state.len());
        let mut header: Vec<String> = (0..n).map(|j| format!("x{j}")).collect();
        header.extend(
            [
                "h",
                "barrier_condition",
                "V",
                "lyapunov_condition",
                "safety_value",
                "stability_value",
                "failed",
            ]
            .map(String::from),
        );
        let io = |e: csv::Error| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        out.write_record(&header).map_err(io)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.state.iter().map(|v| v.to_string()).collect();
            rec.extend(
                [
                    r.barrier,
                    r.barrier_condition,
                    r.lyapunov,
                    r.lyapunov_condition,
                    r.safety_value,
                    r.stability_value,
                ]
                .map(|v| v.to_string()),
            );
            rec.push(r.failed().to_string());
            out.write_record(&rec).map_err(io)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Checks the one-step conditions at every state under the mean dynamics:
/// the barrier condition `h(x+) - (1 - gamma) h(x) >= 0`, the relaxed
/// Lyapunov condition `V(x+) - (1 - rho) V(x) <= delta`, and the tightened
/// quadratic constraints (no sampling margin). Each is flagged when it fails
/// by more than `tol`.
pub fn one_step_constraint_audit(model: &ElmModel, specs: &ConstraintSpecs, states: &SampleSet, tol: f64) -> Result<Audit> {
    if states.points.is_empty() {
        return Err(Error::InvalidInput("audit needs at least one state".into()));
    }
    let safety = &specs.safety;
    let stability = &specs.stability;
    let w = model.output_weights();
    let rows: Vec<AuditRow> = states
        .points
        .par_iter()
        .map(|x| {
            let next = model.step(x, stability.equilibrium())?;
            let h = barrier_value(safety, x);
            let v = lyapunov_value(stability, x);
            let barrier_condition = barrier_value(safety, &next) - h + safety.gamma() * h;
            let lyapunov_condition = lyapunov_value(stability, &next) - v + stability.rho() * v;
            let [cb, cl] = specs.constraints_at(model, x, Margins::default())?;
            let (safety_value, stability_value) = (cb.value(w), cl.value(w));
            Ok(AuditRow {
                state: x.iter().copied().collect(),
                barrier: h,
                barrier_condition,
                lyapunov: v,
                lyapunov_condition,
                safety_value,
                stability_value,
                barrier_failure: barrier_condition < -tol,
                lyapunov_failure: lyapunov_condition > stability.delta() + tol,
                safety_failure: safety_value > tol,
                stability_failure: stability_value > tol,
            })
        })
        .collect::<Result<_>>()?;
    let failures = rows.iter().filter(|r| r.failed()).count();
    Ok(Audit {
        rows,
        tolerance: tol,
        failures,
    })
}
