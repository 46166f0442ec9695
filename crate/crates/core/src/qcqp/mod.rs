//! The chance-constrained learning program for the output weights:
//!
//! ```text
//! minimize   (1 / 2 sigma^2) sum_k ||x_{k+1} - W^T g_k||^2 + mu_W ||W||_F^2
//! subject to (W^T g_i - o_i)^T S_i (W^T g_i - o_i) <= b_i   for every sample i
//! ```
//!
//! and its assembly from a dataset, a model and a set of sample states.

mod solver;

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    theorem1_margins, ConstraintSpecs, ConstraintTag, Margins, QuadConstraint, VarianceBasis, XI_CAP,
};
use crate::elm::{ElmModel, InputVector};
use crate::error::{check_dim, Error, InfeasiblePoint, Result};
use crate::linalg::{check_spd, from_row_major, to_row_major};
use crate::sampler::SampleSet;

pub use solver::solve;

#[derive(Debug, Clone, PartialEq)]
pub struct QcqpProblem {
    /// One feature vector `g(s_k)` per row.
    pub features: DMatrix<f64>,
    /// One next state `x_{k+1}` per row.
    pub targets: DMatrix<f64>,
    pub sigma: f64,
    pub mu_w: f64,
    pub constraints: Vec<QuadConstraint>,
}

impl QcqpProblem {
    pub fn new(
        features: DMatrix<f64>,
        targets: DMatrix<f64>,
        sigma: f64,
        mu_w: f64,
        constraints: Vec<QuadConstraint>,
    ) -> Result<Self> {
        let problem = QcqpProblem {
            features,
            targets,
            sigma,
            mu_w,
            constraints,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.features.nrows(), self.targets.nrows(), "feature/target rows")?;
        if self.features.ncols() == 0 || self.targets.ncols() == 0 {
            return Err(Error::InvalidInput("empty feature or state dimension".into()));
        }
        if !(self.mu_w > 0.0) || !self.mu_w.is_finite() {
            return Err(Error::InvalidInput(format!("mu_w must be > 0, got {}", self.mu_w)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.features.iter().chain(self.targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite training data".into()));
        }
        let (p, n) = self.weight_shape();
        for c in &self.constraints {
            check_spd(&c.shape, n, "constraint shape")?;
            check_dim(n, c.offset.len(), "constraint offset")?;
            check_dim(p, c.feature.len(), "constraint feature")?;
            if !c.bound.is_finite() {
                return Err(Error::InvalidInput("constraint bound not finite".into()));
            }
        }
        Ok(())
    }

    /// Shape `(n_h + 1, n)` of the decision matrix `W`.
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.features.ncols(), self.targets.ncols())
    }

    /// Weight `kappa` of the data term `(kappa / 2) sum ||x_{k+1} - W^T g_k||^2`:
    /// `1 / sigma^2`, or 1 for a noise-free model.
    pub fn data_weight(&self) -> f64 {
        if self.sigma > 0.0 {
            1.0 / (self.sigma * self.sigma)
        } else {
            1.0
        }
    }

    pub fn objective(&self, weights: &DMatrix<f64>) -> f64 {
        let residual = &self.targets - &self.features * weights;
        0.5 * self.data_weight() * residual.norm_squared() + self.mu_w * weights.norm_squared()
    }

    /// Minimizer of the objective without constraints.
    pub fn ridge_solution(&self) -> Result<DMatrix<f64>> {
        ridge_weights(&self.features, &self.targets, self.sigma, self.mu_w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)?;
        file.into_problem()
    }
}

/// Closed-form ridge regression `(kappa G^T G + 2 mu I) W = kappa G^T X`.
pub fn ridge_weights(features: &DMatrix<f64>, targets: &DMatrix<f64>, sigma: f64, mu_w: f64) -> Result<DMatrix<f64>> {
    check_dim(features.nrows(), targets.nrows(), "feature/target rows")?;
    let kappa = if sigma > 0.0 { 1.0 / (sigma * sigma) } else { 1.0 };
    let p = features.ncols();
    let lhs = features.tr_mul(features) * kappa + DMatrix::identity(p, p) * (2.0 * mu_w);
    let rhs = features.tr_mul(targets) * kappa;
    lhs.cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| Error::Numerical("ridge normal equations not positive definite".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol_feas: f64,
    /// Relative duality-gap tolerance: stop once `m / t <= tol_gap max(1, |f|)`.
    pub tol_gap: f64,
    /// Cap on Newton steps over both phases.
    pub max_iters: usize,
    /// Backtracking line-search shrink factor.
    pub step_backtrack: f64,
    /// Factor by which the barrier parameter grows between centering steps.
    pub barrier_growth: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol_feas: 1e-8,
            tol_gap: 1e-8,
            max_iters: 200,
            step_backtrack: 0.5,
            barrier_growth: 3.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_feas > 0.0) || !(self.tol_gap > 0.0) {
            return Err(Error::InvalidInput("solver tolerances must be > 0".into()));
        }
        if !(self.step_backtrack > 0.0 && self.step_backtrack < 1.0) {
            return Err(Error::InvalidInput(format!(
                "step_backtrack must be in (0, 1), got {}",
                self.step_backtrack
            )));
        }
        if !(self.barrier_growth > 1.0) || !self.barrier_growth.is_finite() {
            return Err(Error::InvalidInput("barrier_growth must be > 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIters,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIters => "max-iters",
        })
    }
}

/// One line of the solver log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    pub phase: u8,
    pub iteration: usize,
    pub objective: f64,
    pub gap: f64,
    pub max_violation: f64,
    pub step: f64,
}

impl std::fmt::Display for IterationLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "phase={} iter={} objective={:.12e} gap={:.3e} max_violation={:.3e} step={:.3e}",
            self.phase, self.iteration, self.objective, self.gap, self.max_violation, self.step
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub weights: DMatrix<f64>,
    pub objective: f64,
    pub max_constraint_violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// `||Z^T (grad f + sum lambda_i grad phi_i)||` with `Z` spanning the
    /// directions left free by equality-type constraints.
    pub kkt_residual: f64,
    /// Norm of the objective gradient at `weights`.
    pub gradient_norm: f64,
    /// `sum lambda_i (-phi_i)`, relative to `max(1, |objective|)`.
    pub complementarity: f64,
    /// Multiplier estimate per constraint; empty unless optimal.
    pub duals: Vec<f64>,
    /// For infeasible problems: constraint indices with their phase-I
    /// multipliers (a convex combination whose dual bound is positive) or,
    /// for negative bounds, the constraints themselves.
    pub certificate: Vec<(usize, f64)>,
    pub log: Vec<IterationLog>,
}

impl Solution {
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for line in &self.log {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self, problem: &QcqpProblem) -> Result<String> {
        let (p, n) = self.weights.shape();
        let file = SolutionFile {
            status: self.status,
            rows: p,
            cols: n,
            weights: to_row_major(&self.weights),
            objective: self.objective,
            max_constraint_violation: self.max_constraint_violation,
            iterations: self.iterations,
            kkt_residual: self.kkt_residual,
            complementarity: self.complementarity,
            duals: self.duals.clone(),
            certificate: self.certificate.clone(),
            active: check_feasibility(&self.weights, problem)?
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > -1e-6)
                .map(|(i, _)| i)
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `max(0, max_i value_i)`.
    pub max_violation: f64,
    /// `lhs_i - bound_i` per constraint.
    pub values: Vec<f64>,
}

impl FeasibilityReport {
    pub fn violated(&self, tol: f64) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > tol)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn check_feasibility(weights: &DMatrix<f64>, problem: &QcqpProblem) -> Result<FeasibilityReport> {
    let (p, n) = problem.weight_shape();
    check_dim(p, weights.nrows(), "weight rows")?;
    check_dim(n, weights.ncols(), "weight columns")?;
    let values: Vec<f64> = problem.constraints.iter().map(|c| c.value(weights)).collect();
    let max_violation = values.iter().fold(0.0_f64, |m, v| m.max(*v));
    Ok(FeasibilityReport { max_violation, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleOptions {
    pub mu_w: f64,
    /// Reduce every bound by its sampling margin.
    pub margins: bool,
    /// Euclidean resolution used in the margins.
    pub tau_eff: f64,
}

/// Builds the learning program: data term over `(inputs, targets)` and one
/// safety and one stability constraint per distinct sample state. The
/// variance floor is evaluated at `model`'s current output weights.
pub fn assemble(
    model: &ElmModel,
    inputs: &[InputVector],
    targets: &[DVector<f64>],
    specs: &ConstraintSpecs,
    samples: &SampleSet,
    options: &AssembleOptions,
) -> Result<QcqpProblem> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if samples.points.is_empty() {
        return Err(Error::InvalidInput("empty sample set".into()));
    }
    check_dim(inputs.len(), targets.len(), "training pairs")?;
    let n = model.dims().n;
    check_dim(n, specs.dim(), "constraint dimension")?;
    let features = model.feature_matrix(inputs)?;
    let mut target_rows = DMatrix::zeros(targets.len(), n);
    for (k, x) in targets.iter().enumerate() {
        check_dim(n, x.len(), "target")?;
        target_rows.row_mut(k).copy_from(&x.transpose());
    }

    let mut seen = HashSet::new();
    let unique: Vec<&DVector<f64>> = samples
        .points
        .iter()
        .filter(|x| seen.insert(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    let pairs: Vec<[QuadConstraint; 2]> = unique
        .par_iter()
        .map(|x| {
            let mut pair = specs.constraints_at(model, x, Margins::default())?;
            if options.margins {
                subtract_margins(model, specs, &mut pair, x, options.tau_eff)?;
            }
            Ok(pair)
        })
        .collect::<Result<_>>()?;
    let constraints: Vec<QuadConstraint> = pairs.into_iter().flatten().collect();

    let negative: Vec<InfeasiblePoint> = constraints
        .iter()
        .filter(|c| c.is_infeasible_at_point())
        .map(|c| InfeasiblePoint {
            state: c.sample_state.iter().copied().collect(),
            tag: c.tag,
            bound: c.bound,
        })
        .collect();
    if !negative.is_empty() {
        return Err(Error::StructurallyInfeasible { points: negative });
    }
    QcqpProblem::new(features, target_rows, specs.sigma, options.mu_w, constraints)
}

fn subtract_margins(
    model: &ElmModel,
    specs: &ConstraintSpecs,
    pair: &mut [QuadConstraint; 2],
    x: &DVector<f64>,
    tau_eff: f64,
) -> Result<()> {
    let m = theorem1_margins(
        model,
        &specs.safety,
        &specs.stability,
        specs.sigma,
        pair[0].risk_coeff,
        pair[1].risk_coeff,
        x,
        tau_eff,
    )?;
    pair[0].bound -= m.safety;
    pair[1].bound -= m.stability;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub assemble: AssembleOptions,
    pub solver: SolverConfig,
    /// Re-solves allowed for raising the variance-floor scale.
    pub xi_rounds: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ElmModel,
    pub problem: QcqpProblem,
    pub solution: Solution,
    /// Number of solves performed.
    pub solves: usize,
    /// Every constraint satisfies `xi^2 Var >= 1` (or `Var >= 1`) at the
    /// returned weights.
    pub variance_floor_ok: bool,
}

/// Full learning step: ridge warm start, assembly, solve, then repeated
/// tightening of constraints whose variance floor fails at the solution.
pub fn train(
    model: &ElmModel,
    inputs: &[InputVector],
    targets: &[DVector<f64>],
    specs: &ConstraintSpecs,
    samples: &SampleSet,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    options.solver.validate()?;
    let features = model.feature_matrix(inputs)?;
    let target_rows = DMatrix::from_fn(targets.len(), model.dims().n, |k, j| targets[k][j]);
    let ridge = ridge_weights(&features, &target_rows, specs.sigma, options.assemble.mu_w)?;
    let reference = model.with_output_weights(ridge)?;
    let mut problem = assemble(&reference, inputs, targets, specs, samples, &options.assemble)?;
    let mut solution = solve(&problem, &options.solver)?;
    let mut solves = 1;
    let mut floor_ok = floor_violations(&problem, &solution.weights, specs).is_empty();

    while solution.status == SolveStatus::Optimal && !floor_ok && solves <= options.xi_rounds {
        let raise = floor_violations(&problem, &solution.weights, specs);
        log::info!("variance floor fails at {} constraints; tightening", raise.len());
        for (i, xi) in raise {
            let c = &problem.constraints[i];
            let feature = crate::elm::FeatureVector::new(&c.feature.as_slice()[..c.feature.len() - 1])?;
            let basis = VarianceBasis::Xi(xi);
            let mut pair = specs.pair_with(&c.sample_state, &feature, Margins::default(), [&basis, &basis])?;
            if options.assemble.margins {
                subtract_margins(&reference, specs, &mut pair, &c.sample_state, options.assemble.tau_eff)?;
            }
            let slot = if c.tag == ConstraintTag::Safety { 0 } else { 1 };
            let rebuilt = pair[slot].clone();
            if rebuilt.is_infeasible_at_point() {
                return Err(Error::StructurallyInfeasible {
                    points: vec![InfeasiblePoint {
                        state: rebuilt.sample_state.iter().copied().collect(),
                        tag: rebuilt.tag,
                        bound: rebuilt.bound,
                    }],
                });
            }
            problem.constraints[i] = rebuilt;
        }
        solution = solve(&problem, &options.solver)?;
        solves += 1;
        log::debug!("solve {solves}: {} after {} iteration(s)", solution.status, solution.iterations);
        floor_ok = floor_violations(&problem, &solution.weights, specs).is_empty();
    }
    if !floor_ok {
        log::warn!("variance floor still fails at some constraints after {solves} solve(s)");
    }
    let trained = model.with_output_weights(solution.weights.clone())?;
    if !trained.output_bound_satisfied() {
        log::warn!(
            "||W||_F = {:.4e} exceeds the configured bound {:.4e}",
            trained.output_weights().norm(),
            trained.weight_bound_out()
        );
    }
    Ok(TrainOutcome {
        model: trained,
        problem,
        solution,
        solves,
        variance_floor_ok: floor_ok,
    })
}

/// Constraints whose scale `xi` is below the floor `1 / sqrt(Var)` at
/// `weights`, with the scale they need.
fn floor_violations(problem: &QcqpProblem, weights: &DMatrix<f64>, specs: &ConstraintSpecs) -> Vec<(usize, f64)> {
    if specs.sigma == 0.0 || specs.risk.p_k <= 0.5 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, c) in problem.constraints.iter().enumerate() {
        let mean = weights.tr_mul(&c.feature);
        let moments = match c.tag {
            ConstraintTag::Safety => crate::constraints::safety_moments(&specs.safety, &mean, specs.sigma, &c.sample_state),
            ConstraintTag::Stability => {
                crate::constraints::stability_moments(&specs.stability, &mean, specs.sigma, &c.sample_state)
            }
        };
        if moments.variance >= 1.0 || c.xi >= XI_CAP {
            continue;
        }
        let needed = (1.0 / moments.variance.max(0.0).sqrt()).max(specs.risk.xi).min(XI_CAP);
        if c.xi < needed * (1.0 - 1e-9) {
            // Overshoot slightly so repeated rounds settle quickly.
            out.push((i, (needed * 1.05).min(XI_CAP)));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ConstraintFile {
    tag: ConstraintTag,
    sample_state: Vec<f64>,
    feature: Vec<f64>,
    shape: Vec<f64>,
    offset: Vec<f64>,
    bound: f64,
    risk_coeff: f64,
    xi: f64,
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    rows: usize,
    feature_len: usize,
    state_dim: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
    sigma: f64,
    mu_w: f64,
    constraints: Vec<ConstraintFile>,
}

impl From<&QcqpProblem> for ProblemFile {
    fn from(p: &QcqpProblem) -> Self {
        ProblemFile {
            rows: p.features.nrows(),
            feature_len: p.features.ncols(),
            state_dim: p.targets.ncols(),
            features: to_row_major(&p.features),
            targets: to_row_major(&p.targets),
            sigma: p.sigma,
            mu_w: p.mu_w,
            constraints: p
                .constraints
                .iter()
                .map(|c| ConstraintFile {
                    tag: c.tag,
                    sample_state: c.sample_state.iter().copied().collect(),
                    feature: c.feature.iter().copied().collect(),
                    shape: to_row_major(&c.shape),
                    offset: c.offset.iter().copied().collect(),
                    bound: c.bound,
                    risk_coeff: c.risk_coeff,
                    xi: c.xi,
                })
                .collect(),
        }
    }
}

impl ProblemFile {
    fn into_problem(self) -> Result<QcqpProblem> {
        let n = self.state_dim;
        let constraints = self
            .constraints
            .into_iter()
            .map(|c| {
                Ok(QuadConstraint {
                    shape: from_row_major(n, n, &c.shape, "constraint shape")?,
                    offset: DVector::from_vec(c.offset),
                    bound: c.bound,
                    feature: DVector::from_vec(c.feature),
                    tag: c.tag,
                    sample_state: DVector::from_vec(c.sample_state),
                    risk_coeff: c.risk_coeff,
                    xi: c.xi,
                })
            })
            .collect::<Result<_>>()?;
        QcqpProblem::new(
            from_row_major(self.rows, self.feature_len, &self.features, "features")?,
            from_row_major(self.rows, n, &self.targets, "targets")?,
            self.sigma,
            self.mu_w,
            constraints,
        )
    }
}

#[derive(Serialize)]
struct SolutionFile {
    status: SolveStatus,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    objective: f64,
    max_constraint_violation: f64,
    iterations: usize,
    kkt_residual: f64,
    complementarity: f64,
    duals: Vec<f64>,
    certificate: Vec<(usize, f64)>,
    active: Vec<usize>,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
