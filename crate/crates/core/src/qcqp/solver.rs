//! Primal log-barrier interior-point method for the learning program.
//!
//! Constraints are kept in their quadratic form `phi_i(W) = r_i^T S_i r_i - b_i`
//! with `r_i = W^T g_i - o_i`; the barrier `-log(-phi_i)` equals the
//! second-order-cone barrier of `||S_i^{1/2} r_i|| <= sqrt(b_i)` up to a
//! constant. Constraints with a zero bound force `W^T g_i = o_i` and are
//! eliminated as linear equalities; Newton steps are taken in the null space
//! of those equalities.
//!
//! The decision variable is `vec(W)`, column-major, so entry `(k, j)` of `W`
//! sits at index `k + j p` with `p = n_h + 1`.

use nalgebra::{DMatrix, DVector};

use super::{check_feasibility, IterationLog, QcqpProblem, Solution, SolveStatus, SolverConfig};
use crate::error::{Error, Result};

/// Bounds at or below this magnitude turn a constraint into an equality.
const EQUALITY_BOUND: f64 = 1e-12;
/// Centering stops once half the squared Newton decrement is below this.
const NEWTON_TOL: f64 = 1e-10;
/// Intermediate centerings stop at this half squared decrement; only the
/// last barrier parameter is centered to [`NEWTON_TOL`].
const LOOSE_CENTERING: f64 = 0.1;
/// Centering also stops after this many steps without a smaller decrement.
const STALL_STEPS: usize = 3;
/// Constraints whose barrier multiplier is at least this fraction of the
/// largest one are treated as active when refitting multipliers.
const ACTIVE_FRACTION: f64 = 1e-4;
const ARMIJO: f64 = 0.25;
const MIN_STEP: f64 = 1e-14;
/// Barrier outer-product terms `u_i^2 grad phi_i grad phi_i^T` heavier than
/// this times the rest of the Hessian are kept out of the normal matrix.
const AUGMENT_RATIO: f64 = 1e3;
/// Largest multiple of the Newton step tried by the line search.
const MAX_EXPANSION: f64 = 1024.0;
const LINE_SEARCH_BISECTIONS: usize = 100;
/// A step may shrink no constraint slack `-phi_i` below this fraction.
const BOUNDARY_FRACTION: f64 = 0.3;

struct Objective {
    kappa: f64,
    mu: f64,
    gtg: DMatrix<f64>,
    gtx: DMatrix<f64>,
}

impl Objective {
    fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.gtg * w - &self.gtx) * self.kappa + w * (2.0 * self.mu)
    }

    /// `d^T H d` for a direction `d` given as a matrix.
    fn curvature(&self, d: &DMatrix<f64>) -> f64 {
        self.kappa * d.dot(&(&self.gtg * d)) + 2.0 * self.mu * d.norm_squared()
    }

    fn hessian_block(&self) -> DMatrix<f64> {
        let p = self.gtg.nrows();
        &self.gtg * self.kappa + DMatrix::identity(p, p) * (2.0 * self.mu)
    }
}

/// The inequality constraints, stacked.
struct Inequalities {
    /// Feature vectors, one per row.
    g: DMatrix<f64>,
    shapes: Vec<DMatrix<f64>>,
    offsets: Vec<DVector<f64>>,
    bounds: Vec<f64>,
    /// Position of each constraint in the problem's list.
    index: Vec<usize>,
}

/// Constraint values and the gradient factors `q_i = 2 S_i r_i` at a point.
struct Evaluation {
    phi: Vec<f64>,
    q: DMatrix<f64>,
}

impl Inequalities {
    fn len(&self) -> usize {
        self.bounds.len()
    }

    fn evaluate(&self, w: &DMatrix<f64>) -> Evaluation {
        let n = w.ncols();
        let fitted = &self.g * w;
        let mut phi = Vec::with_capacity(self.len());
        let mut q = DMatrix::zeros(self.len(), n);
        for i in 0..self.len() {
            let r = fitted.row(i).transpose() - &self.offsets[i];
            let sr = &self.shapes[i] * &r;
            phi.push(r.dot(&sr) - self.bounds[i]);
            q.row_mut(i).copy_from(&(sr * 2.0).transpose());
        }
        Evaluation { phi, q }
    }

    fn values(&self, w: &DMatrix<f64>) -> Vec<f64> {
        self.evaluate(w).phi
    }

    /// Coefficients of `phi_i(W + alpha D) - phi_i(W) = alpha a_i + alpha^2 c_i`.
    fn directional(&self, eval: &Evaluation, d: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let delta = &self.g * d;
        let mut a = Vec::with_capacity(self.len());
        let mut c = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let dr = delta.row(i).transpose();
            a.push(eval.q.row(i).transpose().dot(&dr));
            c.push(dr.dot(&(&self.shapes[i] * &dr)));
        }
        (a, c)
    }

    /// `sum_i u_i grad phi_i` as a `p x n` matrix.
    fn weighted_gradient(&self, eval: &Evaluation, u: &[f64]) -> DMatrix<f64> {
        let mut scaled = eval.q.clone();
        for (i, ui) in u.iter().enumerate() {
            scaled.row_mut(i).scale_mut(*ui);
        }
        self.g.tr_mul(&scaled)
    }

    /// Jacobian with rows `vec(grad phi_i)^T`.
    fn jacobian(&self, eval: &Evaluation) -> DMatrix<f64> {
        let (m, p) = self.g.shape();
        let n = eval.q.ncols();
        DMatrix::from_fn(m, p * n, |i, col| self.g[(i, col % p)] * eval.q[(i, col / p)])
    }

    /// `sum_i u2_i grad phi_i grad phi_i^T + sum_i u_i hess phi_i`.
    fn weighted_hessian(&self, eval: &Evaluation, u: &[f64], u2: &[f64]) -> DMatrix<f64> {
        let (m, p) = self.g.shape();
        let n = eval.q.ncols();
        let mut jac = self.jacobian(eval);
        for (i, v) in u2.iter().enumerate() {
            jac.row_mut(i).scale_mut(v.sqrt());
        }
        let mut h = jac.tr_mul(&jac);
        for j in 0..n {
            for l in j..n {
                let mut scaled = self.g.clone();
                for i in 0..m {
                    scaled.row_mut(i).scale_mut(2.0 * u[i] * self.shapes[i][(j, l)]);
                }
                let block = self.g.tr_mul(&scaled);
                let mut target = h.view_mut((j * p, l * p), (p, p));
                target += &block;
                if l != j {
                    let mut mirror = h.view_mut((l * p, j * p), (p, p));
                    mirror += &block;
                }
            }
        }
        h
    }
}

/// Affine set `{vec(W) = base + Z v}` left by the equality constraints.
struct AffineSet {
    /// Orthonormal basis of the free directions; `None` means all of them.
    basis: Option<DMatrix<f64>>,
}

impl AffineSet {
    fn free_dim(&self, d: usize) -> usize {
        self.basis.as_ref().map_or(d, |z| z.ncols())
    }

    fn reduce_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => v.clone(),
            Some(z) => z.tr_mul(v),
        }
    }

    fn reduce_matrix(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.basis {
            None => h.clone(),
            Some(z) => z.tr_mul(&(h * z)),
        }
    }

    fn reduce_matrix_columns(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.basis {
            None => a.clone(),
            Some(z) => z.tr_mul(a),
        }
    }

    fn lift(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            None => v.clone(),
            Some(z) => z * v,
        }
    }
}

/// Equality rows `(e_j (x) g_i)^T vec(W) = o_i[j]`.
fn equality_system(problem: &QcqpProblem, eq: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let (p, n) = problem.weight_shape();
    let mut e = DMatrix::zeros(eq.len() * n, p * n);
    let mut h = DVector::zeros(eq.len() * n);
    for (k, &i) in eq.iter().enumerate() {
        let c = &problem.constraints[i];
        for j in 0..n {
            let row = k * n + j;
            e.view_mut((row, j * p), (1, p)).copy_from(&c.feature.transpose());
            h[row] = c.offset[j];
        }
    }
    (e, h)
}

/// Projects `start` onto `{E w = h}` and returns the projection with a basis
/// of the null space of `E`, or `None` if the equalities are inconsistent.
fn affine_projection(e: &DMatrix<f64>, h: &DVector<f64>, start: &DVector<f64>) -> Option<(DVector<f64>, AffineSet)> {
    let d = e.ncols();
    let rows = e.nrows().max(d);
    let mut padded = DMatrix::zeros(rows, d);
    padded.view_mut((0, 0), e.shape()).copy_from(e);
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, h.len()).copy_from(&(h - e * start));
    let svd = padded.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = rows as f64 * f64::EPSILON * sigma_max.max(f64::MIN_POSITIVE);
    let v_t = svd.v_t.as_ref()?;
    let free: Vec<usize> = (0..d).filter(|&k| svd.singular_values[k] <= tol).collect();
    let correction = svd.solve(&rhs, tol).ok()?;
    let projected = start + correction;
    let residual = (e * &projected - h).amax();
    let scale = 1.0 + h.amax() + e.amax() * projected.amax();
    if residual > 1e-9 * scale {
        return None;
    }
    let basis = DMatrix::from_fn(d, free.len(), |r, k| v_t[(free[k], r)]);
    Some((projected, AffineSet { basis: Some(basis) }))
}

/// Solves an SPD system, adding diagonal jitter if the factorization fails.
fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..10 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            let x = ch.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
        jitter = if jitter == 0.0 { scale * 1e-14 } else { jitter * 100.0 };
    }
    Err(Error::Numerical("Newton system could not be factorized".into()))
}

/// Solves `(H + J^T diag(u2) J) x = rhs`. When `J` has rows, the heavy
/// rank-`k` term is handled through the augmented system
///
/// ```text
/// [ H   J^T        ] [x]   [rhs]
/// [ J   -diag(1/u2)] [y] = [ 0 ]
/// ```
///
/// which stays well conditioned as `u2` grows, unlike the normal matrix.
fn newton_direction(h: &DMatrix<f64>, jt: &DMatrix<f64>, u2: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let k = u2.len();
    if k == 0 {
        return solve_spd(h, rhs);
    }
    let d = h.nrows();
    let mut system = DMatrix::zeros(d + k, d + k);
    system.view_mut((0, 0), (d, d)).copy_from(h);
    for c in 0..k {
        // Unit-norm constraint rows; the multiplier is rescaled accordingly.
        let col = jt.column(c);
        let norm = col.norm();
        if norm == 0.0 {
            system[(d + c, d + c)] = -1.0;
            continue;
        }
        let unit = col / norm;
        system.view_mut((0, d + c), (d, 1)).copy_from(&unit);
        system.view_mut((d + c, 0), (1, d)).copy_from(&unit.transpose());
        system[(d + c, d + c)] = -1.0 / (u2[c] * norm * norm);
    }
    let mut full_rhs = DVector::zeros(d + k);
    full_rhs.rows_mut(0, d).copy_from(rhs);
    match system.lu().solve(&full_rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x.rows(0, d).into_owned()),
        _ => {
            let mut normal = h.clone();
            for c in 0..k {
                let col = jt.column(c).into_owned();
                normal.ger(u2[c], &col, &col, 1.0);
            }
            solve_spd(&normal, rhs)
        }
    }
}

/// Minimizer over `alpha > 0` of the convex centering objective along a
/// direction, `alpha s + alpha^2 k / 2 - sum log(1 - (alpha a_i + alpha^2 c_i) / -phi_i)`,
/// found by bisection on its derivative inside the feasible interval.
fn exact_step(s: f64, k: f64, phi: &[f64], a: &[f64], c: &[f64]) -> f64 {
    // Largest step keeping every slack above a fraction of its current value.
    let mut limit = MAX_EXPANSION;
    for i in 0..phi.len() {
        let room = (1.0 - BOUNDARY_FRACTION) * phi[i];
        let root = if c[i] > 0.0 {
            let disc = (a[i] * a[i] - 4.0 * c[i] * room).sqrt();
            // Stable form of (-a + disc) / (2c).
            -2.0 * room / (a[i] + disc)
        } else if a[i] > 0.0 {
            -room / a[i]
        } else {
            f64::INFINITY
        };
        limit = limit.min(root);
    }
    let slope = |alpha: f64| {
        let mut d = s + alpha * k;
        for i in 0..phi.len() {
            d += (a[i] + 2.0 * alpha * c[i]) / -(phi[i] + alpha * (a[i] + alpha * c[i]));
        }
        d
    };
    let (mut lo, mut hi) = (0.0, limit);
    if slope(hi) <= 0.0 {
        return limit;
    }
    for _ in 0..LINE_SEARCH_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn mat_of(v: &DVector<f64>, p: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(p, n, v.as_slice())
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
}

enum Centering {
    Converged,
    OutOfIterations,
}

struct Run<'a> {
    problem: &'a QcqpProblem,
    config: &'a SolverConfig,
    objective: Objective,
    ineq: Inequalities,
    affine: AffineSet,
    p: usize,
    n: usize,
    iterations: usize,
    log: Vec<IterationLog>,
}

enum PhaseOne {
    Feasible(DMatrix<f64>),
    Infeasible { weights: DMatrix<f64>, certificate: Vec<(usize, f64)> },
    OutOfIterations(DMatrix<f64>),
}

impl Run<'_> {
    fn record(&mut self, phase: u8, objective: f64, gap: f64, max_violation: f64, step: f64) {
        let line = IterationLog {
            phase,
            iteration: self.iterations,
            objective,
            gap,
            max_violation,
            step,
        };
        log::debug!("{line}");
        self.log.push(line);
    }

    /// Minimizes `s + (eps/2)||w - w0||^2` subject to `phi_i(w) <= s`,
    /// stopping as soon as every `phi_i` is negative.
    fn phase_one(&mut self, w0: DMatrix<f64>) -> Result<PhaseOne> {
        let m = self.ineq.len();
        let d = self.p * self.n;
        let mut w = w0.clone();
        let eval = self.ineq.evaluate(&w);
        let worst = max_of(&eval.phi);
        let bound_scale = self.ineq.bounds.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let mut s = worst + (0.1 * worst.abs()).max(1e-6 * (1.0 + bound_scale));
        let curvature: f64 = (0..m)
            .map(|i| 2.0 * self.ineq.shapes[i].trace() * self.ineq.g.row(i).norm_squared())
            .sum::<f64>()
            / (m as f64 * d as f64);
        let eps = 1e-8 * curvature.max(f64::MIN_POSITIVE);
        let mut t: f64 = eval.phi.iter().map(|phi| 1.0 / (s - phi)).sum();

        loop {
            // Centering for the current t.
            loop {
                if self.iterations >= self.config.max_iters {
                    return Ok(PhaseOne::OutOfIterations(w));
                }
                let eval = self.ineq.evaluate(&w);
                let u: Vec<f64> = eval.phi.iter().map(|phi| 1.0 / (s - phi)).collect();
                let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
                let anchor = &w - &w0;

                let grad_w = vec_of(&(self.ineq.weighted_gradient(&eval, &u) + &anchor * (t * eps)));
                let grad_s = t - u.iter().sum::<f64>();
                let mut h_ww = self.ineq.weighted_hessian(&eval, &u, &u2);
                for k in 0..d {
                    h_ww[(k, k)] += t * eps;
                }
                let h_ws = -vec_of(&self.ineq.weighted_gradient(&eval, &u2));
                let h_ss: f64 = u2.iter().sum();

                let gr_w = self.affine.reduce_vector(&grad_w);
                let k = gr_w.len();
                let mut hess = DMatrix::zeros(k + 1, k + 1);
                hess.view_mut((0, 0), (k, k)).copy_from(&self.affine.reduce_matrix(&h_ww));
                let hr_ws = self.affine.reduce_vector(&h_ws);
                hess.view_mut((0, k), (k, 1)).copy_from(&hr_ws);
                hess.view_mut((k, 0), (1, k)).copy_from(&hr_ws.transpose());
                hess[(k, k)] = h_ss;
                let mut grad = DVector::zeros(k + 1);
                grad.rows_mut(0, k).copy_from(&gr_w);
                grad[k] = grad_s;

                let step = -solve_spd(&hess, &grad)?;
                let decrement = -grad.dot(&step);
                let dw = mat_of(&self.affine.lift(&step.rows(0, k).into_owned()), self.p, self.n);
                let ds = step[k];
                if decrement / 2.0 <= NEWTON_TOL {
                    break;
                }

                let (a, c) = self.ineq.directional(&eval, &dw);
                let slope_prox = anchor.dot(&dw);
                let curv_prox = dw.norm_squared();
                let mut alpha = 1.0;
                let accepted = loop {
                    let mut change = t * (alpha * ds + eps * (alpha * slope_prox + 0.5 * alpha * alpha * curv_prox));
                    let mut inside = true;
                    for i in 0..m {
                        let delta = alpha * a[i] + alpha * alpha * c[i] - alpha * ds;
                        let ratio = delta / (s - eval.phi[i]);
                        if ratio >= 1.0 {
                            inside = false;
                            break;
                        }
                        change -= (-ratio).ln_1p();
                    }
                    if inside && change <= -ARMIJO * alpha * decrement {
                        break true;
                    }
                    alpha *= self.config.step_backtrack;
                    if alpha < MIN_STEP {
                        break false;
                    }
                };
                if !accepted {
                    break;
                }
                w += &dw * alpha;
                s += alpha * ds;
                self.iterations += 1;
                let worst = max_of(&self.ineq.values(&w));
                self.record(1, s, m as f64 / t, worst.max(0.0), alpha);
                if worst < 0.0 {
                    return Ok(PhaseOne::Feasible(w));
                }
            }

            let gap = m as f64 / t;
            if s - gap > 0.0 || gap <= self.config.tol_gap * s.abs().max(1.0) {
                let eval = self.ineq.evaluate(&w);
                let duals: Vec<f64> = eval.phi.iter().map(|phi| 1.0 / (t * (s - phi))).collect();
                let certificate = duals
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| **l > 1e-6)
                    .map(|(i, l)| (self.ineq.index[i], *l))
                    .collect();
                return Ok(PhaseOne::Infeasible { weights: w, certificate });
            }
            t *= self.config.barrier_growth;
        }
    }

    /// Newton centering of `t f(w) - sum log(-phi_i(w))` from a strictly
    /// feasible `w`.
    fn center(&mut self, w: &mut DMatrix<f64>, t: f64, tight: bool) -> Result<Centering> {
        let m = self.ineq.len();
        let (mut best, mut stalled) = (f64::INFINITY, 0);
        loop {
            if self.iterations >= self.config.max_iters {
                return Ok(Centering::OutOfIterations);
            }
            let eval = self.ineq.evaluate(w);
            let u: Vec<f64> = eval.phi.iter().map(|phi| -1.0 / phi).collect();
            let u2: Vec<f64> = u.iter().map(|v| v * v).collect();
            let grad_f = self.objective.gradient(w);
            let grad = vec_of(&(&grad_f * t + self.ineq.weighted_gradient(&eval, &u)));
            let zeros = vec![0.0; m];
            let mut hess = self.ineq.weighted_hessian(&eval, &u, &zeros);
            let block = self.objective.hessian_block() * t;
            for j in 0..self.n {
                let mut target = hess.view_mut((j * self.p, j * self.p), (self.p, self.p));
                target += &block;
            }
            let scale = hess.diagonal().amax();
            let jac = self.ineq.jacobian(&eval);
            let (mut dominant, mut rest) = (Vec::new(), Vec::new());
            for i in 0..m {
                let weight = u2[i] * jac.row(i).norm_squared();
                if weight > AUGMENT_RATIO * scale {
                    dominant.push(i);
                } else if weight > 0.0 {
                    rest.push(i);
                }
            }
            for &i in &rest {
                let row = jac.row(i);
                hess.ger(u2[i], &row.transpose(), &row.transpose(), 1.0);
            }
            let gr = self.affine.reduce_vector(&grad);
            let step = -newton_direction(
                &self.affine.reduce_matrix(&hess),
                &self.affine.reduce_matrix_columns(&jac.select_rows(&dominant).transpose()),
                &dominant.iter().map(|&i| u2[i]).collect::<Vec<_>>(),
                &gr,
            )?;
            let decrement = -gr.dot(&step);
            let tol = if tight { NEWTON_TOL } else { LOOSE_CENTERING };
            if decrement / 2.0 <= tol {
                return Ok(Centering::Converged);
            }
            // Inside the quadratic region only rounding keeps the decrement
            // from shrinking; stop once it no longer improves.
            if decrement / 2.0 > LOOSE_CENTERING || decrement < best {
                best = decrement;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= STALL_STEPS {
                    return Ok(Centering::Converged);
                }
            }
            let dw = mat_of(&self.affine.lift(&step), self.p, self.n);

            let (a, c) = self.ineq.directional(&eval, &dw);
            let slope_f = grad_f.dot(&dw);
            let curv_f = self.objective.curvature(&dw);
            let change = |alpha: f64| {
                let mut change = t * (alpha * slope_f + 0.5 * alpha * alpha * curv_f);
                for i in 0..m {
                    let ratio = (alpha * a[i] + alpha * alpha * c[i]) / eval.phi[i];
                    if ratio <= -1.0 {
                        return None;
                    }
                    change -= ratio.ln_1p();
                }
                Some(change)
            };
            let alpha = exact_step(t * slope_f, t * curv_f, &eval.phi, &a, &c);
            if !change(alpha).is_some_and(|v| v < 0.0) {
                // No further progress is representable at this t.
                return Ok(Centering::Converged);
            }
            *w += &dw * alpha;
            self.iterations += 1;
            let objective = self.problem.objective(w);
            let worst = if m > 0 { max_of(&self.ineq.values(w)) } else { 0.0 };
            let gap = if m > 0 { m as f64 / t } else { 0.0 };
            self.record(2, objective, gap, worst.max(0.0), alpha);
        }
    }

    /// Stationarity check at the final iterate. The barrier multipliers
    /// `1 / (t (-phi_i))` lose relative accuracy like `eps / |phi_i|` for
    /// active constraints, so multipliers are also refitted by nonnegative
    /// least squares over the active set. The refit is reported when it
    /// lowers the residual without raising the complementarity.
    fn kkt(&self, w: &DMatrix<f64>, lambda: &[f64]) -> Kkt {
        let eval = self.ineq.evaluate(w);
        let grad_f = self.objective.gradient(w);
        let gradient_norm = grad_f.norm();
        let reduced_f = self.affine.reduce_vector(&vec_of(&grad_f));
        let residual_of = |lambda: &[f64]| {
            let total = vec_of(&self.ineq.weighted_gradient(&eval, lambda));
            (&reduced_f + self.affine.reduce_vector(&total)).norm()
        };
        let slackness = |lambda: &[f64]| -> f64 { lambda.iter().zip(&eval.phi).map(|(l, phi)| l * -phi).sum() };

        let barrier = lambda.to_vec();
        let mut best = Kkt {
            residual: residual_of(&barrier),
            gradient_norm,
            complementarity: slackness(&barrier),
            lambda: barrier.clone(),
        };
        let largest = barrier.iter().fold(0.0_f64, |a, b| a.max(*b));
        let mut active: Vec<usize> = (0..barrier.len()).filter(|&i| barrier[i] >= ACTIVE_FRACTION * largest).collect();
        if active.is_empty() {
            return best;
        }
        let jac = self.ineq.jacobian(&eval);
        while !active.is_empty() {
            let columns = DMatrix::from_fn(jac.ncols(), active.len(), |r, k| jac[(active[k], r)]);
            let reduced = self.affine.reduce_matrix_columns(&columns);
            let svd = reduced.clone().svd(true, true);
            let tol = f64::EPSILON * reduced.nrows().max(reduced.ncols()) as f64 * svd.singular_values.max();
            let Ok(fit) = svd.solve(&(-&reduced_f), tol) else {
                break;
            };
            let (worst, value) = fit.argmin();
            if value < 0.0 {
                active.remove(worst);
                continue;
            }
            let mut lambda = vec![0.0; barrier.len()];
            for (k, &i) in active.iter().enumerate() {
                lambda[i] = fit[k];
            }
            let residual = residual_of(&lambda);
            let complementarity = slackness(&lambda);
            if residual < best.residual && complementarity <= best.complementarity {
                best = Kkt {
                    residual,
                    gradient_norm,
                    complementarity,
                    lambda,
                };
            }
            break;
        }
        best
    }
}

struct Kkt {
    residual: f64,
    gradient_norm: f64,
    /// `sum lambda_i (-phi_i)`.
    complementarity: f64,
    lambda: Vec<f64>,
}

fn finish(
    problem: &QcqpProblem,
    weights: DMatrix<f64>,
    status: SolveStatus,
    iterations: usize,
    log: Vec<IterationLog>,
) -> Result<Solution> {
    let report = check_feasibility(&weights, problem)?;
    Ok(Solution {
        objective: problem.objective(&weights),
        max_constraint_violation: report.max_violation,
        iterations,
        status,
        kkt_residual: f64::NAN,
        gradient_norm: f64::NAN,
        complementarity: f64::NAN,
        duals: Vec::new(),
        certificate: Vec::new(),
        log,
        weights,
    })
}

/// Solves the program. Deterministic: identical inputs give bit-identical
/// output.
pub fn solve(problem: &QcqpProblem, config: &SolverConfig) -> Result<Solution> {
    problem.validate()?;
    config.validate()?;
    let (p, n) = problem.weight_shape();
    let ridge = problem.ridge_solution()?;

    let negative: Vec<(usize, f64)> = problem
        .constraints
        .iter()
        .enumerate()
        .filter(|(_, c)| c.bound < -EQUALITY_BOUND)
        .map(|(i, c)| (i, c.bound))
        .collect();
    if !negative.is_empty() {
        for (i, b) in &negative {
            let c = &problem.constraints[*i];
            log::warn!("constraint {i} ({:?} at {:?}) has negative bound {b:e}", c.tag, c.sample_state.as_slice());
        }
        let mut sol = finish(problem, ridge, SolveStatus::Infeasible, 0, Vec::new())?;
        sol.certificate = negative;
        return Ok(sol);
    }

    let (eq, ineq_idx): (Vec<usize>, Vec<usize>) =
        (0..problem.constraints.len()).partition(|&i| problem.constraints[i].bound <= EQUALITY_BOUND);

    let objective = Objective {
        kappa: problem.data_weight(),
        mu: problem.mu_w,
        gtg: problem.features.tr_mul(&problem.features),
        gtx: problem.features.tr_mul(&problem.targets),
    };
    let ineq = Inequalities {
        g: DMatrix::from_fn(ineq_idx.len(), p, |i, k| problem.constraints[ineq_idx[i]].feature[k]),
        shapes: ineq_idx.iter().map(|&i| problem.constraints[i].shape.clone()).collect(),
        offsets: ineq_idx.iter().map(|&i| problem.constraints[i].offset.clone()).collect(),
        bounds: ineq_idx.iter().map(|&i| problem.constraints[i].bound).collect(),
        index: ineq_idx.clone(),
    };

    let (start, affine) = if eq.is_empty() {
        (ridge.clone(), AffineSet { basis: None })
    } else {
        let (e, h) = equality_system(problem, &eq);
        match affine_projection(&e, &h, &vec_of(&ridge)) {
            Some((w, set)) => (mat_of(&w, p, n), set),
            None => {
                let mut sol = finish(problem, ridge, SolveStatus::Infeasible, 0, Vec::new())?;
                sol.certificate = eq.iter().map(|&i| (i, 1.0)).collect();
                return Ok(sol);
            }
        }
    };

    let mut run = Run {
        problem,
        config,
        objective,
        ineq,
        affine,
        p,
        n,
        iterations: 0,
        log: Vec::new(),
    };
    let m = run.ineq.len();

    if run.affine.free_dim(p * n) == 0 {
        let status = if m == 0 || max_of(&run.ineq.values(&start)) <= 0.0 {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        };
        let mut sol = finish(problem, start, status, 0, Vec::new())?;
        if status == SolveStatus::Optimal {
            sol.kkt_residual = 0.0;
            sol.gradient_norm = run.objective.gradient(&sol.weights).norm();
            sol.complementarity = 0.0;
            sol.duals = vec![0.0; problem.constraints.len()];
        }
        return Ok(sol);
    }

    let mut w = if m > 0 && max_of(&run.ineq.values(&start)) >= 0.0 {
        match run.phase_one(start)? {
            PhaseOne::Feasible(w) => w,
            PhaseOne::Infeasible { weights, certificate } => {
                let iterations = run.iterations;
                let mut sol = finish(problem, weights, SolveStatus::Infeasible, iterations, run.log)?;
                sol.certificate = certificate;
                return Ok(sol);
            }
            PhaseOne::OutOfIterations(w) => {
                let iterations = run.iterations;
                return finish(problem, w, SolveStatus::MaxIters, iterations, run.log);
            }
        }
    } else {
        start
    };

    let f_ridge = problem.objective(&ridge);
    let scale = |f: f64| 0.5 * config.tol_gap * f.abs().max(1.0);
    let mut t = if m == 0 {
        1.0
    } else {
        let excess = problem.objective(&w) - f_ridge;
        m as f64 / excess.max(scale(problem.objective(&w)))
    };
    loop {
        let last = m == 0 || m as f64 / t <= scale(problem.objective(&w));
        if let Centering::OutOfIterations = run.center(&mut w, t, last)? {
            let iterations = run.iterations;
            return finish(problem, w, SolveStatus::MaxIters, iterations, run.log);
        }
        if last {
            break;
        }
        t *= config.barrier_growth;
    }

    let barrier: Vec<f64> = run.ineq.values(&w).iter().map(|phi| -1.0 / (t * phi)).collect();
    let kkt = run.kkt(&w, &barrier);
    let iterations = run.iterations;
    let f = problem.objective(&w);
    let mut sol = finish(problem, w, SolveStatus::Optimal, iterations, run.log)?;
    let mut duals = vec![0.0; problem.constraints.len()];
    for (k, &i) in ineq_idx.iter().enumerate() {
        duals[i] = kkt.lambda[k];
    }
    sol.kkt_residual = kkt.residual;
    sol.gradient_norm = kkt.gradient_norm;
    sol.complementarity = kkt.complementarity / f.abs().max(1.0);
    sol.duals = duals;
    if sol.max_constraint_violation > config.tol_feas {
        sol.status = SolveStatus::MaxIters;
    }
    Ok(sol)
}
