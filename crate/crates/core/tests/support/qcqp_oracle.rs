//! Random convex instances and a projected-gradient reference solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_sysid::constraints::{ConstraintTag, QuadConstraint};
use safe_sysid::qcqp::QcqpProblem;

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(n, n) * 0.3
}

pub fn random_feature(rng: &mut ChaCha8Rng, p: usize) -> DVector<f64> {
    DVector::from_fn(p, |k, _| if k + 1 == p { 1.0 } else { rng.random_range(0.0..1.0) })
}

pub fn constraint(shape: DMatrix<f64>, offset: DVector<f64>, bound: f64, feature: DVector<f64>) -> QuadConstraint {
    let n = offset.len();
    QuadConstraint {
        shape,
        offset,
        bound,
        feature,
        tag: ConstraintTag::Safety,
        sample_state: DVector::zeros(n),
        risk_coeff: 0.0,
        xi: 1.0,
    }
}

/// Random instance with a strictly feasible point `w_feas` and constraints
/// centred away from the ridge solution so that several are active.
pub fn random_instance(seed: u64) -> (QcqpProblem, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let n_h = rng.random_range(1..=8);
    let p = n_h + 1;
    let rows = rng.random_range(10..40);
    let features = DMatrix::from_fn(rows, p, |_, k| if k + 1 == p { 1.0 } else { rng.random_range(0.0..1.0) });
    let targets = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-2.0..2.0));
    let sigma = rng.random_range(0.5..2.0);
    let mu = rng.random_range(0.01..0.1);
    let w_feas = DMatrix::from_fn(p, n, |_, _| rng.random_range(-0.5..0.5));
    let count = rng.random_range(1..=20);
    let constraints = (0..count)
        .map(|_| {
            let g = random_feature(&mut rng, p);
            let s = random_spd(&mut rng, n);
            let y = w_feas.tr_mul(&g);
            let o = &y + DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
            let r = &y - &o;
            let bound = r.dot(&(&s * &r)) + rng.random_range(0.01..0.3);
            constraint(s, o, bound, g)
        })
        .collect();
    (QcqpProblem::new(features, targets, sigma, mu, constraints).unwrap(), w_feas)
}

/// A constraint in its eigenbasis, for fast Euclidean projection.
struct Ellipsoid {
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    offset: DVector<f64>,
    bound: f64,
    feature: DVector<f64>,
    feature_norm2: f64,
}

impl Ellipsoid {
    fn new(c: &QuadConstraint) -> Self {
        let eig = SymmetricEigen::new(c.shape.clone());
        Ellipsoid {
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
            offset: c.offset.clone(),
            bound: c.bound,
            feature: c.feature.clone(),
            feature_norm2: c.feature.norm_squared(),
        }
    }

    /// Euclidean projection of `y` onto `{z : (z - o)^T S (z - o) <= b}`,
    /// by bisection on the multiplier of the optimality condition.
    fn project_point(&self, y: &DVector<f64>) -> DVector<f64> {
        let z = self.basis.tr_mul(&(y - &self.offset));
        let lam = &self.eigenvalues;
        let value = |nu: f64| -> f64 {
            (0..z.len())
                .map(|k| lam[k] * (z[k] / (1.0 + nu * lam[k])).powi(2))
                .sum::<f64>()
                - self.bound
        };
        if value(0.0) <= 0.0 {
            return y.clone();
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while value(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if value(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let zp = DVector::from_fn(z.len(), |k, _| z[k] / (1.0 + hi * lam[k]));
        &self.offset + &self.basis * zp
    }

    /// Frobenius projection onto `{W : W^T g in ellipsoid}`.
    fn project(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let y = w.tr_mul(&self.feature);
        let y_new = self.project_point(&y);
        w + &self.feature * (y_new - y).transpose() / self.feature_norm2
    }
}

/// Dykstra's alternating projections of `v` onto the intersection. The
/// increments are the dual variables of the projection problem; starting
/// from the previous call's increments (with `x = v - sum increments`) is a
/// warm start of the same dual coordinate ascent.
fn project_all(v: &DMatrix<f64>, sets: &[Ellipsoid], increments: &mut [DMatrix<f64>]) -> DMatrix<f64> {
    let mut x = v.clone();
    for inc in increments.iter() {
        x -= inc;
    }
    for _ in 0..100_000 {
        let before = x.clone();
        for (set, inc) in sets.iter().zip(increments.iter_mut()) {
            let shifted = &x + &*inc;
            let projected = set.project(&shifted);
            *inc = shifted - &projected;
            x = projected;
        }
        if (&x - before).norm() < 1e-15 {
            break;
        }
    }
    x
}

/// Projected gradient descent with step `1 / L`, run to convergence.
pub fn oracle(problem: &QcqpProblem) -> DMatrix<f64> {
    let kappa = problem.data_weight();
    let gtg = problem.features.tr_mul(&problem.features);
    let gtx = problem.features.tr_mul(&problem.targets);
    let p = gtg.nrows();
    let hess = &gtg * kappa + DMatrix::identity(p, p) * (2.0 * problem.mu_w);
    let step = 1.0 / SymmetricEigen::new(hess).eigenvalues.max();
    let sets: Vec<Ellipsoid> = problem.constraints.iter().map(Ellipsoid::new).collect();
    let ridge = problem.ridge_solution().unwrap();
    let mut increments = vec![DMatrix::zeros(ridge.nrows(), ridge.ncols()); sets.len()];
    let mut w = project_all(&ridge, &sets, &mut increments);
    for _ in 0..200_000 {
        let grad = (&gtg * &w - &gtx) * kappa + &w * (2.0 * problem.mu_w);
        let next = project_all(&(&w - grad * step), &sets, &mut increments);
        let moved = (&next - &w).norm();
        w = next;
        if moved < 1e-11 {
            break;
        }
    }
    w
}
