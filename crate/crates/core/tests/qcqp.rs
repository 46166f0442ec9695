use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_sysid::constraints::QuadConstraint;
use safe_sysid::qcqp::{check_feasibility, solve, QcqpProblem, SolveStatus, SolverConfig};

mod support;

use support::qcqp_oracle::{constraint, oracle, random_instance};

#[test]
fn matches_projected_gradient_oracle() {
    for seed in 0..50 {
        let (problem, _) = random_instance(seed);
        let sol = solve(&problem, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal, "seed {seed}");
        assert!(sol.max_constraint_violation <= 1e-8, "seed {seed}");
        assert!(
            sol.kkt_residual <= 1e-6 * (1.0 + sol.gradient_norm),
            "seed {seed}: kkt {} grad {}",
            sol.kkt_residual,
            sol.gradient_norm
        );
        assert!(sol.complementarity <= 1e-8, "seed {seed}: {} kkt {}", sol.complementarity, sol.kkt_residual);

        let reference = oracle(&problem);
        let f_ref = problem.objective(&reference);
        assert!(
            (sol.objective - f_ref).abs() <= 1e-5,
            "seed {seed}: solver {} oracle {}",
            sol.objective,
            f_ref
        );
        assert!(
            (&sol.weights - &reference).norm() <= 1e-4,
            "seed {seed}: |dW| = {:e}",
            (&sol.weights - &reference).norm()
        );
    }
}

#[test]
fn no_better_random_feasible_point() {
    for seed in 100..110 {
        let (problem, w_feas) = random_instance(seed);
        let sol = solve(&problem, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        while checked < 100 {
            let scale = rng.random_range(0.0..0.3);
            let candidate = &w_feas + DMatrix::from_fn(w_feas.nrows(), w_feas.ncols(), |_, _| rng.random_range(-scale..scale));
            if check_feasibility(&candidate, &problem).unwrap().max_violation > 0.0 {
                continue;
            }
            checked += 1;
            assert!(sol.objective <= problem.objective(&candidate) + 1e-9);
        }
    }
}

#[test]
fn adding_constraints_never_lowers_objective() {
    for seed in 200..210 {
        let (problem, _) = random_instance(seed);
        let mut previous = f64::NEG_INFINITY;
        for k in 0..=problem.constraints.len() {
            let sub = QcqpProblem::new(
                problem.features.clone(),
                problem.targets.clone(),
                problem.sigma,
                problem.mu_w,
                problem.constraints[..k].to_vec(),
            )
            .unwrap();
            let sol = solve(&sub, &SolverConfig::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            assert!(sol.objective >= previous - 1e-7 * previous.abs().max(1.0), "seed {seed} k {k}");
            previous = sol.objective;
        }
    }
}

#[test]
fn solve_is_deterministic() {
    let (problem, _) = random_instance(7);
    let a = solve(&problem, &SolverConfig::default()).unwrap();
    let b = solve(&problem, &SolverConfig::default()).unwrap();
    assert_eq!(a.weights.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               b.weights.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.log, b.log);
}

#[test]
fn inactive_constraints_give_ridge_solution() {
    let (base, _) = random_instance(3);
    let ridge = base.ridge_solution().unwrap();
    let loose: Vec<QuadConstraint> = base
        .constraints
        .iter()
        .map(|c| {
            let r = ridge.tr_mul(&c.feature) - &c.offset;
            let mut c = c.clone();
            c.bound = r.dot(&(&c.shape * &r)) * 4.0 + 10.0;
            c
        })
        .collect();
    let problem = QcqpProblem::new(base.features.clone(), base.targets.clone(), base.sigma, base.mu_w, loose).unwrap();
    let sol = solve(&problem, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);

    // Independent normal-equations oracle, solved by LU.
    let kappa = 1.0 / (base.sigma * base.sigma);
    let p = base.features.ncols();
    let lhs = base.features.tr_mul(&base.features) * kappa + DMatrix::identity(p, p) * (2.0 * base.mu_w);
    let rhs = base.features.tr_mul(&base.targets) * kappa;
    let expected = lhs.lu().solve(&rhs).unwrap();
    assert!((&sol.weights - &expected).amax() <= 1e-8, "{:e}", (&sol.weights - &expected).amax());

    let unconstrained = QcqpProblem::new(base.features.clone(), base.targets.clone(), base.sigma, base.mu_w, vec![]).unwrap();
    let sol = solve(&unconstrained, &SolverConfig::default()).unwrap();
    assert!((&sol.weights - &expected).amax() <= 1e-10);
}

#[test]
fn infeasible_intersection_is_reported() {
    // Two disjoint unit balls around +-2 in the single bias coordinate.
    let g = DVector::from_vec(vec![0.3, 1.0]);
    let c1 = constraint(DMatrix::identity(1, 1), DVector::from_vec(vec![2.0]), 1.0, g.clone());
    let c2 = constraint(DMatrix::identity(1, 1), DVector::from_vec(vec![-2.0]), 1.0, g);
    let problem = QcqpProblem::new(
        DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 0.7, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
        1.0,
        0.01,
        vec![c1, c2],
    )
    .unwrap();
    let sol = solve(&problem, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
    assert!(sol.max_constraint_violation > 0.5);
    let indices: Vec<usize> = sol.certificate.iter().map(|(i, _)| *i).collect();
    assert_eq!(indices, vec![0, 1]);
}

#[test]
fn feasibility_report_examples() {
    let g = DVector::from_vec(vec![0.5, 1.0]);
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let o = DVector::from_vec(vec![0.2, -0.1]);
    let c = constraint(s.clone(), o.clone(), 0.5, g.clone());
    let problem = QcqpProblem::new(DMatrix::from_row_slice(1, 2, &[0.5, 1.0]), DMatrix::zeros(1, 2), 1.0, 0.1, vec![c]).unwrap();

    // W^T g = o exactly: strictly interior.
    let interior = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.2, -0.1]);
    assert_eq!(check_feasibility(&interior, &problem).unwrap().max_violation, 0.0);

    // Scale a direction onto the boundary.
    let dir = DVector::from_vec(vec![1.0, 0.0]);
    let scale = (0.5 / dir.dot(&(&s * &dir))).sqrt();
    let mut boundary = interior.clone();
    boundary[(1, 0)] += scale;
    assert!(check_feasibility(&boundary, &problem).unwrap().max_violation <= 1e-12);

    let violating = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.4, 0.3]);
    let report = check_feasibility(&violating, &problem).unwrap();
    let y0 = 1.0 * 0.5 + 0.4 - 0.2;
    let y1 = -2.0 * 0.5 + 0.3 + 0.1;
    let expected = 2.0 * y0 * y0 + 2.0 * 0.3 * y0 * y1 + y1 * y1 - 0.5;
    assert!(expected > 0.0);
    assert!((report.max_violation - expected).abs() <= 1e-12);
}

#[test]
fn problem_json_round_trip() {
    let (problem, _) = random_instance(11);
    let back = QcqpProblem::from_json(&problem.to_json().unwrap()).unwrap();
    assert_eq!(back, problem);
}

