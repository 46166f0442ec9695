use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_sysid::constraints::{
    build_safety_constraint, build_stability_constraint, risk_coefficient, safety_moments, stability_moments,
    theorem1_margins, tightened_shape, RiskSpec, SafetySpec, StabilitySpec, VarianceBasis,
};
use safe_sysid::elm::{ElmDims, ElmModel, FeatureVector, HiddenLayer, NoiseSpec};
use safe_sysid::linalg::lambda_min;

mod support;

/// Normal quantile by bisection on the error function.
fn quantile_by_bisection(p: f64) -> f64 {
    let cdf = |z: f64| 0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (-40.0, 40.0);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn spd(entries: &[f64], n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_column_slice(n, n, &entries[..n * n]);
    &b * b.transpose() + DMatrix::identity(n, n) * 1e-3
}

#[test]
fn moments_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..20 {
        let case = support::moments::random_case(&mut rng);
        for (family, cmp) in ["safety", "stability"].iter().zip(case.compare(1_000_000, 100 + i)) {
            assert!(cmp.mean_error() <= 0.01, "case {i} {family}: mean {:?} vs {:?}", cmp.estimate, cmp.exact);
            assert!(cmp.variance_error() <= 0.01, "case {i} {family}: variance {:?} vs {:?}", cmp.estimate, cmp.exact);
        }
    }
}

#[test]
fn risk_coefficient_matches_bisection() {
    let c = risk_coefficient(0.9).unwrap();
    assert!((c - 1.2815515655).abs() <= 1e-8);
    assert!((c - quantile_by_bisection(0.9)).abs() <= 1e-10);
    assert_eq!(risk_coefficient(0.5).unwrap(), 0.0);
}

#[test]
fn risk_coefficient_is_strictly_increasing() {
    let values: Vec<f64> = (1..100).map(|k| risk_coefficient(k as f64 / 100.0).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn sampled_margins_are_sound() {
    let report = support::margins::check(10_000, 5);
    assert_eq!(report.pairs, 10_000);
    assert_eq!(report.counterexamples(), 0, "{report:?}");
    assert!(report.worst_ratio < 1.0);
}

fn margin_model(seed: u64) -> ElmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ElmDims::new(2, 2, 6).unwrap();
    let hidden = HiddenLayer {
        input_weights: DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0)),
        slopes: DVector::from_fn(6, |_, _| rng.random_range(0.5..2.0)),
        biases: DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)),
    };
    ElmModel::from_hidden(dims, hidden, 10.0, NoiseSpec::new(0.02).unwrap()).unwrap()
}

fn unit_specs() -> (SafetySpec, StabilitySpec) {
    (
        SafetySpec::new(DMatrix::identity(2, 2), DVector::from_vec(vec![0.5, -0.5]), 0.9, 0.01).unwrap(),
        StabilitySpec::new(DMatrix::identity(2, 2), DVector::from_vec(vec![0.2, 0.1]), 0.01, 0.01).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn risk_coefficient_is_odd(p in 0.5001f64..0.9999) {
        let sum = risk_coefficient(p).unwrap() + risk_coefficient(1.0 - p).unwrap();
        prop_assert!(sum.abs() <= 1e-10, "{}", sum);
    }

    #[test]
    fn risk_coefficient_inverts_the_normal_cdf(p in 0.01f64..0.99) {
        prop_assert!((risk_coefficient(p).unwrap() - quantile_by_bisection(p)).abs() <= 1e-9);
    }

    #[test]
    fn tightened_shapes_are_positive_definite(
        entries in prop::collection::vec(-2.0f64..2.0, 9),
        n in 1usize..=3,
        sigma in 0.0f64..1.0,
        p in 0.5f64..0.999,
    ) {
        let base = spd(&entries, n);
        let c = risk_coefficient(p).unwrap();
        prop_assert!(lambda_min(&tightened_shape(&base, sigma, c)) > 0.0);
    }

    #[test]
    fn margins_scale_linearly_in_tau(
        tau in 1e-4f64..1.0,
        x0 in -2.0f64..2.0,
        x1 in -2.0f64..2.0,
        seed in 0u64..1000,
    ) {
        let model = margin_model(seed);
        let (safety, stability) = unit_specs();
        let x = DVector::from_vec(vec![x0, x1]);
        let c = risk_coefficient(0.9).unwrap();
        let zero = theorem1_margins(&model, &safety, &stability, 0.02, c, c, &x, 0.0).unwrap();
        prop_assert_eq!((zero.safety, zero.stability), (0.0, 0.0));
        let one = theorem1_margins(&model, &safety, &stability, 0.02, c, c, &x, tau).unwrap();
        let two = theorem1_margins(&model, &safety, &stability, 0.02, c, c, &x, 2.0 * tau).unwrap();
        prop_assert!(one.safety > 0.0 && one.stability > 0.0);
        prop_assert!((two.safety - 2.0 * one.safety).abs() <= 1e-12 * two.safety);
        prop_assert!((two.stability - 2.0 * one.stability).abs() <= 1e-12 * two.stability);
    }

    /// A weight matrix satisfying the quadratic constraint satisfies the
    /// moment form of the chance constraint at that state.
    #[test]
    fn satisfied_constraint_implies_moment_inequality(
        activations in prop::collection::vec(0.0f64..1.0, 4),
        w in prop::collection::vec(-1.0f64..1.0, 10),
        x in prop::collection::vec(-0.6f64..0.6, 2),
        sigma in 0.0f64..0.2,
        p in 0.5f64..0.99,
    ) {
        let (safety, stability) = unit_specs();
        let risk = RiskSpec::new(p, 1.0).unwrap();
        let g = FeatureVector::new(&activations).unwrap();
        let x = DVector::from_vec(x) + safety.center();
        let basis = VarianceBasis::WeightFree;
        let cb = build_safety_constraint(&safety, risk, sigma, &x, &g, 0.0, &basis).unwrap();
        let cl = build_stability_constraint(&stability, risk, sigma, &x, &g, 0.0, &basis).unwrap();
        let w = DMatrix::from_column_slice(5, 2, &w);
        for (c, is_safety) in [(cb, true), (cl, false)] {
            if c.bound <= 0.0 {
                continue;
            }
            // Shrink the residual onto a random point inside the constraint.
            let r = c.residual(&w);
            let lhs = c.lhs(&w);
            let scale = if lhs > c.bound { (c.bound / lhs).sqrt() * 0.999 } else { 1.0 };
            let mean = &c.offset + r * scale;
            let (gap, var) = if is_safety {
                let m = safety_moments(&safety, &mean, sigma, &x);
                (safety.zeta() - m.mean, m.variance)
            } else {
                let m = stability_moments(&stability, &mean, sigma, &x);
                (m.mean - stability.delta(), m.variance)
            };
            prop_assert!(gap <= -c.risk_coeff * var + 1e-12, "gap {} var {} c {}", gap, var, c.risk_coeff);
        }
    }
}
