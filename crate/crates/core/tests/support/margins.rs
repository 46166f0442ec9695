//! Sampled check of the grid sampling margins: between any two states at
//! most `tau / 2` apart, the state-dependent part of each constraint moves
//! by no more than the margin computed at the first state.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_sysid::constraints::{
    barrier_value, lyapunov_value, risk_coefficient, theorem1_margins, tightened_shape, SafetySpec, StabilitySpec,
};
use safe_sysid::elm::{ElmDims, ElmModel, HiddenLayer, InputVector, NoiseSpec};

use super::qcqp_oracle::random_spd;

#[derive(Debug, Default)]
pub struct SoundnessReport {
    pub pairs: usize,
    pub safety_counterexamples: usize,
    pub stability_counterexamples: usize,
    /// Largest observed change divided by its margin.
    pub worst_ratio: f64,
}

impl SoundnessReport {
    pub fn counterexamples(&self) -> usize {
        self.safety_counterexamples + self.stability_counterexamples
    }
}

struct Instance {
    model: ElmModel,
    safety: SafetySpec,
    stability: StabilitySpec,
    sigma: f64,
    coeff: f64,
    tau: f64,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = 2;
    let n_h = rng.random_range(3..=25);
    let dims = ElmDims::new(n, n, n_h).unwrap();
    let hidden = HiddenLayer {
        input_weights: DMatrix::from_fn(2 * n, n_h, |_, _| rng.random_range(-1.0..1.0)),
        slopes: DVector::from_fn(n_h, |_, _| rng.random_range(0.2..3.0)),
        biases: DVector::from_fn(n_h, |_, _| rng.random_range(-2.0..2.0)),
    };
    let w_bar = rng.random_range(1.0..20.0);
    let sigma = rng.random_range(0.0..0.1);
    let model = ElmModel::from_hidden(dims, hidden, w_bar, NoiseSpec::new(sigma).unwrap()).unwrap();
    let w = DMatrix::from_fn(n_h + 1, n, |_, _| rng.random_range(-1.0..1.0));
    let w = &w * (rng.random_range(0.0..1.0) * w_bar / w.norm());
    let center = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let safety = SafetySpec::from_ellipse(
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(-3.0..3.0),
        center.clone(),
        rng.random_range(0.1..1.0),
        0.01,
    )
    .unwrap();
    let equilibrium = &center + DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let stability =
        StabilitySpec::new(random_spd(rng, n), equilibrium, rng.random_range(0.01..1.0), 0.01).unwrap();
    Instance {
        model: model.with_output_weights(w).unwrap(),
        safety,
        stability,
        sigma,
        coeff: risk_coefficient(0.9).unwrap(),
        tau: rng.random_range(0.01..0.5),
    }
}

impl Instance {
    /// State-dependent parts of the safety and stability constraints.
    fn parts(&self, x: &DVector<f64>) -> (f64, f64) {
        let eq = self.stability.equilibrium();
        let g = self.model.feature_map(&InputVector::from_state(x, eq)).unwrap();
        let y = self.model.output_weights().tr_mul(g.as_vector());
        let a_cal = tightened_shape(self.safety.a(), self.sigma, self.coeff);
        let p_cal = tightened_shape(self.stability.p(), self.sigma, self.coeff);
        let rb = &y - self.safety.center();
        let rl = &y - eq;
        (
            rb.dot(&(&a_cal * &rb)) + (1.0 - self.safety.gamma()) * barrier_value(&self.safety, x),
            rl.dot(&(&p_cal * &rl)) - (1.0 - self.stability.rho()) * lyapunov_value(&self.stability, x),
        )
    }
}

/// Draws `pairs` state pairs over random models and specifications, 100
/// pairs per instance, states from the ellipse's box enlarged by half.
pub fn check(pairs: usize, seed: u64) -> SoundnessReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SoundnessReport::default();
    let mut instance = random_instance(&mut rng);
    for k in 0..pairs {
        if k % 100 == 0 && k > 0 {
            instance = random_instance(&mut rng);
        }
        let half = instance.safety.bounding_half_widths() * 1.5;
        let c = instance.safety.center();
        let x = DVector::from_fn(2, |i, _| c[i] + rng.random_range(-half[i]..half[i]));
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let r = 0.5 * instance.tau * rng.random::<f64>().sqrt();
        let x2 = &x + DVector::from_vec(vec![r * angle.cos(), r * angle.sin()]);
        let margins = theorem1_margins(
            &instance.model,
            &instance.safety,
            &instance.stability,
            instance.sigma,
            instance.coeff,
            instance.coeff,
            &x,
            instance.tau,
        )
        .unwrap();
        let (b1, l1) = instance.parts(&x);
        let (b2, l2) = instance.parts(&x2);
        let (db, dl) = ((b1 - b2).abs(), (l1 - l2).abs());
        report.pairs += 1;
        if db > margins.safety {
            report.safety_counterexamples += 1;
        }
        if dl > margins.stability {
            report.stability_counterexamples += 1;
        }
        report.worst_ratio = report.worst_ratio.max(db / margins.safety).max(dl / margins.stability);
    }
    report
}
