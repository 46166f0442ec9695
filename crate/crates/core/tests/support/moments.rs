//! Monte Carlo estimates of the one-step constraint moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safe_sysid::constraints::{
    barrier_value, lyapunov_value, safety_moments, stability_moments, MomentPair, SafetySpec, StabilitySpec,
};

use super::qcqp_oracle::{random_feature, random_spd};

/// A random predicted mean `W^T g`, noise level and current state, for both
/// constraint families.
pub struct MomentCase {
    pub safety: SafetySpec,
    pub stability: StabilitySpec,
    pub predicted_mean: DVector<f64>,
    pub sigma: f64,
    pub x_now: DVector<f64>,
}

pub struct MomentComparison {
    pub exact: MomentPair,
    pub estimate: MomentPair,
}

impl MomentComparison {
    pub fn mean_error(&self) -> f64 {
        (self.estimate.mean - self.exact.mean).abs() / self.exact.mean.abs()
    }

    pub fn variance_error(&self) -> f64 {
        (self.estimate.variance - self.exact.variance).abs() / self.exact.variance
    }
}

fn vector(rng: &mut ChaCha8Rng, n: usize, half: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-half..half))
}

/// Means within half a standard deviation of zero are redrawn.
fn resolvable(m: MomentPair) -> bool {
    m.mean.abs() >= 0.5 * m.variance.sqrt()
}

pub fn random_case(rng: &mut ChaCha8Rng) -> MomentCase {
    loop {
        let n = rng.random_range(1..=3);
        let n_h = rng.random_range(1..=10);
        let a = random_spd(rng, n);
        let p = random_spd(rng, n);
        let center = vector(rng, n, 1.0);
        let equilibrium = vector(rng, n, 1.0);
        let w = DMatrix::from_fn(n_h + 1, n, |_, _| rng.random_range(-0.5..0.5));
        let g = random_feature(rng, n_h + 1);
        let case = MomentCase {
            safety: SafetySpec::new(a, center, rng.random_range(0.1..1.0), 0.0).unwrap(),
            stability: StabilitySpec::new(p, equilibrium, rng.random_range(0.1..1.0), 0.0).unwrap(),
            predicted_mean: w.tr_mul(&g),
            sigma: rng.random_range(0.05..0.5),
            x_now: vector(rng, n, 1.5),
        };
        let (s, l) = case.exact();
        if resolvable(s) && resolvable(l) {
            return case;
        }
    }
}

impl MomentCase {
    pub fn exact(&self) -> (MomentPair, MomentPair) {
        (
            safety_moments(&self.safety, &self.predicted_mean, self.sigma, &self.x_now),
            stability_moments(&self.stability, &self.predicted_mean, self.sigma, &self.x_now),
        )
    }

    /// Sample mean and variance of `C_B` and `C_L` over `draws` noise draws.
    pub fn monte_carlo(&self, draws: usize, seed: u64) -> (MomentPair, MomentPair) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.predicted_mean.len();
        let h_now = barrier_value(&self.safety, &self.x_now);
        let v_now = lyapunov_value(&self.stability, &self.x_now);
        let (exact_b, exact_l) = self.exact();
        let mut b = Accumulator::new(exact_b.mean);
        let mut l = Accumulator::new(exact_l.mean);
        let mut next = DVector::zeros(n);
        for _ in 0..draws {
            for k in 0..n {
                next[k] = self.predicted_mean[k] + self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
            b.push(barrier_value(&self.safety, &next) - (1.0 - self.safety.gamma()) * h_now);
            l.push(lyapunov_value(&self.stability, &next) - (1.0 - self.stability.rho()) * v_now);
        }
        (b.finish(), l.finish())
    }

    pub fn compare(&self, draws: usize, seed: u64) -> [MomentComparison; 2] {
        let (eb, el) = self.exact();
        let (mb, ml) = self.monte_carlo(draws, seed);
        [
            MomentComparison { exact: eb, estimate: mb },
            MomentComparison { exact: el, estimate: ml },
        ]
    }
}

/// Shifted sums for a numerically stable sample variance.
struct Accumulator {
    shift: f64,
    count: f64,
    sum: f64,
    sum_sq: f64,
}

impl Accumulator {
    fn new(shift: f64) -> Self {
        Accumulator { shift, count: 0.0, sum: 0.0, sum_sq: 0.0 }
    }

    fn push(&mut self, v: f64) {
        let d = v - self.shift;
        self.count += 1.0;
        self.sum += d;
        self.sum_sq += d * d;
    }

    fn finish(&self) -> MomentPair {
        let mean = self.sum / self.count;
        MomentPair {
            mean: self.shift + mean,
            variance: (self.sum_sq - self.count * mean * mean) / (self.count - 1.0),
        }
    }
}
