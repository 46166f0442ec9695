//! Extreme learning machine parameterization of the unknown dynamics.
//!
//! The next state is modeled as `x_{k+1} = W^T g(s_k) + eps_k` with
//! `s_k = [x_k; e_k; 1]`, `e_k = x_k - x*` and
//! `g(s) = [sigmoid(diag(a) U^T [x; e] + b); 1]`. The hidden layer
//! (`U`, `a`, `b`) is fixed at initialization; only the output weights `W`
//! are learned.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{from_row_major, to_row_major};

/// Default bound on the Frobenius norm of the output weights.
pub const DEFAULT_WEIGHT_BOUND_OUT: f64 = 10.0;

const BIP_TARGET_LOW: f64 = 0.05;
const BIP_TARGET_HIGH: f64 = 0.95;
const BIP_MIN_SPREAD: f64 = 0.1;
const BIP_MAX_REDRAWS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElmDims {
    /// State dimension.
    pub n: usize,
    /// Error (input) dimension.
    pub m: usize,
    /// Hidden neuron count.
    pub n_h: usize,
}

impl ElmDims {
    pub fn new(n: usize, m: usize, n_h: usize) -> Result<Self> {
        let dims = ElmDims { n, m, n_h };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.n_h == 0 {
            return Err(Error::InvalidInput(format!(
                "dimensions must be positive, got n={}, m={}, n_h={}",
                self.n, self.m, self.n_h
            )));
        }
        Ok(())
    }

    /// Length of `s_k = [x; e; 1]`.
    pub fn input_len(&self) -> usize {
        self.n + self.m + 1
    }

    /// Length of `g(s_k) = [psi; 1]`.
    pub fn feature_len(&self) -> usize {
        self.n_h + 1
    }
}

/// The network input `s_k = [x_k; e_k; 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVector {
    data: DVector<f64>,
    n: usize,
}

impl InputVector {
    pub fn new(state: &DVector<f64>, error: &DVector<f64>) -> Self {
        let n = state.len();
        let m = error.len();
        let mut data = DVector::zeros(n + m + 1);
        data.rows_mut(0, n).copy_from(state);
        data.rows_mut(n, m).copy_from(error);
        data[n + m] = 1.0;
        InputVector { data, n }
    }

    /// Builds the input for a state, with the error measured from `equilibrium`.
    pub fn from_state(state: &DVector<f64>, equilibrium: &DVector<f64>) -> Self {
        InputVector::new(state, &(state - equilibrium))
    }

    pub fn state(&self) -> DVector<f64> {
        self.data.rows(0, self.n).into_owned()
    }

    pub fn error(&self) -> DVector<f64> {
        self.data.rows(self.n, self.data.len() - self.n - 1).into_owned()
    }

    /// `[x; e]` without the trailing constant.
    pub fn regressor(&self) -> nalgebra::DVectorView<'_, f64> {
        self.data.rows(0, self.data.len() - 1)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `g(s) = [psi(q s); 1]`, activations in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(DVector<f64>);

impl FeatureVector {
    /// Builds `[activations; 1]`; every activation must lie in `[0, 1]`.
    pub fn new(activations: &[f64]) -> Result<Self> {
        if activations.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput("activations must lie in [0, 1]".into()));
        }
        let mut data = DVector::from_element(activations.len() + 1, 1.0);
        data.rows_mut(0, activations.len())
            .copy_from_slice(activations);
        Ok(FeatureVector(data))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn activations(&self) -> nalgebra::DVectorView<'_, f64> {
        self.0.rows(0, self.0.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseSpec { sigma })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fixed hidden layer produced by [`bip_initialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `(n+m) x n_h`
    pub input_weights: DMatrix<f64>,
    pub slopes: DVector<f64>,
    pub biases: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElmModel {
    dims: ElmDims,
    input_weights: DMatrix<f64>,
    slopes: DVector<f64>,
    biases: DVector<f64>,
    output_weights: DMatrix<f64>,
    weight_bound_in: f64,
    weight_bound_out: f64,
    noise: NoiseSpec,
}

impl ElmModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dims: ElmDims,
        input_weights: DMatrix<f64>,
        slopes: DVector<f64>,
        biases: DVector<f64>,
        output_weights: DMatrix<f64>,
        weight_bound_in: f64,
        weight_bound_out: f64,
        noise: NoiseSpec,
    ) -> Result<Self> {
        dims.validate()?;
        check_dim(dims.n + dims.m, input_weights.nrows(), "input_weights rows")?;
        check_dim(dims.n_h, input_weights.ncols(), "input_weights cols")?;
        check_dim(dims.n_h, slopes.len(), "slopes")?;
        check_dim(dims.n_h, biases.len(), "biases")?;
        check_dim(dims.feature_len(), output_weights.nrows(), "output_weights rows")?;
        check_dim(dims.n, output_weights.ncols(), "output_weights cols")?;
        let all_finite = input_weights.iter().all(|v| v.is_finite())
            && slopes.iter().all(|v| v.is_finite())
            && biases.iter().all(|v| v.is_finite())
            && output_weights.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("model has non-finite parameters".into()));
        }
        if !(weight_bound_in > 0.0) || !(weight_bound_out > 0.0) {
            return Err(Error::InvalidInput("weight bounds must be positive".into()));
        }
        // Rounding slack: the bound is usually the realized norm itself.
        if input_weights.norm() > weight_bound_in * (1.0 + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "||U||_F = {} exceeds its bound {}",
                input_weights.norm(),
                weight_bound_in
            )));
        }
        NoiseSpec::new(noise.sigma)?;
        Ok(ElmModel {
            dims,
            input_weights,
            slopes,
            biases,
            output_weights,
            weight_bound_in,
            weight_bound_out,
            noise,
        })
    }

    /// Model with the given hidden layer and zero output weights. The input
    /// weight bound is the realized Frobenius norm of `U`.
    pub fn from_hidden(
        dims: ElmDims,
        hidden: HiddenLayer,
        weight_bound_out: f64,
        noise: NoiseSpec,
    ) -> Result<Self> {
        let bound_in = hidden.input_weights.norm().max(f64::MIN_POSITIVE);
        ElmModel::new(
            dims,
            hidden.input_weights,
            hidden.slopes,
            hidden.biases,
            DMatrix::zeros(dims.feature_len(), dims.n),
            bound_in,
            weight_bound_out,
            noise,
        )
    }

    pub fn with_output_weights(&self, weights: DMatrix<f64>) -> Result<Self> {
        check_dim(self.dims.feature_len(), weights.nrows(), "output_weights rows")?;
        check_dim(self.dims.n, weights.ncols(), "output_weights cols")?;
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("output weights not finite".into()));
        }
        let mut next = self.clone();
        next.output_weights = weights;
        Ok(next)
    }

    pub fn dims(&self) -> ElmDims {
        self.dims
    }

    pub fn input_weights(&self) -> &DMatrix<f64> {
        &self.input_weights
    }

    pub fn slopes(&self) -> &DVector<f64> {
        &self.slopes
    }

    pub fn biases(&self) -> &DVector<f64> {
        &self.biases
    }

    pub fn output_weights(&self) -> &DMatrix<f64> {
        &self.output_weights
    }

    pub fn weight_bound_in(&self) -> f64 {
        self.weight_bound_in
    }

    pub fn weight_bound_out(&self) -> f64 {
        self.weight_bound_out
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }

    /// Whether `||W||_F <= W_bar`. Only reported; never enforced.
    pub fn output_bound_satisfied(&self) -> bool {
        self.output_weights.norm() <= self.weight_bound_out
    }

    fn check_input(&self, input: &InputVector) -> Result<()> {
        check_dim(self.dims.input_len(), input.len(), "input vector")?;
        check_dim(self.dims.n, input.n, "input state block")
    }

    /// Hidden pre-activations `diag(a) U^T [x; e] + b`.
    fn pre_activation(&self, input: &InputVector) -> DVector<f64> {
        let projected = self.input_weights.tr_mul(&input.regressor());
        projected.component_mul(&self.slopes) + &self.biases
    }

    pub fn feature_map(&self, input: &InputVector) -> Result<FeatureVector> {
        self.check_input(input)?;
        let pre = self.pre_activation(input);
        let mut g = DVector::from_element(self.dims.feature_len(), 1.0);
        for (slot, a) in g.iter_mut().zip(pre.iter()) {
            *slot = sigmoid(*a);
        }
        Ok(FeatureVector(g))
    }

    /// Features of every input, one row per input.
    pub fn feature_matrix(&self, inputs: &[InputVector]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(inputs.len(), self.dims.feature_len());
        for (row, input) in inputs.iter().enumerate() {
            let g = self.feature_map(input)?;
            out.row_mut(row).copy_from(&g.as_vector().transpose());
        }
        Ok(out)
    }

    pub fn predict_mean(&self, input: &InputVector) -> Result<DVector<f64>> {
        let g = self.feature_map(input)?;
        Ok(self.output_weights.tr_mul(g.as_vector()))
    }

    /// Mean prediction for a state, with the error block taken from `equilibrium`.
    pub fn step(&self, state: &DVector<f64>, equilibrium: &DVector<f64>) -> Result<DVector<f64>> {
        self.predict_mean(&InputVector::from_state(state, equilibrium))
    }

    pub fn predict_stochastic(
        &self,
        input: &InputVector,
        noise: NoiseSpec,
        seed: u64,
    ) -> Result<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.predict_stochastic_with(input, noise, &mut rng)
    }

    pub fn predict_stochastic_with<R: Rng + ?Sized>(
        &self,
        input: &InputVector,
        noise: NoiseSpec,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        NoiseSpec::new(noise.sigma)?;
        let mut mean = self.predict_mean(input)?;
        if noise.sigma > 0.0 {
            for v in mean.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise.sigma * z;
            }
        }
        Ok(mean)
    }

    /// `g_bar = a_bar * U_bar * sqrt(n_h) / (2 sqrt 2)` with
    /// `a_bar = ||diag(a)||_F` and `U_bar` the input weight bound.
    pub fn lipschitz_feature_bound(&self) -> f64 {
        let a_bar = self.slopes.norm();
        a_bar * self.weight_bound_in * (self.dims.n_h as f64).sqrt() / (2.0 * 2f64.sqrt())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            dims: self.dims,
            input_weights: to_row_major(&self.input_weights),
            slopes: self.slopes.iter().copied().collect(),
            biases: self.biases.iter().copied().collect(),
            output_weights: to_row_major(&self.output_weights),
            weight_bound_in: self.weight_bound_in,
            weight_bound_out: self.weight_bound_out,
            sigma: self.noise.sigma,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let d = file.dims;
        d.validate()?;
        ElmModel::new(
            d,
            from_row_major(d.n + d.m, d.n_h, &file.input_weights, "input_weights")?,
            DVector::from_vec(file.slopes),
            DVector::from_vec(file.biases),
            from_row_major(d.feature_len(), d.n, &file.output_weights, "output_weights")?,
            file.weight_bound_in,
            file.weight_bound_out,
            NoiseSpec::new(file.sigma)?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ElmModel::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// On-disk model layout. Matrices are row-major; floats are written in
/// shortest round-trip form so a save/load cycle is bit-exact.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    dims: ElmDims,
    input_weights: Vec<f64>,
    slopes: Vec<f64>,
    biases: Vec<f64>,
    output_weights: Vec<f64>,
    weight_bound_in: f64,
    weight_bound_out: f64,
    sigma: f64,
}

/// Batch intrinsic plasticity: draws `U` uniformly in `[-1, 1]` and fits each
/// neuron's slope and bias so that its activations over the training inputs
/// follow a uniform distribution on `(0.05, 0.95)`.
///
/// For each neuron the raw projections `U_i^T [x; e]` are sorted and
/// regressed (two-parameter least squares) onto sorted inverse-sigmoid
/// targets. A neuron whose fitted activations span less than 0.1 is redrawn.
pub fn bip_initialize(dims: ElmDims, inputs: &[InputVector], seed: u64) -> Result<HiddenLayer> {
    dims.validate()?;
    if inputs.len() < dims.n_h {
        return Err(Error::Initialization(format!(
            "need at least n_h = {} training inputs, got {}",
            dims.n_h,
            inputs.len()
        )));
    }
    let width = dims.n + dims.m;
    for input in inputs {
        check_dim(dims.input_len(), input.len(), "training input")?;
    }
    let first = inputs[0].regressor().into_owned();
    let degenerate = inputs
        .iter()
        .all(|s| (s.regressor() - &first).amax() <= 1e-12 * (1.0 + first.amax()));
    if degenerate {
        return Err(Error::Initialization(
            "training inputs are all identical; neuron projections have zero variance".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_weights = DMatrix::zeros(width, dims.n_h);
    for v in input_weights.iter_mut() {
        *v = rng.random_range(-1.0..=1.0);
    }
    let mut slopes = DVector::zeros(dims.n_h);
    let mut biases = DVector::zeros(dims.n_h);

    let count = inputs.len();
    let mut projections = vec![0.0; count];
    let mut targets = vec![0.0; count];
    for neuron in 0..dims.n_h {
        let mut fitted = None;
        for attempt in 0..=BIP_MAX_REDRAWS {
            if attempt > 0 {
                for r in 0..width {
                    input_weights[(r, neuron)] = rng.random_range(-1.0..=1.0);
                }
            }
            let column = input_weights.column(neuron);
            for (p, s) in projections.iter_mut().zip(inputs) {
                *p = column.dot(&s.regressor());
            }
            for t in targets.iter_mut() {
                *t = logit(rng.random_range(BIP_TARGET_LOW..BIP_TARGET_HIGH));
            }
            let mut sorted_proj = projections.clone();
            sorted_proj.sort_by(|a, b| a.total_cmp(b));
            targets.sort_by(|a, b| a.total_cmp(b));
            let Some((a, b)) = fit_line(&sorted_proj, &targets) else {
                continue;
            };
            let lo = sigmoid(a * sorted_proj[0] + b);
            let hi = sigmoid(a * sorted_proj[count - 1] + b);
            if (hi - lo).abs() >= BIP_MIN_SPREAD {
                fitted = Some((a, b));
                break;
            }
        }
        let (a, b) = fitted.ok_or_else(|| {
            Error::Initialization(format!(
                "neuron {neuron} stays constant or saturated after {BIP_MAX_REDRAWS} redraws"
            ))
        })?;
        slopes[neuron] = a;
        biases[neuron] = b;
    }
    Ok(HiddenLayer {
        input_weights,
        slopes,
        biases,
    })
}

/// Least-squares line `y ~ a x + b`; `None` when `x` has no spread.
fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if !(sxx > 1e-24 * (1.0 + mx * mx) * n) {
        return None;
    }
    let a = sxy / sxx;
    Some((a, my - a * mx))
}
