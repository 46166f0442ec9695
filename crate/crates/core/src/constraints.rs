//! Barrier and Lyapunov functions, the moments of their one-step constraints
//! under Gaussian model noise, and the convex quadratic constraints on the
//! output weights that enforce them with a chosen probability.
//!
//! Safety uses the ellipsoidal barrier `h(x) = 1 - (x - c)^T A (x - c)` with
//! `eta(h) = gamma h`; stability uses `V(x) = (x - x*)^T P (x - x*)` with
//! `beta = rho V`. For the model `x+ = W^T g + eps`, `eps ~ N(0, sigma^2 I)`,
//!
//! ```text
//! C_B = h(x+) - h(x) + gamma h(x)     C_L = V(x+) - V(x) + rho V(x)
//! ```
//!
//! are Gaussian-quadratic in `eps` with closed-form mean and variance. The
//! chance constraints `P(C_B >= zeta) >= p` and `P(C_L <= delta) >= p`
//! are tightened to the linear-in-variance form
//! `zeta - E[C_B] <= -c Var[C_B]`, which rearranges into
//! `||S^{1/2} (W^T g - offset)||^2 <= Gamma` with `S = A + 4 sigma^2 c A^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::elm::{ElmModel, FeatureVector};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{check_spd, lambda_max, quad_form};

/// Upper limit on the variance-floor scale when the variance vanishes.
pub const XI_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct SafetySpec {
    a: DMatrix<f64>,
    center: DVector<f64>,
    gamma: f64,
    zeta: f64,
}

impl SafetySpec {
    pub fn new(a: DMatrix<f64>, center: DVector<f64>, gamma: f64, zeta: f64) -> Result<Self> {
        check_spd(&a, center.len(), "barrier matrix A")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("gamma must be in (0, 1], got {gamma}")));
        }
        if !(zeta >= 0.0) || !zeta.is_finite() {
            return Err(Error::InvalidInput(format!("zeta must be >= 0, got {zeta}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("ellipse center not finite".into()));
        }
        Ok(SafetySpec {
            a,
            center,
            gamma,
            zeta,
        })
    }

    /// Planar ellipse with semi-axes `iota1`, `iota2` rotated by `alpha`.
    pub fn from_ellipse(
        iota1: f64,
        iota2: f64,
        alpha: f64,
        center: DVector<f64>,
        gamma: f64,
        zeta: f64,
    ) -> Result<Self> {
        check_dim(2, center.len(), "ellipse center")?;
        SafetySpec::new(ellipse_matrix(iota1, iota2, alpha)?, center, gamma, zeta)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Half-widths of the axis-aligned box enclosing `h >= 0`.
    pub fn bounding_half_widths(&self) -> DVector<f64> {
        let inv = self
            .a
            .clone()
            .cholesky()
            .expect("A is positive definite")
            .inverse();
        DVector::from_fn(self.dim(), |i, _| inv[(i, i)].sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySpec {
    p: DMatrix<f64>,
    equilibrium: DVector<f64>,
    rho: f64,
    delta: f64,
}

impl StabilitySpec {
    pub fn new(p: DMatrix<f64>, equilibrium: DVector<f64>, rho: f64, delta: f64) -> Result<Self> {
        check_spd(&p, equilibrium.len(), "Lyapunov matrix P")?;
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidInput(format!("rho must be in (0, 1], got {rho}")));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidInput(format!("delta must be >= 0, got {delta}")));
        }
        if equilibrium.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("equilibrium not finite".into()));
        }
        Ok(StabilitySpec {
            p,
            equilibrium,
            rho,
            delta,
        })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn equilibrium(&self) -> &DVector<f64> {
        &self.equilibrium
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub p_k: f64,
    pub xi: f64,
}

impl RiskSpec {
    pub fn new(p_k: f64, xi: f64) -> Result<Self> {
        if !(p_k > 0.0 && p_k < 1.0) {
            return Err(Error::InvalidInput(format!("p_k must be in (0, 1), got {p_k}")));
        }
        if !(xi >= 1.0) || !xi.is_finite() {
            return Err(Error::InvalidInput(format!("xi must be >= 1, got {xi}")));
        }
        Ok(RiskSpec { p_k, xi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintTag {
    Safety,
    Stability,
}

/// `(W^T g - offset)^T shape (W^T g - offset) <= bound`, convex in `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub shape: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub bound: f64,
    pub feature: DVector<f64>,
    pub tag: ConstraintTag,
    pub sample_state: DVector<f64>,
    /// Effective risk coefficient `xi * c(p)` used to build `shape` and `bound`.
    pub risk_coeff: f64,
    /// Variance-floor scale the coefficient was built with (1 when inactive).
    pub xi: f64,
}

impl QuadConstraint {
    /// Residual `W^T g - offset`.
    pub fn residual(&self, weights: &DMatrix<f64>) -> DVector<f64> {
        weights.tr_mul(&self.feature) - &self.offset
    }

    pub fn lhs(&self, weights: &DMatrix<f64>) -> f64 {
        quad_form(&self.shape, &self.residual(weights))
    }

    /// `lhs - bound`; non-positive when satisfied.
    pub fn value(&self, weights: &DMatrix<f64>) -> f64 {
        self.lhs(weights) - self.bound
    }

    pub fn is_infeasible_at_point(&self) -> bool {
        self.bound < 0.0
    }
}

pub fn barrier_value(spec: &SafetySpec, x: &DVector<f64>) -> f64 {
    1.0 - quad_form(&spec.a, &(x - &spec.center))
}

pub fn lyapunov_value(spec: &StabilitySpec, x: &DVector<f64>) -> f64 {
    quad_form(&spec.p, &(x - &spec.equilibrium))
}

/// Shape matrix of a planar ellipse with semi-axes `iota1`, `iota2` and
/// orientation `alpha`; its eigenvalues are `1/iota1^2` and `1/iota2^2`.
pub fn ellipse_matrix(iota1: f64, iota2: f64, alpha: f64) -> Result<DMatrix<f64>> {
    if !(iota1 > 0.0 && iota2 > 0.0) || !iota1.is_finite() || !iota2.is_finite() {
        return Err(Error::InvalidInput(format!(
            "ellipse axes must be positive, got {iota1}, {iota2}"
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidInput("ellipse orientation not finite".into()));
    }
    let (s, c) = alpha.sin_cos();
    let k1 = 1.0 / (iota1 * iota1);
    let k2 = 1.0 / (iota2 * iota2);
    let off = c * s * (k1 - k2);
    Ok(DMatrix::from_row_slice(
        2,
        2,
        &[c * c * k1 + s * s * k2, off, off, s * s * k1 + c * c * k2],
    ))
}

/// Mean and variance of `C_B` given the predicted mean `W^T g`.
pub fn safety_moments(
    spec: &SafetySpec,
    predicted_mean: &DVector<f64>,
    sigma: f64,
    x_now: &DVector<f64>,
) -> MomentPair {
    let r = predicted_mean - &spec.center;
    let a = &spec.a;
    let s2 = sigma * sigma;
    let mean = 1.0 - quad_form(a, &r) - s2 * a.trace() - (1.0 - spec.gamma) * barrier_value(spec, x_now);
    let ar = a * &r;
    let variance = 4.0 * s2 * ar.norm_squared() + 2.0 * s2 * s2 * (a * a).trace();
    MomentPair { mean, variance }
}

/// Mean and variance of `C_L` given the predicted mean `W^T g`.
pub fn stability_moments(
    spec: &StabilitySpec,
    predicted_mean: &DVector<f64>,
    sigma: f64,
    x_now: &DVector<f64>,
) -> MomentPair {
    let r = predicted_mean - &spec.equilibrium;
    let p = &spec.p;
    let s2 = sigma * sigma;
    let mean = quad_form(p, &r) + s2 * p.trace() - (1.0 - spec.rho) * lyapunov_value(spec, x_now);
    let pr = p * &r;
    let variance = 4.0 * s2 * pr.norm_squared() + 2.0 * s2 * s2 * (p * p).trace();
    MomentPair { mean, variance }
}

/// `c(p) = sqrt(2) erfinv(2p - 1)`, the standard normal quantile.
pub fn risk_coefficient(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("probability must be in (0, 1), got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    Ok(std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * p - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveRisk {
    /// `xi * c(p)`.
    pub coefficient: f64,
    pub xi: f64,
    /// The variance was zero (or tiny) and `xi` hit [`XI_CAP`].
    pub capped: bool,
}

/// Scales the risk coefficient so the tightened bound `-xi c Var` stays below
/// `-c sqrt(Var)` when `Var < 1`: `xi = max(xi_user, 1/sqrt(Var))`.
pub fn apply_variance_floor(moments: MomentPair, risk: RiskSpec) -> Result<EffectiveRisk> {
    let c = risk_coefficient(risk.p_k)?;
    let var = moments.variance.max(0.0);
    if var >= 1.0 {
        return Ok(EffectiveRisk {
            coefficient: c,
            xi: 1.0,
            capped: false,
        });
    }
    let needed = 1.0 / var.sqrt();
    let mut xi = risk.xi.max(needed);
    let mut capped = false;
    if xi > XI_CAP {
        xi = XI_CAP;
        capped = true;
        if c > 0.0 {
            log::debug!("variance {var:e} below floor; xi capped at {XI_CAP:e}");
        }
    }
    Ok(EffectiveRisk {
        coefficient: xi * c,
        xi,
        capped,
    })
}

/// Where the variance used by the variance floor comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceBasis {
    /// The weight-free minimum `2 sigma^4 tr(S^2)`, valid for every `W`.
    WeightFree,
    /// Variance at a reference prediction `W_ref^T g`.
    Reference(DVector<f64>),
    /// A fixed scale `xi` (>= 1); the coefficient is `xi c(p)`.
    Xi(f64),
}

fn effective_risk(
    basis: &VarianceBasis,
    risk: RiskSpec,
    weight_free_variance: f64,
    reference_moments: impl FnOnce(&DVector<f64>) -> MomentPair,
) -> Result<EffectiveRisk> {
    match basis {
        VarianceBasis::WeightFree => apply_variance_floor(
            MomentPair {
                mean: 0.0,
                variance: weight_free_variance,
            },
            risk,
        ),
        VarianceBasis::Reference(mean) => apply_variance_floor(reference_moments(mean), risk),
        VarianceBasis::Xi(xi) => {
            if !(*xi >= 1.0) || !xi.is_finite() {
                return Err(Error::InvalidInput(format!("xi must be >= 1, got {xi}")));
            }
            Ok(EffectiveRisk {
                coefficient: xi * risk_coefficient(risk.p_k)?,
                xi: *xi,
                capped: false,
            })
        }
    }
}

fn check_risk_direction(risk: RiskSpec) -> Result<()> {
    RiskSpec::new(risk.p_k, risk.xi)?;
    if risk.p_k < 0.5 {
        return Err(Error::UnsupportedRisk(risk.p_k));
    }
    Ok(())
}

fn check_margin(margin: f64, sigma: f64) -> Result<()> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(Error::InvalidInput(format!("margin must be >= 0, got {margin}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// Tightened shape `S + 4 sigma^2 c S^2`.
pub fn tightened_shape(base: &DMatrix<f64>, sigma: f64, coefficient: f64) -> DMatrix<f64> {
    base + (base * base) * (4.0 * sigma * sigma * coefficient)
}

/// Safety constraint at `sample_state`:
/// `||Acal^{1/2}(W^T g - c)||^2 <= Gamma_CB - margin` with
/// `Acal = A + 4 sigma^2 c A^2` and
/// `Gamma_CB = 1 - zeta - sigma^2 tr A - (1 - gamma) h(x) - 2 sigma^4 c tr A^2`.
pub fn build_safety_constraint(
    spec: &SafetySpec,
    risk: RiskSpec,
    sigma: f64,
    sample_state: &DVector<f64>,
    feature: &FeatureVector,
    margin: f64,
    basis: &VarianceBasis,
) -> Result<QuadConstraint> {
    check_risk_direction(risk)?;
    check_margin(margin, sigma)?;
    check_dim(spec.dim(), sample_state.len(), "sample state")?;
    let a = &spec.a;
    let a2 = a * a;
    let s2 = sigma * sigma;
    let eff = effective_risk(basis, risk, 2.0 * s2 * s2 * a2.trace(), |mean| {
        safety_moments(spec, mean, sigma, sample_state)
    })?;
    let c = eff.coefficient;
    let gamma_cb = 1.0
        - spec.zeta
        - s2 * a.trace()
        - (1.0 - spec.gamma) * barrier_value(spec, sample_state)
        - 2.0 * s2 * s2 * c * a2.trace();
    Ok(QuadConstraint {
        shape: tightened_shape(a, sigma, c),
        offset: spec.center.clone(),
        bound: gamma_cb - margin,
        feature: feature.as_vector().clone(),
        tag: ConstraintTag::Safety,
        sample_state: sample_state.clone(),
        risk_coeff: c,
        xi: eff.xi,
    })
}

/// Stability constraint at `sample_state`:
/// `||Pcal^{1/2}(W^T g - x*)||^2 <= Gamma_CL - margin` with
/// `Pcal = P + 4 sigma^2 c P^2` and
/// `Gamma_CL = delta - sigma^2 tr P + (1 - rho) V(x) - 2 sigma^4 c tr P^2`.
pub fn build_stability_constraint(
    spec: &StabilitySpec,
    risk: RiskSpec,
    sigma: f64,
    sample_state: &DVector<f64>,
    feature: &FeatureVector,
    margin: f64,
    basis: &VarianceBasis,
) -> Result<QuadConstraint> {
    check_risk_direction(risk)?;
    check_margin(margin, sigma)?;
    check_dim(spec.equilibrium.len(), sample_state.len(), "sample state")?;
    let p = &spec.p;
    let p2 = p * p;
    let s2 = sigma * sigma;
    let eff = effective_risk(basis, risk, 2.0 * s2 * s2 * p2.trace(), |mean| {
        stability_moments(spec, mean, sigma, sample_state)
    })?;
    let c = eff.coefficient;
    let gamma_cl = spec.delta - s2 * p.trace() + (1.0 - spec.rho) * lyapunov_value(spec, sample_state)
        - 2.0 * s2 * s2 * c * p2.trace();
    Ok(QuadConstraint {
        shape: tightened_shape(p, sigma, c),
        offset: spec.equilibrium.clone(),
        bound: gamma_cl - margin,
        feature: feature.as_vector().clone(),
        tag: ConstraintTag::Stability,
        sample_state: sample_state.clone(),
        risk_coeff: c,
        xi: eff.xi,
    })
}

/// Everything needed to build both constraint families at a state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpecs {
    pub safety: SafetySpec,
    pub stability: StabilitySpec,
    pub risk: RiskSpec,
    pub sigma: f64,
}

impl ConstraintSpecs {
    pub fn new(safety: SafetySpec, stability: StabilitySpec, risk: RiskSpec, sigma: f64) -> Result<Self> {
        check_dim(safety.dim(), stability.equilibrium().len(), "stability dimension")?;
        RiskSpec::new(risk.p_k, risk.xi)?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(ConstraintSpecs {
            safety,
            stability,
            risk,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.safety.dim()
    }

    /// Safety and stability constraints at `state` for `model`'s features,
    /// with the variance floor evaluated at `model`'s own prediction.
    pub fn constraints_at(
        &self,
        model: &ElmModel,
        state: &DVector<f64>,
        margins: Margins,
    ) -> Result<[QuadConstraint; 2]> {
        let input = crate::elm::InputVector::from_state(state, self.stability.equilibrium());
        let g = model.feature_map(&input)?;
        let mean = model.output_weights().tr_mul(g.as_vector());
        let basis = VarianceBasis::Reference(mean);
        self.pair_with(state, &g, margins, [&basis, &basis])
    }

    /// Both constraints at `state` for a precomputed feature vector, with a
    /// separate variance basis for the safety and stability constraint.
    pub fn pair_with(
        &self,
        state: &DVector<f64>,
        feature: &FeatureVector,
        margins: Margins,
        bases: [&VarianceBasis; 2],
    ) -> Result<[QuadConstraint; 2]> {
        Ok([
            build_safety_constraint(&self.safety, self.risk, self.sigma, state, feature, margins.safety, bases[0])?,
            build_stability_constraint(
                &self.stability,
                self.risk,
                self.sigma,
                state,
                feature,
                margins.stability,
                bases[1],
            )?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Margins {
    pub safety: f64,
    pub stability: f64,
}

/// Sampling margins `tau (chi + Upsilon)` for both constraint families at
/// `x_sample`. Enforcing a constraint with its bound reduced by the margin at
/// a grid point implies the unreduced constraint at every state within
/// `tau / 2` of it.
///
/// `lambda_max(W Acal W^T)` would depend on the decision variable, so it is
/// replaced by the upper bound `W_bar^2 lambda_max(Acal)` (likewise for
/// `Pcal`), which holds whenever `||W||_F <= W_bar`.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_margins(
    model: &ElmModel,
    safety: &SafetySpec,
    stability: &StabilitySpec,
    sigma: f64,
    safety_coeff: f64,
    stability_coeff: f64,
    x_sample: &DVector<f64>,
    tau: f64,
) -> Result<Margins> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(Margins {
            safety: 0.0,
            stability: 0.0,
        });
    }
    let w_bar = model.weight_bound_out();
    let g_bar = model.lipschitz_feature_bound();
    let root_features = (model.dims().feature_len() as f64).sqrt();
    let x_norm = x_sample.norm();

    let a_cal = tightened_shape(safety.a(), sigma, safety_coeff);
    let lam_a_cal = lambda_max(&a_cal);
    let lam_m = w_bar * w_bar * lam_a_cal;
    let center_norm = safety.center().norm();
    let chi_b = (lam_m * root_features + w_bar * lam_a_cal * center_norm) * g_bar;
    let upsilon_b = (1.0 - safety.gamma()) * lambda_max(safety.a()) * (x_norm + center_norm);

    let p_cal = tightened_shape(stability.p(), sigma, stability_coeff);
    let lam_p_cal = lambda_max(&p_cal);
    let lam_h = w_bar * w_bar * lam_p_cal;
    let eq_norm = stability.equilibrium().norm();
    let chi_l = (lam_h * root_features + w_bar * lam_p_cal * eq_norm) * g_bar;
    let upsilon_l = (1.0 - stability.rho()) * lambda_max(stability.p()) * (x_norm + eq_norm);

    Ok(Margins {
        safety: tau * (chi_b + upsilon_b),
        stability: tau * (chi_l + upsilon_l),
    })
}
