//! Local Kalman filter: online gain adaptation by the recursive prediction
//! error method.
//!
//! The predictor `x̂(t+1) = F x̂(t) + K(θ) ε(t)` is run with a gain
//! parametrised as `K(θ) = exp(θ) K₀`. Since `dK/dθ = K`, the sensitivity
//! `ŵ = ∂x̂/∂θ` obeys
//!
//! ```text
//! ŵ(t+1) = K(θ) ε(t) + (F - K(θ) H) ŵ(t)
//! ```
//!
//! and the stochastic gradient step on `E[εᵀ Λ⁻¹ ε]` becomes
//! `θ(t+1) = θ(t) + γ(t) v̂ᵀ Λ̂⁻¹ ε` with `v̂ = H ŵ`. On the gain itself this
//! is the exponentiated-gradient update `K ← exp(γ v̂ᵀ Λ̂⁻¹ ε) K`.
//!
//! Within one step every quantity is read at time `t`: the gain, the
//! sensitivity and `Λ̂⁻¹(t)` feed the θ update, and the error covariance
//! estimate advances last.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lds::LdsModel;
use crate::linalg::{
    check_len, check_shape, check_square, condition_number, max_abs, min_eigenvalue,
    spd_inverse, spectral_radius, symmetrize,
};

/// Updates that would push `Λ̂⁻¹` past this condition number are skipped.
pub const LAMBDA_MAX_CONDITION: f64 = 1e12;
/// Eigenvalue floor enforced on `Λ̂⁻¹` by the PD projection.
pub const LAMBDA_EIGEN_FLOOR: f64 = 1e-10;
/// Largest exponent allowed in one multiplicative gain update.
pub const MAX_LOG_GAIN_STEP: f64 = 50.0;

/// Learning-rate rule `γ(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaSchedule {
    /// `γ(t) = c`.
    Constant { c: f64 },
    /// `γ(t) = max(c / t, floor)`, with `t = 0` treated as `t = 1`.
    InverseTime { c: f64, floor: f64 },
    /// `γ(t) = c / (1 + t / τ)`.
    Decay { c: f64, tau: f64 },
}

impl GammaSchedule {
    pub fn gamma(&self, t: u64) -> f64 {
        match *self {
            GammaSchedule::Constant { c } => c,
            GammaSchedule::InverseTime { c, floor } => (c / t.max(1) as f64).max(floor),
            GammaSchedule::Decay { c, tau } => c / (1.0 + t as f64 / tau),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GammaSchedule::Constant { c } => c > 0.0 && c.is_finite(),
            GammaSchedule::InverseTime { c, floor } => c > 0.0 && floor > 0.0 && c.is_finite(),
            GammaSchedule::Decay { c, tau } => c > 0.0 && tau > 0.0 && c.is_finite() && tau.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("learning rate must stay positive: {self:?}")))
        }
    }
}

/// `γ(t)` for `schedule`.
pub fn gamma(t: u64, schedule: &GammaSchedule) -> f64 {
    schedule.gamma(t)
}

/// How the reconstruction-error covariance is tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Hebbian average of `εεᵀ`, inverted for the θ update.
    Direct,
    /// `Λ̂⁻¹` updated directly, no inversion.
    #[default]
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpeConfig {
    pub gamma: GammaSchedule,
    pub lambda_mode: LambdaMode,
    /// `[θ_min, θ_max]`.
    pub theta_bounds: [f64; 2],
    /// Reject θ increments that make `F - K(θ) H` unstable.
    pub stability_guard: bool,
    /// PD projection and condition-number check on the `Λ̂` update.
    pub lambda_guard: bool,
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self {
            gamma: GammaSchedule::Decay { c: 0.02, tau: 2000.0 },
            lambda_mode: LambdaMode::Inverse,
            theta_bounds: [-10.0, 10.0],
            stability_guard: true,
            lambda_guard: true,
        }
    }
}

impl RpeConfig {
    pub fn validate(&self) -> Result<()> {
        self.gamma.validate()?;
        let [lo, hi] = self.theta_bounds;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidArgument(format!("theta_bounds must satisfy min < max, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// The part of the model the adaptive filter is allowed to know.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl Dynamics {
    pub fn new(f: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let n = f.nrows();
        check_square("F", &f, n)?;
        check_shape("H", &h, h.nrows(), n)?;
        Ok(Self { f, h })
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    pub fn p(&self) -> usize {
        self.h.nrows()
    }
}

impl From<&LdsModel> for Dynamics {
    fn from(model: &LdsModel) -> Self {
        Self { f: model.f.clone(), h: model.h.clone() }
    }
}

/// Guard events raised during a step. None of them abort the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepFlags {
    /// θ hit `theta_bounds` and was clamped.
    pub theta_clamped: bool,
    /// The θ increment was rejected by the stability guard.
    pub stability_rejected: bool,
    /// The `Λ̂` update was skipped for conditioning.
    pub lambda_ill_conditioned: bool,
    /// `Λ̂⁻¹` was shifted back into the PD cone.
    pub lambda_projected: bool,
    /// A multiplicative gain step exceeded the exponent limit.
    pub gain_update_clamped: bool,
}

impl StepFlags {
    pub fn any(&self) -> bool {
        self.theta_clamped
            || self.stability_rejected
            || self.lambda_ill_conditioned
            || self.lambda_projected
            || self.gain_update_clamped
    }

    pub fn merge(self, other: StepFlags) -> StepFlags {
        StepFlags {
            theta_clamped: self.theta_clamped || other.theta_clamped,
            stability_rejected: self.stability_rejected || other.stability_rejected,
            lambda_ill_conditioned: self.lambda_ill_conditioned || other.lambda_ill_conditioned,
            lambda_projected: self.lambda_projected || other.lambda_projected,
            gain_update_clamped: self.gain_update_clamped || other.gain_update_clamped,
        }
    }
}

impl fmt::Display for StepFlags {
    /// `|`-separated flag names; empty when nothing fired.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.theta_clamped, "theta_clamped"),
            (self.stability_rejected, "stability_rejected"),
            (self.lambda_ill_conditioned, "lambda_ill_conditioned"),
            (self.lambda_projected, "lambda_projected"),
            (self.gain_update_clamped, "gain_update_clamped"),
        ];
        let mut first = true;
        for (on, name) in names {
            if on {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

/// Running estimate of the reconstruction-error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaEstimate {
    /// `Λ̂⁻¹`, read by the θ update.
    pub inv: DMatrix<f64>,
    /// `Λ̂`, kept only in [`LambdaMode::Direct`].
    pub direct: Option<DMatrix<f64>>,
}

impl LambdaEstimate {
    pub fn identity(p: usize, mode: LambdaMode) -> Self {
        let eye = DMatrix::identity(p, p);
        Self {
            direct: (mode == LambdaMode::Direct).then(|| eye.clone()),
            inv: eye,
        }
    }

    /// Advances the estimate by one reconstruction error.
    pub fn advance(&self, eps: &DVector<f64>, gamma: f64, cfg: &RpeConfig) -> (Self, StepFlags) {
        let mut flags = StepFlags::default();
        match (cfg.lambda_mode, &self.direct) {
            (LambdaMode::Direct, Some(lambda)) => {
                let next = lambda_update_direct(lambda, eps, gamma);
                let inv = spd_inverse(&next);
                let usable = match &inv {
                    Some(inv) => !cfg.lambda_guard || condition_number(inv) <= LAMBDA_MAX_CONDITION,
                    None => false,
                };
                if usable {
                    (Self { inv: inv.expect("checked"), direct: Some(next) }, flags)
                } else {
                    flags.lambda_ill_conditioned = true;
                    (self.clone(), flags)
                }
            }
            _ => {
                let mut next = lambda_update_inverse(&self.inv, eps, gamma);
                if cfg.lambda_guard {
                    let (projected, shifted) = project_pd(&next, LAMBDA_EIGEN_FLOOR);
                    flags.lambda_projected = shifted;
                    if condition_number(&projected) > LAMBDA_MAX_CONDITION {
                        flags.lambda_ill_conditioned = true;
                        return (self.clone(), flags);
                    }
                    next = projected;
                }
                (Self { inv: next, direct: None }, flags)
            }
        }
    }
}

/// Adaptive-filter state for the scalar-θ variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RpeState {
    /// Predictive estimate `x̂(t)`.
    pub x_hat: DVector<f64>,
    /// Sensitivity `ŵ(t) = ∂x̂/∂θ`.
    pub w_hat: DVector<f64>,
    pub theta: f64,
    /// Baseline gain `K₀`; the working gain is `exp(θ) K₀`.
    pub k0: DMatrix<f64>,
    pub lambda: LambdaEstimate,
    pub t: u64,
}

impl RpeState {
    /// `x̂ = 0`, `ŵ = 0`, `θ = 0`, `Λ̂ = Λ̂⁻¹ = I`.
    pub fn initial(k0: DMatrix<f64>, mode: LambdaMode) -> Self {
        let (n, p) = k0.shape();
        Self {
            x_hat: DVector::zeros(n),
            w_hat: DVector::zeros(n),
            theta: 0.0,
            lambda: LambdaEstimate::identity(p, mode),
            k0,
            t: 0,
        }
    }

    pub fn gain(&self) -> DMatrix<f64> {
        gain_from_theta(self.theta, &self.k0)
    }

    pub fn lambda_inv(&self) -> &DMatrix<f64> {
        &self.lambda.inv
    }
}

/// Per-step outputs of the adaptive filter.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Reconstructed input `ŷ = H x̂`.
    pub y_rec: DVector<f64>,
    /// Reconstruction error `ε = y - ŷ`.
    pub eps: DVector<f64>,
    /// Output sensitivity `v̂ = H ŵ`.
    pub v_hat: DVector<f64>,
    /// `v̂ᵀ Λ̂⁻¹ ε`.
    pub grad: f64,
    pub flags: StepFlags,
}

/// `Hᵀ` rescaled so its largest entry has magnitude 0.1.
pub fn default_baseline_gain(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ht = h.transpose();
    let scale = max_abs(&ht);
    if scale == 0.0 {
        return Err(Error::InvalidArgument("cannot derive a baseline gain from H = 0".into()));
    }
    Ok(ht * (0.1 / scale))
}

/// `K(θ) = exp(θ) K₀`.
pub fn gain_from_theta(theta: f64, k0: &DMatrix<f64>) -> DMatrix<f64> {
    k0 * theta.exp()
}

/// Result of [`multiplicative_gain_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct GainUpdate {
    pub gain: DMatrix<f64>,
    pub clamped: bool,
}

/// Exponentiated-gradient step `K ← exp(γ·grad) K`, with the exponent
/// clamped to `±50`.
pub fn multiplicative_gain_update(k: &DMatrix<f64>, grad: f64, gamma: f64) -> GainUpdate {
    let step = gamma * grad;
    let clamped = step.abs() > MAX_LOG_GAIN_STEP;
    let step = step.clamp(-MAX_LOG_GAIN_STEP, MAX_LOG_GAIN_STEP);
    GainUpdate { gain: k * step.exp(), clamped }
}

/// Signal-Hebbian covariance update `Λ̂ + γ (εεᵀ - Λ̂)`.
pub fn lambda_update_direct(lambda: &DMatrix<f64>, eps: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    lambda + (eps * eps.transpose() - lambda) * gamma
}

/// Inverse-form update `Λ̂⁻¹ + γ [Λ̂⁻¹ - (Λ̂⁻¹ε)(Λ̂⁻¹ε)ᵀ]`, symmetrised.
pub fn lambda_update_inverse(lambda_inv: &DMatrix<f64>, eps: &DVector<f64>, gamma: f64) -> DMatrix<f64> {
    let u = lambda_inv * eps;
    symmetrize(&(lambda_inv + (lambda_inv - &u * u.transpose()) * gamma))
}

/// Symmetrises and, if the smallest eigenvalue is below `floor`, shifts the
/// spectrum up by `floor - λ_min`. Returns whether a shift happened.
pub fn project_pd(a: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(a);
    let lo = min_eigenvalue(&sym);
    if lo < floor {
        let n = sym.nrows();
        (sym + DMatrix::identity(n, n) * (floor - lo), true)
    } else {
        (sym, false)
    }
}

fn check_step_shapes(x: &DVector<f64>, k0: &DMatrix<f64>, lambda: &LambdaEstimate, y: &DVector<f64>, dynamics: &Dynamics) -> Result<()> {
    let (n, p) = (dynamics.n(), dynamics.p());
    check_len("x_hat", x, n)?;
    check_len("y", y, p)?;
    check_shape("K0", k0, n, p)?;
    check_square("Lambda_inv", &lambda.inv, p)?;
    Ok(())
}

/// One step of the local Kalman recursion with `γ` taken from the schedule
/// at `state.t`.
pub fn rpe_step(
    state: &RpeState,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    cfg: &RpeConfig,
) -> Result<(RpeState, StepOutput)> {
    rpe_step_with_gamma(state, y, dynamics, cfg, cfg.gamma.gamma(state.t))
}

/// One step with an explicit learning rate. `gamma = 0` freezes θ and `Λ̂`.
pub fn rpe_step_with_gamma(
    state: &RpeState,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    cfg: &RpeConfig,
    gamma: f64,
) -> Result<(RpeState, StepOutput)> {
    check_step_shapes(&state.x_hat, &state.k0, &state.lambda, y, dynamics)?;
    check_len("w_hat", &state.w_hat, dynamics.n())?;
    let (f, h) = (&dynamics.f, &dynamics.h);
    let k = state.gain();

    let y_rec = h * &state.x_hat;
    let eps = y - &y_rec;
    let k_eps = &k * &eps;
    let x_hat = f * &state.x_hat + &k_eps;
    let v_hat = h * &state.w_hat;
    let w_hat = &k_eps + (f - &k * h) * &state.w_hat;
    let grad = v_hat.dot(&(&state.lambda.inv * &eps));

    let mut flags = StepFlags::default();
    let theta = advance_theta(state.theta, gamma * grad, &state.k0, dynamics, cfg, &mut flags);
    let (lambda, lambda_flags) = state.lambda.advance(&eps, gamma, cfg);
    flags = flags.merge(lambda_flags);

    let next = RpeState { x_hat, w_hat, theta, k0: state.k0.clone(), lambda, t: state.t + 1 };
    Ok((next, StepOutput { y_rec, eps, v_hat, grad, flags }))
}

fn advance_theta(
    theta: f64,
    increment: f64,
    k0: &DMatrix<f64>,
    dynamics: &Dynamics,
    cfg: &RpeConfig,
    flags: &mut StepFlags,
) -> f64 {
    let [lo, hi] = cfg.theta_bounds;
    let raw = theta + increment;
    let candidate = raw.clamp(lo, hi);
    flags.theta_clamped = candidate != raw;
    if cfg.stability_guard && increment != 0.0 && !is_stable(&gain_from_theta(candidate, k0), dynamics) {
        flags.stability_rejected = true;
        return theta;
    }
    candidate
}

/// Spectral radius of `F - K H` below one.
pub fn is_stable(k: &DMatrix<f64>, dynamics: &Dynamics) -> bool {
    spectral_radius(&(&dynamics.f - k * &dynamics.h)) < 1.0
}

/// Matrix-θ generalisation: every gain entry has its own parameter,
/// `K_ij = exp(θ_ij) K₀_ij`, and its own sensitivity vector `w^(ij)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixThetaState {
    /// θ, same shape as the gain.
    pub theta: DMatrix<f64>,
    /// `w^(ij)` stored at index `i * p + j`.
    pub sensitivities: Vec<DVector<f64>>,
}

/// Adaptive-filter state for the matrix-θ variant.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRpeState {
    pub x_hat: DVector<f64>,
    pub params: MatrixThetaState,
    pub k0: DMatrix<f64>,
    pub lambda: LambdaEstimate,
    pub t: u64,
}

impl MatrixRpeState {
    pub fn initial(k0: DMatrix<f64>, mode: LambdaMode) -> Self {
        let (n, p) = k0.shape();
        Self {
            x_hat: DVector::zeros(n),
            params: MatrixThetaState {
                theta: DMatrix::zeros(n, p),
                sensitivities: vec![DVector::zeros(n); n * p],
            },
            lambda: LambdaEstimate::identity(p, mode),
            k0,
            t: 0,
        }
    }

    pub fn gain(&self) -> DMatrix<f64> {
        matrix_gain(&self.params.theta, &self.k0)
    }
}

/// `K_ij = exp(θ_ij) K₀_ij`.
pub fn matrix_gain(theta: &DMatrix<f64>, k0: &DMatrix<f64>) -> DMatrix<f64> {
    k0.zip_map(theta, |k, th| th.exp() * k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixStepOutput {
    pub y_rec: DVector<f64>,
    pub eps: DVector<f64>,
    /// `(H w^(ij))ᵀ Λ̂⁻¹ ε` per gain entry.
    pub grad: DMatrix<f64>,
    pub flags: StepFlags,
}

pub fn rpe_step_matrix(
    state: &MatrixRpeState,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    cfg: &RpeConfig,
) -> Result<(MatrixRpeState, MatrixStepOutput)> {
    rpe_step_matrix_with_gamma(state, y, dynamics, cfg, cfg.gamma.gamma(state.t))
}

pub fn rpe_step_matrix_with_gamma(
    state: &MatrixRpeState,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    cfg: &RpeConfig,
    gamma: f64,
) -> Result<(MatrixRpeState, MatrixStepOutput)> {
    check_step_shapes(&state.x_hat, &state.k0, &state.lambda, y, dynamics)?;
    let (n, p) = (dynamics.n(), dynamics.p());
    check_shape("theta", &state.params.theta, n, p)?;
    if state.params.sensitivities.len() != n * p {
        return Err(Error::DimensionMismatch(format!(
            "expected {} sensitivity vectors, got {}",
            n * p,
            state.params.sensitivities.len()
        )));
    }
    let (f, h) = (&dynamics.f, &dynamics.h);
    let k = state.gain();
    let closed_loop = f - &k * h;

    let y_rec = h * &state.x_hat;
    let eps = y - &y_rec;
    let x_hat = f * &state.x_hat + &k * &eps;
    let scaled_eps = &state.lambda.inv * &eps;

    let mut grad = DMatrix::zeros(n, p);
    let mut sensitivities = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let w = &state.params.sensitivities[i * p + j];
            check_len("w", w, n)?;
            grad[(i, j)] = (h * w).dot(&scaled_eps);
            let mut next = &closed_loop * w;
            next[i] += k[(i, j)] * eps[j];
            sensitivities.push(next);
        }
    }

    let mut flags = StepFlags::default();
    let [lo, hi] = cfg.theta_bounds;
    let raw = &state.params.theta + &grad * gamma;
    let mut theta = raw.map(|v| v.clamp(lo, hi));
    flags.theta_clamped = theta != raw;
    if cfg.stability_guard && gamma != 0.0 && !is_stable(&matrix_gain(&theta, &state.k0), dynamics) {
        flags.stability_rejected = true;
        theta = state.params.theta.clone();
    }
    let (lambda, lambda_flags) = state.lambda.advance(&eps, gamma, cfg);
    flags = flags.merge(lambda_flags);

    let next = MatrixRpeState {
        x_hat,
        params: MatrixThetaState { theta, sensitivities },
        k0: state.k0.clone(),
        lambda,
        t: state.t + 1,
    };
    Ok((next, MatrixStepOutput { y_rec, eps, grad, flags }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::predict_step;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dynamics_2d() -> Dynamics {
        Dynamics::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]),
        )
        .unwrap()
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gamma_closed_forms() {
        let c = GammaSchedule::Constant { c: 0.01 };
        assert!((0..100).all(|t| gamma(t, &c) == 0.01));
        assert_eq!(gamma(10, &GammaSchedule::InverseTime { c: 1.0, floor: 1e-4 }), 0.1);
        assert_eq!(gamma(1_000_000, &GammaSchedule::InverseTime { c: 1.0, floor: 1e-4 }), 1e-4);
        assert_eq!(gamma(0, &GammaSchedule::InverseTime { c: 1.0, floor: 1e-4 }), 1.0);
        assert_eq!(gamma(100, &GammaSchedule::Decay { c: 0.1, tau: 100.0 }), 0.05);
    }

    #[test]
    fn decaying_schedules_are_monotone_and_positive() {
        for s in [
            GammaSchedule::InverseTime { c: 0.5, floor: 1e-3 },
            GammaSchedule::Decay { c: 0.2, tau: 30.0 },
        ] {
            let values: Vec<f64> = (0..5000).map(|t| s.gamma(t)).collect();
            assert!(values.iter().all(|g| *g > 0.0));
            assert!(values.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn non_positive_schedules_are_rejected() {
        assert!(GammaSchedule::Constant { c: 0.0 }.validate().is_err());
        assert!(GammaSchedule::Decay { c: 0.1, tau: -1.0 }.validate().is_err());
        assert!(GammaSchedule::InverseTime { c: 0.1, floor: 0.0 }.validate().is_err());
    }

    #[test]
    fn gain_from_theta_closed_forms() {
        let k0 = DMatrix::from_row_slice(2, 1, &[0.3, -0.4]);
        assert_eq!(gain_from_theta(0.0, &k0), k0);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(max_abs(&(gain_from_theta(2f64.ln(), &eye) - eye * 2.0)) < 1e-15);
    }

    #[test]
    fn gain_derivative_equals_gain() {
        let k0 = DMatrix::from_row_slice(2, 2, &[0.3, -0.4, 1.5, 0.02]);
        let (theta, h) = (0.37, 1e-6);
        let fd = (gain_from_theta(theta + h, &k0) - gain_from_theta(theta - h, &k0)) / (2.0 * h);
        let k = gain_from_theta(theta, &k0);
        assert!(max_abs(&(fd - &k)) / max_abs(&k) < 1e-8);
    }

    #[test]
    fn multiplicative_update_closed_forms() {
        let k = DMatrix::from_row_slice(1, 2, &[0.5, -2.0]);
        let same = multiplicative_gain_update(&k, 0.0, 0.3);
        assert_eq!(same.gain, k);
        let tripled = multiplicative_gain_update(&k, 3f64.ln(), 1.0);
        assert!(max_abs(&(tripled.gain - &k * 3.0)) < 1e-15);
        let huge = multiplicative_gain_update(&k, 1e3, 1.0);
        assert!(huge.clamped);
        assert!(max_abs(&(huge.gain - &k * 50f64.exp())) / 50f64.exp() < 1e-15);
    }

    #[test]
    fn lambda_direct_closed_forms() {
        let lambda = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let eps = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(lambda_update_direct(&lambda, &eps, 1.0), &eps * eps.transpose());
        assert_eq!(lambda_update_direct(&lambda, &DVector::zeros(2), 0.25), &lambda * 0.75);
    }

    #[test]
    fn lambda_inverse_closed_forms() {
        let inv = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let eps = DVector::from_vec(vec![0.5, -1.0]);
        assert!(max_abs(&(lambda_update_inverse(&inv, &DVector::zeros(2), 0.1) - &inv * 1.1)) < 1e-15);
        assert_eq!(lambda_update_inverse(&inv, &eps, 0.0), inv);
    }

    #[test]
    fn pd_projection_shifts_spectrum() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let (p, shifted) = project_pd(&a, 1e-10);
        assert!(shifted);
        assert!((min_eigenvalue(&p) - 1e-10).abs() < 1e-15);
        let (q, shifted) = project_pd(&DMatrix::identity(2, 2), 1e-10);
        assert!(!shifted);
        assert_eq!(q, DMatrix::identity(2, 2));
    }

    #[test]
    fn zero_innovation_step() {
        let dynamics = dynamics_2d();
        let k0 = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.3]);
        let cfg = RpeConfig { lambda_mode: LambdaMode::Direct, ..RpeConfig::default() };
        let mut state = RpeState::initial(k0, LambdaMode::Direct);
        state.x_hat = DVector::from_vec(vec![1.0, -0.5]);
        state.w_hat = DVector::from_vec(vec![0.2, 0.7]);
        state.theta = 0.3;
        let y = &dynamics.h * &state.x_hat;
        let gamma = 0.05;
        let (next, out) = rpe_step_with_gamma(&state, &y, &dynamics, &cfg, gamma).unwrap();
        assert_eq!(out.eps, DVector::zeros(2));
        assert_eq!(next.theta, state.theta);
        assert_eq!(next.x_hat, &dynamics.f * &state.x_hat);
        let k = state.gain();
        let expected_w = (&dynamics.f - &k * &dynamics.h) * &state.w_hat;
        assert!((next.w_hat - expected_w).amax() < 1e-15);
        let lambda = next.lambda.direct.unwrap();
        assert!(max_abs(&(lambda - DMatrix::identity(2, 2) * (1.0 - gamma))) < 1e-15);
    }

    #[test]
    fn reconstruction_plus_error_recovers_input() {
        let dynamics = dynamics_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = RpeState::initial(DMatrix::identity(2, 2) * 0.2, LambdaMode::Inverse);
        let cfg = RpeConfig::default();
        for _ in 0..200 {
            let y = random_vec(&mut rng, 2) * 3.0;
            let (next, out) = rpe_step(&state, &y, &dynamics, &cfg).unwrap();
            let residual = (&out.y_rec + &out.eps - &y).amax();
            assert!(residual <= 4.0 * f64::EPSILON * y.amax().max(out.y_rec.amax()));
            state = next;
        }
    }

    #[test]
    fn frozen_learning_reduces_to_fixed_gain_predictor() {
        let dynamics = dynamics_2d();
        let model = LdsModel::new(
            dynamics.f.clone(),
            dynamics.h.clone(),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let k0 = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, -0.1, 0.3]);
        let mut state = RpeState::initial(k0, LambdaMode::Inverse);
        state.theta = 0.4;
        let kp = state.gain();
        let cfg = RpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x_ref = state.x_hat.clone();
        for _ in 0..300 {
            let y = random_vec(&mut rng, 2);
            let (next, _) = rpe_step_with_gamma(&state, &y, &dynamics, &cfg, 0.0).unwrap();
            x_ref = predict_step(&x_ref, &y, &kp, &model).unwrap();
            assert!((&next.x_hat - &x_ref).amax() < 1e-12);
            assert_eq!(next.theta, 0.4);
            assert_eq!(next.lambda.inv, state.lambda.inv);
            state = next;
        }
    }

    #[test]
    fn sensitivity_rewrite_matches_derivative_form() {
        let dynamics = dynamics_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let k = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
            let w = random_vec(&mut rng, 2);
            let eps = random_vec(&mut rng, 2);
            let v = &dynamics.h * &w;
            // dK/dθ = K for the exponential parametrisation.
            let derivative_form = &dynamics.f * &w + &k * &eps - &k * &v;
            let rewritten = &k * &eps + (&dynamics.f - &k * &dynamics.h) * &w;
            assert!((derivative_form - rewritten).amax() < 1e-14);
        }
    }

    #[test]
    fn stability_guard_rejects_destabilising_step() {
        let dynamics = Dynamics::new(DMatrix::from_element(1, 1, 0.9), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mut state = RpeState::initial(DMatrix::from_element(1, 1, 0.5), LambdaMode::Inverse);
        state.w_hat = DVector::from_element(1, -1.0);
        let cfg = RpeConfig::default();
        // v = -1, eps = -1 → grad = +1; γ = 2 pushes K to 0.5 e² ≈ 3.7, |0.9 - K| > 1.
        let (next, out) = rpe_step_with_gamma(&state, &DVector::from_element(1, -1.0), &dynamics, &cfg, 2.0).unwrap();
        assert!(out.flags.stability_rejected);
        assert_eq!(next.theta, 0.0);
        let unguarded = RpeConfig { stability_guard: false, ..cfg };
        let (next, out) = rpe_step_with_gamma(&state, &DVector::from_element(1, -1.0), &dynamics, &unguarded, 2.0).unwrap();
        assert!(!out.flags.stability_rejected);
        assert_eq!(next.theta, 2.0);
    }

    #[test]
    fn theta_is_clamped_to_bounds() {
        let dynamics = Dynamics::new(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let mut state = RpeState::initial(DMatrix::from_element(1, 1, 1e-6), LambdaMode::Inverse);
        state.w_hat = DVector::from_element(1, 1.0);
        let cfg = RpeConfig { stability_guard: false, theta_bounds: [-1.0, 1.0], ..RpeConfig::default() };
        let (next, out) = rpe_step_with_gamma(&state, &DVector::from_element(1, 5.0), &dynamics, &cfg, 1.0).unwrap();
        assert!(out.flags.theta_clamped);
        assert_eq!(next.theta, 1.0);
    }

    #[test]
    fn ill_conditioned_direct_update_is_skipped() {
        let dynamics = dynamics_2d();
        let state = RpeState::initial(DMatrix::identity(2, 2) * 0.1, LambdaMode::Direct);
        let cfg = RpeConfig { lambda_mode: LambdaMode::Direct, ..RpeConfig::default() };
        // γ = 1 replaces Λ̂ by the rank-one εεᵀ.
        let (next, out) = rpe_step_with_gamma(&state, &DVector::from_vec(vec![1.0, 2.0]), &dynamics, &cfg, 1.0).unwrap();
        assert!(out.flags.lambda_ill_conditioned);
        assert_eq!(next.lambda, state.lambda);
    }

    #[test]
    fn large_inverse_step_is_projected() {
        let dynamics = dynamics_2d();
        let state = RpeState::initial(DMatrix::identity(2, 2) * 0.1, LambdaMode::Inverse);
        let cfg = RpeConfig::default();
        let y = DVector::from_vec(vec![3.0, 0.0]);
        let (next, out) = rpe_step_with_gamma(&state, &y, &dynamics, &cfg, 0.5).unwrap();
        assert!(out.flags.lambda_projected);
        assert!(min_eigenvalue(&next.lambda.inv) >= LAMBDA_EIGEN_FLOOR * 0.999);
        assert!(out.flags.to_string().contains("lambda_projected"));
    }

    #[test]
    fn matrix_variant_collapses_to_scalar_in_one_dimension() {
        let dynamics = Dynamics::new(DMatrix::from_element(1, 1, 0.8), DMatrix::from_element(1, 1, 1.3)).unwrap();
        let k0 = DMatrix::from_element(1, 1, 0.25);
        let cfg = RpeConfig { gamma: GammaSchedule::Constant { c: 0.01 }, ..RpeConfig::default() };
        let mut scalar = RpeState::initial(k0.clone(), LambdaMode::Inverse);
        let mut matrix = MatrixRpeState::initial(k0, LambdaMode::Inverse);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let y = random_vec(&mut rng, 1) * 2.0;
            let (s, so) = rpe_step(&scalar, &y, &dynamics, &cfg).unwrap();
            let (m, mo) = rpe_step_matrix(&matrix, &y, &dynamics, &cfg).unwrap();
            assert!((s.theta - m.params.theta[(0, 0)]).abs() < 1e-14);
            assert!((&s.x_hat - &m.x_hat).amax() < 1e-14);
            assert!((&s.w_hat - &m.params.sensitivities[0]).amax() < 1e-14);
            assert!((so.grad - mo.grad[(0, 0)]).abs() < 1e-14);
            scalar = s;
            matrix = m;
        }
    }

    #[test]
    fn matrix_variant_frozen_without_learning() {
        let dynamics = dynamics_2d();
        let k0 = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, -0.1, 0.3]);
        let mut state = MatrixRpeState::initial(k0, LambdaMode::Inverse);
        let cfg = RpeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (next, _) = rpe_step_matrix_with_gamma(&state, &random_vec(&mut rng, 2), &dynamics, &cfg, 0.0).unwrap();
            assert_eq!(next.params.theta, DMatrix::zeros(2, 2));
            state = next;
        }
    }

    #[test]
    fn default_baseline_gain_scaling() {
        let h = DMatrix::from_row_slice(1, 2, &[2.0, -4.0]);
        let k0 = default_baseline_gain(&h).unwrap();
        assert_eq!(k0.shape(), (2, 1));
        assert!((max_abs(&k0) - 0.1).abs() < 1e-15);
        assert!(k0[(1, 0)] < 0.0);
        assert!(default_baseline_gain(&DMatrix::zeros(1, 2)).is_err());
    }
}
