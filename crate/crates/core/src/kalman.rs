//! Exact Kalman filter recursion, used as the optimality oracle.
//!
//! One step advances the posterior `(x̂(t-1|t-1), N_{t-1})` to `(x̂(t|t), N_t)`:
//!
//! ```text
//! x̂(t|t-1) = F x̂(t-1|t-1)
//! M_t      = F N_{t-1} F^T + Π
//! K_t^f    = M_t H^T (H M_t H^T + Σ)^{-1}
//! x̂(t|t)   = x̂(t|t-1) + K_t^f (y_t - H F x̂(t-1|t-1))
//! N_t      = (I - K_t^f H) M_t
//! ```
//!
//! `K^f` is called the *filter gain* and `K^p = F K^f` the *prediction gain*.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lds::LdsModel;
use crate::linalg::{check_len, check_shape, check_square, max_abs, spd_solve, symmetrize};

pub const DEFAULT_STEADY_STATE_TOL: f64 = 1e-12;
pub const DEFAULT_STEADY_STATE_MAX_ITER: usize = 1_000_000;

/// Posterior of the exact filter after `t` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    /// `x̂(t|t)`.
    pub x_post: DVector<f64>,
    /// Posterior covariance `N_t`.
    pub n: DMatrix<f64>,
    /// Prior covariance `M_t` used for the last update.
    pub m: DMatrix<f64>,
    /// Filter gain `K_t^f` used for the last update.
    pub kf: DMatrix<f64>,
    pub t: u64,
}

impl KalmanState {
    /// Starting posterior with mean `x0` and covariance `n0`. `M` is set to
    /// `n0` and the gain to zero, which keeps `N = (I - K H) M` true at t = 0.
    pub fn new(x0: DVector<f64>, n0: DMatrix<f64>, p: usize) -> Result<Self> {
        let n = x0.len();
        check_square("N0", &n0, n)?;
        Ok(Self { x_post: x0, m: n0.clone(), n: n0, kf: DMatrix::zeros(n, p), t: 0 })
    }

    /// Zero mean, identity covariance.
    pub fn standard(n: usize, p: usize) -> Self {
        Self::new(DVector::zeros(n), DMatrix::identity(n, n), p).expect("shapes agree")
    }

    /// One-step-ahead prediction `x̂(t+1|t) = F x̂(t|t)`.
    pub fn predicted_mean(&self, model: &LdsModel) -> DVector<f64> {
        &model.f * &self.x_post
    }
}

/// Covariance part of one step: returns `(M_t, K_t^f, N_t)`.
pub(crate) fn covariance_step(
    n_prev: &DMatrix<f64>,
    model: &LdsModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let m = symmetrize(&(&model.f * n_prev * model.f.transpose() + &model.pi));
    let s = &model.h * &m * model.h.transpose() + &model.sigma;
    // K^T = S^{-1} H M since S and M are symmetric.
    let kt = spd_solve(&s, &(&model.h * &m)).ok_or(Error::InnovationCovSingular)?;
    let kf = kt.transpose();
    let ident = DMatrix::<f64>::identity(model.n(), model.n());
    let n = symmetrize(&((ident - &kf * &model.h) * &m));
    Ok((m, kf, n))
}

/// Advances the exact filter by one observation.
pub fn kf_step(prev: &KalmanState, y: &DVector<f64>, model: &LdsModel) -> Result<KalmanState> {
    check_len("x_post", &prev.x_post, model.n())?;
    check_len("y", y, model.p())?;
    check_square("N", &prev.n, model.n())?;
    let (m, kf, n) = covariance_step(&prev.n, model)?;
    let x_prior = &model.f * &prev.x_post;
    let innovation = y - &model.h * &x_prior;
    let x_post = x_prior + &kf * innovation;
    Ok(KalmanState { x_post, n, m, kf, t: prev.t + 1 })
}

/// Folds [`kf_step`] over `ys`. The result starts with `init`, so it has
/// `ys.len() + 1` entries.
pub fn filter_trajectory(
    model: &LdsModel,
    ys: &[DVector<f64>],
    init: &KalmanState,
) -> Result<Vec<KalmanState>> {
    let mut out = Vec::with_capacity(ys.len() + 1);
    out.push(init.clone());
    for y in ys {
        let next = kf_step(out.last().expect("non-empty"), y, model)?;
        out.push(next);
    }
    Ok(out)
}

/// `K^p = F K^f`.
pub fn prediction_gain(kf: &DMatrix<f64>, model: &LdsModel) -> Result<DMatrix<f64>> {
    check_shape("Kf", kf, model.n(), model.p())?;
    Ok(&model.f * kf)
}

/// Prediction equation: `x̂(t+1|t) = F x̂(t|t-1) + K^p (y_t - H x̂(t|t-1))`.
pub fn predict_step(
    x_prior: &DVector<f64>,
    y: &DVector<f64>,
    kp: &DMatrix<f64>,
    model: &LdsModel,
) -> Result<DVector<f64>> {
    check_len("x_prior", x_prior, model.n())?;
    check_len("y", y, model.p())?;
    check_shape("Kp", kp, model.n(), model.p())?;
    Ok(&model.f * x_prior + kp * (y - &model.h * x_prior))
}

/// Fixed point of the covariance/gain recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub kf: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl SteadyState {
    /// Asymptotic prediction gain `F K^f*`, the optimum for the predictor form.
    pub fn prediction_gain(&self, model: &LdsModel) -> DMatrix<f64> {
        &model.f * &self.kf
    }
}

/// Iterates the covariance recursion from `N_0 = I` until successive filter
/// gains differ by less than `tol` in max-abs norm.
pub fn steady_state_gain(model: &LdsModel, tol: f64, max_iter: usize) -> Result<SteadyState> {
    model.check_dimensions()?;
    let n_dim = model.n();
    let mut n = DMatrix::<f64>::identity(n_dim, n_dim);
    let mut prev_k: Option<DMatrix<f64>> = None;
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        let (m, kf, n_next) = covariance_step(&n, model)?;
        if let Some(prev) = &prev_k {
            residual = max_abs(&(&kf - prev));
            if residual < tol {
                return Ok(SteadyState { kf, m, n: n_next, iterations: iteration, residual });
            }
        }
        n = n_next;
        prev_k = Some(kf);
    }
    Err(Error::NoConvergence { iterations: max_iter, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(f: f64, h: f64, pi: f64, sigma: f64) -> LdsModel {
        LdsModel::new(
            DMatrix::from_element(1, 1, f),
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, pi),
            DMatrix::from_element(1, 1, sigma),
        )
        .unwrap()
    }

    fn model_2d() -> LdsModel {
        LdsModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2) * 0.1,
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn zero_uncertainty_fixed_point() {
        let mut model = model_2d();
        model.pi = DMatrix::zeros(2, 2);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let init = KalmanState::new(x.clone(), DMatrix::zeros(2, 2), 1).unwrap();
        let next = kf_step(&init, &DVector::from_element(1, 7.0), &model).unwrap();
        assert_eq!(next.m, DMatrix::zeros(2, 2));
        assert_eq!(next.kf, DMatrix::zeros(2, 1));
        assert_eq!(next.n, DMatrix::zeros(2, 2));
        assert_eq!(next.x_post, &model.f * x);
    }

    #[test]
    fn scalar_substitution() {
        let model = scalar_model(1.0, 1.0, 1.0, 1.0);
        let init = KalmanState::new(DVector::zeros(1), DMatrix::zeros(1, 1), 1).unwrap();
        let next = kf_step(&init, &DVector::from_element(1, 2.0), &model).unwrap();
        assert!((next.m[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((next.kf[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((next.n[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((next.x_post[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_observation_length_is_rejected() {
        let model = model_2d();
        let init = KalmanState::standard(2, 1);
        let err = kf_step(&init, &DVector::zeros(2), &model).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn empty_fold_returns_init() {
        let model = model_2d();
        let init = KalmanState::standard(2, 1);
        let out = filter_trajectory(&model, &[], &init).unwrap();
        assert_eq!(out, vec![init]);
    }

    #[test]
    fn gain_free_prediction() {
        let mut model = model_2d();
        model.pi = DMatrix::zeros(2, 2);
        let x = DVector::from_vec(vec![3.0, 1.0]);
        let init = KalmanState::new(x.clone(), DMatrix::zeros(2, 2), 1).unwrap();
        let out = filter_trajectory(&model, &[DVector::from_element(1, -4.0)], &init).unwrap();
        assert_eq!(out[1].x_post, &model.f * x);
    }

    #[test]
    fn prediction_gain_cases() {
        let mut model = model_2d();
        let kf = DMatrix::from_row_slice(2, 1, &[0.3, -0.2]);
        model.f = DMatrix::identity(2, 2);
        assert_eq!(prediction_gain(&kf, &model).unwrap(), kf);
        model.f = DMatrix::zeros(2, 2);
        assert_eq!(prediction_gain(&kf, &model).unwrap(), DMatrix::zeros(2, 1));
        let scalar = scalar_model(2.0, 1.0, 1.0, 1.0);
        let kp = prediction_gain(&DMatrix::from_element(1, 1, 0.5), &scalar).unwrap();
        assert_eq!(kp[(0, 0)], 1.0);
        assert!(prediction_gain(&DMatrix::zeros(1, 1), &model).is_err());
    }

    #[test]
    fn predict_step_zero_innovation_and_gainless() {
        let model = model_2d();
        let x = DVector::from_vec(vec![0.4, -1.1]);
        let y = &model.h * &x;
        let kp = DMatrix::from_row_slice(2, 1, &[0.7, 0.2]);
        assert_eq!(predict_step(&x, &y, &kp, &model).unwrap(), &model.f * &x);
        let y = DVector::from_element(1, 10.0);
        assert_eq!(predict_step(&x, &y, &DMatrix::zeros(2, 1), &model).unwrap(), &model.f * &x);
    }

    #[test]
    fn memoryless_dynamics_converge_in_one_iteration() {
        let mut model = model_2d();
        model.f = DMatrix::zeros(2, 2);
        let ss = steady_state_gain(&model, 1e-12, 100).unwrap();
        let s = &model.h * &model.pi * model.h.transpose() + &model.sigma;
        let expected = &model.pi * model.h.transpose() * s.try_inverse().unwrap();
        assert!(max_abs(&(&ss.kf - expected)) < 1e-15);
        assert!(max_abs(&(&ss.m - &model.pi)) < 1e-15);
        assert_eq!(ss.iterations, 2);
    }

    #[test]
    fn scalar_steady_state() {
        let ss = steady_state_gain(&scalar_model(0.0, 1.0, 1.0, 1.0), 1e-12, 100).unwrap();
        assert!((ss.kf[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_convergence_reports_residual() {
        let err = steady_state_gain(&model_2d(), 1e-12, 3).unwrap_err();
        match err {
            Error::NoConvergence { iterations, residual } => {
                assert_eq!(iterations, 3);
                assert!(residual.is_finite() && residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
