use local_kalman::kalman::{filter_trajectory, kf_step, predict_step, steady_state_gain, KalmanState};
use local_kalman::lds::{simulate, LdsModel};
use local_kalman::linalg::min_eigenvalue;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_2d() -> LdsModel {
    LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1),
    )
    .unwrap()
}

fn run_gains(model: &LdsModel, steps: usize) -> KalmanState {
    let mut state = KalmanState::standard(model.n(), model.p());
    for _ in 0..steps {
        state = kf_step(&state, &DVector::zeros(model.p()), model).unwrap();
    }
    state
}

#[test]
fn gain_after_200_steps_is_steady() {
    let model = model_2d();
    let ss = steady_state_gain(&model, 1e-12, 1_000_000).unwrap();
    let state = run_gains(&model, 200);
    assert!((&state.kf - &ss.kf).amax() < 1e-10);
}

#[test]
fn long_recursion_reproduces_fixed_point() {
    let model = model_2d();
    let ss = steady_state_gain(&model, 1e-12, 1_000_000).unwrap();
    let state = run_gains(&model, 10_000);
    assert!((&state.kf - &ss.kf).amax() < 1e-10);
    assert!((&state.m - &ss.m).amax() < 1e-10);
    assert!((&state.n - &ss.n).amax() < 1e-10);
}

#[test]
fn memoryless_dynamics_settle_in_one_step() {
    let mut model = model_2d();
    model.f = DMatrix::zeros(2, 2);
    let ss = steady_state_gain(&model, 1e-12, 1_000).unwrap();
    let s = &model.h * &model.pi * model.h.transpose() + &model.sigma;
    let expected = &model.pi * model.h.transpose() * s.try_inverse().unwrap();
    assert_eq!(ss.m, model.pi);
    assert!((&ss.kf - expected).amax() < 1e-15);
    assert!(ss.iterations <= 2);
}

#[test]
fn filter_matches_direct_filter_equation() {
    let model = LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.8, 0.2, -0.1, 0.7]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6]),
    )
    .unwrap();
    let traj = simulate(&model, 100, 8, None).unwrap();
    let init = KalmanState::standard(2, 2);
    let states = filter_trajectory(&model, &traj.observations, &init).unwrap();
    assert_eq!(states.len(), 101);
    // Independent oracle: explicit inverse instead of a Cholesky solve.
    let mut x = DVector::zeros(2);
    let mut n = DMatrix::identity(2, 2);
    for (y, s) in traj.observations.iter().zip(&states[1..]) {
        let m = &model.f * &n * model.f.transpose() + &model.pi;
        let k = &m * model.h.transpose() * (&model.h * &m * model.h.transpose() + &model.sigma).try_inverse().unwrap();
        x = &model.f * &x + &k * (y - &model.h * &model.f * &x);
        n = (DMatrix::identity(2, 2) - &k * &model.h) * &m;
        assert!((&s.x_post - &x).amax() < 1e-10);
        assert!((&s.n - &n).amax() < 1e-10);
    }
}

#[test]
fn empty_fold_returns_init() {
    let init = KalmanState::standard(2, 1);
    let states = filter_trajectory(&model_2d(), &[], &init).unwrap();
    assert_eq!(states, vec![init]);
}

#[test]
fn noiseless_observations_are_tracked() {
    let model = LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(2, 2),
        DMatrix::identity(1, 1) * 1e-9,
    )
    .unwrap();
    let x0 = DVector::from_vec(vec![2.0, -3.0]);
    let traj = simulate(&model, 500, 9, Some(&x0)).unwrap();
    let states = filter_trajectory(&model, &traj.observations, &KalmanState::standard(2, 1)).unwrap();
    // The last posterior corresponds to the state one step after the last stored one.
    let x_last = &model.f * traj.states.last().unwrap();
    let err = (&states.last().unwrap().x_post - x_last).norm();
    assert!(err < 1e-3, "tracking error {err}");
}

#[test]
fn prediction_equation_matches_filtered_propagation() {
    let model = model_2d();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut state = KalmanState::standard(2, 1);
    for _ in 0..100 {
        let y = DVector::from_element(1, rng.gen_range(-5.0..5.0));
        let x_prior = &model.f * &state.x_post;
        let next = kf_step(&state, &y, &model).unwrap();
        let kp = &model.f * &next.kf;
        let predicted = predict_step(&x_prior, &y, &kp, &model).unwrap();
        assert!((predicted - &model.f * &next.x_post).amax() < 1e-12);
        state = next;
    }
}

fn psd_matrix(seed: u64, dim: usize, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
    &b * b.transpose() * scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariances_stay_psd_and_consistent(seed in 0u64..10_000, n in 1usize..=4, p in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.2..1.2));
        let h = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-2.0..2.0));
        let pi = psd_matrix(seed + 1, n, 0.5);
        let sigma = psd_matrix(seed + 2, p, 0.5) + DMatrix::identity(p, p) * 0.1;
        let model = LdsModel::new(f, h, pi, sigma).unwrap();
        let mut state = KalmanState::new(DVector::zeros(n), psd_matrix(seed + 3, n, 1.0), p).unwrap();
        for _ in 0..50 {
            state = kf_step(&state, &DVector::zeros(p), &model).unwrap();
            let scale = state.m.amax().max(1.0);
            prop_assert!(min_eigenvalue(&state.n) >= -1e-10 * scale);
            prop_assert!(min_eigenvalue(&state.m) >= -1e-10 * scale);
            prop_assert_eq!(&state.n, &state.n.transpose());
            let identity = (DMatrix::identity(n, n) - &state.kf * &model.h) * &state.m;
            prop_assert!((identity - &state.n).amax() < 1e-10 * scale);
        }
    }
}
