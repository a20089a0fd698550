//! Fast invariant checks, runnable from the command line.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{metrics_csv, read_metrics, rows_bitwise_equal, MetricsRow};
use crate::kalman::{kf_step, predict_step, steady_state_gain, KalmanState};
use crate::lds::LdsModel;
use crate::linalg::{max_abs, spd_inverse};
use crate::netgraph::{audit_locality, build_architecture, dense_kalman_trace, execute_step_traced, Quantity, Trace};
use crate::rpe::{
    lambda_update_direct, lambda_update_inverse, rpe_step_with_gamma, Dynamics, LambdaMode, RpeConfig, RpeState,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn demo_model() -> LdsModel {
    LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1),
    )
    .expect("shapes")
}

fn unguarded() -> RpeConfig {
    RpeConfig { stability_guard: false, lambda_guard: false, ..RpeConfig::default() }
}

/// Runs every check and returns the results in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("scalar kalman closed form", || {
            let one = DMatrix::identity(1, 1);
            let model = LdsModel::new(one.clone(), one.clone(), one.clone(), one).map_err(|e| e.to_string())?;
            let init = KalmanState::new(DVector::zeros(1), DMatrix::zeros(1, 1), 1).map_err(|e| e.to_string())?;
            let next = kf_step(&init, &DVector::zeros(1), &model).map_err(|e| e.to_string())?;
            let err = (next.kf[(0, 0)] - 0.5).abs().max((next.n[(0, 0)] - 0.5).abs());
            ensure(err < 1e-12, format!("max error {err:e}"))
        }),
        check("steady state is a fixed point", || {
            let model = demo_model();
            let ss = steady_state_gain(&model, 1e-13, 100_000).map_err(|e| e.to_string())?;
            let state = KalmanState::new(DVector::zeros(2), ss.n.clone(), 1).map_err(|e| e.to_string())?;
            let next = kf_step(&state, &DVector::zeros(1), &model).map_err(|e| e.to_string())?;
            let err = max_abs(&(next.kf - &ss.kf));
            ensure(err < 1e-10, format!("gain drift {err:e} after {} iterations", ss.iterations))
        }),
        check("frozen adaptation is the prediction equation", || {
            let model = demo_model();
            let dynamics = Dynamics::from(&model);
            let k = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut state = RpeState::initial(k.clone(), LambdaMode::Inverse);
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let y = DVector::from_element(1, rng.gen_range(-3.0..3.0));
                let expected = predict_step(&state.x_hat, &y, &k, &model).map_err(|e| e.to_string())?;
                state = rpe_step_with_gamma(&state, &y, &dynamics, &unguarded(), 0.0).map_err(|e| e.to_string())?.0;
                worst = worst.max((&state.x_hat - expected).amax());
            }
            ensure(worst < 1e-12, format!("max deviation {worst:e}"))
        }),
        check("sensitivity matches finite differences", || {
            let model = demo_model();
            let dynamics = Dynamics::from(&model);
            let k0 = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let ys: Vec<DVector<f64>> = (0..40).map(|_| DVector::from_element(1, rng.gen_range(-2.0..2.0))).collect();
            let run = |theta: f64| {
                let mut s = RpeState::initial(k0.clone(), LambdaMode::Inverse);
                s.theta = theta;
                for y in &ys {
                    s = rpe_step_with_gamma(&s, y, &dynamics, &unguarded(), 0.0).expect("shapes").0;
                }
                s
            };
            let (h, theta) = (1e-5, 0.2);
            let fd = (run(theta + h).x_hat - run(theta - h).x_hat) / (2.0 * h);
            let w = run(theta).w_hat;
            let rel = (&w - &fd).amax() / w.amax().max(1e-12);
            ensure(rel < 1e-6, format!("relative error {rel:e}"))
        }),
        check("inverse covariance update is first-order exact", || {
            let lambda = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
            let inv = spd_inverse(&lambda).ok_or("singular")?;
            let eps = DVector::from_vec(vec![0.7, -1.1]);
            let gap = |g: f64| {
                let direct = spd_inverse(&lambda_update_direct(&lambda, &eps, g)).expect("pd");
                max_abs(&(lambda_update_inverse(&inv, &eps, g) - direct))
            };
            let ratio = gap(1e-2) / gap(1e-3);
            ensure((80.0..125.0).contains(&ratio), format!("gap ratio for a 10x smaller rate: {ratio:.1}"))
        }),
        check("network equals dense recursion and is local", || {
            let model = demo_model();
            let dynamics = Dynamics::from(&model);
            let k0 = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
            let cfg = unguarded();
            let mut g = build_architecture(&dynamics, &k0, 0.0, &cfg).map_err(|e| e.to_string())?;
            let mut s = RpeState::initial(k0, LambdaMode::Inverse);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut trace = Trace::new();
            let mut worst: f64 = 0.0;
            for _ in 0..200 {
                let y = DVector::from_element(1, rng.gen_range(-2.0..2.0));
                g = execute_step_traced(&g, &y, 0.01, &mut trace).map_err(|e| e.to_string())?.0;
                s = rpe_step_with_gamma(&s, &y, &dynamics, &cfg, 0.01).map_err(|e| e.to_string())?.0;
                worst = worst.max((g.x_hat() - &s.x_hat).amax()).max((g.theta() - s.theta).abs());
            }
            let report = audit_locality(&g, &trace);
            ensure(worst < 1e-10 && report.is_local(), format!("divergence {worst:e}, {} violations", report.violations.len()))
        }),
        check("dense kalman trace is flagged", || {
            let (graph, trace) = dense_kalman_trace(&demo_model(), 1).map_err(|e| e.to_string())?;
            let report = audit_locality(&graph, &trace);
            let inversions = report.violations.iter().filter(|v| matches!(v.quantity, Some(Quantity::MatrixInverse(_)))).count();
            ensure(inversions > 0, format!("{inversions} inverse reads flagged"))
        }),
        check("metrics csv round trip", || {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let rows: Vec<MetricsRow> = (0..500)
                .map(|t| MetricsRow {
                    t,
                    mse_classic: rng.gen::<f64>() * 10f64.powi(rng.gen_range(-30..30)),
                    mse_rpe: rng.gen(),
                    gain_err: rng.gen(),
                    theta: rng.gen_range(-1.0..1.0),
                    lambda_cond: 1.0 + rng.gen::<f64>(),
                    flags: String::new(),
                })
                .collect();
            let back = read_metrics(&metrics_csv(&rows))?;
            ensure(rows_bitwise_equal(&rows, &back), "500 rows".into())
        }),
    ]
}
