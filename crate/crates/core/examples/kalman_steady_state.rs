//! Runs the exact filter and shows the gain approaching its steady state
//! geometrically.

use local_kalman::kalman::{kf_step, steady_state_gain, KalmanState};
use local_kalman::lds::LdsModel;
use nalgebra::{DMatrix, DVector};

fn main() -> local_kalman::Result<()> {
    let model = LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1),
    )?;
    let ss = steady_state_gain(&model, 1e-12, 1_000_000)?;
    println!("steady state after {} iterations", ss.iterations);
    println!("filter gain K*:{}prediction gain F K*:{}", ss.kf, ss.prediction_gain(&model));

    let mut state = KalmanState::standard(2, 1);
    for t in 1..=60 {
        state = kf_step(&state, &DVector::zeros(1), &model)?;
        if t % 10 == 0 {
            println!("t = {t:>3}  |K_t - K*| = {:.3e}", (&state.kf - &ss.kf).norm());
        }
    }
    Ok(())
}
