//! Starts the adaptive filter at half the optimal gain and lets it learn the
//! scale from observations alone.

use local_kalman::kalman::steady_state_gain;
use local_kalman::lds::{simulate, LdsModel};
use local_kalman::rpe::{rpe_step, Dynamics, LambdaMode, RpeConfig, RpeState};
use nalgebra::DMatrix;

fn main() -> local_kalman::Result<()> {
    let model = LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1),
    )?;
    let k_star = steady_state_gain(&model, 1e-12, 1_000_000)?.prediction_gain(&model);
    let dynamics = Dynamics::from(&model);
    let cfg = RpeConfig::default();

    let traj = simulate(&model, 20_000, 7, None)?;
    let mut state = RpeState::initial(&k_star * 0.5, LambdaMode::Inverse);
    for (t, y) in traj.observations.iter().enumerate() {
        let (next, out) = rpe_step(&state, y, &dynamics, &cfg)?;
        state = next;
        if t % 4000 == 0 || t + 1 == traj.len() {
            println!(
                "t = {t:>5}  exp(theta) = {:.4}  |K - K*| = {:.2e}  flags [{}]",
                state.theta.exp(),
                (state.gain() - &k_star).amax(),
                out.flags
            );
        }
    }
    println!("target exp(theta) = 2");
    Ok(())
}
