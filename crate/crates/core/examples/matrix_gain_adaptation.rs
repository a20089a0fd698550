//! Entry-wise gain adaptation: every gain entry carries its own log-scale
//! and its own sensitivity vector.

use local_kalman::kalman::steady_state_gain;
use local_kalman::lds::{simulate, LdsModel};
use local_kalman::rpe::{rpe_step_matrix, Dynamics, LambdaMode, MatrixRpeState, RpeConfig};
use nalgebra::DMatrix;

fn main() -> local_kalman::Result<()> {
    let model = LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.1, 0.7]),
        DMatrix::identity(2, 2),
        DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.5]),
        DMatrix::identity(2, 2),
    )?;
    let k_star = steady_state_gain(&model, 1e-12, 1_000_000)?.prediction_gain(&model);
    let k0 = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.1, 0.3]);
    println!("K*:{k_star}K0:{k0}");

    let dynamics = Dynamics::from(&model);
    let cfg = RpeConfig::default();
    let mut state = MatrixRpeState::initial(k0, LambdaMode::Inverse);
    for y in &simulate(&model, 20_000, 3, None)?.observations {
        state = rpe_step_matrix(&state, y, &dynamics, &cfg)?.0;
    }
    println!("learned K:{}theta:{}", state.gain(), state.params.theta);
    Ok(())
}
