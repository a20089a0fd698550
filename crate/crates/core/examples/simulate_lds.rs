//! Simulates a 2D system and compares the empirical state covariance with
//! the stationary one.

use local_kalman::lds::{simulate, validate_model, LdsModel};
use nalgebra::{DMatrix, DVector};

fn main() -> local_kalman::Result<()> {
    let model = validate_model(LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1) * 0.5,
    )?)?;

    let traj = simulate(&model, 50_000, 42, None)?;
    println!("first observations:");
    for (t, y) in traj.observations.iter().take(5).enumerate() {
        println!("  y[{t}] = {:.4}", y[0]);
    }

    let tail = &traj.states[1000..];
    let mean = tail.iter().sum::<DVector<f64>>() / tail.len() as f64;
    let cov = tail.iter().map(|x| (x - &mean) * (x - &mean).transpose()).sum::<DMatrix<f64>>() / tail.len() as f64;

    let mut p = model.pi.clone();
    for _ in 0..2000 {
        p = &model.f * &p * model.f.transpose() + &model.pi;
    }
    println!("empirical covariance:{cov}stationary covariance:{p}");
    Ok(())
}
