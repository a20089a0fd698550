//! Builds the filter as a network of typed synapses, checks it against the
//! dense recursion, and audits every access for locality.

use local_kalman::lds::{simulate, LdsModel};
use local_kalman::netgraph::{audit_locality, build_architecture, dense_kalman_trace, execute_step_traced, Trace};
use local_kalman::rpe::{rpe_step, Dynamics, LambdaMode, RpeConfig, RpeState};
use nalgebra::DMatrix;

fn main() -> local_kalman::Result<()> {
    let model = LdsModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.9]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * 0.1,
        DMatrix::identity(1, 1),
    )?;
    let dynamics = Dynamics::from(&model);
    let cfg = RpeConfig { stability_guard: false, lambda_guard: false, ..RpeConfig::default() };
    let k0 = DMatrix::from_row_slice(2, 1, &[0.1, 0.02]);

    let mut graph = build_architecture(&dynamics, &k0, 0.0, &cfg)?;
    print!("{}", graph.architecture_table());

    let mut state = RpeState::initial(k0, LambdaMode::Inverse);
    let mut trace = Trace::new();
    let mut divergence: f64 = 0.0;
    for y in &simulate(&model, 500, 1, None)?.observations {
        let gamma = cfg.gamma.gamma(state.t);
        graph = execute_step_traced(&graph, y, gamma, &mut trace)?.0;
        state = rpe_step(&state, y, &dynamics, &cfg)?.0;
        divergence = divergence.max((graph.x_hat() - &state.x_hat).amax());
    }
    println!("max divergence from the dense recursion: {divergence:e}");
    println!("network trace, {} events:\n{}", trace.len(), audit_locality(&graph, &trace).render());

    let (dense_graph, dense_trace) = dense_kalman_trace(&model, 1)?;
    println!("exact filter written as a trace:\n{}", audit_locality(&dense_graph, &dense_trace).render());
    println!("edge list:\n{}", graph.edge_list());
    Ok(())
}
