//! A bent fiber straightening under its own bending elasticity.
//!
//! A single fiber is initialized as a shallow arc in a quiescent fluid and
//! relaxes toward a straight configuration. The example integrates the same
//! fiber once with local (anisotropic log-drag) hydrodynamics and once with
//! the intra-fiber mobility that adds the finite-part integral, and tracks
//! the end-to-end distance against the arclength: nonlocal self-interaction
//! speeds up the relaxation. Tangent norms stay at unit to rounding because
//! positions are updated through rotations of the tangent field.
//!
//! Run with: cargo run --release --example bending_relaxation

use nalgebra::Vector3;

use fiberflow::fiber::{DragModel, FiberParams, FiberState};
use fiberflow::spectral::ChebWorkspace;
use fiberflow::stepper::{
    BackgroundFlow, HydroMode, Simulation, SolveMode, StepperState,
};
use fiberflow::FiberflowError;

fn arc_fiber(ws: &ChebWorkspace, amplitude: f64) -> FiberState {
    // Unit tangents of a shallow sine arc, normalized at the nodes.
    let tau: Vec<Vector3<f64>> = ws
        .grid
        .nodes
        .iter()
        .map(|&s| {
            let slope = amplitude * (std::f64::consts::PI * s / ws.length).cos();
            Vector3::new(1.0, slope, 0.0).normalize()
        })
        .collect();
    FiberState::from_tangents(ws, tau, Vector3::zeros())
}

fn end_to_end(state: &FiberState) -> f64 {
    (state.x.last().expect("nodes") - state.x[0]).norm()
}

fn main() -> Result<(), FiberflowError> {
    let n = 16;
    let length = 2.0;
    let ws = ChebWorkspace::new(n, length);
    let params = FiberParams::new(n, length, 1e-3, 0.05, DragModel::Ellipsoidal);
    let dt = 0.02;
    let nsteps = 150;

    println!("arc of length {length} relaxing under bending stiffness κ = 0.05");
    println!("{:>8} {:>18} {:>18}", "t", "end-to-end (local)", "end-to-end (intra)");

    let mut runs = Vec::new();
    for hydro in [HydroMode::LocalOnly, HydroMode::IntraOnly] {
        let mut sim = Simulation::new(
            params.clone(),
            1.0,
            dt,
            SolveMode::BlockDiagonal,
            hydro,
            BackgroundFlow::Quiescent,
        )?;
        let mut state = StepperState::new(vec![arc_fiber(&ws, 0.8)]);
        let mut trace = vec![end_to_end(&state.fibers[0])];
        let mut worst_dev: f64 = 0.0;
        for _ in 0..nsteps {
            let record = sim.step(&mut state, None)?;
            worst_dev = worst_dev.max(record.diagnostics.max_tangent_deviation);
            trace.push(end_to_end(&state.fibers[0]));
        }
        runs.push((trace, worst_dev));
    }

    for k in (0..=nsteps).step_by(25) {
        println!(
            "{:>8.2} {:>18.6} {:>18.6}",
            k as f64 * dt,
            runs[0].0[k],
            runs[1].0[k]
        );
    }
    println!(
        "tangent-norm deviation stayed ≤ {:.2e} (local) and {:.2e} (intra); arclength is exactly {length}",
        runs[0].1, runs[1].1
    );
    println!(
        "the intra-fiber mobility reaches {:.4} of full extension vs {:.4} with local drag",
        runs[1].0[nsteps] / length,
        runs[0].0[nsteps] / length
    );
    Ok(())
}
