//! Smooth random fibers: generation, spectral decay, and resampling.
//!
//! Random fibers are drawn by giving each unnormalized tangent component a
//! Chebyshev series with exponentially decaying random coefficients,
//! normalizing at the nodes, and integrating to positions. A rejection gate
//! on the position coefficients (mode k at most e^{−0.61k}) keeps only
//! fibers the 16-node grid resolves to roundoff-of-quadrature levels. The
//! example prints the ensemble's coefficient decay, verifies that tangents
//! are exactly unit at the nodes, and shows that resampling a fiber onto a
//! finer grid preserves its shape to spectral accuracy.
//!
//! Run with: cargo run --release --example random_fiber_ensembles

use fiberflow::fiber::Vec3Series;
use fiberflow::harness::{generate_random_fibers, resample_fiber, RandomFiberSpec};
use fiberflow::spectral::ChebWorkspace;
use fiberflow::FiberflowError;

fn main() -> Result<(), FiberflowError> {
    let (n, length) = (16, 2.0);
    let spec = RandomFiberSpec::new(n, length);
    let fibers = generate_random_fibers(&spec, 50, 2024)?;
    let ws = ChebWorkspace::new(n, length);

    // Ensemble-max coefficient magnitude per mode.
    let mut max_coeff = vec![0.0f64; n];
    let mut worst_tangent: f64 = 0.0;
    for fiber in &fibers {
        let series = Vec3Series::from_values(&ws, &fiber.x);
        for k in 0..n {
            let a = (series.comp[0].coeffs[k].powi(2)
                + series.comp[1].coeffs[k].powi(2)
                + series.comp[2].coeffs[k].powi(2))
            .sqrt();
            max_coeff[k] = max_coeff[k].max(a);
        }
        worst_tangent = worst_tangent.max(fiber.max_tangent_norm_deviation());
    }
    println!("50 smooth random fibers of length {length} on {n} nodes");
    println!("{:>6} {:>14} {:>14}", "mode", "max ‖coeff‖", "gate e^(-0.61k)");
    for k in (0..n).step_by(3) {
        let gate = if k >= 2 {
            format!("{:14.3e}", (-0.61 * k as f64).exp())
        } else {
            format!("{:>14}", "(free)")
        };
        println!("{k:>6} {:>14.3e} {gate}", max_coeff[k]);
    }
    println!("max |‖τ‖−1| at the nodes: {worst_tangent:.2e}");

    // Resampling keeps the shape: compare interpolants on a fine grid.
    let ws32 = ChebWorkspace::new(32, length);
    let coarse = &fibers[0];
    let fine = resample_fiber(coarse, &ws, &ws32);
    let sc = Vec3Series::from_values(&ws, &coarse.x);
    let sf = Vec3Series::from_values(&ws32, &fine.x);
    let mut worst: f64 = 0.0;
    for i in 0..=400 {
        let s = length * i as f64 / 400.0;
        worst = worst.max((sc.eval_s(s) - sf.eval_s(s)).norm());
    }
    println!("resampled 16 → 32 nodes: max interpolant shift {worst:.2e} along the fiber");
    Ok(())
}
