//! Inextensible motion: the operator that maps tangent rotation rates and a
//! rigid translation to nodal velocities, its discrete adjoint for constraint
//! forces, and the rotate-and-integrate position update that keeps tangent
//! norms at unity without penalty terms.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::fiber::{self, FiberState};
use crate::spectral::{eval_matrix, ChebWorkspace};

/// Discrete operators for one fiber configuration.
///
/// `k` maps a coefficient vector `[alpha; u_bar]` (rotation-rate coefficients
/// for both normal directions, then a rigid translation) to the `3N` nodal
/// velocity components. `kstar` is its adjoint under the quadrature inner
/// product: `2(N-1)` weighted-moment rows followed by 3 total-force rows.
pub struct KinematicOperators {
    /// Integral tables: for each basis column, the fine-grid values of
    /// ∫₀^s T_k(s′) n_j(s′) ds′ as a 2N×3 matrix. Columns run over
    /// k = 0..N−2 for the first normal, then the same for the second.
    pub j_tables: Vec<DMatrix<f64>>,
    /// 3N × (2N+1) velocity operator.
    pub k: DMatrix<f64>,
    /// (2N+1) × 3N adjoint.
    pub kstar: DMatrix<f64>,
}

impl KinematicOperators {
    /// Number of coefficient columns, `2(N-1) + 3`.
    pub fn ncols(&self) -> usize {
        self.k.ncols()
    }
}

/// Build the velocity operator and its adjoint for the given fiber.
///
/// Tangents are upsampled spectrally to the doubled grid and frames evaluated
/// there; the frame angles depend only on direction, so the interpolated
/// tangent needs no renormalization. The integrals ∫₀^s T_k n_j ds′ are exact
/// on the doubled grid whenever the integrand is resolved there, and the
/// additive constant of the antiderivative is anchored at s = 0 (any other
/// choice is absorbed by the rigid-translation columns).
pub fn build_operators(state: &FiberState, ws: &ChebWorkspace) -> KinematicOperators {
    let j_tables = integral_tables(state, ws);
    let k = k_from_tables(&j_tables, ws);
    let kstar = kstar_from_tables(&j_tables, ws);
    KinematicOperators { j_tables, k, kstar }
}

/// The per-column integral tables ∫₀^s T_k n_j ds′ on the doubled grid.
fn integral_tables(state: &FiberState, ws: &ChebWorkspace) -> Vec<DMatrix<f64>> {
    let n = ws.n;
    let n2 = 2 * n;
    debug_assert!(state.max_tangent_norm_deviation() < 1e-6);

    let tau_fine = fiber::apply_scalar_op(&ws.upsample, &state.tau);
    let frames: Vec<(Vector3<f64>, Vector3<f64>)> =
        tau_fine.iter().map(fiber::tangent_frame).collect();
    let tvals = eval_matrix(&ws.grid2.etas(), n - 1);

    let mut tables = Vec::with_capacity(2 * (n - 1));
    for j in 0..2 {
        for k in 0..(n - 1) {
            let mut prod = DMatrix::zeros(n2, 3);
            for q in 0..n2 {
                let nj = if j == 0 { frames[q].0 } else { frames[q].1 };
                let t = tvals[(q, k)];
                for c in 0..3 {
                    prod[(q, c)] = t * nj[c];
                }
            }
            tables.push(&ws.diff_dagger2 * prod);
        }
    }
    tables
}

/// Assemble the 3N×(2N+1) velocity operator from the integral tables.
fn k_from_tables(tables: &[DMatrix<f64>], ws: &ChebWorkspace) -> DMatrix<f64> {
    let n = ws.n;
    let ncols = tables.len() + 3;
    let mut k = DMatrix::zeros(3 * n, ncols);
    for (col, table) in tables.iter().enumerate() {
        let down = &ws.downsample * table;
        for p in 0..n {
            for c in 0..3 {
                k[(3 * p + c, col)] = down[(p, c)];
            }
        }
    }
    for c in 0..3 {
        for p in 0..n {
            k[(3 * p + c, tables.len() + c)] = 1.0;
        }
    }
    k
}

/// Assemble the (2N+1)×3N adjoint from the integral tables.
///
/// Row (k, j) integrates J^{(k,j)}·λ over the fiber with λ interpolated to
/// the doubled grid; the last three rows are the total force Σ_p λ_p w_p with
/// the coarse-grid weights. The moment rows are immune to the antiderivative
/// constant whenever the total force vanishes, which the saddle-point systems
/// enforce.
fn kstar_from_tables(tables: &[DMatrix<f64>], ws: &ChebWorkspace) -> DMatrix<f64> {
    let n = ws.n;
    let n2 = 2 * n;
    let nrows = tables.len() + 3;
    let mut kstar = DMatrix::zeros(nrows, 3 * n);
    let w2 = &ws.grid2.weights;
    for (row, table) in tables.iter().enumerate() {
        for p in 0..n {
            for c in 0..3 {
                let mut acc = 0.0;
                for q in 0..n2 {
                    acc += table[(q, c)] * w2[q] * ws.upsample[(q, p)];
                }
                kstar[(row, 3 * p + c)] = acc;
            }
        }
    }
    for c in 0..3 {
        for p in 0..n {
            kstar[(tables.len() + c, 3 * p + c)] = ws.grid.weights[p];
        }
    }
    kstar
}

/// Nodal rotation rates Ω = τ × ∂_s u, evaluated by upsampling both factors
/// to the doubled grid, crossing pointwise, and downsampling.
pub fn compute_omega(
    tau: &[Vector3<f64>],
    velocity: &[Vector3<f64>],
    ws: &ChebWorkspace,
) -> Vec<Vector3<f64>> {
    let dv = fiber::apply_scalar_op(&ws.diff, velocity);
    let dv_fine = fiber::apply_scalar_op(&ws.upsample, &dv);
    let tau_fine = fiber::apply_scalar_op(&ws.upsample, tau);
    let cross: Vec<Vector3<f64>> = tau_fine
        .iter()
        .zip(&dv_fine)
        .map(|(t, d)| t.cross(d))
        .collect();
    fiber::apply_scalar_op(&ws.downsample, &cross)
}

/// Rotate a single tangent by angle ‖Ω‖·dt about Ω̂ (three-term Rodrigues
/// formula). Preserves the vector norm to rounding for any step size.
pub fn rotate(tau: &Vector3<f64>, omega: &Vector3<f64>, dt: f64) -> Vector3<f64> {
    let rate = omega.norm();
    if rate == 0.0 {
        return *tau;
    }
    let axis = omega / rate;
    let (sin, cos) = (rate * dt).sin_cos();
    tau * cos + axis.cross(tau) * sin + axis * axis.dot(tau) * (1.0 - cos)
}

/// Rotate every nodal tangent by its rotation rate and rebuild positions by
/// spectral integration, anchoring the first node at `anchor`.
pub fn rotate_and_integrate(
    state: &FiberState,
    omega: &[Vector3<f64>],
    dt: f64,
    anchor: Vector3<f64>,
    ws: &ChebWorkspace,
) -> FiberState {
    assert!(dt > 0.0, "time step must be positive, got {dt}");
    let tau_new: Vec<Vector3<f64>> = state
        .tau
        .iter()
        .zip(omega)
        .map(|(tau, om)| rotate(tau, om, dt))
        .collect();
    FiberState::from_tangents(ws, tau_new, anchor)
}

/// Nodal velocities `K·[alpha; u_bar]` as 3-vectors.
pub fn apply_k(ops: &KinematicOperators, alpha: &DVector<f64>) -> Vec<Vector3<f64>> {
    fiber::unflatten(&(&ops.k * alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn workspace(n: usize) -> ChebWorkspace {
        ChebWorkspace::new(n, 2.0)
    }

    fn straight_fiber(ws: &ChebWorkspace) -> FiberState {
        let tau = vec![Vector3::new(0.0, 0.0, 1.0); ws.n];
        FiberState::from_tangents(ws, tau, Vector3::zeros())
    }

    /// A gently curved fiber with exactly unit tangents, built from smooth
    /// angle profiles.
    fn curved_fiber(ws: &ChebWorkspace, amplitude: f64) -> FiberState {
        let tau: Vec<Vector3<f64>> = ws
            .grid
            .nodes
            .iter()
            .map(|&s| {
                let theta = amplitude * (s - 0.3 * s * s);
                let phi = amplitude * (0.5 * s * s - 0.2 * s);
                Vector3::new(
                    theta.cos() * phi.cos(),
                    theta.sin() * phi.cos(),
                    phi.sin(),
                )
            })
            .collect();
        FiberState::from_tangents(ws, tau, Vector3::new(0.1, -0.2, 0.05))
    }

    #[test]
    fn straight_fiber_tables_integrate_constant_frames() {
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let ops = build_operators(&state, &ws);
        // τ = ẑ puts the frame at n1 = (0,1,0), n2 = (−1,0,0); the k = 0
        // column integrates a constant, so J = s·n_j.
        for (q, &s) in ws.grid2.nodes.iter().enumerate() {
            assert_relative_eq!(ops.j_tables[0][(q, 1)], s, epsilon = 1e-12);
            assert_relative_eq!(ops.j_tables[0][(q, 0)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(ops.j_tables[15][(q, 0)], -s, epsilon = 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_holds_for_random_vectors() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.4);
        let ops = build_operators(&state, &ws);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..5 {
            let alpha =
                DVector::from_fn(ops.ncols(), |_, _| rng.random::<f64>() - 0.5);
            let lambda = DVector::from_fn(3 * ws.n, |_, _| rng.random::<f64>() - 0.5);
            let lhs = alpha.dot(&(&ops.kstar * &lambda));

            let u_nodes = fiber::unflatten(&(&ops.k * &alpha));
            let u_fine = fiber::apply_scalar_op(&ws.upsample, &u_nodes);
            let lam_fine =
                fiber::apply_scalar_op(&ws.upsample, &fiber::unflatten(&lambda));
            let rhs: f64 = u_fine
                .iter()
                .zip(&lam_fine)
                .zip(&ws.grid2.weights)
                .map(|((u, l), &w)| u.dot(l) * w)
                .sum();
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn kstar_total_force_rows_and_constant_immunity() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.3);
        let ops = build_operators(&state, &ws);

        // Constant force density integrates to c·L in the last three rows.
        let c = Vector3::new(0.7, -0.3, 0.2);
        let lambda = fiber::flatten(&vec![c; ws.n]);
        let rows = &ops.kstar * &lambda;
        let nmoment = 2 * (ws.n - 1);
        for comp in 0..3 {
            assert_relative_eq!(rows[nmoment + comp], c[comp] * 2.0, epsilon = 1e-12);
        }

        // Shifting every integral table by a constant vector leaves the
        // moment rows unchanged whenever the total force vanishes.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut lam_nodes: Vec<Vector3<f64>> = (0..ws.n)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let total: Vector3<f64> = lam_nodes
            .iter()
            .zip(&ws.grid.weights)
            .map(|(l, &w)| l * w)
            .sum();
        let wsum: f64 = ws.grid.weights.iter().sum();
        for (l, _) in lam_nodes.iter_mut().zip(0..) {
            *l -= total / wsum;
        }
        let lambda0 = fiber::flatten(&lam_nodes);

        let shifted: Vec<DMatrix<f64>> = ops
            .j_tables
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for q in 0..t.nrows() {
                    t[(q, 0)] += 3.4;
                    t[(q, 1)] -= 1.2;
                    t[(q, 2)] += 0.8;
                }
                t
            })
            .collect();
        let kstar_shifted = kstar_from_tables(&shifted, &ws);
        let r0 = &ops.kstar * &lambda0;
        let r1 = &kstar_shifted * &lambda0;
        for row in 0..nmoment {
            assert_relative_eq!(r0[row], r1[row], epsilon = 1e-12);
        }
    }

    #[test]
    fn straight_fiber_velocities_are_tangentially_rigid() {
        // On a straight fiber the integrand T_k·n_j is a polynomial the
        // doubled grid resolves exactly, so ∂_s(Kα)·τ vanishes to rounding
        // for every coefficient vector.
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let ops = build_operators(&state, &ws);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let alpha = DVector::from_fn(ops.ncols(), |_, _| rng.random::<f64>() - 0.5);
        let u = apply_k(&ops, &alpha);
        let du = fiber::apply_scalar_op(&ws.diff, &u);
        let max_stretch = du
            .iter()
            .zip(&state.tau)
            .map(|(d, t)| d.dot(t).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_stretch < 1e-10, "tangential stretch {max_stretch}");
    }

    #[test]
    fn curved_fiber_velocities_nearly_tangentially_rigid() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.1);
        let ops = build_operators(&state, &ws);
        // Spectrally decaying coefficients mimic a resolved physical solve.
        let alpha = DVector::from_fn(ops.ncols(), |i, _| {
            let k = if i < 15 { i } else if i < 30 { i - 15 } else { 0 };
            (-(k as f64)).exp()
        });
        let u = apply_k(&ops, &alpha);
        let du = fiber::apply_scalar_op(&ws.diff, &u);
        let scale = du.iter().map(|d| d.norm()).fold(0.0_f64, f64::max);
        let max_stretch = du
            .iter()
            .zip(&state.tau)
            .map(|(d, t)| d.dot(t).abs())
            .fold(0.0_f64, f64::max);
        assert!(
            max_stretch < 1e-5 * scale,
            "tangential stretch {max_stretch} vs scale {scale}"
        );
    }

    #[test]
    fn rigid_translation_gives_zero_omega() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.3);
        let velocity = vec![Vector3::new(1.0, 2.0, 3.0); ws.n];
        let omega = compute_omega(&state.tau, &velocity, &ws);
        let max = omega.iter().map(|o| o.norm()).fold(0.0_f64, f64::max);
        assert!(max < 1e-10, "rigid translation produced rotation {max}");
    }

    #[test]
    fn straight_fiber_shear_velocity_rotates_about_y() {
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let velocity: Vec<Vector3<f64>> = ws
            .grid
            .nodes
            .iter()
            .map(|&s| Vector3::new(s, 0.0, 0.0))
            .collect();
        let omega = compute_omega(&state.tau, &velocity, &ws);
        for o in &omega {
            assert_relative_eq!(o.x, 0.0, epsilon = 1e-10);
            assert_relative_eq!(o.y, 1.0, epsilon = 1e-10);
            assert_relative_eq!(o.z, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn omega_is_perpendicular_to_tangent() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.2);
        let velocity: Vec<Vector3<f64>> = ws
            .grid
            .nodes
            .iter()
            .map(|&s| Vector3::new((0.9 * s).sin(), 0.3 * s, (0.4 * s).cos()))
            .collect();
        let omega = compute_omega(&state.tau, &velocity, &ws);
        let scale = omega.iter().map(|o| o.norm()).fold(0.0_f64, f64::max);
        for (o, t) in omega.iter().zip(&state.tau) {
            assert!(o.dot(t).abs() <= 1e-8 * scale.max(1.0));
        }
    }

    #[test]
    fn quarter_turn_about_x_flips_tangent() {
        let dt = 0.01;
        let tau = Vector3::new(0.0, 0.0, 1.0);
        let omega = Vector3::new(std::f64::consts::FRAC_PI_2 / dt, 0.0, 0.0);
        let rotated = rotate(&tau, &omega, dt);
        assert_relative_eq!(rotated.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.y, -1.0, epsilon = 1e-12);
        assert_relative_eq!(rotated.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_omega_translates_to_anchor() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.3);
        let omega = vec![Vector3::zeros(); ws.n];
        let anchor = Vector3::new(5.0, -2.0, 1.0);
        let moved = rotate_and_integrate(&state, &omega, 0.1, anchor, &ws);
        let shift = anchor - state.x[0];
        for (a, b) in moved.x.iter().zip(&state.x) {
            assert_relative_eq!((a - b - shift).norm(), 0.0, epsilon = 1e-10);
        }
        for (a, b) in moved.tau.iter().zip(&state.tau) {
            assert_relative_eq!((a - b).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn thousand_random_rotations_preserve_norms() {
        let ws = workspace(16);
        let mut state = curved_fiber(&ws, 0.4);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let omega: Vec<Vector3<f64>> = (0..ws.n)
                .map(|_| {
                    Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    ) * 4.0
                })
                .collect();
            state = rotate_and_integrate(&state, &omega, 0.05, state.x[0], &ws);
        }
        assert!(
            state.max_tangent_norm_deviation() <= 1e-12,
            "norm drift {}",
            state.max_tangent_norm_deviation()
        );
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm_and_inverts(
            tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in 0.1..1.0f64,
            ox in -5.0..5.0f64, oy in -5.0..5.0f64, oz in -5.0..5.0f64,
            dt in 1e-4..0.5f64,
        ) {
            let tau = Vector3::new(tx, ty, tz).normalize();
            let omega = Vector3::new(ox, oy, oz);
            let fwd = rotate(&tau, &omega, dt);
            prop_assert!((fwd.norm() - 1.0).abs() < 1e-12);
            let back = rotate(&fwd, &(-omega), dt);
            prop_assert!((back - tau).norm() < 1e-10);
        }
    }
}
