//! Hydrodynamic velocity evaluations for slender fibers: anisotropic local
//! drag, the finite-part self interaction, direct inter-fiber quadrature with
//! a doublet correction, regularized pair mobilities, overlap blending, and
//! the reference line integral of the regularized kernel.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::fiber::{self, FiberParams, FiberState, Vec3Series};
use crate::spectral::ChebWorkspace;
use crate::util::adaptive_simpson;

/// Parameters of the pairwise Stokes kernels.
#[derive(Debug, Clone, Copy)]
pub struct StokesKernelParams {
    /// Fluid viscosity.
    pub mu: f64,
    /// Regularization radius of the pair mobility, `εL·e^{3/2}/4`. This is
    /// the unique radius for which the line integral of the pair mobility
    /// over a straight fiber reproduces the local drag coefficients
    /// (identity +1 and tangent −3) up to O(radius²).
    pub b: f64,
    /// Doublet strength `2b²/3` used by the smooth inter-fiber kernel.
    pub doublet_coeff: f64,
}

impl StokesKernelParams {
    pub fn new(mu: f64, eps: f64, length: f64) -> Self {
        let b = 0.25 * (1.5_f64).exp() * eps * length;
        StokesKernelParams {
            mu,
            b,
            doublet_coeff: 2.0 * b * b / 3.0,
        }
    }
}

/// Geometric relation between an off-fiber target point and a fiber, produced
/// by the closest-point search and consumed by velocity blending.
#[derive(Debug, Clone, Copy)]
pub struct TargetFiberRelation {
    /// Coarse distance estimate from uniform sampling.
    pub d_tilde: f64,
    /// Complex root of ‖x − X(η)‖² = 0 when the Newton iteration converged.
    pub eta_star: Option<num_complex::Complex64>,
    /// Arclength of the closest centerline point, clamped to [0, L].
    pub s_star: f64,
    /// Refined distance ‖x − X(s*)‖.
    pub d_hat: f64,
}

/// Stokeslet `(I + R̂R̂)/‖R‖` (no viscosity prefactor).
pub fn stokeslet(r: &Vector3<f64>) -> Matrix3<f64> {
    let dist = r.norm();
    let rhat = r / dist;
    (Matrix3::identity() + rhat * rhat.transpose()) / dist
}

/// Stokeslet plus doublet `(I + R̂R̂)/‖R‖ + β(I − 3R̂R̂)/‖R‖³`.
pub fn stokeslet_doublet(r: &Vector3<f64>, beta: f64) -> Matrix3<f64> {
    let dist = r.norm();
    let rhat = r / dist;
    let outer = rhat * rhat.transpose();
    (Matrix3::identity() + outer) / dist
        + (Matrix3::identity() - 3.0 * outer) * (beta / (dist * dist * dist))
}

/// Local anisotropic drag velocity `(1/8πμ)[c(I+ττ) + (I−3ττ)]·f`.
pub fn local_drag_velocity(
    tau: &Vector3<f64>,
    c: f64,
    f: &Vector3<f64>,
    mu: f64,
) -> Vector3<f64> {
    let pref = 1.0 / (8.0 * std::f64::consts::PI * mu);
    pref * ((c + 1.0) * f + (c - 3.0) * tau.dot(f) * tau)
}

/// Nodal velocities from local drag alone, using the fiber's drag model.
pub fn local_drag_velocities(
    params: &FiberParams,
    state: &FiberState,
    f: &[Vector3<f64>],
    ws: &ChebWorkspace,
    mu: f64,
) -> Vec<Vector3<f64>> {
    ws.grid
        .nodes
        .iter()
        .zip(&state.tau)
        .zip(f)
        .map(|((&s, tau), fp)| local_drag_velocity(tau, params.drag_coeff(s), fp, mu))
        .collect()
}

/// Finite-part self-interaction velocity at every node.
///
/// The integrand is split into a smooth part and a sign factor; the smooth
/// part is interpolated through its nodal values (with the analytic limit on
/// the diagonal) and contracted against precomputed weights that integrate
/// monomials times the sign factor exactly.
pub fn finite_part_velocity(
    state: &FiberState,
    f: &[Vector3<f64>],
    ws: &ChebWorkspace,
    mu: f64,
) -> Vec<Vector3<f64>> {
    let n = ws.n;
    let xss = fiber::apply_scalar_op(&ws.diff, &state.tau);
    let fs = fiber::apply_scalar_op(&ws.diff, f);
    let pref = 1.0 / (8.0 * std::f64::consts::PI * mu);
    let half_len = 0.5 * ws.length;

    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let sp = ws.grid.nodes[p];
        let taup = state.tau[p];
        let fp = f[p];
        let mut acc = Vector3::zeros();
        let weights: &DVector<f64> = &ws.fp_weights[p];
        for q in 0..n {
            let g = if q == p {
                // Diagonal limit of the signed smooth part.
                0.5 * (taup * xss[p].dot(&fp) + xss[p] * taup.dot(&fp))
                    + fs[p]
                    + taup * taup.dot(&fs[p])
            } else {
                let ds = ws.grid.nodes[q] - sp;
                let r = state.x[q] - state.x[p];
                let dist = r.norm();
                let rhat = r / dist;
                let skew = (f[q] + rhat * rhat.dot(&f[q])) * (ds.abs() / dist);
                (skew - (fp + taup * taup.dot(&fp))) / ds
            };
            debug_assert!(g.iter().all(|v| v.is_finite()));
            acc += weights[q] * g;
        }
        out.push(pref * half_len * acc);
    }
    out
}

/// Assemble the finite-part operator as a dense 3N×3N matrix by columns.
pub fn finite_part_matrix(state: &FiberState, ws: &ChebWorkspace, mu: f64) -> DMatrix<f64> {
    let n = ws.n;
    let mut m = DMatrix::zeros(3 * n, 3 * n);
    let mut basis = vec![Vector3::zeros(); n];
    for col in 0..3 * n {
        basis[col / 3][col % 3] = 1.0;
        let v = finite_part_velocity(state, &basis, ws, mu);
        for p in 0..n {
            for c in 0..3 {
                m[(3 * p + c, col)] = v[p][c];
            }
        }
        basis[col / 3][col % 3] = 0.0;
    }
    m
}

/// Slow independent reference for the finite-part velocity at node `p`:
/// subtract the non-integrable part analytically and integrate the
/// continuous remainder with a dense composite Simpson rule on each side of
/// the node. Exercises none of the precomputed weight machinery, so it
/// serves as a genuinely separate route for accuracy checks.
pub fn finite_part_reference(
    state: &FiberState,
    f: &[Vector3<f64>],
    ws: &ChebWorkspace,
    mu: f64,
    p: usize,
    points_per_side: usize,
) -> Vector3<f64> {
    let x_series = Vec3Series::from_values(ws, &state.x);
    let f_series = Vec3Series::from_values(ws, f);
    let xss = fiber::apply_scalar_op(&ws.diff, &state.tau);
    let fs = fiber::apply_scalar_op(&ws.diff, f);
    let sp = ws.grid.nodes[p];
    let xp = state.x[p];
    let taup = state.tau[p];
    let fp = f[p];
    let diag = 0.5 * (taup * xss[p].dot(&fp) + xss[p] * taup.dot(&fp))
        + fs[p]
        + taup * taup.dot(&fs[p]);

    let integrand = |s: f64, side: f64| -> Vector3<f64> {
        if (s - sp).abs() < 1e-13 {
            return diag * side;
        }
        let y = x_series.eval_s(s);
        let r = xp - y;
        let dist = r.norm();
        let rhat = r / dist;
        let fv = f_series.eval_s(s);
        (fv + rhat * rhat.dot(&fv)) / dist - (fp + taup * taup.dot(&fp)) / (s - sp).abs()
    };

    // Composite Simpson on [0, sp] and [sp, L].
    let mut total = Vector3::zeros();
    for (a, b, side) in [(0.0, sp, -1.0), (sp, ws.length, 1.0)] {
        if b - a < 1e-12 {
            continue;
        }
        let m = 2 * points_per_side;
        let h = (b - a) / m as f64;
        let mut acc = integrand(a, side) + integrand(b, side);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(a + i as f64 * h, side);
        }
        total += acc * (h / 3.0);
    }
    total / (8.0 * std::f64::consts::PI * mu)
}

/// Assemble local drag (optionally plus the finite part) as a 3N×3N matrix.
pub fn self_mobility_matrix(
    params: &FiberParams,
    state: &FiberState,
    ws: &ChebWorkspace,
    mu: f64,
    include_finite_part: bool,
) -> DMatrix<f64> {
    let n = ws.n;
    let pref = 1.0 / (8.0 * std::f64::consts::PI * mu);
    let mut m = if include_finite_part {
        finite_part_matrix(state, ws, mu)
    } else {
        DMatrix::zeros(3 * n, 3 * n)
    };
    for p in 0..n {
        let c = params.drag_coeff(ws.grid.nodes[p]);
        let tau = state.tau[p];
        for a in 0..3 {
            for bb in 0..3 {
                let eye = if a == bb { 1.0 } else { 0.0 };
                m[(3 * p + a, 3 * p + bb)] +=
                    pref * ((c + 1.0) * eye + (c - 3.0) * tau[a] * tau[bb]);
            }
        }
    }
    m
}

/// Velocity induced at an off-fiber point by direct quadrature of the
/// smooth Stokeslet-plus-doublet kernel over the source fiber.
pub fn interfiber_velocity_direct(
    x: &Vector3<f64>,
    state: &FiberState,
    f: &[Vector3<f64>],
    ws: &ChebWorkspace,
    params: &StokesKernelParams,
) -> Vector3<f64> {
    let pref = 1.0 / (8.0 * std::f64::consts::PI * params.mu);
    let mut acc = Vector3::zeros();
    for q in 0..ws.n {
        let kernel = stokeslet_doublet(&(x - state.x[q]), params.doublet_coeff);
        acc += ws.grid.weights[q] * (kernel * f[q]);
    }
    pref * acc
}

/// Transverse and longitudinal radial mobility functions of the regularized
/// pair kernel, so that `M = F(r)(I − r̂r̂) + G(r) r̂r̂`. Both include the
/// `1/8πμ` prefactor and are continuous at `r = 2b`.
pub fn rpy_fg(r: f64, b: f64, mu: f64) -> (f64, f64) {
    let pref = 1.0 / (8.0 * std::f64::consts::PI * mu);
    if r > 2.0 * b {
        let b2 = b * b;
        (
            pref * (1.0 / r + 2.0 * b2 / (3.0 * r * r * r)),
            pref * (2.0 / r - 4.0 * b2 / (3.0 * r * r * r)),
        )
    } else {
        (
            pref * (4.0 / (3.0 * b) - 3.0 * r / (8.0 * b * b)),
            pref * (4.0 / (3.0 * b) - r / (4.0 * b * b)),
        )
    }
}

/// Regularized pair mobility between two points; finite at coincidence.
pub fn rpy_kernel(x: &Vector3<f64>, y: &Vector3<f64>, b: f64, mu: f64) -> Matrix3<f64> {
    let r = x - y;
    let dist = r.norm();
    let (fr, gr) = rpy_fg(dist, b, mu);
    if dist < 1e-14 * b {
        return Matrix3::identity() * fr;
    }
    let rhat = r / dist;
    let outer = rhat * rhat.transpose();
    (Matrix3::identity() - outer) * fr + outer * gr
}

/// Centerline velocity used when a target lies on or next to a fiber
/// surface: local drag evaluated at the closest arclength plus the
/// interpolated finite-part velocity there.
pub fn centerline_velocity(
    params: &FiberParams,
    tau_series: &Vec3Series,
    f_series: &Vec3Series,
    fp_series: &Vec3Series,
    s_star: f64,
    mu: f64,
) -> Vector3<f64> {
    let tau = tau_series.eval_s(s_star).normalize();
    let f = f_series.eval_s(s_star);
    let c = params.drag_coeff(s_star);
    local_drag_velocity(&tau, c, &f, mu) + fp_series.eval_s(s_star)
}

/// Linear blend between the centerline velocity (surface contact, d̂ ≤ 2b)
/// and the smooth interaction velocity (d̂ ≥ 4b).
pub fn blended_velocity(
    centerline: Vector3<f64>,
    interaction: Vector3<f64>,
    d_hat: f64,
    b: f64,
) -> Vector3<f64> {
    if d_hat <= 2.0 * b {
        centerline
    } else if d_hat >= 4.0 * b {
        interaction
    } else {
        let t = (d_hat - 2.0 * b) / (2.0 * b);
        centerline * (1.0 - t) + interaction * t
    }
}

/// Line integral of the regularized pair mobility along a fiber, by adaptive
/// quadrature split at the kernel's branch radius. Serves as the slow
/// reference that the local drag coefficients approximate to O(b²).
pub fn rpy_line_integral(
    s: f64,
    x_series: &Vec3Series,
    f_series: &Vec3Series,
    b: f64,
    mu: f64,
) -> Vector3<f64> {
    let length = x_series.length;
    let target = x_series.eval_s(s);
    let mut integrand = |sp: f64| -> Vector3<f64> {
        let y = x_series.eval_s(sp);
        rpy_kernel(&target, &y, b, mu) * f_series.eval_s(sp)
    };
    let mut cuts = vec![0.0, length];
    for c in [s - 2.0 * b, s, s + 2.0 * b] {
        if c > 0.0 && c < length {
            cuts.push(c);
        }
    }
    cuts.sort_by(|a, c| a.partial_cmp(c).unwrap());
    let fmax = (0..=16)
        .map(|i| f_series.eval_s(length * i as f64 / 16.0).norm())
        .fold(0.0_f64, f64::max);
    let floor = 1e-13 * fmax * (length + 1.0) / (8.0 * std::f64::consts::PI * mu * b);
    let mut acc = Vector3::zeros();
    for pair in cuts.windows(2) {
        if pair[1] > pair[0] {
            acc += adaptive_simpson(&mut integrand, pair[0], pair[1], 1e-8, floor);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber::DragModel;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const PI: f64 = std::f64::consts::PI;

    fn workspace(n: usize) -> ChebWorkspace {
        ChebWorkspace::new(n, 2.0)
    }

    fn straight_fiber(ws: &ChebWorkspace) -> FiberState {
        let tau = vec![Vector3::new(0.0, 0.0, 1.0); ws.n];
        FiberState::from_tangents(ws, tau, Vector3::zeros())
    }

    fn curved_fiber(ws: &ChebWorkspace, amplitude: f64) -> FiberState {
        let tau: Vec<Vector3<f64>> = ws
            .grid
            .nodes
            .iter()
            .map(|&s| {
                let theta = amplitude * (s - 0.3 * s * s);
                let phi = amplitude * (0.5 * s * s - 0.2 * s);
                Vector3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin())
            })
            .collect();
        FiberState::from_tangents(ws, tau, Vector3::zeros())
    }

    #[test]
    fn kernel_radius_ratio_is_locked() {
        let p = StokesKernelParams::new(1.0, 1e-3, 2.0);
        assert_relative_eq!(p.b / (1e-3 * 2.0), 0.25 * (1.5_f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(p.doublet_coeff, 2.0 * p.b * p.b / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn local_drag_transverse_and_longitudinal_entries() {
        let mu = 1.0 / (8.0 * PI); // sets the prefactor to one
        let tau = Vector3::new(0.0, 0.0, 1.0);
        let vx = local_drag_velocity(&tau, 10.0, &Vector3::new(1.0, 0.0, 0.0), mu);
        assert_relative_eq!(vx.x, 11.0, epsilon = 1e-12);
        assert_relative_eq!(vx.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(vx.z, 0.0, epsilon = 1e-12);
        let vz = local_drag_velocity(&tau, 10.0, &Vector3::new(0.0, 0.0, 1.0), mu);
        assert_relative_eq!(vz.z, 18.0, epsilon = 1e-12);
    }

    #[test]
    fn local_drag_is_isotropic() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let axis = Unit::new_normalize(Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ));
            let rot = Rotation3::from_axis_angle(&axis, rng.random::<f64>() * PI);
            let tau = Unit::new_normalize(Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ))
            .into_inner();
            let f = Vector3::new(rng.random(), rng.random(), rng.random());
            let direct = rot * local_drag_velocity(&tau, 7.3, &f, 1.0);
            let rotated = local_drag_velocity(&(rot * tau), 7.3, &(rot * f), 1.0);
            assert_relative_eq!((direct - rotated).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_part_vanishes_on_straight_fiber_with_constant_force() {
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let f = vec![Vector3::new(0.3, -0.7, 0.2); ws.n];
        let v = finite_part_velocity(&state, &f, &ws, 1.0);
        let max = v.iter().map(|u| u.norm()).fold(0.0_f64, f64::max);
        assert!(max < 1e-12, "finite part on straight fiber {max}");
    }

    #[test]
    fn finite_part_matches_subtracted_oracle_on_curved_fiber() {
        let ws = ChebWorkspace::new(32, 2.0);
        let state = curved_fiber(&ws, 0.5);
        let f = state.tau.clone();
        let v = finite_part_velocity(&state, &f, &ws, 1.0);
        let scale = v.iter().map(|u| u.norm()).fold(0.0_f64, f64::max);
        for p in (4..ws.n - 4).step_by(5) {
            let oracle = finite_part_reference(&state, &f, &ws, 1.0, p, 5000);
            assert!(
                (v[p] - oracle).norm() <= 1e-6 * scale,
                "node {p}: {} vs oracle {}",
                v[p],
                oracle
            );
        }
    }

    #[test]
    fn distant_target_sees_a_single_stokeslet() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.4);
        let params = StokesKernelParams::new(1.3, 1e-3, 2.0);
        let f = vec![Vector3::new(0.2, -0.1, 0.4); ws.n];
        let total: Vector3<f64> = f
            .iter()
            .zip(&ws.grid.weights)
            .map(|(fq, &w)| fq * w)
            .sum();
        let centroid: Vector3<f64> = state
            .x
            .iter()
            .zip(&ws.grid.weights)
            .map(|(x, &w)| x * w)
            .sum::<Vector3<f64>>()
            / ws.length;
        let x = centroid + Vector3::new(120.0, 160.0, 90.0); // ‖·‖ ≈ 100L
        let direct = interfiber_velocity_direct(&x, &state, &f, &ws, &params);
        let single = stokeslet(&(x - centroid)) * total / (8.0 * PI * params.mu);
        assert!(
            (direct - single).norm() <= 1e-3 * single.norm(),
            "monopole mismatch {} vs {}",
            direct,
            single
        );
    }

    #[test]
    fn zero_force_gives_zero_velocity() {
        let ws = workspace(16);
        let state = curved_fiber(&ws, 0.4);
        let params = StokesKernelParams::new(1.0, 1e-3, 2.0);
        let f = vec![Vector3::zeros(); ws.n];
        let v = interfiber_velocity_direct(&Vector3::new(0.5, 0.7, 0.1), &state, &f, &ws, &params);
        assert_eq!(v, Vector3::zeros());
        let series = Vec3Series::from_values(&ws, &f);
        let x_series = Vec3Series::from_values(&ws, &state.x);
        let u = rpy_line_integral(1.0, &x_series, &series, params.b, params.mu);
        assert_eq!(u, Vector3::zeros());
    }

    #[test]
    fn doublet_contribution_matches_independent_quadrature() {
        let ws = workspace(24);
        let state = straight_fiber(&ws);
        let params = StokesKernelParams::new(1.0, 1e-3, 2.0);
        let no_doublet = StokesKernelParams {
            doublet_coeff: 0.0,
            ..params
        };
        let f = vec![Vector3::new(1.0, 0.5, -0.2); ws.n];
        // Close enough that the doublet matters, far enough that the nodal
        // quadrature still resolves the kernel (the near-singular machinery
        // owns anything closer).
        let x = Vector3::new(0.8, 0.0, 1.0);
        let with = interfiber_velocity_direct(&x, &state, &f, &ws, &params);
        let without = interfiber_velocity_direct(&x, &state, &f, &ws, &no_doublet);
        let x_series = Vec3Series::from_values(&ws, &state.x);
        let f_series = Vec3Series::from_values(&ws, &f);
        let mut doublet_only = |s: f64| -> Vector3<f64> {
            let y = x_series.eval_s(s);
            let r = x - y;
            let dist = r.norm();
            let rhat = r / dist;
            let outer = rhat * rhat.transpose();
            (Matrix3::identity() - 3.0 * outer) * (params.doublet_coeff / dist.powi(3))
                * f_series.eval_s(s)
                / (8.0 * PI * params.mu)
        };
        let reference = adaptive_simpson(&mut doublet_only, 0.0, ws.length, 1e-10, 1e-16);
        let diff = with - without;
        assert!(
            (diff - reference).norm() <= 1e-5 * diff.norm(),
            "doublet part {} vs {}",
            diff,
            reference
        );
    }

    #[test]
    fn pair_mobility_limits_and_continuity() {
        let b = 0.02;
        let mu = 1.7;
        let self_mob = rpy_kernel(&Vector3::zeros(), &Vector3::zeros(), b, mu);
        let expect = (4.0 / (3.0 * b)) / (8.0 * PI * mu);
        assert_relative_eq!(self_mob[(0, 0)], expect, epsilon = 1e-14);
        assert_relative_eq!(self_mob[(0, 1)], 0.0, epsilon = 1e-16);

        // Both branches evaluated exactly at r = 2b agree.
        let r = 2.0 * b;
        let pref = 1.0 / (8.0 * PI * mu);
        let far_f = pref * (1.0 / r + 2.0 * b * b / (3.0 * r * r * r));
        let far_g = pref * (2.0 / r - 4.0 * b * b / (3.0 * r * r * r));
        let (near_f, near_g) = rpy_fg(r, b, mu);
        assert_relative_eq!(near_f, far_f, max_relative = 1e-12);
        assert_relative_eq!(near_g, far_g, max_relative = 1e-12);
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let b = 0.01;
        let c = Vector3::new(1.0, 0.0, 0.0);
        let i = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(blended_velocity(c, i, 2.0 * b, b), c);
        assert_eq!(blended_velocity(c, i, 4.0 * b, b), i);
        let mid = blended_velocity(c, i, 3.0 * b, b);
        assert_relative_eq!((mid - (c + i) * 0.5).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn line_integral_of_pair_kernel_approaches_local_drag_quadratically() {
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let x_series = Vec3Series::from_values(&ws, &state.x);
        let f = Vector3::new(1.0, 0.0, 1.0);
        let f_series = Vec3Series::from_values(&ws, &vec![f; ws.n]);
        let mu = 1.0;
        let s = 1.0; // midpoint of L = 2
        let mut errs = Vec::new();
        for eps in [1e-2, 1e-3] {
            let params = StokesKernelParams::new(mu, eps, ws.length);
            let u = rpy_line_integral(s, &x_series, &f_series, params.b, mu);
            let c = (4.0 * s * (ws.length - s) / (eps * ws.length).powi(2)).ln();
            let local = local_drag_velocity(&Vector3::new(0.0, 0.0, 1.0), c, &f, mu);
            errs.push((u - local).norm());
        }
        let slope = (errs[0] / errs[1]).log10();
        assert!(
            (slope - 2.0).abs() <= 0.3,
            "expected quadratic decay in the regularization radius, slope {slope}, errors {errs:?}"
        );
    }

    #[test]
    fn line_integral_is_mirror_symmetric_on_straight_fiber() {
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let x_series = Vec3Series::from_values(&ws, &state.x);
        let f_series = Vec3Series::from_values(&ws, &vec![Vector3::new(1.0, 0.0, 0.0); ws.n]);
        let params = StokesKernelParams::new(1.0, 1e-3, ws.length);
        let u1 = rpy_line_integral(0.4, &x_series, &f_series, params.b, params.mu);
        let u2 = rpy_line_integral(ws.length - 0.4, &x_series, &f_series, params.b, params.mu);
        assert_relative_eq!((u1 - u2).norm(), 0.0, epsilon = 1e-8 * u1.norm());
    }

    #[test]
    fn self_mobility_is_positive_on_low_modes() {
        let ws = workspace(16);
        let state = straight_fiber(&ws);
        let params = FiberParams::new(16, 2.0, 1e-3, 1.0, DragModel::Ellipsoidal);
        let m = self_mobility_matrix(&params, &state, &ws, 1.0, true);

        // Restrict to the first N/2 polynomial modes in each component.
        let nmodes = ws.n / 2;
        let mut p = DMatrix::zeros(3 * ws.n, 3 * nmodes);
        for k in 0..nmodes {
            for (row, &eta) in ws.grid.etas().iter().enumerate() {
                let t = (k as f64 * eta.acos()).cos();
                for c in 0..3 {
                    p[(3 * row + c, 3 * k + c)] = t;
                }
            }
        }
        let mut w = DMatrix::zeros(3 * ws.n, 3 * ws.n);
        for q in 0..ws.n {
            for c in 0..3 {
                w[(3 * q + c, 3 * q + c)] = ws.grid.weights[q];
            }
        }
        let restricted = p.transpose() * &w * &m * &p;
        let sym = 0.5 * (&restricted + restricted.transpose());
        let asym = 0.5 * (&restricted - restricted.transpose());
        assert!(asym.norm() <= 1e-8 * restricted.norm());
        let eigs = sym.symmetric_eigenvalues();
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "restricted self mobility not positive: {min}");
    }

    proptest! {
        #[test]
        fn pair_kernel_is_symmetric_under_swap(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
            bx in -1.0..1.0f64, by in -1.0..1.0f64, bz in -1.0..1.0f64,
        ) {
            let x = Vector3::new(ax, ay, az);
            let y = Vector3::new(bx, by, bz) + Vector3::new(2.0, 0.0, 0.0);
            let k1 = rpy_kernel(&x, &y, 0.05, 1.0);
            let k2 = rpy_kernel(&y, &x, 0.05, 1.0).transpose();
            prop_assert!((k1 - k2).norm() < 1e-13);
        }

        #[test]
        fn finite_part_is_linear(scale in 0.1..5.0f64) {
            let ws = ChebWorkspace::new(12, 2.0);
            let state = {
                let tau: Vec<Vector3<f64>> = ws.grid.nodes.iter().map(|&s| {
                    let th = 0.3 * s;
                    Vector3::new(th.cos(), th.sin(), 0.0)
                }).collect();
                FiberState::from_tangents(&ws, tau, Vector3::zeros())
            };
            let f: Vec<Vector3<f64>> = ws.grid.nodes.iter()
                .map(|&s| Vector3::new(s, 1.0 - s, 0.5 * s * s)).collect();
            let fs: Vec<Vector3<f64>> = f.iter().map(|v| v * scale).collect();
            let v1 = finite_part_velocity(&state, &f, &ws, 1.0);
            let v2 = finite_part_velocity(&state, &fs, &ws, 1.0);
            for (a, b) in v1.iter().zip(&v2) {
                prop_assert!((a * scale - b).norm() <= 1e-10 * (1.0 + b.norm()));
            }
        }
    }
}
