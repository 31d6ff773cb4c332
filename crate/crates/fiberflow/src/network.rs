//! Permanently cross-linked fiber networks: link force model, random
//! binding, and rheology outputs (bulk stress and viscoelastic moduli).
//!
//! A cross-linker is an elastic spring between anchor arclengths on two
//! fibers, smeared along each fiber by a Gaussian density that is
//! discretely normalized per anchor. With that normalization the force
//! density of every link exerts exactly zero net force and torque on the
//! pair it connects — at machine precision, for any smoothing width — which
//! justifies using Batchelor's volume-average formula for the bulk stress.
//! Periodic links store the integer image offset of the second anchor at
//! bind time, so the pair stays bound to the same image as the cell shears.

use crate::domain::ShearedDomain;
use crate::error::{FiberflowError, Result};
use crate::fiber::{FiberState, Vec3Series};
use crate::spectral::ChebWorkspace;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Number of uniformly spaced binding sites per fiber.
pub const BINDING_SITES: usize = 16;

/// One permanent cross-linker between fiber `i` at arclength `s_i` and
/// fiber `j` at arclength `s_j`. `image_shift` holds the integer lattice
/// coordinates of the periodic image of fiber `j` the link was bound to,
/// fixed at bind time; the physical offset follows the sheared cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossLink {
    pub i: usize,
    pub j: usize,
    pub s_i: f64,
    pub s_j: f64,
    /// Spring constant (force per length).
    pub kc: f64,
    /// Rest length.
    pub ell: f64,
    pub image_shift: [i32; 3],
}

/// Gaussian smoothing density with per-anchor discrete normalization.
#[derive(Clone, Copy, Debug)]
pub struct SmoothingKernel {
    pub sigma: f64,
}

impl SmoothingKernel {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0, "smoothing width must be positive");
        SmoothingKernel { sigma }
    }

    /// Nodal values of `δ_h(s_p − s_star)`, normalized so that
    /// `Σ_p δ_h(s_p − s_star) w_p = 1` exactly on this grid — including
    /// anchors near the ends where part of the Gaussian is truncated.
    pub fn weights(&self, nodes: &[f64], quad_weights: &[f64], s_star: f64) -> Vec<f64> {
        let raw: Vec<f64> = nodes
            .iter()
            .map(|&s| (-((s - s_star) * (s - s_star)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let z: f64 = raw.iter().zip(quad_weights).map(|(r, w)| r * w).sum();
        raw.iter().map(|r| r / z).collect()
    }
}

/// Force density exerted by one link on its two fibers, as nodal values:
/// `(f_i, f_j)` with fiber `j` understood in its bound periodic image.
///
/// With anchor-normalized smoothing weights `a_p`, `b_q`, the density on
/// fiber `i` reduces to `−C a_p (X_i(s_p) − X̄_j)` where `X̄_j` is the
/// smoothing-weighted mean of the (shifted) fiber-`j` nodes and
/// `C = K_c (1 − ℓ/‖anchor separation‖)`.
fn link_force_pair(
    link: &CrossLink,
    xi: &[Vector3<f64>],
    xj_shifted: &[Vector3<f64>],
    anchor_i: Vector3<f64>,
    anchor_j_shifted: Vector3<f64>,
    nodes: &[f64],
    quad_weights: &[f64],
    kernel: &SmoothingKernel,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let dist = (anchor_i - anchor_j_shifted).norm();
    if dist < 1e-12 {
        return Err(FiberflowError::Numerical(format!(
            "degenerate link between fibers {} and {}: anchor separation {dist:.3e}",
            link.i, link.j
        )));
    }
    let c = link.kc * (1.0 - link.ell / dist);
    let a = kernel.weights(nodes, quad_weights, link.s_i);
    let b = kernel.weights(nodes, quad_weights, link.s_j);
    let xbar_j: Vector3<f64> = xj_shifted
        .iter()
        .zip(&b)
        .zip(quad_weights)
        .map(|((x, bq), w)| x * (bq * w))
        .sum();
    let xbar_i: Vector3<f64> = xi
        .iter()
        .zip(&a)
        .zip(quad_weights)
        .map(|((x, ap), w)| x * (ap * w))
        .sum();
    let fi = xi
        .iter()
        .zip(&a)
        .map(|(x, ap)| -c * ap * (x - xbar_j))
        .collect();
    let fj = xj_shifted
        .iter()
        .zip(&b)
        .map(|(x, bq)| -c * bq * (x - xbar_i))
        .collect();
    Ok((fi, fj))
}

/// Accumulated cross-linker force density on every fiber.
pub fn cl_force_density(
    links: &[CrossLink],
    states: &[FiberState],
    ws: &ChebWorkspace,
    kernel: &SmoothingKernel,
    domain: &ShearedDomain,
) -> Result<Vec<Vec<Vector3<f64>>>> {
    let n = ws.n;
    let series: Vec<Vec3Series> = states
        .iter()
        .map(|st| Vec3Series::from_values(ws, &st.x))
        .collect();
    let mut out = vec![vec![Vector3::zeros(); n]; states.len()];
    for link in links {
        let shift = domain.shift(link.image_shift);
        let xj_shifted: Vec<Vector3<f64>> =
            states[link.j].x.iter().map(|x| x + shift).collect();
        let anchor_i = series[link.i].eval_s(link.s_i);
        let anchor_j = series[link.j].eval_s(link.s_j) + shift;
        let (fi, fj) = link_force_pair(
            link,
            &states[link.i].x,
            &xj_shifted,
            anchor_i,
            anchor_j,
            &ws.grid.nodes,
            &ws.grid.weights,
            kernel,
        )?;
        for p in 0..n {
            out[link.i][p] += fi[p];
            out[link.j][p] += fj[p];
        }
    }
    Ok(out)
}

/// Diagnostics attached to a binding failure.
#[derive(Debug)]
pub struct BindingReport {
    pub requested: usize,
    pub bound: usize,
    pub attempts: usize,
}

/// Randomly bind `count` cross-linkers: each attempt draws a pair of
/// distinct fibers and one of the 16 uniformly spaced sites on each, and
/// binds if the minimum-image site separation is below the rest length.
/// Deterministic for a given seed; multiple links may share a site.
pub fn bind_links(
    states: &[FiberState],
    ws: &ChebWorkspace,
    count: usize,
    kc: f64,
    ell: f64,
    seed: u64,
    domain: &ShearedDomain,
) -> Result<Vec<CrossLink>> {
    let nf = states.len();
    if nf < 2 {
        return Err(FiberflowError::Binding(
            "binding needs at least two fibers".into(),
        ));
    }
    let l = ws.length;
    let sites: Vec<f64> = (0..BINDING_SITES)
        .map(|u| l * u as f64 / (BINDING_SITES - 1) as f64)
        .collect();
    let positions: Vec<Vec<Vector3<f64>>> = states
        .iter()
        .map(|st| {
            let series = Vec3Series::from_values(ws, &st.x);
            sites.iter().map(|&s| series.eval_s(s)).collect()
        })
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut links = Vec::with_capacity(count);
    let budget = 1000 * count.max(1);
    let mut attempts = 0;
    while links.len() < count {
        if attempts >= budget {
            return Err(FiberflowError::Binding(format!(
                "bound {} of {} links in {} attempts; geometry admits too few pairs within ℓ = {}",
                links.len(),
                count,
                attempts,
                ell
            )));
        }
        attempts += 1;
        let i = rng.random_range(0..nf);
        let j = rng.random_range(0..nf);
        if i == j {
            continue;
        }
        let ui = rng.random_range(0..BINDING_SITES);
        let uj = rng.random_range(0..BINDING_SITES);
        let d = positions[i][ui] - positions[j][uj];
        let ds = domain.to_sheared(&d);
        let shift = [
            (ds.x / domain.edges.x).round() as i32,
            (ds.y / domain.edges.y).round() as i32,
            (ds.z / domain.edges.z).round() as i32,
        ];
        let dist = (d - domain.shift(shift)).norm();
        if dist < ell {
            links.push(CrossLink {
                i,
                j,
                s_i: sites[ui],
                s_j: sites[uj],
                kc,
                ell,
                image_shift: shift,
            });
        }
    }
    Ok(links)
}

/// Batchelor volume-average stress of nodal force densities on fibers:
/// `−(1/V) Σ_i Σ_p X_p ⊗ f_p w_p`.
pub fn batchelor_stress(
    positions: &[Vec<Vector3<f64>>],
    forces: &[Vec<Vector3<f64>>],
    quad_weights: &[f64],
    volume: f64,
) -> Matrix3<f64> {
    assert!(volume > 0.0);
    let mut s = Matrix3::zeros();
    for (xs, fs) in positions.iter().zip(forces) {
        for ((x, f), &w) in xs.iter().zip(fs).zip(quad_weights) {
            for r in 0..3 {
                for c in 0..3 {
                    s[(r, c)] -= x[r] * f[c] * w;
                }
            }
        }
    }
    s / volume
}

/// Cross-linker contribution to the bulk stress, with every link evaluated
/// in its bound periodic image pair (fiber `i` in the primary image, fiber
/// `j` shifted). The per-link zero net force makes the result independent
/// of which image of the pair is primary. `positions` are the nodal fiber
/// positions the stress should be evaluated at (one entry per fiber).
pub fn crosslink_stress(
    links: &[CrossLink],
    positions: &[Vec<Vector3<f64>>],
    ws: &ChebWorkspace,
    kernel: &SmoothingKernel,
    domain: &ShearedDomain,
    volume: f64,
) -> Result<Matrix3<f64>> {
    assert!(volume > 0.0);
    let series: Vec<Vec3Series> = positions
        .iter()
        .map(|x| Vec3Series::from_values(ws, x))
        .collect();
    let mut s = Matrix3::zeros();
    for link in links {
        let shift = domain.shift(link.image_shift);
        let xj_shifted: Vec<Vector3<f64>> =
            positions[link.j].iter().map(|x| x + shift).collect();
        let anchor_i = series[link.i].eval_s(link.s_i);
        let anchor_j = series[link.j].eval_s(link.s_j) + shift;
        let (fi, fj) = link_force_pair(
            link,
            &positions[link.i],
            &xj_shifted,
            anchor_i,
            anchor_j,
            &ws.grid.nodes,
            &ws.grid.weights,
            kernel,
        )?;
        for ((x, f), &w) in positions[link.i].iter().zip(&fi).zip(&ws.grid.weights) {
            for r in 0..3 {
                for c in 0..3 {
                    s[(r, c)] -= x[r] * f[c] * w;
                }
            }
        }
        for ((x, f), &w) in xj_shifted.iter().zip(&fj).zip(&ws.grid.weights) {
            for r in 0..3 {
                for c in 0..3 {
                    s[(r, c)] -= x[r] * f[c] * w;
                }
            }
        }
    }
    Ok(s / volume)
}

/// One midpoint stress sample: the shear component σ₂₁ split by origin.
#[derive(Clone, Copy, Debug)]
pub struct StressSample {
    pub t: f64,
    pub fiber: f64,
    pub crosslink: f64,
}

impl StressSample {
    pub fn total(&self) -> f64 {
        self.fiber + self.crosslink
    }
}

/// Elastic and viscous moduli from midpoint stress samples:
/// `G′ = (2/γ₀T) ∫ σ₂₁ sin(ωt) dt`, `G″` with `cos`, by the midpoint rule.
/// Requires uniformly spaced midpoint samples spanning an integer number
/// of periods.
pub fn moduli_from_series(
    samples: &[StressSample],
    omega: f64,
    gamma0: f64,
) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(FiberflowError::Config(
            "moduli need at least two stress samples".into(),
        ));
    }
    if !(omega > 0.0 && gamma0 > 0.0) {
        return Err(FiberflowError::Config(format!(
            "moduli need positive omega and gamma0, got {omega}, {gamma0}"
        )));
    }
    let dt = samples[1].t - samples[0].t;
    for pair in samples.windows(2) {
        if ((pair[1].t - pair[0].t) - dt).abs() > 1e-9 * dt {
            return Err(FiberflowError::Config(
                "stress samples must be uniformly spaced".into(),
            ));
        }
    }
    // Midpoint samples at t_k = t0 + (k + 1/2) dt span [t0, t0 + n dt].
    let span = samples.len() as f64 * dt;
    let periods = span * omega / (2.0 * std::f64::consts::PI);
    if (periods - periods.round()).abs() > 1e-6 || periods.round() < 1.0 {
        return Err(FiberflowError::Config(format!(
            "stress series spans {periods:.6} periods; an integer count is required"
        )));
    }
    let mut gp = 0.0;
    let mut gpp = 0.0;
    for s in samples {
        let phase = omega * s.t;
        gp += s.total() * phase.sin() * dt;
        gpp += s.total() * phase.cos() * dt;
    }
    let norm = 2.0 / (gamma0 * span);
    Ok((norm * gp, norm * gpp))
}

/// Mean L² fiber displacement norm between two snapshots:
/// `v̄ = (1/F) Σ_i (Σ_p ‖X_p^{(i),a} − X_p^{(i),b}‖² w_p)^{1/2}`.
/// Callers pass snapshots separated by the sampling window (0.05 s in the
/// relaxation protocol); the result is a displacement norm, not a rate.
pub fn mean_fiber_velocity(
    a: &[Vec<Vector3<f64>>],
    b: &[Vec<Vector3<f64>>],
    quad_weights: &[f64],
) -> f64 {
    assert_eq!(a.len(), b.len());
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(xa, xb)| {
            xa.iter()
                .zip(xb)
                .zip(quad_weights)
                .map(|((p, q), &w)| (p - q).norm_squared() * w)
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.len() as f64
}

/// Fit of `v(t) ≈ a₁ e^{−t/τ₁} + a₂ e^{−t/τ₂}`.
#[derive(Clone, Copy, Debug)]
pub struct DoubleExponentialFit {
    pub a1: f64,
    pub tau1: f64,
    pub a2: f64,
    pub tau2: f64,
    /// Root-mean-square residual of the fit.
    pub rms: f64,
}

/// Separable least squares: scan (τ₁, τ₂) on a log grid (then refine), with
/// the amplitudes solved by a 2×2 linear system per candidate. Deterministic.
pub fn fit_double_exponential(ts: &[f64], vals: &[f64]) -> Result<DoubleExponentialFit> {
    if ts.len() != vals.len() || ts.len() < 4 {
        return Err(FiberflowError::Config(
            "double-exponential fit needs at least four samples".into(),
        ));
    }
    let amplitudes = |t1: f64, t2: f64| -> (f64, f64, f64) {
        // Normal equations for min ‖a₁ e₁ + a₂ e₂ − v‖².
        let (mut g11, mut g12, mut g22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &v) in ts.iter().zip(vals) {
            let e1 = (-t / t1).exp();
            let e2 = (-t / t2).exp();
            g11 += e1 * e1;
            g12 += e1 * e2;
            g22 += e2 * e2;
            r1 += e1 * v;
            r2 += e2 * v;
        }
        let det = g11 * g22 - g12 * g12;
        if det.abs() < 1e-14 * (g11 * g22).max(1e-300) {
            // Nearly identical time constants: collapse onto one exponential.
            let a = r1 / g11;
            return (a, 0.0, sum_sq_residual(ts, vals, a, t1, 0.0, t2));
        }
        let a1 = (g22 * r1 - g12 * r2) / det;
        let a2 = (g11 * r2 - g12 * r1) / det;
        (a1, a2, sum_sq_residual(ts, vals, a1, t1, a2, t2))
    };

    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0, 0.0);
    let grid = |lo: f64, hi: f64, m: usize| -> Vec<f64> {
        (0..m)
            .map(|k| lo * (hi / lo).powf(k as f64 / (m - 1) as f64))
            .collect()
    };
    let coarse = grid(0.02, 20.0, 60);
    for (ia, &t1) in coarse.iter().enumerate() {
        for &t2 in &coarse[ia..] {
            let (a1, a2, ss) = amplitudes(t1, t2);
            if ss < best.0 {
                best = (ss, a1, t1, a2, t2);
            }
        }
    }
    // Local refinement around the coarse optimum.
    for _ in 0..3 {
        let (_, _, t1c, _, t2c) = best;
        let g1 = grid(t1c / 1.5, t1c * 1.5, 15);
        let g2 = grid(t2c / 1.5, t2c * 1.5, 15);
        for &t1 in &g1 {
            for &t2 in &g2 {
                let (a1, a2, ss) = amplitudes(t1, t2);
                if ss < best.0 {
                    best = (ss, a1, t1, a2, t2);
                }
            }
        }
    }
    // Gauss-Newton polish on the log time constants, re-solving the
    // amplitudes each iteration. Step damping keeps the iterates in the
    // grid-search basin.
    for _ in 0..60 {
        let (ss0, a1, t1, a2, t2) = best;
        let (mut j11, mut j12, mut j22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &v) in ts.iter().zip(vals) {
            let e1 = (-t / t1).exp();
            let e2 = (-t / t2).exp();
            let r = a1 * e1 + a2 * e2 - v;
            // ∂r/∂log τ = a e^{−t/τ} (t/τ)
            let d1 = a1 * e1 * (t / t1);
            let d2 = a2 * e2 * (t / t2);
            j11 += d1 * d1;
            j12 += d1 * d2;
            j22 += d2 * d2;
            b1 += d1 * r;
            b2 += d2 * r;
        }
        let det = j11 * j22 - j12 * j12;
        if det.abs() < 1e-300 {
            break;
        }
        let s1 = (-(j22 * b1 - j12 * b2) / det).clamp(-0.5, 0.5);
        let s2 = (-(j11 * b2 - j12 * b1) / det).clamp(-0.5, 0.5);
        let (t1n, t2n) = (t1 * s1.exp(), t2 * s2.exp());
        let (a1n, a2n, ssn) = amplitudes(t1n, t2n);
        if ssn < ss0 {
            best = (ssn, a1n, t1n, a2n, t2n);
        } else {
            break;
        }
    }
    let (ss, a1, tau1, a2, tau2) = best;
    // Report with the faster time constant first.
    let (a1, tau1, a2, tau2) = if tau1 <= tau2 {
        (a1, tau1, a2, tau2)
    } else {
        (a2, tau2, a1, tau1)
    };
    Ok(DoubleExponentialFit {
        a1,
        tau1,
        a2,
        tau2,
        rms: (ss / ts.len() as f64).sqrt(),
    })
}

fn sum_sq_residual(ts: &[f64], vals: &[f64], a1: f64, t1: f64, a2: f64, t2: f64) -> f64 {
    ts.iter()
        .zip(vals)
        .map(|(&t, &v)| {
            let model = a1 * (-t / t1).exp() + if a2 != 0.0 { a2 * (-t / t2).exp() } else { 0.0 };
            (model - v) * (model - v)
        })
        .sum()
}
