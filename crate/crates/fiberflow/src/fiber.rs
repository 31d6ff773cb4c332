//! Per-fiber geometry: parameters, nodal state, orthonormal frames, the
//! rectangular-collocation bending force, and the endpoint-regularized
//! local drag coefficient.

use crate::spectral::{antideriv_coeffs, ChebSeries, ChebWorkspace};
use nalgebra::{DMatrix, DVector, Vector3};

/// Local drag coefficient model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DragModel {
    /// Constant-radius cylinder with endpoint regularization over a
    /// boundary layer of fractional width `delta`.
    Regularized { delta: f64 },
    /// Ellipsoidally tapered fiber: constant coefficient `ln(1/eps^2)`.
    Ellipsoidal,
}

/// Physical and discretization parameters of one fiber.
#[derive(Clone, Copy, Debug)]
pub struct FiberParams {
    /// Nodes per fiber (type-1 grid).
    pub n: usize,
    /// Fiber length (μm).
    pub length: f64,
    /// Slenderness ratio ε = r/L.
    pub eps: f64,
    /// Bending modulus κ (pN·μm²).
    pub kappa: f64,
    pub drag: DragModel,
}

impl FiberParams {
    pub fn new(n: usize, length: f64, eps: f64, kappa: f64, drag: DragModel) -> Self {
        assert!(length > 0.0 && eps > 0.0 && eps < 0.1 && kappa >= 0.0);
        if let DragModel::Regularized { delta } = drag {
            assert!(delta > 0.0 && delta <= 0.5, "delta in (0, 0.5]");
        }
        FiberParams { n, length, eps, kappa, drag }
    }

    /// Radius of the regularized-singularity spheres: `b = e^{3/2} εL / 4`,
    /// the unique choice whose line-integrated kernel reproduces the local
    /// slender-body drag away from the endpoints.
    pub fn sphere_radius(&self) -> f64 {
        0.25 * (1.5f64).exp() * self.eps * self.length
    }

    /// Doublet coefficient `2b²/3 = e³ (εL)² / 24` of the inter-fiber kernel.
    pub fn doublet_coeff(&self) -> f64 {
        let b = self.sphere_radius();
        2.0 * b * b / 3.0
    }

    /// Local drag coefficient at arclength `s`.
    ///
    /// Regularized model: `c̄(s) = ln(4 s̄ (L − s̄) / (εL)²)` where `s̄`
    /// rolls off smoothly to `δL/2` at the endpoints; symmetric about L/2,
    /// finite at the ends.
    pub fn drag_coeff(&self, s: f64) -> f64 {
        debug_assert!((-1e-12..=self.length + 1e-12).contains(&s));
        match self.drag {
            DragModel::Ellipsoidal => -2.0 * self.eps.ln(),
            DragModel::Regularized { delta } => {
                let l = self.length;
                let half = 0.5 * l;
                let sm = if s <= half { s } else { l - s };
                let eta = 2.0 * sm / l - 1.0;
                let w = ((eta + 1.0) / delta).tanh() - ((eta - 1.0) / delta).tanh() - 1.0;
                let sbar = w * sm + (1.0 - w * w) * delta * l / 2.0;
                (4.0 * sbar * (l - sbar) / (self.eps * l).powi(2)).ln()
            }
        }
    }
}

/// Orthonormal frame completing a unit tangent, from spherical angles
/// `τ = (cosθ cosφ, sinθ cosφ, sinφ)`:
/// `n1 = (−sinθ, cosθ, 0)`, `n2 = (−cosθ sinφ, −sinθ sinφ, cosφ)`.
/// At the poles (both horizontal components below 1e−14) θ is taken as 0.
pub fn tangent_frame(tau: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let (tx, ty, tz) = (tau.x, tau.y, tau.z);
    let horiz = (tx * tx + ty * ty).sqrt();
    let theta = if tx.abs() < 1e-14 && ty.abs() < 1e-14 {
        0.0
    } else {
        ty.atan2(tx)
    };
    let phi = tz.atan2(horiz);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let n1 = Vector3::new(-st, ct, 0.0);
    let n2 = Vector3::new(-ct * sp, -st * sp, cp);
    (n1, n2)
}

/// Nodal state of one fiber: positions and unit tangents on the type-1 grid.
#[derive(Clone, Debug)]
pub struct FiberState {
    pub x: Vec<Vector3<f64>>,
    pub tau: Vec<Vector3<f64>>,
}

impl FiberState {
    /// Build from tangents: positions are the spectral antiderivative of
    /// the tangent interpolant, shifted so the first node sits at `x0`.
    pub fn from_tangents(ws: &ChebWorkspace, tau: Vec<Vector3<f64>>, x0: Vector3<f64>) -> Self {
        assert_eq!(tau.len(), ws.n);
        let x = integrate_tangents(ws, &tau, x0);
        FiberState { x, tau }
    }

    /// Build from positions; tangents are the spectral derivative
    /// (unit-norm only if the caller supplied an arclength parameterization).
    pub fn from_positions(ws: &ChebWorkspace, x: Vec<Vector3<f64>>) -> Self {
        assert_eq!(x.len(), ws.n);
        let tau = apply_scalar_op(&ws.diff, &x);
        FiberState { x, tau }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Maximum deviation of nodal tangent norms from 1.
    pub fn max_tangent_norm_deviation(&self) -> f64 {
        self.tau
            .iter()
            .map(|t| (t.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Positions from tangents: antiderivative anchored so node 0 equals `x0`.
pub fn integrate_tangents(
    ws: &ChebWorkspace,
    tau: &[Vector3<f64>],
    x0: Vector3<f64>,
) -> Vec<Vector3<f64>> {
    let mut x = apply_scalar_op(&ws.diff_dagger, tau);
    let shift = x0 - x[0];
    for p in &mut x {
        *p += shift;
    }
    x
}

/// Apply an N×N scalar nodal operator to each Cartesian component.
pub fn apply_scalar_op(op: &DMatrix<f64>, v: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n_in = op.ncols();
    let n_out = op.nrows();
    assert_eq!(v.len(), n_in);
    let mut out = vec![Vector3::zeros(); n_out];
    for i in 0..n_out {
        let mut acc = Vector3::zeros();
        for j in 0..n_in {
            acc += op[(i, j)] * v[j];
        }
        out[i] = acc;
    }
    out
}

/// Stack nodal 3-vectors into a node-major flat vector (x1,y1,z1,x2,...).
pub fn flatten(v: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * v.len(), v.iter().flat_map(|p| [p.x, p.y, p.z]))
}

pub fn unflatten(v: &DVector<f64>) -> Vec<Vector3<f64>> {
    assert_eq!(v.len() % 3, 0);
    (0..v.len() / 3)
        .map(|p| Vector3::new(v[3 * p], v[3 * p + 1], v[3 * p + 2]))
        .collect()
}

/// Scalar bending operator `F = −κ A D⁴ E` on nodal values.
///
/// `E` extends N-grid values to the N+4 second-kind grid imposing vanishing
/// second and third derivatives at both ends, so the composite operator
/// encodes the free-fiber boundary conditions; it equals `−κ d⁴/ds⁴` on
/// polynomials compatible with those conditions.
pub fn bending_matrix(ws: &ChebWorkspace, kappa: f64) -> DMatrix<f64> {
    -kappa * (&ws.a_interp * &ws.diff4_ext * &ws.ext_e)
}

/// Chebyshev interpolant of a nodal 3-vector field.
#[derive(Clone, Debug)]
pub struct Vec3Series {
    pub comp: [ChebSeries; 3],
    pub length: f64,
}

impl Vec3Series {
    pub fn from_values(ws: &ChebWorkspace, v: &[Vector3<f64>]) -> Self {
        assert_eq!(v.len(), ws.n);
        let comp = [0, 1, 2].map(|d| {
            let vals = DVector::from_iterator(ws.n, v.iter().map(|p| p[d]));
            ws.to_coeffs(&vals)
        });
        Vec3Series { comp, length: ws.length }
    }

    pub fn from_coeffs(coeffs: [Vec<f64>; 3], length: f64) -> Self {
        Vec3Series {
            comp: coeffs.map(ChebSeries::new),
            length,
        }
    }

    /// Evaluate at canonical coordinate `eta` in [-1, 1].
    pub fn eval(&self, eta: f64) -> Vector3<f64> {
        Vector3::new(
            self.comp[0].eval(eta),
            self.comp[1].eval(eta),
            self.comp[2].eval(eta),
        )
    }

    /// Evaluate at arclength `s` in [0, L].
    pub fn eval_s(&self, s: f64) -> Vector3<f64> {
        self.eval(2.0 * s / self.length - 1.0)
    }

    pub fn deriv(&self) -> Vec3Series {
        Vec3Series {
            comp: [
                self.comp[0].deriv(self.length),
                self.comp[1].deriv(self.length),
                self.comp[2].deriv(self.length),
            ],
            length: self.length,
        }
    }

    /// Antiderivative vanishing at s = 0.
    pub fn antideriv(&self) -> Vec3Series {
        Vec3Series {
            comp: [0, 1, 2].map(|d| {
                ChebSeries::new(antideriv_coeffs(&self.comp[d].coeffs, self.length))
            }),
            length: self.length,
        }
    }
}
