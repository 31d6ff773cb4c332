//! Chebyshev collocation toolbox: grids and quadrature weights, transforms,
//! differentiation and integration, inter-grid resampling, a boundary-value
//! extension operator for the bending force, and monomial (Vandermonde)
//! factorizations used by finite-part and near-singular quadratures.
//!
//! All grids live on `[0, length]`; the canonical coordinate is
//! `eta = 2 s / length - 1`. Matrices are built explicitly — target sizes
//! are a few tens of nodes, where dense transforms are both fast and exact
//! to rounding.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Node family for a Chebyshev grid.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GridKind {
    /// First-kind (interior) nodes; excludes the endpoints.
    First,
    /// Second-kind (Lobatto) nodes; includes both endpoints.
    Second,
}

/// A Chebyshev point set on `[0, length]` with quadrature weights.
///
/// Nodes are stored in ascending order; `weights` integrate the nodal
/// interpolant exactly (cosine-moment construction), so they are exact for
/// polynomials of degree `n-1` (first kind) or `n-1`/`n` (second kind),
/// and sum to `length`.
#[derive(Clone, Debug)]
pub struct ChebGrid {
    pub kind: GridKind,
    pub length: f64,
    /// Node angles in (0, pi], descending so that nodes ascend.
    angles: Vec<f64>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ChebGrid {
    pub fn new(kind: GridKind, n: usize, length: f64) -> Self {
        assert!(length > 0.0, "grid length must be positive");
        let angles: Vec<f64> = match kind {
            GridKind::First => {
                assert!(n >= 1, "first-kind grid needs at least one node");
                (0..n)
                    .map(|p| (2 * (n - p) - 1) as f64 * std::f64::consts::PI / (2 * n) as f64)
                    .collect()
            }
            GridKind::Second => {
                assert!(n >= 2, "second-kind grid needs at least two nodes");
                let m = n - 1;
                (0..n)
                    .map(|p| (m - p) as f64 * std::f64::consts::PI / m as f64)
                    .collect()
            }
        };
        let nodes: Vec<f64> = angles
            .iter()
            .map(|&t| 0.5 * length * (1.0 + t.cos()))
            .collect();
        let weights = Self::quadrature_weights(kind, &angles, length);
        ChebGrid { kind, length, angles, nodes, weights }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Canonical coordinate of node `p` in `[-1, 1]`.
    pub fn eta(&self, p: usize) -> f64 {
        self.angles[p].cos()
    }

    pub fn etas(&self) -> Vec<f64> {
        self.angles.iter().map(|t| t.cos()).collect()
    }

    fn quadrature_weights(kind: GridKind, angles: &[f64], length: f64) -> Vec<f64> {
        let n = angles.len();
        let scale = 0.5 * length;
        match kind {
            GridKind::First => angles
                .iter()
                .map(|&t| {
                    let mut s = 0.0;
                    for m in 1..=(n / 2) {
                        s += (2.0 * m as f64 * t).cos() / ((4 * m * m - 1) as f64);
                    }
                    scale * (2.0 / n as f64) * (1.0 - 2.0 * s)
                })
                .collect(),
            GridKind::Second => {
                let m = n - 1;
                angles
                    .iter()
                    .enumerate()
                    .map(|(p, &t)| {
                        let mut s = 0.0;
                        for j in 1..=(m / 2) {
                            let b = if 2 * j == m { 1.0 } else { 2.0 };
                            s += b * (2.0 * j as f64 * t).cos() / ((4 * j * j - 1) as f64);
                        }
                        let c = if p == 0 || p == m { 1.0 } else { 2.0 };
                        scale * (c / m as f64) * (1.0 - s)
                    })
                    .collect()
            }
        }
    }

    /// Matrix mapping nodal values to Chebyshev coefficients.
    pub fn analysis(&self) -> DMatrix<f64> {
        let n = self.n();
        match self.kind {
            GridKind::First => DMatrix::from_fn(n, n, |k, p| {
                let norm = if k == 0 { 1.0 } else { 2.0 };
                norm / n as f64 * (k as f64 * self.angles[p]).cos()
            }),
            GridKind::Second => {
                let m = n - 1;
                DMatrix::from_fn(n, n, |k, p| {
                    let ck = if k == 0 || k == m { 2.0 } else { 1.0 };
                    let cp = if p == 0 || p == m { 2.0 } else { 1.0 };
                    2.0 / (m as f64 * ck * cp) * (k as f64 * self.angles[p]).cos()
                })
            }
        }
    }

    /// Matrix mapping `ncoef` Chebyshev coefficients to nodal values.
    pub fn synthesis(&self, ncoef: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), ncoef, |p, k| (k as f64 * self.angles[p]).cos())
    }
}

/// `T_k(eta)` evaluation matrix at arbitrary canonical points.
pub fn eval_matrix(etas: &[f64], ncoef: usize) -> DMatrix<f64> {
    let n = etas.len();
    let mut m = DMatrix::zeros(n, ncoef);
    for (p, &x) in etas.iter().enumerate() {
        let mut t_prev = 1.0;
        let mut t_cur = x;
        for k in 0..ncoef {
            let tk = match k {
                0 => 1.0,
                1 => t_cur,
                _ => {
                    let t_next = 2.0 * x * t_cur - t_prev;
                    t_prev = t_cur;
                    t_cur = t_next;
                    t_next
                }
            };
            m[(p, k)] = tk;
        }
    }
    m
}

/// Coefficients of the derivative of a Chebyshev series on `[0, length]`.
pub fn deriv_coeffs(a: &[f64], length: f64) -> Vec<f64> {
    let n = a.len();
    let mut b = vec![0.0; n];
    if n >= 2 {
        b[n - 2] = 2.0 * (n - 1) as f64 * a[n - 1];
        for k in (0..n.saturating_sub(2)).rev() {
            b[k] = b.get(k + 2).copied().unwrap_or(0.0) + 2.0 * (k + 1) as f64 * a[k + 1];
        }
        b[0] *= 0.5;
    }
    let scale = 2.0 / length;
    for v in &mut b {
        *v *= scale;
    }
    b
}

/// Coefficients (length `n + 1`) of the antiderivative vanishing at `s = 0`.
pub fn antideriv_coeffs(a: &[f64], length: f64) -> Vec<f64> {
    let n = a.len();
    let mut b = vec![0.0; n + 1];
    let get = |k: usize| -> f64 {
        if k < n {
            a[k]
        } else {
            0.0
        }
    };
    if n >= 1 {
        b[1] = get(0) - 0.5 * get(2);
        for k in 2..=n {
            b[k] = (get(k - 1) - get(k + 1)) / (2.0 * k as f64);
        }
    }
    let scale = 0.5 * length;
    for v in b.iter_mut().skip(1) {
        *v *= scale;
    }
    let mut at_left = 0.0;
    for (k, &bk) in b.iter().enumerate().skip(1) {
        at_left += bk * if k % 2 == 0 { 1.0 } else { -1.0 };
    }
    b[0] = -at_left;
    b
}

/// A scalar Chebyshev series on the canonical interval `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ChebSeries {
    pub coeffs: Vec<f64>,
}

impl ChebSeries {
    pub fn new(coeffs: Vec<f64>) -> Self {
        ChebSeries { coeffs }
    }

    /// Clenshaw evaluation at a canonical point.
    pub fn eval(&self, eta: f64) -> f64 {
        let a = &self.coeffs;
        if a.is_empty() {
            return 0.0;
        }
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for &ak in a.iter().skip(1).rev() {
            let b0 = 2.0 * eta * b1 - b2 + ak;
            b2 = b1;
            b1 = b0;
        }
        eta * b1 - b2 + a[0]
    }

    /// Clenshaw evaluation at a complex canonical point (analytic extension).
    pub fn eval_complex(&self, z: Complex64) -> Complex64 {
        let a = &self.coeffs;
        if a.is_empty() {
            return Complex64::ZERO;
        }
        let mut b1 = Complex64::ZERO;
        let mut b2 = Complex64::ZERO;
        for &ak in a.iter().skip(1).rev() {
            let b0 = 2.0 * z * b1 - b2 + ak;
            b2 = b1;
            b1 = b0;
        }
        z * b1 - b2 + a[0]
    }

    pub fn deriv(&self, length: f64) -> ChebSeries {
        ChebSeries::new(deriv_coeffs(&self.coeffs, length))
    }
}

/// Finite-part moment vector: `q_k(eta) = int_{-1}^{1} t^k sgn(t - eta) dt`.
pub fn fp_moments(eta: f64, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |k, _| {
        let k1 = (k + 1) as f64;
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        (1.0 + sign - 2.0 * eta.powi(k as i32 + 1)) / k1
    })
}

/// The same moments against first-kind Chebyshev polynomials:
/// `m_k(eta) = int_{-1}^{1} T_k(t) sgn(t - eta) dt`.
///
/// Uses the closed-form antiderivative `int T_k = (T_{k+1}/(k+1) -
/// T_{k-1}/(k-1))/2`, so every entry is a bounded combination of Chebyshev
/// values. Unlike the monomial route, weights built from these moments stay
/// accurate at any order; a monomial Vandermonde solve loses roughly a digit
/// per two extra nodes and is unusable by `n = 32`.
pub fn fp_moments_chebyshev(eta: f64, n: usize) -> DVector<f64> {
    // T_0..T_n at eta by the three-term recurrence.
    let mut t = vec![0.0; n + 1];
    t[0] = 1.0;
    if n >= 1 {
        t[1] = eta;
    }
    for k in 2..=n {
        t[k] = 2.0 * eta * t[k - 1] - t[k - 2];
    }
    // m_k = P_k(1) + P_k(-1) - 2 P_k(eta) with P_k the antiderivative of T_k.
    DVector::from_fn(n, |k, _| match k {
        0 => -2.0 * eta,
        1 => 1.0 - eta * eta,
        _ => {
            let kf = k as f64;
            let ends = if k % 2 == 0 { 0.0 } else { -2.0 / (kf * kf - 1.0) };
            ends - (t[k + 1] / (kf + 1.0) - t[k - 1] / (kf - 1.0))
        }
    })
}

/// Monomial Vandermonde `V[p][q] = eta_p^q`.
pub fn vandermonde(etas: &[f64]) -> DMatrix<f64> {
    let n = etas.len();
    DMatrix::from_fn(n, n, |p, q| etas[p].powi(q as i32))
}

/// Immutable collocation workspace for one `(n, length)` discretization.
///
/// Bundles the `n`-point first-kind grid, its doubled companion used for
/// products of interpolants, the boundary-condition extension for fourth
/// derivatives, and the factorizations shared by every fiber of that size.
pub struct ChebWorkspace {
    pub n: usize,
    pub length: f64,
    pub grid: ChebGrid,
    /// Doubled (2n) first-kind grid for aliasing-free products.
    pub grid2: ChebGrid,
    /// Second-kind grid with n + 4 nodes carrying the bending extension.
    pub ext_grid: ChebGrid,
    pub analysis: DMatrix<f64>,
    pub synthesis: DMatrix<f64>,
    /// Nodal differentiation (d/ds) on the n grid.
    pub diff: DMatrix<f64>,
    /// Nodal antiderivative on the n grid, vanishing at s = 0.
    pub diff_dagger: DMatrix<f64>,
    /// Same antiderivative on the doubled grid.
    pub diff_dagger2: DMatrix<f64>,
    /// Values on the n grid -> values on the 2n grid.
    pub upsample: DMatrix<f64>,
    /// Weighted least-squares left inverse of `upsample`.
    pub downsample: DMatrix<f64>,
    /// Interpolation from the extension grid to the n grid.
    pub a_interp: DMatrix<f64>,
    /// Second/third-derivative endpoint rows on the extension grid.
    pub b_rows: DMatrix<f64>,
    /// Extension operator: values on the n grid -> extension-grid values
    /// with vanishing second and third derivatives at both ends.
    pub ext_e: DMatrix<f64>,
    /// Fourth derivative on the extension grid.
    pub diff4_ext: DMatrix<f64>,
    vt_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    v_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// Finite-part weight vectors, one per node.
    pub fp_weights: Vec<DVector<f64>>,
}

impl ChebWorkspace {
    pub fn new(n: usize, length: f64) -> Self {
        assert!(n >= 4, "collocation needs at least 4 nodes");
        let grid = ChebGrid::new(GridKind::First, n, length);
        let grid2 = ChebGrid::new(GridKind::First, 2 * n, length);
        let ext_grid = ChebGrid::new(GridKind::Second, n + 4, length);

        let analysis = grid.analysis();
        let synthesis = grid.synthesis(n);
        let diff = Self::deriv_matrix(&grid, 1);
        let diff_dagger = Self::antideriv_matrix(&grid);
        let diff_dagger2 = Self::antideriv_matrix(&grid2);

        let upsample = grid2.synthesis(n) * &analysis;
        let w2 = DMatrix::from_diagonal(&DVector::from_vec(grid2.weights.clone()));
        let utw = upsample.transpose() * &w2;
        let gram = &utw * &upsample;
        let downsample = gram
            .cholesky()
            .expect("upsampling Gram matrix is positive definite")
            .solve(&utw);

        let ext_analysis = ext_grid.analysis();
        let n_ext = ext_grid.n();
        let a_interp = eval_matrix(&grid.etas(), n_ext) * &ext_analysis;
        let d2_ext = Self::deriv_matrix(&ext_grid, 2);
        let d3_ext = Self::deriv_matrix(&ext_grid, 3);
        let diff4_ext = Self::deriv_matrix(&ext_grid, 4);
        let mut b_rows = DMatrix::zeros(4, n_ext);
        b_rows.row_mut(0).copy_from(&d2_ext.row(0));
        b_rows.row_mut(1).copy_from(&d2_ext.row(n_ext - 1));
        b_rows.row_mut(2).copy_from(&d3_ext.row(0));
        b_rows.row_mut(3).copy_from(&d3_ext.row(n_ext - 1));
        let mut stacked = DMatrix::zeros(n_ext, n_ext);
        stacked.rows_mut(0, n).copy_from(&a_interp);
        stacked.rows_mut(n, 4).copy_from(&b_rows);
        let mut rhs = DMatrix::zeros(n_ext, n);
        rhs.view_mut((0, 0), (n, n)).fill_with_identity();
        let ext_e = stacked
            .lu()
            .solve(&rhs)
            .expect("extension system is nonsingular");

        let etas = grid.etas();
        let v = vandermonde(&etas);
        let vt_lu = v.transpose().lu();
        let v_lu = v.lu();
        let fp_weights = etas
            .iter()
            .map(|&eta| {
                vt_lu
                    .solve(&fp_moments(eta, n))
                    .expect("Vandermonde transpose solve")
            })
            .collect();

        ChebWorkspace {
            n,
            length,
            grid,
            grid2,
            ext_grid,
            analysis,
            synthesis,
            diff,
            diff_dagger,
            diff_dagger2,
            upsample,
            downsample,
            a_interp,
            b_rows,
            ext_e,
            diff4_ext,
            vt_lu,
            v_lu,
            fp_weights,
        }
    }

    /// d^order/ds^order as a nodal matrix, built through coefficient space.
    fn deriv_matrix(grid: &ChebGrid, order: usize) -> DMatrix<f64> {
        let n = grid.n();
        let analysis = grid.analysis();
        let mut coef_map = analysis;
        for _ in 0..order {
            let prev = coef_map.clone();
            for j in 0..n {
                let col: Vec<f64> = (0..n).map(|i| prev[(i, j)]).collect();
                let der = deriv_coeffs(&col, grid.length);
                for i in 0..n {
                    coef_map[(i, j)] = der[i];
                }
            }
        }
        grid.synthesis(n) * coef_map
    }

    /// Nodal antiderivative (vanishing at `s = 0`) through coefficient space.
    fn antideriv_matrix(grid: &ChebGrid) -> DMatrix<f64> {
        let n = grid.n();
        let analysis = grid.analysis();
        let mut int_map = DMatrix::zeros(n + 1, n);
        for j in 0..n {
            let col: Vec<f64> = (0..n).map(|i| analysis[(i, j)]).collect();
            let anti = antideriv_coeffs(&col, grid.length);
            for i in 0..=n {
                int_map[(i, j)] = anti[i];
            }
        }
        grid.synthesis(n + 1) * int_map
    }

    /// Chebyshev coefficients of nodal values.
    pub fn to_coeffs(&self, values: &DVector<f64>) -> ChebSeries {
        ChebSeries::new((&self.analysis * values).iter().copied().collect())
    }

    /// Monomial coefficients `c` with `sum_q c_q eta^q` interpolating
    /// `values` on the grid.
    pub fn monomial_coeffs(&self, values: &DVector<f64>) -> DVector<f64> {
        self.v_lu.solve(values).expect("Vandermonde solve")
    }

    /// Solve `V^T b = q` for arbitrary right-hand sides.
    pub fn solve_vandermonde_transpose(&self, q: &DVector<f64>) -> DVector<f64> {
        self.vt_lu.solve(q).expect("Vandermonde transpose solve")
    }

    /// Canonical node coordinate.
    pub fn eta(&self, p: usize) -> f64 {
        self.grid.eta(p)
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_node_grid_is_midpoint_rule() {
        let g = ChebGrid::new(GridKind::First, 1, 2.0);
        assert_relative_eq!(g.nodes[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(g.weights[0], 2.0, max_relative = 1e-15);
    }

    #[test]
    fn weights_integrate_monomials() {
        for (kind, n, deg) in [
            (GridKind::First, 16, 15),
            (GridKind::First, 7, 6),
            (GridKind::Second, 12, 11),
            (GridKind::Second, 5, 4),
        ] {
            let length = 2.0;
            let g = ChebGrid::new(kind, n, length);
            assert!((g.weights.iter().sum::<f64>() - length).abs() < 1e-14 * n as f64);
            for d in 0..=deg {
                let exact = length.powi(d as i32 + 1) / (d as f64 + 1.0);
                let num: f64 = g
                    .nodes
                    .iter()
                    .zip(&g.weights)
                    .map(|(&s, &w)| s.powi(d as i32) * w)
                    .sum();
                assert_relative_eq!(num, exact, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_integral_matches() {
        let g = ChebGrid::new(GridKind::First, 16, 2.0);
        let val: f64 = g
            .nodes
            .iter()
            .zip(&g.weights)
            .map(|(&s, &w)| s * s * w)
            .sum();
        assert!((val - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_cubic() {
        let ws = ChebWorkspace::new(8, 2.0);
        let v = DVector::from_iterator(8, ws.grid.nodes.iter().map(|&s| s * s * s));
        let d = &ws.diff * &v;
        for (p, &s) in ws.grid.nodes.iter().enumerate() {
            assert_relative_eq!(d[p], 3.0 * s * s, max_relative = 1e-11, epsilon = 1e-11);
        }
    }

    #[test]
    fn antiderivative_of_quadratic() {
        let ws = ChebWorkspace::new(16, 2.0);
        let v = DVector::from_iterator(16, ws.grid.nodes.iter().map(|&s| s * s));
        let integral = &ws.diff_dagger * &v;
        for (p, &s) in ws.grid.nodes.iter().enumerate() {
            assert_relative_eq!(integral[p], s * s * s / 3.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn upsample_downsample_roundtrip() {
        let ws = ChebWorkspace::new(16, 2.0);
        let ru = &ws.downsample * &ws.upsample;
        let err = (&ru - DMatrix::<f64>::identity(16, 16)).norm();
        assert!(err < 1e-12, "R*U deviates from identity by {err}");
    }

    #[test]
    fn upsample_projection_properties() {
        let ws = ChebWorkspace::new(10, 3.0);
        let ur = &ws.upsample * &ws.downsample;
        let proj_err = (&ur * &ur - &ur).norm();
        assert!(proj_err < 1e-11, "UR not idempotent: {proj_err}");
        let w2 = DMatrix::from_diagonal(&DVector::from_vec(ws.grid2.weights.clone()));
        let sym_err = (ur.transpose() * &w2 - &w2 * &ur).norm();
        assert!(sym_err < 1e-11, "UR not W-self-adjoint: {sym_err}");
    }

    #[test]
    fn extension_interpolates_and_satisfies_bcs() {
        let ws = ChebWorkspace::new(16, 2.0);
        let x = DVector::from_iterator(16, ws.grid.nodes.iter().map(|&s| s * s));
        let ext = &ws.ext_e * &x;
        let back = &ws.a_interp * &ext;
        assert!((back - &x).norm() < 1e-10);
        let bc = &ws.b_rows * &ext;
        assert!(bc.norm() < 1e-8 * ext.norm().max(1.0), "bc residual {}", bc.norm());
    }

    #[test]
    fn fp_moment_values() {
        let q = fp_moments(0.5, 2);
        assert_relative_eq!(q[0], -1.0, epsilon = 1e-15);
        let q = fp_moments(0.0, 2);
        assert_relative_eq!(q[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn fp_weight_residuals_small() {
        for n in [16usize, 24, 32, 40] {
            let ws = ChebWorkspace::new(n, 2.0);
            let v = vandermonde(&ws.grid.etas());
            let vt = v.transpose();
            for p in 0..n {
                let q = fp_moments(ws.eta(p), n);
                let r = (&vt * &ws.fp_weights[p] - &q).norm();
                assert!(r < 1e-10 * q.norm().max(1.0), "n={n} p={p} residual {r}");
            }
        }
    }

    #[test]
    fn gauss_legendre_exactness() {
        let (x, w) = gauss_legendre(12);
        for d in 0..=23 {
            let exact = if d % 2 == 0 { 2.0 / (d as f64 + 1.0) } else { 0.0 };
            let num: f64 = x
                .iter()
                .zip(&w)
                .map(|(&t, &wt)| t.powi(d) * wt)
                .sum();
            assert!((num - exact).abs() < 1e-13, "degree {d}: {num} vs {exact}");
        }
    }

    #[test]
    fn complex_evaluation_extends_real() {
        let ws = ChebWorkspace::new(12, 2.0);
        let v = DVector::from_iterator(12, ws.grid.nodes.iter().map(|&s| (1.5 * s).sin()));
        let series = ws.to_coeffs(&v);
        let z = Complex64::new(0.3, 0.0);
        let through_complex = series.eval_complex(z);
        assert_relative_eq!(through_complex.re, series.eval(0.3), epsilon = 1e-13);
        assert!(through_complex.im.abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn diff_annihilates_constants(c in -10.0f64..10.0, n in 5usize..32) {
            let ws = ChebWorkspace::new(n, 2.0);
            let v = DVector::from_element(n, c);
            let d = &ws.diff * &v;
            prop_assert!(d.amax() < 1e-10 * c.abs().max(1.0));
        }

        #[test]
        fn antiderivative_inverts_derivative_mod_constant(
            coeffs in proptest::collection::vec(-1.0f64..1.0, 3..10),
        ) {
            // D_dagger(D p) = p - p(0) for polynomials representable on the grid.
            let n = 16;
            let ws = ChebWorkspace::new(n, 2.0);
            let mut padded = coeffs.clone();
            padded.resize(n, 0.0);
            let series = ChebSeries::new(padded);
            let v = DVector::from_iterator(
                n,
                ws.grid.etas().iter().map(|&e| series.eval(e)),
            );
            let roundtrip = &ws.diff_dagger * (&ws.diff * &v);
            let p0 = series.eval(-1.0);
            for p in 0..n {
                prop_assert!((roundtrip[p] - (v[p] - p0)).abs() < 1e-9);
            }
        }

        #[test]
        fn quadrature_matches_series_integral(
            coeffs in proptest::collection::vec(-1.0f64..1.0, 1..14),
        ) {
            let n = 16;
            let g = ChebGrid::new(GridKind::First, n, 2.0);
            let mut padded = coeffs.clone();
            padded.resize(n, 0.0);
            let series = ChebSeries::new(padded.clone());
            let num: f64 = g
                .nodes
                .iter()
                .zip(&g.weights)
                .enumerate()
                .map(|(p, (_, &w))| w * series.eval(g.eta(p)))
                .sum();
            let anti = antideriv_coeffs(&padded, 2.0);
            let anti_series = ChebSeries::new(anti);
            let exact = anti_series.eval(1.0) - anti_series.eval(-1.0);
            prop_assert!((num - exact).abs() < 1e-11);
        }
    }
}
