//! Sheared periodic simulation cell: maps between physical and sheared
//! coordinates, lattice image vectors, minimum-image conventions, and a
//! cell-list neighbor search that bounds distances in the sheared frame
//! before exact Euclidean filtering.

use nalgebra::Vector3;

/// Safety factor relating sheared-frame and Euclidean distances: the squared
/// extreme singular value of the shear map, `ψ(g) = 1 + ½(g² + √(g²(g²+4)))`.
/// Euclidean and sheared norms satisfy `‖r′‖ ≤ √ψ ‖r‖` and `‖r‖ ≤ √ψ ‖r′‖`.
pub fn psi(g: f64) -> f64 {
    let g2 = g * g;
    1.0 + 0.5 * (g2 + (g2 * (g2 + 4.0)).sqrt())
}

/// Triply periodic parallelepiped cell with lattice vectors
/// `a1 = (lx,0,0)`, `a2 = (g·ly, ly, 0)`, `a3 = (0,0,lz)`; the strain `g`
/// tilts the second axis. Sheared ("primed") coordinates are obtained by
/// `x′ = (x − g·y, y, z)`, in which the cell is orthorhombic.
#[derive(Debug, Clone, Copy)]
pub struct ShearedDomain {
    pub edges: Vector3<f64>,
    pub g: f64,
}

impl ShearedDomain {
    pub fn new(edges: Vector3<f64>, g: f64) -> Self {
        assert!(edges.iter().all(|&e| e > 0.0), "edges must be positive");
        ShearedDomain { edges, g }
    }

    pub fn cube(ld: f64, g: f64) -> Self {
        Self::new(Vector3::new(ld, ld, ld), g)
    }

    pub fn volume(&self) -> f64 {
        self.edges.x * self.edges.y * self.edges.z
    }

    /// Physical → sheared coordinates.
    pub fn to_sheared(&self, x: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(x.x - self.g * x.y, x.y, x.z)
    }

    /// Sheared → physical coordinates.
    pub fn from_sheared(&self, xp: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(xp.x + self.g * xp.y, xp.y, xp.z)
    }

    /// Same lattice with the strain relabeled into [−1/2, 1/2].
    pub fn reduced(&self) -> Self {
        ShearedDomain {
            edges: self.edges,
            g: self.g - self.g.round(),
        }
    }

    pub fn lattice_vectors(&self) -> [Vector3<f64>; 3] {
        [
            Vector3::new(self.edges.x, 0.0, 0.0),
            Vector3::new(self.g * self.edges.y, self.edges.y, 0.0),
            Vector3::new(0.0, 0.0, self.edges.z),
        ]
    }

    /// Physical shift vector of the image labeled by integer coordinates.
    pub fn shift(&self, n: [i32; 3]) -> Vector3<f64> {
        let a = self.lattice_vectors();
        a[0] * n[0] as f64 + a[1] * n[1] as f64 + a[2] * n[2] as f64
    }

    /// Wrap a sheared-frame difference vector into [−e/2, e/2) per axis.
    pub fn wrap_sheared_diff(&self, d: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            d.x - self.edges.x * (d.x / self.edges.x).round(),
            d.y - self.edges.y * (d.y / self.edges.y).round(),
            d.z - self.edges.z * (d.z / self.edges.z).round(),
        )
    }

    /// Minimum-image representative of a physical difference vector: the
    /// image with the smallest Euclidean norm. The strain is reduced first;
    /// a single ring of sheared-frame shifts around the wrapped difference
    /// then provably contains the minimizer.
    pub fn min_image(&self, dx: &Vector3<f64>) -> Vector3<f64> {
        let dom = self.reduced();
        let wrapped = dom.wrap_sheared_diff(&dom.to_sheared(dx));
        let mut best = dom.from_sheared(&wrapped);
        let mut best_norm = best.norm_squared();
        for nx in -1..=1 {
            for ny in -1..=1 {
                for nz in -1..=1 {
                    if nx == 0 && ny == 0 && nz == 0 {
                        continue;
                    }
                    let cand = dom.from_sheared(&Vector3::new(
                        wrapped.x + nx as f64 * dom.edges.x,
                        wrapped.y + ny as f64 * dom.edges.y,
                        wrapped.z + nz as f64 * dom.edges.z,
                    ));
                    let norm = cand.norm_squared();
                    if norm < best_norm {
                        best = cand;
                        best_norm = norm;
                    }
                }
            }
        }
        best
    }

    pub fn psi(&self) -> f64 {
        psi(self.g)
    }
}

/// Uniform-grid cell lists over sheared fractional coordinates. Queries
/// return candidate point indices whose sheared-frame distance to the target
/// cell can be below the cutoff; callers do the exact Euclidean filtering.
pub struct CellGrid {
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

impl CellGrid {
    /// Build cell lists for a sheared-frame cutoff. Returns `None` when the
    /// box is too small for pruning to be correct (fewer than 3 cells on an
    /// axis), in which case callers should fall back to all pairs.
    pub fn build(
        domain: &ShearedDomain,
        points: &[Vector3<f64>],
        cutoff_sheared: f64,
    ) -> Option<CellGrid> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let c = (domain.edges[a] / cutoff_sheared).floor() as isize;
            if c < 3 {
                return None;
            }
            dims[a] = c as usize;
        }
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (i, x) in points.iter().enumerate() {
            let cell = Self::cell_of(domain, &dims, x);
            buckets[cell].push(i);
        }
        Some(CellGrid { dims, buckets })
    }

    fn cell_of(domain: &ShearedDomain, dims: &[usize; 3], x: &Vector3<f64>) -> usize {
        let xp = domain.to_sheared(x);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let frac = (xp[a] / domain.edges[a]).rem_euclid(1.0);
            idx[a] = ((frac * dims[a] as f64) as usize).min(dims[a] - 1);
        }
        idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])
    }

    /// Candidate neighbors of a target point: all points in the 27 cells
    /// around the target's cell.
    pub fn candidates(
        &self,
        domain: &ShearedDomain,
        x: &Vector3<f64>,
        out: &mut Vec<usize>,
    ) {
        out.clear();
        let cell = Self::cell_of(domain, &self.dims, x);
        let cx = cell % self.dims[0];
        let cy = (cell / self.dims[0]) % self.dims[1];
        let cz = cell / (self.dims[0] * self.dims[1]);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ix = (cx as i64 + dx).rem_euclid(self.dims[0] as i64) as usize;
                    let iy = (cy as i64 + dy).rem_euclid(self.dims[1] as i64) as usize;
                    let iz = (cz as i64 + dz).rem_euclid(self.dims[2] as i64) as usize;
                    out.extend_from_slice(
                        &self.buckets[ix + self.dims[0] * (iy + self.dims[1] * iz)],
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn safety_factor_values() {
        assert_relative_eq!(psi(0.0), 1.0, epsilon = 1e-15);
        let expected = 1.0 + 0.5 * (0.25 + (0.25_f64 * 4.25).sqrt());
        assert_relative_eq!(psi(0.5), expected, epsilon = 1e-15);
        assert!((psi(0.5) - 1.6404).abs() < 1e-4);
    }

    #[test]
    fn sheared_maps_are_inverse() {
        let dom = ShearedDomain::cube(2.4, 0.37);
        let x = Vector3::new(0.3, -1.7, 2.2);
        let back = dom.from_sheared(&dom.to_sheared(&x));
        assert!((back - x).norm() < 1e-14);
    }

    #[test]
    fn sheared_norm_bounded_by_safety_factor() {
        let dom = ShearedDomain::cube(1.0, 0.5);
        let s = dom.psi().sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            let rp = dom.to_sheared(&r);
            assert!(rp.norm() <= s * r.norm() * (1.0 + 1e-12));
            assert!(r.norm() <= s * rp.norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn min_image_finds_true_minimum() {
        let dom = ShearedDomain::cube(2.0, 0.5);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..300 {
            let dx = Vector3::new(
                (rng.random::<f64>() - 0.5) * 10.0,
                (rng.random::<f64>() - 0.5) * 10.0,
                (rng.random::<f64>() - 0.5) * 10.0,
            );
            let mi = dom.min_image(&dx);
            // Brute force over a generous image range.
            let mut best = f64::INFINITY;
            for nx in -4..=4 {
                for ny in -4..=4 {
                    for nz in -4..=4 {
                        let cand = dx + dom.shift([nx, ny, nz]);
                        best = best.min(cand.norm());
                    }
                }
            }
            assert_relative_eq!(mi.norm(), best, epsilon = 1e-12, max_relative = 1e-12);
            // The image differs from the input by a lattice vector.
            let diff = dom.to_sheared(&(mi - dx));
            for a in 0..3 {
                let m = diff[a] / dom.edges[a];
                assert!((m - m.round()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn strain_relabeling_preserves_the_lattice() {
        let dom = ShearedDomain::cube(2.0, 1.3);
        let red = dom.reduced();
        assert_relative_eq!(red.g, 0.3, epsilon = 1e-14);
        // a2 of the reduced cell is a lattice vector of the original.
        let a2r = red.lattice_vectors()[1];
        let combo = dom.shift([-1, 1, 0]);
        assert!((a2r - combo).norm() < 1e-12);
    }

    #[test]
    fn cell_grid_candidates_cover_all_close_pairs() {
        let dom = ShearedDomain::cube(3.0, 0.4);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let points: Vec<Vector3<f64>> = (0..150)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() * 9.0 - 3.0,
                    rng.random::<f64>() * 9.0 - 3.0,
                    rng.random::<f64>() * 9.0 - 3.0,
                )
            })
            .collect();
        let cutoff = 0.6;
        let cutoff_sheared = dom.psi().sqrt() * cutoff;
        let grid = CellGrid::build(&dom, &points, cutoff_sheared).expect("grid fits");
        let mut cand = Vec::new();
        for (i, xi) in points.iter().enumerate() {
            grid.candidates(&dom, xi, &mut cand);
            for (j, xj) in points.iter().enumerate() {
                if dom.min_image(&(xi - xj)).norm() <= cutoff {
                    assert!(
                        cand.contains(&j),
                        "pair ({i},{j}) within cutoff missed by cell list"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn min_image_norm_never_exceeds_input(
            x in -8.0..8.0f64, y in -8.0..8.0f64, z in -8.0..8.0f64,
            g in -0.5..0.5f64,
        ) {
            let dom = ShearedDomain::cube(2.0, g);
            let dx = Vector3::new(x, y, z);
            prop_assert!(dom.min_image(&dx).norm() <= dx.norm() + 1e-12);
        }
    }
}
