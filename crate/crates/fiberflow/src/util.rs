//! Small numeric utilities shared across modules.

use nalgebra::SVector;

/// Adaptive Simpson quadrature for vector-valued integrands.
///
/// A first refinement pass estimates the integral's magnitude; the final
/// answer then satisfies an absolute error budget `rel_tol * |I| + abs_floor`
/// that is halved at every bisection, so subinterval errors cannot pile up
/// past the requested tolerance. Depth is capped; hitting the cap on a
/// genuinely singular integrand returns the best estimate rather than
/// recursing forever.
pub fn adaptive_simpson<const D: usize>(
    f: &mut impl FnMut(f64) -> SVector<f64, D>,
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> SVector<f64, D> {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson_rule(a, b, &fa, &fm, &fb);
    let pilot = recurse(f, a, b, fa, fm, fb, whole, 1e-4 * whole.norm().max(abs_floor), 12);
    let budget = rel_tol * pilot.norm() + abs_floor;
    recurse(f, a, b, fa, fm, fb, whole, budget.max(1e-300), 48)
}

fn simpson_rule<const D: usize>(
    a: f64,
    b: f64,
    fa: &SVector<f64, D>,
    fm: &SVector<f64, D>,
    fb: &SVector<f64, D>,
) -> SVector<f64, D> {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<const D: usize>(
    f: &mut impl FnMut(f64) -> SVector<f64, D>,
    a: f64,
    b: f64,
    fa: SVector<f64, D>,
    fm: SVector<f64, D>,
    fb: SVector<f64, D>,
    whole: SVector<f64, D>,
    budget: f64,
    depth: u32,
) -> SVector<f64, D> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_rule(a, m, &fa, &flm, &fm);
    let right = simpson_rule(m, b, &fm, &frm, &fb);
    let refined = left + right;
    let err = (refined - whole).norm() / 15.0;
    if depth == 0 || err <= budget {
        return refined + (refined - whole) / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * budget, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * budget, depth - 1)
}

/// Deterministic 64-bit FNV-1a hash of a byte stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector1;

    #[test]
    fn integrates_smooth_function() {
        let mut f = |t: f64| Vector1::new((3.0 * t).cos());
        let got = adaptive_simpson(&mut f, 0.0, 2.0, 1e-10, 0.0);
        assert_relative_eq!(got[0], (6.0f64).sin() / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn integrates_peaked_function() {
        // 1/(t^2 + eps^2) has a sharp interior peak; exact value known.
        let eps = 1e-3;
        let mut f = |t: f64| Vector1::new(1.0 / (t * t + eps * eps));
        let got = adaptive_simpson(&mut f, -1.0, 1.0, 1e-9, 0.0);
        let exact = 2.0 * (1.0 / eps) * (1.0 / eps).atan();
        assert_relative_eq!(got[0], exact, max_relative = 1e-8);
    }
}
