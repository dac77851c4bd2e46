//! Symmetric 3×3 eigendecomposition.
//!
//! The primary path is the closed-form trigonometric solution. Only the
//! eigenvalue farthest from the other two is taken from the trigonometric
//! formula; the remaining pair is recovered from the 2×2 restriction of the
//! matrix to the orthogonal complement of its eigenvector, which keeps
//! nearly repeated pairs accurate. Matrices whose eigenvalues are all equal
//! to working precision go through cyclic Jacobi iteration instead.

use crate::tensor::{DiffusionTensor, Mat3};

/// Relative eigenvalue spread below which the analytic path hands over to
/// Jacobi iteration.
pub const DEGENERATE_SPREAD: f64 = 1e-14;

/// Eigenvalues sorted descending with matching orthonormal eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem {
    pub values: [f64; 3],
    /// `vectors[i]` pairs with `values[i]`.
    pub vectors: [[f64; 3]; 3],
}

impl EigenSystem {
    pub fn reconstruct(&self) -> DiffusionTensor {
        DiffusionTensor::from_eigen(self.values, self.vectors)
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / dot(a, a).sqrt())
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Unit vector orthogonal to `w`, then a second completing the basis.
fn complement_basis(w: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let u = if w[0].abs() > w[1].abs() { normalize([-w[2], 0.0, w[0]]) } else { normalize([0.0, w[2], -w[1]]) };
    (u, cross(w, u))
}

fn sorted(mut pairs: [(f64, [f64; 3]); 3]) -> EigenSystem {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    EigenSystem { values: [pairs[0].0, pairs[1].0, pairs[2].0], vectors: [pairs[0].1, pairs[1].1, pairs[2].1] }
}

/// Closed-form eigendecomposition of a symmetric tensor.
pub fn eigensystem(t: &DiffusionTensor) -> EigenSystem {
    let m = t.max_abs();
    if m == 0.0 {
        return EigenSystem { values: [0.0; 3], vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
    }
    let a = DiffusionTensor(t.0.map(|v| v / m)).matrix();
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let mut b = a;
    for (i, row) in b.iter_mut().enumerate() {
        row[i] -= q;
    }
    let off = b[0][1] * b[0][1] + b[0][2] * b[0][2] + b[1][2] * b[1][2];
    let p = ((b[0][0] * b[0][0] + b[1][1] * b[1][1] + b[2][2] * b[2][2] + 2.0 * off) / 6.0).sqrt();
    if p < DEGENERATE_SPREAD {
        return jacobi_eigensystem(t);
    }
    for row in b.iter_mut() {
        for v in row.iter_mut() {
            *v /= p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    // r >= 0: the largest root is isolated; otherwise the smallest is.
    let isolated = if r >= 0.0 { 2.0 * phi.cos() } else { 2.0 * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos() };

    let mut shifted = b;
    for (i, row) in shifted.iter_mut().enumerate() {
        row[i] -= isolated;
    }
    let candidates = [cross(shifted[0], shifted[1]), cross(shifted[0], shifted[2]), cross(shifted[1], shifted[2])];
    let best = candidates.iter().copied().max_by(|x, y| dot(*x, *x).total_cmp(&dot(*y, *y))).unwrap();
    if dot(best, best) == 0.0 || !dot(best, best).is_finite() {
        return jacobi_eigensystem(t);
    }
    let w = normalize(best);
    let (u, v) = complement_basis(w);

    let bu = mat_vec(&b, u);
    let bv = mat_vec(&b, v);
    let (uu, uv, vv) = (dot(u, bu), dot(u, bv), dot(v, bv));
    let half_diff = 0.5 * (uu - vv);
    let radius = half_diff.hypot(uv);
    let centre = 0.5 * (uu + vv);
    let theta = 0.5 * (2.0 * uv).atan2(uu - vv);
    let (s, c) = theta.sin_cos();
    let e_hi = normalize([c * u[0] + s * v[0], c * u[1] + s * v[1], c * u[2] + s * v[2]]);
    let e_lo = cross(w, e_hi);

    let back = |beta: f64| m * (q + p * beta);
    sorted([(back(isolated), w), (back(centre + radius), e_hi), (back(centre - radius), e_lo)])
}

/// Cyclic Jacobi iteration. Unconditionally convergent, so it is the fallback
/// for degenerate spectra and an independent cross-check of [`eigensystem`].
pub fn jacobi_eigensystem(t: &DiffusionTensor) -> EigenSystem {
    let mut a = t.matrix();
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let diag = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off == 0.0 || off <= f64::EPSILON * 1e-3 * diag {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let tt = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let tt = if theta == 0.0 { 1.0 } else { tt };
            let c = 1.0 / (tt * tt + 1.0).sqrt();
            let s = tt * c;
            // A <- Jᵀ A J with J the (p, q) plane rotation.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let col = |j: usize| [v[0][j], v[1][j], v[2][j]];
    sorted([(a[0][0], col(0)), (a[1][1], col(1)), (a[2][2], col(2))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn residual(t: &DiffusionTensor, e: &EigenSystem) -> f64 {
        let m = t.matrix();
        let scale = e.values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            let dv = mat_vec(&m, e.vectors[i]);
            for k in 0..3 {
                worst = worst.max((dv[k] - e.values[i] * e.vectors[i][k]).abs() / scale);
            }
        }
        worst
    }

    fn orthogonality(e: &EigenSystem) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(e.vectors[i], e.vectors[j]) - target).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_case() {
        let t = DiffusionTensor::diag(1e-3, 3e-3, 2e-3);
        let e = eigensystem(&t);
        assert_eq!(e.values, [3e-3, 2e-3, 1e-3]);
        assert!((e.vectors[0][1].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[1][2].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[2][0].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_tensor() {
        assert_eq!(eigensystem(&DiffusionTensor::ZERO).values, [0.0; 3]);
        assert_eq!(jacobi_eigensystem(&DiffusionTensor::ZERO).values, [0.0; 3]);
    }

    #[test]
    fn isotropic_uses_fallback_and_is_exact() {
        let e = eigensystem(&DiffusionTensor::diag(1e-3, 1e-3, 1e-3));
        assert_eq!(e.values, [1e-3; 3]);
        assert!(orthogonality(&e) < 1e-15);
    }

    #[test]
    fn repeated_pair_is_accurate() {
        // Rotated prolate tensor with a doubly repeated minor eigenvalue.
        let r = [[0.36, 0.48, -0.8], [-0.8, 0.6, 0.0], [0.48, 0.64, 0.6]];
        for vals in [[2e-3, 1e-3, 1e-3], [2e-3, 2e-3, 1e-3], [1e-3, 1e-3 + 1e-16, 1e-3 - 1e-16]] {
            let t = DiffusionTensor::diag(vals[0], vals[1], vals[2]).rotated(&r);
            let e = eigensystem(&t);
            let mut want = vals;
            want.sort_by(|a, b| b.total_cmp(a));
            for k in 0..3 {
                assert!((e.values[k] - want[k]).abs() < 1e-17, "{:?} vs {:?}", e.values, want);
            }
            assert!(residual(&t, &e) < 1e-12);
            assert!(orthogonality(&e) < 1e-12);
        }
    }

    #[test]
    fn indefinite_and_negative_matrices() {
        for t in [
            DiffusionTensor([1.0, 2.0, 3.0, -4.0, 5.0, 6.0]),
            DiffusionTensor([-1.0, 0.0, 0.0, -2.0, 0.5, -3.0]),
            DiffusionTensor([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        ] {
            let a = eigensystem(&t);
            let j = jacobi_eigensystem(&t);
            for k in 0..3 {
                assert!((a.values[k] - j.values[k]).abs() < 1e-13 * t.max_abs());
            }
            assert!(residual(&t, &a) < 1e-13);
            assert!(residual(&t, &j) < 1e-13);
            assert!(orthogonality(&a) < 1e-13);
        }
    }

    #[test]
    fn jacobi_reconstructs() {
        let t = DiffusionTensor([1.5e-3, 2e-4, -1e-4, 9e-4, 3e-4, 6e-4]);
        let e = jacobi_eigensystem(&t);
        let v = e.vectors;
        let vt = [[v[0][0], v[1][0], v[2][0]], [v[0][1], v[1][1], v[2][1]], [v[0][2], v[1][2], v[2][2]]];
        let lam = [[e.values[0], 0.0, 0.0], [0.0, e.values[1], 0.0], [0.0, 0.0, e.values[2]]];
        let back = DiffusionTensor::from_matrix(&matmul(&matmul(&vt, &lam), &v));
        for k in 0..6 {
            assert!((back.0[k] - t.0[k]).abs() < 16.0 * f64::EPSILON * t.max_abs(), "{:?}", back.0);
        }
    }
}
