//! Eigen-decomposition of symmetric 3x3 tensors.
//!
//! The closed-form path follows the trigonometric solution of the
//! characteristic polynomial; eigenvectors come from cross products of the
//! shifted rows for the best separated eigenvalue and from a reduced 2x2
//! problem in its orthogonal complement for the second one. Near-repeated
//! spectra are handed to cyclic Jacobi rotations instead.

use serde::{Deserialize, Serialize};

use super::DiffusionTensor;

/// Relative eigenvalue gap below which the Jacobi solver is used.
const GAP_FALLBACK: f64 = 1e-12;

/// Sorted eigenvalues (descending) with matching unit eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    pub values: [f64; 3],
    /// `vectors[i]` belongs to `values[i]`.
    pub vectors: [[f64; 3]; 3],
}

impl EigenSystem {
    pub fn zero() -> Self {
        EigenSystem {
            values: [0.0; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn principal(&self) -> [f64; 3] {
        self.vectors[0]
    }

    /// True when the fit produced a non positive-semidefinite tensor.
    pub fn has_negative(&self) -> bool {
        self.values[2] < 0.0
    }

    /// Eigenvalues with negatives clamped to zero, as used for FA and MD.
    pub fn clamped_values(&self) -> [f64; 3] {
        self.values.map(|v| v.max(0.0))
    }

    /// Σ λi vi viᵀ
    pub fn reconstruct(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for k in 0..3 {
            let v = self.vectors[k];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += self.values[k] * v[i] * v[j];
                }
            }
        }
        m
    }
}

/// Eigen-decomposition of the tensor's 3x3 matrix.
pub fn eig3_sym(tensor: &DiffusionTensor) -> EigenSystem {
    eig3_sym_matrix(tensor.matrix())
}

pub fn eig3_sym_matrix(a: [[f64; 3]; 3]) -> EigenSystem {
    let (values, vectors) = match closed_form(&a) {
        Some(r) => r,
        None => jacobi(&a),
    };
    finish(values, vectors)
}

fn finish(values: [f64; 3], vectors: [[f64; 3]; 3]) -> EigenSystem {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut out = EigenSystem {
        values: order.map(|i| values[i]),
        vectors: order.map(|i| vectors[i]),
    };
    for v in out.vectors.iter_mut() {
        let n = norm(v);
        if n > 0.0 {
            *v = v.map(|c| c / n);
        }
        // largest-magnitude component made non-negative
        let mut k = 0;
        for c in 1..3 {
            if v[c].abs() > v[k].abs() {
                k = c;
            }
        }
        if v[k] < 0.0 {
            *v = v.map(|c| -c);
        }
    }
    out
}

/// Returns `None` when the spectrum is too close to degenerate for the
/// closed-form eigenvectors to be trusted.
fn closed_form(a: &[[f64; 3]; 3]) -> Option<([f64; 3], [[f64; 3]; 3])> {
    let max_abs = a.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Some(([0.0; 3], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
    }
    if !max_abs.is_finite() {
        return None;
    }
    let inv = 1.0 / max_abs;
    let m: [[f64; 3]; 3] = a.map(|r| r.map(|v| v * inv));

    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let b00 = m[0][0] - q;
    let b11 = m[1][1] - q;
    let b22 = m[2][2] - q;
    let (b01, b02, b12) = (m[0][1], m[0][2], m[1][2]);
    let p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * (b01 * b01 + b02 * b02 + b12 * b12);
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        // scalar multiple of identity
        return Some(([q * max_abs; 3], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
    }
    let c00 = b11 * b22 - b12 * b12;
    let c01 = b01 * b22 - b12 * b02;
    let c02 = b01 * b12 - b11 * b02;
    let det = (b00 * c00 - b01 * c01 + b02 * c02) / (p * p * p);
    let half_det = (0.5 * det).clamp(-1.0, 1.0);
    let angle = half_det.acos() / 3.0;
    let two_thirds_pi = 2.0 * std::f64::consts::PI / 3.0;
    let beta2 = 2.0 * angle.cos();
    let beta0 = 2.0 * (angle + two_thirds_pi).cos();
    let beta1 = -(beta0 + beta2);
    let eval = [q + p * beta0, q + p * beta1, q + p * beta2];

    let gap = (eval[1] - eval[0]).min(eval[2] - eval[1]);
    let scale = eval.iter().map(|v| v.abs()).sum::<f64>();
    if gap < GAP_FALLBACK * scale {
        return None;
    }

    let (v0, v1, v2) = if half_det >= 0.0 {
        let v2 = eigenvector_from_rows(&m, eval[2]);
        let v1 = eigenvector_in_complement(&m, v2, eval[1]);
        let v0 = cross(v1, v2);
        (v0, v1, v2)
    } else {
        let v0 = eigenvector_from_rows(&m, eval[0]);
        let v1 = eigenvector_in_complement(&m, v0, eval[1]);
        let v2 = cross(v0, v1);
        (v0, v1, v2)
    };
    let vectors = [v0, v1, v2];
    // Rayleigh quotients are accurate to second order in the vector error.
    let values = vectors.map(|v| dot(v, mat_vec(&m, v)) * max_abs);
    Some((values, vectors))
}

fn eigenvector_from_rows(m: &[[f64; 3]; 3], eval: f64) -> [f64; 3] {
    let r0 = [m[0][0] - eval, m[0][1], m[0][2]];
    let r1 = [m[0][1], m[1][1] - eval, m[1][2]];
    let r2 = [m[0][2], m[1][2], m[2][2] - eval];
    let c = [cross(r0, r1), cross(r0, r2), cross(r1, r2)];
    let d = c.map(|v| dot(v, v));
    let mut k = 0;
    for i in 1..3 {
        if d[i] > d[k] {
            k = i;
        }
    }
    let n = d[k].sqrt();
    c[k].map(|v| v / n)
}

fn orthogonal_complement(w: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let u = if w[0].abs() > w[1].abs() {
        let inv = 1.0 / (w[0] * w[0] + w[2] * w[2]).sqrt();
        [-w[2] * inv, 0.0, w[0] * inv]
    } else {
        let inv = 1.0 / (w[1] * w[1] + w[2] * w[2]).sqrt();
        [0.0, w[2] * inv, -w[1] * inv]
    };
    (u, cross(w, u))
}

fn eigenvector_in_complement(m: &[[f64; 3]; 3], w: [f64; 3], eval: f64) -> [f64; 3] {
    let (u, v) = orthogonal_complement(w);
    let au = mat_vec(m, u);
    let av = mat_vec(m, v);
    let mut m00 = dot(u, au) - eval;
    let mut m01 = dot(u, av);
    let mut m11 = dot(v, av) - eval;
    let (a00, a01, a11) = (m00.abs(), m01.abs(), m11.abs());
    let combine = |cu: f64, cv: f64| [cu * u[0] - cv * v[0], cu * u[1] - cv * v[1], cu * u[2] - cv * v[2]];
    if a00 >= a11 {
        if a00.max(a01) > 0.0 {
            if a00 >= a01 {
                m01 /= m00;
                m00 = 1.0 / (1.0 + m01 * m01).sqrt();
                m01 *= m00;
            } else {
                m00 /= m01;
                m01 = 1.0 / (1.0 + m00 * m00).sqrt();
                m00 *= m01;
            }
            combine(m01, m00)
        } else {
            u
        }
    } else if a11.max(a01) > 0.0 {
        if a11 >= a01 {
            m01 /= m11;
            m11 = 1.0 / (1.0 + m01 * m01).sqrt();
            m01 *= m11;
        } else {
            m11 /= m01;
            m01 = 1.0 / (1.0 + m11 * m11).sqrt();
            m11 *= m01;
        }
        combine(m11, m01)
    } else {
        u
    }
}

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
pub(crate) fn jacobi(a: &[[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut m = *a;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
        let diag = m[0][0] * m[0][0] + m[1][1] * m[1][1] + m[2][2] * m[2][2];
        if off <= 1e-36 * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if m[p][q] == 0.0 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // m <- Jᵀ m J
            for k in 0..3 {
                let mkp = m[k][p];
                let mkq = m[k][q];
                m[k][p] = c * mkp - s * mkq;
                m[k][q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let mpk = m[p][k];
                let mqk = m[q][k];
                m[p][k] = c * mpk - s * mqk;
                m[q][k] = s * mpk + c * mqk;
            }
            // columns of the accumulated rotation are the eigenvectors
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let values = [m[0][0], m[1][1], m[2][2]];
    let vectors = [0, 1, 2].map(|k| [v[0][k], v[1][k], v[2][k]]);
    (values, vectors)
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: &[f64; 3]) -> f64 {
    dot(*a, *a).sqrt()
}

#[inline]
fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frob(a: &[[f64; 3]; 3]) -> f64 {
        a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn rel_reconstruction_error(a: &[[f64; 3]; 3], e: &EigenSystem) -> f64 {
        let r = e.reconstruct();
        let mut d = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] = r[i][j] - a[i][j];
            }
        }
        let n = frob(a);
        if n == 0.0 {
            frob(&d)
        } else {
            frob(&d) / n
        }
    }

    /// Classical Jacobi (largest off-diagonal pivot), kept separate from the
    /// cyclic fallback used by the solver.
    fn oracle_eigenvalues(a: &[[f64; 3]; 3]) -> [f64; 3] {
        let mut m = *a;
        for _ in 0..200 {
            let mut p = 0;
            let mut q = 1;
            for (i, j) in [(0, 2), (1, 2)] {
                if m[i][j].abs() > m[p][q].abs() {
                    p = i;
                    q = j;
                }
            }
            if m[p][q].abs() < 1e-300 {
                break;
            }
            let phi = 0.5 * (2.0 * m[p][q]).atan2(m[p][p] - m[q][q]);
            let (s, c) = phi.sin_cos();
            let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            r[p][p] = c;
            r[q][q] = c;
            r[p][q] = s;
            r[q][p] = -s;
            // m <- r m rᵀ
            let mut t = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        t[i][j] += r[i][k] * m[k][j];
                    }
                }
            }
            let mut n = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        n[i][j] += t[i][k] * r[j][k];
                    }
                }
            }
            m = n;
        }
        let mut ev = [m[0][0], m[1][1], m[2][2]];
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    fn check_system(a: &[[f64; 3]; 3], e: &EigenSystem) {
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        for i in 0..3 {
            assert!((norm(&e.vectors[i]) - 1.0).abs() < 1e-9);
            for j in (i + 1)..3 {
                assert!(dot(e.vectors[i], e.vectors[j]).abs() < 1e-8);
            }
        }
        assert!(rel_reconstruction_error(a, e) < 1e-10, "recon {}", rel_reconstruction_error(a, e));
    }

    #[test]
    fn diagonal() {
        let a = [[1e-3, 0.0, 0.0], [0.0, 3e-3, 0.0], [0.0, 0.0, 2e-3]];
        let e = eig3_sym_matrix(a);
        assert_eq!(e.values, [3e-3, 2e-3, 1e-3]);
        assert!((e.vectors[0][1].abs() - 1.0).abs() < 1e-15);
        let a = [[3e-3, 0.0, 0.0], [0.0, 2e-3, 0.0], [0.0, 0.0, 1e-3]];
        let e = eig3_sym_matrix(a);
        assert_eq!(e.vectors[0], [1.0, 0.0, 0.0]);
        check_system(&a, &e);
    }

    #[test]
    fn isotropic() {
        let d = 0.7e-3;
        let a = [[d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]];
        let e = eig3_sym_matrix(a);
        for v in e.values {
            assert!((v - d).abs() < 1e-18);
        }
        check_system(&a, &e);
    }

    #[test]
    fn repeated_pair_uses_fallback_cleanly() {
        // rotated diag(2,1,1) has an exactly repeated pair
        let v = [1.0 / 3f64.sqrt(); 3];
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = if i == j { 1.0 } else { 0.0 } + v[i] * v[j];
            }
        }
        let e = eig3_sym_matrix(a);
        check_system(&a, &e);
        assert!((e.values[0] - 2.0).abs() < 1e-12);
        assert!((dot(e.vectors[0], v).abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sign_convention() {
        let a = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, -1.0]];
        let e = eig3_sym_matrix(a);
        assert!(e.has_negative());
        for v in e.vectors {
            let k = (0..3).max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs())).unwrap();
            assert!(v[k] >= 0.0);
        }
    }

    #[test]
    fn zero_matrix() {
        let e = eig3_sym_matrix([[0.0; 3]; 3]);
        assert_eq!(e.values, [0.0; 3]);
    }

    proptest! {
        #[test]
        fn random_symmetric_matches_jacobi_oracle(
            d in prop::array::uniform3(-3e-3..3e-3f64),
            o in prop::array::uniform3(-1e-3..1e-3f64),
        ) {
            let a = [[d[0], o[0], o[1]], [o[0], d[1], o[2]], [o[1], o[2], d[2]]];
            let e = eig3_sym_matrix(a);
            check_system(&a, &e);
            let oracle = oracle_eigenvalues(&a);
            let scale = frob(&a);
            for k in 0..3 {
                prop_assert!((e.values[k] - oracle[k]).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn cyclic_jacobi_reconstructs(
            d in prop::array::uniform3(-1.0..1.0f64),
            o in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let a = [[d[0], o[0], o[1]], [o[0], d[1], o[2]], [o[1], o[2], d[2]]];
            let (values, vectors) = jacobi(&a);
            let e = finish(values, vectors);
            check_system(&a, &e);
        }
    }
}
