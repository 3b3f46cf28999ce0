use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on |g| - 1 for weighted entries.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// One acquisition: b-value in s/mm² and gradient direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub b: f64,
    pub g: [f64; 3],
}

/// Ordered list of diffusion encodings describing an acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientScheme {
    entries: Vec<Measurement>,
}

impl GradientScheme {
    pub fn new(entries: Vec<Measurement>) -> Result<Self> {
        Self::with_tolerance(entries, UNIT_NORM_TOL)
    }

    /// Same as [`GradientScheme::new`] with a caller-chosen unit norm tolerance
    /// (text gradient tables carry ~6 significant digits).
    pub fn with_tolerance(entries: Vec<Measurement>, norm_tol: f64) -> Result<Self> {
        if !entries.iter().any(|m| m.b == 0.0) {
            return Err(Error::InvalidScheme("scheme has no b=0 entry".into()));
        }
        for (i, m) in entries.iter().enumerate() {
            if !(m.b >= 0.0) || !m.b.is_finite() {
                return Err(Error::InvalidScheme(format!("entry {i}: b-value {} is not >= 0", m.b)));
            }
            if m.b > 0.0 {
                let norm = m.g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > norm_tol {
                    return Err(Error::InvalidScheme(format!(
                        "entry {i}: gradient norm {norm} is not unit"
                    )));
                }
            }
        }
        Ok(GradientScheme { entries })
    }

    pub fn entries(&self) -> &[Measurement] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn b0_count(&self) -> usize {
        self.entries.iter().filter(|m| m.b == 0.0).count()
    }

    pub fn weighted_count(&self) -> usize {
        self.len() - self.b0_count()
    }

    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].b == 0.0).collect()
    }

    pub fn weighted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].b > 0.0).collect()
    }

    /// Keeps every b=0 entry and the first `k` weighted entries, in order.
    pub fn first_weighted(&self, k: usize) -> Result<GradientScheme> {
        if k > self.weighted_count() {
            return Err(Error::InvalidArgument(format!(
                "asked for {k} weighted directions, scheme has {}",
                self.weighted_count()
            )));
        }
        let mut seen = 0;
        let entries = self
            .entries
            .iter()
            .filter(|m| {
                if m.b == 0.0 {
                    true
                } else {
                    seen += 1;
                    seen <= k
                }
            })
            .copied()
            .collect();
        GradientScheme::new(entries)
    }

    /// Indices into this scheme selected by [`GradientScheme::first_weighted`].
    pub fn first_weighted_indices(&self, k: usize) -> Vec<usize> {
        let mut seen = 0;
        (0..self.len())
            .filter(|&i| {
                if self.entries[i].b == 0.0 {
                    true
                } else {
                    seen += 1;
                    seen <= k
                }
            })
            .collect()
    }

    /// Short stable identifier (FNV-1a over the raw entry bits).
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for m in &self.entries {
            for v in [m.b, m.g[0], m.g[1], m.g[2]] {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        format!("{}b0-{}dir-{:016x}", self.b0_count(), self.weighted_count(), h)
    }
}

/// Log-linearised tensor model: row i maps `[ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`
/// onto `ln S_i`.
pub fn build_design_matrix(scheme: &GradientScheme) -> Result<DMatrix<f64>> {
    let a = design_rows(scheme);
    if a.nrows() < 7 {
        return Err(Error::DegenerateScheme(format!(
            "{} measurements cannot determine 7 unknowns",
            a.nrows()
        )));
    }
    let rank = numerical_rank(&column_scaled(&a).0);
    if rank < 7 {
        return Err(Error::DegenerateScheme(format!("design matrix rank {rank} < 7")));
    }
    Ok(a)
}

pub(crate) fn design_rows(scheme: &GradientScheme) -> DMatrix<f64> {
    let n = scheme.len();
    let mut a = DMatrix::zeros(n, 7);
    for (i, m) in scheme.entries().iter().enumerate() {
        let [gx, gy, gz] = m.g;
        let b = m.b;
        a[(i, 0)] = 1.0;
        a[(i, 1)] = -b * gx * gx;
        a[(i, 2)] = -b * gy * gy;
        a[(i, 3)] = -b * gz * gz;
        a[(i, 4)] = -2.0 * b * gx * gy;
        a[(i, 5)] = -2.0 * b * gx * gz;
        a[(i, 6)] = -2.0 * b * gy * gz;
    }
    a
}

/// Divides each column by its largest magnitude; returns the scaled matrix and
/// the divisors.
pub(crate) fn column_scaled(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut scaled = a.clone();
    let mut scales = Vec::with_capacity(a.ncols());
    for j in 0..a.ncols() {
        let s = a.column(j).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let s = if s > 0.0 { s } else { 1.0 };
        scaled.column_mut(j).scale_mut(1.0 / s);
        scales.push(s);
    }
    (scaled, scales)
}

fn numerical_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    let tol = max * 1e-10 * a.nrows().max(a.ncols()) as f64;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Ratio of extreme singular values; `+inf` when rank deficient.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    let min = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if max == 0.0 || min <= max * 1e-13 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Condition number of the scheme's design matrix (`+inf` if rank deficient).
pub fn scheme_condition_number(scheme: &GradientScheme) -> f64 {
    let a = design_rows(scheme);
    if a.nrows() < 7 {
        return f64::INFINITY;
    }
    condition_number(&a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(b: f64, g: [f64; 3]) -> Measurement {
        Measurement { b, g }
    }

    fn six_axes() -> GradientScheme {
        let s = 1.0 / 2f64.sqrt();
        GradientScheme::new(vec![
            m(0.0, [0.0; 3]),
            m(1000.0, [1.0, 0.0, 0.0]),
            m(1000.0, [0.0, 1.0, 0.0]),
            m(1000.0, [0.0, 0.0, 1.0]),
            m(1000.0, [s, s, 0.0]),
            m(1000.0, [s, 0.0, s]),
            m(1000.0, [0.0, s, s]),
        ])
        .unwrap()
    }

    /// Rank by Gaussian elimination with full pivoting.
    fn rank_by_elimination(a: &DMatrix<f64>) -> usize {
        let mut rows: Vec<Vec<f64>> = (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
        let (nr, nc) = (a.nrows(), a.ncols());
        let scale = rows.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut rank = 0;
        let mut used = vec![false; nc];
        for _ in 0..nr.min(nc) {
            let mut best = (0.0, 0, 0);
            for (i, row) in rows.iter().enumerate().skip(rank) {
                for j in 0..nc {
                    if !used[j] && row[j].abs() > best.0 {
                        best = (row[j].abs(), i, j);
                    }
                }
            }
            if best.0 <= 1e-9 * scale {
                break;
            }
            rows.swap(rank, best.1);
            let pivot_row = rows[rank].clone();
            for row in rows.iter_mut().skip(rank + 1) {
                let f = row[best.2] / pivot_row[best.2];
                for j in 0..nc {
                    row[j] -= f * pivot_row[j];
                }
            }
            used[best.2] = true;
            rank += 1;
        }
        rank
    }

    #[test]
    fn b0_row_is_unweighted() {
        let a = build_design_matrix(&six_axes()).unwrap();
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn x_axis_row() {
        let a = build_design_matrix(&six_axes()).unwrap();
        assert_eq!(a.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, -1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn six_directions_plus_b0_full_rank() {
        let a = build_design_matrix(&six_axes()).unwrap();
        assert_eq!(a.shape(), (7, 7));
        assert_eq!(rank_by_elimination(&a), 7);
    }

    #[test]
    fn too_few_rows_is_degenerate() {
        let s = GradientScheme::new(vec![m(0.0, [0.0; 3]), m(1000.0, [1.0, 0.0, 0.0])]).unwrap();
        assert!(matches!(build_design_matrix(&s), Err(Error::DegenerateScheme(_))));
    }

    #[test]
    fn repeated_direction_is_rank_deficient() {
        let mut e = vec![m(0.0, [0.0; 3])];
        e.extend(std::iter::repeat(m(1000.0, [0.0, 0.0, 1.0])).take(8));
        let s = GradientScheme::new(e).unwrap();
        assert!(matches!(build_design_matrix(&s), Err(Error::DegenerateScheme(_))));
        assert_eq!(scheme_condition_number(&s), f64::INFINITY);
    }

    #[test]
    fn orthonormal_matrix_condition_is_one() {
        let q = DMatrix::<f64>::identity(7, 7);
        assert!((condition_number(&q) - 1.0).abs() < 1e-14);
        let (c, s) = (0.6, 0.8);
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        assert!((condition_number(&rot) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn validation_rejects_bad_entries() {
        assert!(GradientScheme::new(vec![m(1000.0, [1.0, 0.0, 0.0])]).is_err());
        assert!(GradientScheme::new(vec![m(0.0, [0.0; 3]), m(-5.0, [1.0, 0.0, 0.0])]).is_err());
        assert!(GradientScheme::new(vec![m(0.0, [0.0; 3]), m(1000.0, [0.9, 0.0, 0.0])]).is_err());
    }

    #[test]
    fn first_weighted_keeps_b0() {
        let s = six_axes().first_weighted(3).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.b0_count(), 1);
        assert_eq!(six_axes().first_weighted_indices(3), vec![0, 1, 2, 3]);
        assert!(six_axes().first_weighted(7).is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_distinct() {
        assert_eq!(six_axes().fingerprint(), six_axes().fingerprint());
        assert_ne!(six_axes().fingerprint(), six_axes().first_weighted(5).unwrap().fingerprint());
    }
}
