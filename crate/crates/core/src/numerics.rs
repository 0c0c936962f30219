//! Dense linear-algebra and order-statistic kernels.
//!
//! Dimensions here are tiny (feature dimension 15 for comblock, 3 for the
//! tabular validation families), so everything is a straightforward dense
//! row-major implementation.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Smallest ridge parameter accepted by the PD routines.
pub const MIN_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(contract("matrix needs at least one row"));
        }
        let c = rows[0].len();
        if c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(contract("ragged or empty matrix rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(contract("matrix entries must be finite"));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(contract(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(contract(format!(
                "matvec shape mismatch: {}x{} * {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows * other.rows, self.cols * other.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self[(i, j)];
                for k in 0..other.rows {
                    for l in 0..other.cols {
                        out[(i * other.rows + k, j * other.cols + l)] = a * other[(k, l)];
                    }
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1/n)(Σ φφᵀ + λI)`. An empty feature list needs an explicit `dim`.
pub fn ridge_covariance(
    features: &[Vec<f64>],
    dim: usize,
    lambda: f64,
    n: usize,
) -> Result<Matrix> {
    let weighted: Vec<(&[f64], f64)> = features.iter().map(|f| (f.as_slice(), 1.0)).collect();
    weighted_ridge_covariance(&weighted, dim, lambda, n as f64)
}

/// Same as [`ridge_covariance`] but each feature carries a multiplicity.
/// `n` is the normaliser (number of trajectories), not the number of rows.
pub fn weighted_ridge_covariance(
    features: &[(&[f64], f64)],
    dim: usize,
    lambda: f64,
    n: f64,
) -> Result<Matrix> {
    if !(lambda >= MIN_RIDGE) {
        return Err(contract(format!(
            "ridge parameter {lambda} below {MIN_RIDGE}"
        )));
    }
    if dim == 0 {
        return Err(contract("feature dimension must be positive"));
    }
    let n = if n > 0.0 { n } else { 1.0 };
    let mut cov = Matrix::identity(dim);
    for x in cov.data.iter_mut() {
        *x *= lambda;
    }
    for (phi, w) in features {
        if phi.len() != dim {
            return Err(contract(format!(
                "feature of dimension {} where {dim} expected",
                phi.len()
            )));
        }
        for i in 0..dim {
            let a = phi[i] * w;
            if a == 0.0 {
                continue;
            }
            for j in 0..dim {
                cov[(i, j)] += a * phi[j];
            }
        }
    }
    for x in cov.data.iter_mut() {
        *x /= n;
    }
    Ok(cov)
}

/// Lower-triangular Cholesky factor `L` with `LLᵀ = cov`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Matrix,
}

impl Cholesky {
    pub fn new(cov: &Matrix) -> Result<Self> {
        let n = cov.rows();
        if cov.cols() != n {
            return Err(contract("Cholesky needs a square matrix"));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = cov[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::DegenerateCovariance {
                    pivot: j,
                    value: diag,
                });
            }
            let d = diag.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = cov[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { factor: l })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    /// Solves `L y = b`.
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.factor;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(contract(format!(
                "rhs of length {} for {n}x{n} system",
                rhs.len()
            )));
        }
        let l = &self.factor;
        let y = self.forward(rhs);
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        Ok(x)
    }

    /// `sqrt(φᵀ Σ⁻¹ φ)` computed as `‖L⁻¹φ‖₂`.
    pub fn inverse_norm(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.dim() {
            return Err(contract("feature dimension does not match covariance"));
        }
        let y = self.forward(phi);
        Ok(dot(&y, &y).sqrt())
    }
}

pub fn ridge_solve(cov: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    Cholesky::new(cov)?.solve(rhs)
}

pub fn elliptical_norm(phi: &[f64], cov: &Matrix) -> Result<f64> {
    Cholesky::new(cov)?.inverse_norm(phi)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as matrix columns.
pub fn symmetric_eigen(c: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = c.rows();
    if c.cols() != n {
        return Err(contract("eigen-decomposition needs a square matrix"));
    }
    let mut a = c.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = cs * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + cs * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[(i, i)]).collect(), v))
}

/// Minimum-norm least-squares solution of `m·x ≈ y` via the pseudo-inverse of `mᵀm`.
/// Returns the solution and the residual norm `‖m·x − y‖₂`.
pub fn min_norm_least_squares(m: &Matrix, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if y.len() != m.rows() {
        return Err(contract("least-squares target has wrong length"));
    }
    let mt = m.transpose();
    let gram = mt.matmul(m)?;
    let rhs = mt.matvec(y)?;
    let (vals, vecs) = symmetric_eigen(&gram)?;
    let scale = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cutoff = scale * 1e-12 * m.cols().max(m.rows()) as f64;
    let n = m.cols();
    let mut x = vec![0.0; n];
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= cutoff {
            continue;
        }
        let coef: f64 = (0..n).map(|i| vecs[(i, k)] * rhs[i]).sum::<f64>() / lam;
        for i in 0..n {
            x[i] += coef * vecs[(i, k)];
        }
    }
    let fitted = m.matvec(&x)?;
    let resid = fitted
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok((x, resid))
}

/// Orthonormal Sylvester–Hadamard matrix of the given order.
pub fn hadamard(order: usize) -> Result<Matrix> {
    if order == 0 || !order.is_power_of_two() {
        return Err(contract(format!(
            "Hadamard order {order} is not a power of two"
        )));
    }
    let base = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]])?;
    let mut h = Matrix::identity(1);
    let mut m = 1;
    while m < order {
        h = h.kron(&base);
        m *= 2;
    }
    let scale = 1.0 / (order as f64).sqrt();
    for x in h.data.iter_mut() {
        *x *= scale;
    }
    Ok(h)
}

/// k-th order statistic, 1-indexed.
pub fn kth_smallest(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(contract(format!(
            "order statistic {k} requested from {} values",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ridge_covariance_examples() {
        let c = ridge_covariance(&[vec![1.0, 0.0]], 2, 1.0, 1).unwrap();
        assert_eq!(c, m(&[&[2.0, 0.0], &[0.0, 1.0]]));

        let c = ridge_covariance(&[], 2, 1.0, 0).unwrap();
        assert_eq!(c, Matrix::identity(2));

        let c = ridge_covariance(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2, 0.5, 2).unwrap();
        assert!(c.max_abs_diff(&m(&[&[0.75, 0.0], &[0.0, 0.75]])) < 1e-15);
    }

    #[test]
    fn ridge_covariance_rejects_bad_input() {
        assert!(matches!(
            ridge_covariance(&[vec![1.0]], 2, 1.0, 1),
            Err(Error::Contract(_))
        ));
        assert!(ridge_covariance(&[], 2, 1e-9, 1).is_err());
    }

    #[test]
    fn ridge_solve_examples() {
        assert_eq!(
            ridge_solve(&Matrix::identity(2), &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0]
        );
        let x = ridge_solve(&m(&[&[2.0, 0.0], &[0.0, 1.0]]), &[2.0, 0.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1] == 0.0);
        let x = ridge_solve(&m(&[&[2.0, 1.0], &[1.0, 2.0]]), &[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_solve_rejects_indefinite() {
        let err = ridge_solve(&m(&[&[1.0, 2.0], &[2.0, 1.0]]), &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCovariance { pivot: 1, .. }));
    }

    #[test]
    fn elliptical_norm_examples() {
        assert_eq!(
            elliptical_norm(&[1.0, 0.0], &Matrix::identity(2)).unwrap(),
            1.0
        );
        assert_eq!(
            elliptical_norm(&[0.0, 0.0], &m(&[&[3.0, 1.0], &[1.0, 2.0]])).unwrap(),
            0.0
        );
        let v = elliptical_norm(&[2.0, 0.0], &m(&[&[4.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hadamard_examples() {
        assert_eq!(hadamard(1).unwrap(), Matrix::identity(1));
        let s = 1.0 / 2f64.sqrt();
        assert!(hadamard(2).unwrap().max_abs_diff(&m(&[&[s, s], &[s, -s]])) < 1e-15);
        let h2 = hadamard(2).unwrap();
        let h4 = hadamard(4).unwrap();
        assert!(h4.max_abs_diff(&h2.kron(&h2)) < 1e-15);
        assert!(hadamard(3).is_err());
        assert!(hadamard(0).is_err());
    }

    #[test]
    fn kth_smallest_examples() {
        assert_eq!(kth_smallest(&[3.0, 1.0, 2.0], 2).unwrap(), 2.0);
        assert_eq!(kth_smallest(&[5.0], 1).unwrap(), 5.0);
        assert_eq!(kth_smallest(&[2.0, 2.0, 7.0], 2).unwrap(), 2.0);
        assert!(kth_smallest(&[1.0], 0).is_err());
        assert!(kth_smallest(&[1.0], 2).is_err());
    }

    fn random_pd(dim: usize, entries: &[f64], floor: f64) -> Matrix {
        // A·Aᵀ + floor·I
        let a = Matrix {
            rows: dim,
            cols: dim,
            data: entries[..dim * dim].to_vec(),
        };
        let mut c = a.matmul(&a.transpose()).unwrap();
        for i in 0..dim {
            c[(i, i)] += floor;
        }
        c
    }

    fn min_eigenvalue_sym(c: &Matrix) -> f64 {
        symmetric_eigen(c)
            .unwrap()
            .0
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_with_eigenvalue_floor(
            feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 0..12),
            lambda in 0.01f64..5.0,
        ) {
            let n = feats.len().max(1);
            let c = ridge_covariance(&feats, 4, lambda, n).unwrap();
            prop_assert!(c.max_abs_diff(&c.transpose()) <= 1e-12);
            prop_assert!(min_eigenvalue_sym(&c) >= lambda / n as f64 - 1e-9);
        }

        #[test]
        fn solve_recovers_known_solution(
            entries in prop::collection::vec(-1.0f64..1.0, 25),
            x in prop::collection::vec(-10.0f64..10.0, 5),
        ) {
            let c = random_pd(5, &entries, 1e-3);
            let rhs = c.matvec(&x).unwrap();
            let got = ridge_solve(&c, &rhs).unwrap();
            let err: f64 = got.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            prop_assert!(err / norm <= 1e-8, "relative error {}", err / norm);
            let resid = c.matvec(&got).unwrap();
            let r: f64 = resid.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rn: f64 = rhs.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            prop_assert!(r / rn <= 1e-10);
        }

        #[test]
        fn elliptical_norm_eigenvalue_bound(
            feats in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..10),
            phi in prop::collection::vec(-1.0f64..1.0, 3),
            lambda in 0.1f64..3.0,
        ) {
            let n = feats.len();
            let c = ridge_covariance(&feats, 3, lambda, n).unwrap();
            let e = elliptical_norm(&phi, &c).unwrap();
            let bound = dot(&phi, &phi) * n as f64 / lambda;
            prop_assert!(e * e <= bound * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn kth_smallest_matches_sort(
            values in prop::collection::vec(-100.0f64..100.0, 1..40),
            pick in 0usize..1000,
        ) {
            let k = pick % values.len() + 1;
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(kth_smallest(&values, k).unwrap(), sorted[k - 1]);
        }
    }

    #[test]
    fn min_norm_least_squares_splits_duplicate_columns() {
        // Two identical columns: the minimum-norm split is even.
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let (x, r) = min_norm_least_squares(&m, &[1.0, 0.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
        assert!(r < 1e-12);
        let (_, r) = min_norm_least_squares(&m, &[0.0, 1.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hadamard_is_orthonormal() {
        for order in [1, 2, 4, 8, 16, 32] {
            let h = hadamard(order).unwrap();
            let p = h.matmul(&h.transpose()).unwrap();
            assert!(
                p.max_abs_diff(&Matrix::identity(order)) <= 1e-12,
                "order {order}"
            );
        }
    }
}
