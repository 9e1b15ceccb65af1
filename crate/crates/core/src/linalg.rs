//! Dense linear algebra kernels: row-major matrices, deterministic SVD,
//! orthonormal subspaces, null-space projectors, and principal angles.
//!
//! Everything here is `f64`, deterministic across runs and thread counts,
//! and validated eagerly so numerical failures surface as [`Error`] values
//! instead of silent NaNs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Maximum iterations granted to the iterative SVD before it is declared
/// non-convergent.
const SVD_MAX_ITER: usize = 10_000;

/// Convergence tolerance of the iterative SVD. Tolerances tighter than
/// this can make the implicit-shift iteration mis-converge, so it must not
/// be lowered.
const SVD_EPS: f64 = 5.0 * f64::EPSILON;

/// Relative cutoff under which trailing singular values are treated as zero
/// when deciding the admissible rank of a matrix.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Dense row-major matrix of `f64` values.
///
/// Entries are validated to be finite on construction; dimensions are
/// strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from a row-major buffer.
    ///
    /// Fails with [`Error::InvalidArgument`] on zero dimensions or a length
    /// mismatch and with [`Error::InvalidMatrix`] on non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(
                "matrix dimensions must be positive".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries ({rows}x{cols})", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(i, j)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Builds a matrix from row slices; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no rows provided".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of length {cols}"),
                got: "ragged rows".into(),
            });
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major backing buffer. The caller is responsible for
    /// keeping entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    /// Writes one entry. The caller is responsible for keeping entries
    /// finite; consumers re-validate before numerically sensitive work.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    /// Borrow of row `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of column `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        debug_assert!(j < self.cols);
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows on rhs", self.cols),
                got: format!("{} rows", rhs.rows),
            });
        }
        let mut data = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out = &mut data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            rows: self.rows,
            cols: rhs.cols,
            data,
        })
    }

    /// Entry-wise sum.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    /// Entry-wise difference.
    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", rhs.rows, rhs.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Scalar multiple.
    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Row-vector product `x * self`; `x.len()` must equal `rows`.
    pub fn vec_mat(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("vector of length {}", self.rows),
                got: format!("length {}", x.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (o, r) in out.iter_mut().zip(row) {
                *o += xi * r;
            }
        }
        Ok(out)
    }

    /// Column-vector product `self * v`; `v.len()` must equal `cols`.
    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: format!("vector of length {}", self.cols),
                got: format!("length {}", v.len()),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry-wise difference; shapes must match.
    pub fn max_abs_diff(&self, rhs: &Self) -> Result<f64> {
        Ok(self.sub(rhs)?.max_abs())
    }
}

/// Dot product; lengths must match.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `A = U diag(sigma) Vt` with
/// `r = min(rows, cols)` retained components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// Left singular vectors, `rows x r`, orthonormal columns.
    pub u: DenseMatrix,
    /// Singular values, descending and non-negative.
    pub sigma: Vec<f64>,
    /// Right singular vectors as rows, `r x cols`, orthonormal rows.
    pub vt: DenseMatrix,
}

/// Computes the thin SVD with a deterministic ordering and sign convention:
/// singular values are sorted in descending order (ties keep their original
/// relative order), and each right singular vector is flipped so that its
/// largest-magnitude entry (ties broken by lowest index) is non-negative,
/// with the paired left singular vector flipped to match.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::InvalidMatrix);
    }
    let na = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let decomp = na
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::NumericalFailure)?;
    let u_na = decomp.u.ok_or(Error::NumericalFailure)?;
    let vt_na = decomp.v_t.ok_or(Error::NumericalFailure)?;
    let r = decomp.singular_values.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| {
        decomp.singular_values[j]
            .partial_cmp(&decomp.singular_values[i])
            .expect("singular values are finite")
    });

    let mut sigma = Vec::with_capacity(r);
    let mut u = DenseMatrix::zeros(a.rows(), r)?;
    let mut vt = DenseMatrix::zeros(r, a.cols())?;
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(decomp.singular_values[src]);
        // Pick the sign so the largest-magnitude entry of the right vector
        // is non-negative, ties resolved toward the lowest index.
        let mut arg = 0usize;
        let mut best = -1.0_f64;
        for j in 0..a.cols() {
            let mag = vt_na[(src, j)].abs();
            if mag > best {
                best = mag;
                arg = j;
            }
        }
        let flip = if vt_na[(src, arg)] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..a.cols() {
            vt.set(dst, j, flip * vt_na[(src, j)]);
        }
        for i in 0..a.rows() {
            u.set(i, dst, flip * u_na[(i, src)]);
        }
    }
    Ok(SvdResult { u, sigma, vt })
}

impl SvdResult {
    /// Number of retained components `min(rows, cols)`.
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Admissible rank: the number of singular values above
    /// `RANK_TOLERANCE * sigma_1`. Zero for an all-zero matrix.
    pub fn admissible_rank(&self) -> usize {
        let s1 = self.sigma.first().copied().unwrap_or(0.0);
        if s1 <= 0.0 {
            return 0;
        }
        let tol = RANK_TOLERANCE * s1;
        self.sigma.iter().take_while(|s| **s > tol).count()
    }

    /// Reconstructs `U diag(sigma) Vt`.
    pub fn reconstruct(&self) -> Result<DenseMatrix> {
        let mut scaled = self.u.clone();
        for i in 0..scaled.rows() {
            for j in 0..scaled.cols() {
                scaled.set(i, j, scaled.get(i, j) * self.sigma[j]);
            }
        }
        scaled.matmul(&self.vt)
    }
}

/// An orthonormal basis of a k-dimensional subspace of `R^dim`, stored as
/// the columns of `basis` (`dim x k`), together with the singular values
/// that ranked those directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DenseMatrix,
    sigma: Vec<f64>,
}

impl Subspace {
    /// Validates orthonormality of the columns (Gram deviation from the
    /// identity at most `1e-10` in max-abs) and a descending non-negative
    /// `sigma` of matching length.
    pub fn new(basis: DenseMatrix, sigma: Vec<f64>) -> Result<Self> {
        if basis.cols() > basis.rows() {
            return Err(Error::InvalidArgument(format!(
                "subspace rank {} exceeds ambient dimension {}",
                basis.cols(),
                basis.rows()
            )));
        }
        if sigma.len() != basis.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} singular values", basis.cols()),
                got: format!("{}", sigma.len()),
            });
        }
        if !basis.is_finite() || !sigma.iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        if sigma.iter().any(|s| *s < 0.0) || sigma.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "sigma must be non-negative and descending".into(),
            ));
        }
        let gram = basis.transpose().matmul(&basis)?;
        let eye = DenseMatrix::identity(basis.cols())?;
        let dev = gram.max_abs_diff(&eye)?;
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "basis columns not orthonormal (gram deviation {dev:.3e})"
            )));
        }
        Ok(Self { basis, sigma })
    }

    /// Ambient dimension `D`.
    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    /// Subspace rank `k`.
    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    /// `dim x k` orthonormal basis matrix.
    pub fn basis(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Copy of basis direction `j`.
    pub fn direction(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "direction {j} out of range for rank {}",
                self.rank()
            )));
        }
        Ok(self.basis.column(j))
    }
}

/// Extracts the rank-`k` subspace spanned by the top-k right singular
/// vectors. Fails with [`Error::RankDeficient`] when `k` exceeds the
/// admissible rank of the decomposition.
pub fn top_k_subspace(decomp: &SvdResult, k: usize) -> Result<Subspace> {
    if k == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let admissible = decomp.admissible_rank();
    if k > admissible {
        return Err(Error::RankDeficient {
            requested: k,
            admissible,
        });
    }
    let d = decomp.vt.cols();
    let basis = DenseMatrix::from_fn(d, k, |i, j| decomp.vt.get(j, i))?;
    Subspace::new(basis, decomp.sigma[..k].to_vec())
}

/// Builds the null-space projector `P = I - V V^T` for the subspace basis
/// `V`. The result is symmetric by construction.
pub fn build_projector(sub: &Subspace) -> Result<DenseMatrix> {
    let d = sub.dim();
    let v = sub.basis();
    DenseMatrix::from_fn(d, d, |i, j| {
        let mut s = 0.0;
        for c in 0..v.cols() {
            s += v.get(i, c) * v.get(j, c);
        }
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - s
    })
}

/// Applies a null-space projector to a weight matrix: `W_ed = P * W`.
/// `P` must be square with order equal to `W.rows()`.
pub fn apply_null_projection(projector: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    if projector.rows() != projector.cols() {
        return Err(Error::InvalidArgument(format!(
            "projector must be square, got {}x{}",
            projector.rows(),
            projector.cols()
        )));
    }
    if !projector.is_finite() || !w.is_finite() {
        return Err(Error::InvalidMatrix);
    }
    projector.matmul(w)
}

/// Principal angles (radians, ascending) between two subspaces of a common
/// ambient space. Returns `min(rank_a, rank_b)` angles in `[0, pi/2]`.
///
/// Small angles are computed through the sine route
/// (`sigma(B - A (A^T B))`) instead of `acos` of a cosine near one, which
/// keeps them accurate down to machine precision.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("ambient dimension {}", a.dim()),
            got: format!("{}", b.dim()),
        });
    }
    let m = a.rank().min(b.rank());
    let cross = a.basis().transpose().matmul(b.basis())?;
    let cosines = svd(&cross)?.sigma;

    let residual = b.basis().sub(&a.basis().matmul(&cross)?)?;
    let mut sines = svd(&residual)?.sigma;
    sines.reverse();

    let mut angles = Vec::with_capacity(m);
    for i in 0..m {
        let c = cosines[i].clamp(0.0, 1.0);
        let s = sines[i].clamp(0.0, 1.0);
        let theta = if c * c >= 0.5 { s.asin() } else { c.acos() };
        angles.push(theta);
    }
    angles.sort_by(|x, y| x.partial_cmp(y).expect("angles are finite"));
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn new_rejects_bad_shapes_and_values() {
        assert!(matches!(
            DenseMatrix::new(0, 3, vec![]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::InvalidMatrix)
        ));
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseMatrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert!(matches!(b.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn vec_mat_and_mat_vec_agree_with_matmul() {
        let a = DenseMatrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let x = vec![2.0, -1.0];
        let xm = a.vec_mat(&x).unwrap();
        assert_eq!(xm, vec![-1.0, -8.0, 2.0]);
        let v = vec![1.0, 0.0, 2.0];
        let av = a.mat_vec(&v).unwrap();
        assert_eq!(av, vec![2.0, 1.0]);
    }

    #[test]
    fn svd_of_diagonal_is_identity_bases() {
        let a = DenseMatrix::new(3, 3, vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = svd(&a).unwrap();
        assert!(approx(d.sigma[0], 3.0, 1e-12));
        assert!(approx(d.sigma[1], 2.0, 1e-12));
        assert!(approx(d.sigma[2], 1.0, 1e-12));
        let eye = DenseMatrix::identity(3).unwrap();
        assert!(d.u.max_abs_diff(&eye).unwrap() <= 1e-12);
        assert!(d.vt.max_abs_diff(&eye).unwrap() <= 1e-12);
    }

    #[test]
    fn svd_of_unit_outer_product_recovers_direction_with_sign_convention() {
        // u = [0.8, 0.6], v = [0.6, -0.8]; largest-|entry| of v is negative,
        // so the convention must report v1 = [-0.6, 0.8].
        let u = [0.8, 0.6];
        let v = [0.6, -0.8];
        let a = DenseMatrix::from_fn(2, 2, |i, j| u[i] * v[j]).unwrap();
        let d = svd(&a).unwrap();
        assert!(approx(d.sigma[0], 1.0, 1e-12));
        assert!(d.sigma[1].abs() <= 1e-14);
        assert!(approx(d.vt.get(0, 0), -0.6, 1e-12));
        assert!(approx(d.vt.get(0, 1), 0.8, 1e-12));
        assert!(approx(d.u.get(0, 0), -0.8, 1e-12));
        assert!(approx(d.u.get(1, 0), -0.6, 1e-12));
    }

    #[test]
    fn svd_reconstructs_seeded_gaussian_matrix() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(50_16);
        let a = DenseMatrix::from_fn(50, 16, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .unwrap();
        let d = svd(&a).unwrap();
        assert!(d.reconstruct().unwrap().max_abs_diff(&a).unwrap() <= 1e-10);
        // Orthonormality of both factors.
        let utu = d.u.transpose().matmul(&d.u).unwrap();
        let vvt = d.vt.matmul(&d.vt.transpose()).unwrap();
        let eye = DenseMatrix::identity(16).unwrap();
        assert!(utu.max_abs_diff(&eye).unwrap() <= 1e-12);
        assert!(vvt.max_abs_diff(&eye).unwrap() <= 1e-12);
        // Descending order.
        assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_is_bitwise_deterministic() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = DenseMatrix::from_fn(20, 12, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .unwrap();
        let d1 = svd(&a).unwrap();
        let d2 = svd(&a).unwrap();
        assert_eq!(d1.u.data(), d2.u.data());
        assert_eq!(d1.sigma, d2.sigma);
        assert_eq!(d1.vt.data(), d2.vt.data());
    }

    #[test]
    fn top_k_subspace_enforces_admissible_rank() {
        let z = DenseMatrix::zeros(4, 4).unwrap();
        let dz = svd(&z).unwrap();
        for k in 1..=4 {
            assert!(matches!(
                top_k_subspace(&dz, k),
                Err(Error::RankDeficient { requested, admissible })
                    if requested == k && admissible == 0
            ));
        }
        // Exact rank-1 matrix admits k = 1 but not k = 2.
        let a = DenseMatrix::from_fn(4, 4, |i, j| ((i + 1) * (j + 1)) as f64).unwrap();
        let da = svd(&a).unwrap();
        assert!(top_k_subspace(&da, 1).is_ok());
        assert!(matches!(
            top_k_subspace(&da, 2),
            Err(Error::RankDeficient { requested: 2, admissible: 1 })
        ));
        assert!(matches!(
            top_k_subspace(&da, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn projector_for_e1_zeroes_first_coordinate() {
        let basis = DenseMatrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let sub = Subspace::new(basis, vec![1.0]).unwrap();
        let p = build_projector(&sub).unwrap();
        let expect = DenseMatrix::new(3, 3, vec![0.0; 9])
            .map(|mut m| {
                m.set(1, 1, 1.0);
                m.set(2, 2, 1.0);
                m
            })
            .unwrap();
        assert_eq!(p.data(), expect.data());
        let w = DenseMatrix::new(3, 2, vec![1.0; 6]).unwrap();
        let edited = apply_null_projection(&p, &w).unwrap();
        assert_eq!(edited.row(0), &[0.0, 0.0]);
        assert_eq!(edited.row(1), &[1.0, 1.0]);
        assert_eq!(edited.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn projector_is_symmetric_and_idempotent() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = DenseMatrix::from_fn(10, 3, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .unwrap();
        let sub = top_k_subspace(&svd(&raw.transpose()).unwrap(), 3).unwrap();
        let p = build_projector(&sub).unwrap();
        assert!(p.max_abs_diff(&p.transpose()).unwrap() == 0.0);
        let pp = p.matmul(&p).unwrap();
        assert!(pp.max_abs_diff(&p).unwrap() <= 1e-12);
        // Annihilation: V^T P is zero.
        let vt_p = sub.basis().transpose().matmul(&p).unwrap();
        assert!(vt_p.max_abs() <= 1e-12);
    }

    #[test]
    fn principal_angles_match_hand_cases() {
        let e1 = Subspace::new(DenseMatrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap(), vec![1.0])
            .unwrap();
        let e2 = Subspace::new(DenseMatrix::new(3, 1, vec![0.0, 1.0, 0.0]).unwrap(), vec![1.0])
            .unwrap();
        let e12 = Subspace::new(
            DenseMatrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            vec![1.0, 1.0],
        )
        .unwrap();

        let same = principal_angles(&e12, &e12).unwrap();
        assert_eq!(same.len(), 2);
        assert!(same.iter().all(|t| *t <= 1e-12));

        let orth = principal_angles(&e1, &e2).unwrap();
        assert_eq!(orth.len(), 1);
        assert!(approx(orth[0], std::f64::consts::FRAC_PI_2, 1e-12));

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let diag = Subspace::new(DenseMatrix::new(3, 1, vec![s, s, 0.0]).unwrap(), vec![1.0])
            .unwrap();
        let quarter = principal_angles(&e1, &diag).unwrap();
        assert!(approx(quarter[0], std::f64::consts::FRAC_PI_4, 1e-12));
    }

    #[test]
    fn principal_angles_are_symmetric_and_resolve_tiny_angles() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = DenseMatrix::from_fn(3, 16, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .unwrap();
        let sub = top_k_subspace(&svd(&raw).unwrap(), 3).unwrap();
        let self_angles = principal_angles(&sub, &sub).unwrap();
        // The sine route certifies identity far below the acos(1 - eps) floor.
        assert!(self_angles.iter().all(|t| *t <= 1e-12));

        let other_raw = DenseMatrix::from_fn(2, 16, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .unwrap();
        let other = top_k_subspace(&svd(&other_raw).unwrap(), 2).unwrap();
        let ab = principal_angles(&sub, &other).unwrap();
        let ba = principal_angles(&other, &sub).unwrap();
        assert_eq!(ab.len(), 2);
        for (x, y) in ab.iter().zip(&ba) {
            assert!(approx(*x, *y, 1e-10));
        }
    }

    #[test]
    fn subspace_rejects_non_orthonormal_basis() {
        let skew = DenseMatrix::new(3, 2, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            Subspace::new(skew, vec![1.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }
}
