//! Paired features from a planted two-factor model.
//!
//! Each sample pair shares a "truthful" latent `f_hat` but only the
//! positive side receives a "spurious" latent `f_tilde`:
//!
//! ```text
//! x_plus  = f_hat B_hat + f_tilde B_tilde + u_plus
//! x_minus = f_hat B_hat               + u_minus
//! ```
//!
//! so the paired difference lies in the row space of `B_tilde` up to the
//! independent noise `u_plus - u_minus`. This gives a ground-truth subspace
//! against which recovery can be scored exactly.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, svd, top_k_subspace, DenseMatrix, Subspace};

/// Paired feature matrices captured at one layer: row `i` of `x_plus` and
/// row `i` of `x_minus` belong to the same underlying sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatureSet {
    pub layer: usize,
    pub x_plus: DenseMatrix,
    pub x_minus: DenseMatrix,
}

impl PairedFeatureSet {
    /// Validates that both sides have identical shape.
    pub fn new(layer: usize, x_plus: DenseMatrix, x_minus: DenseMatrix) -> Result<Self> {
        if x_plus.rows() != x_minus.rows() || x_plus.cols() != x_minus.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", x_plus.rows(), x_plus.cols()),
                got: format!("{}x{}", x_minus.rows(), x_minus.cols()),
            });
        }
        Ok(Self {
            layer,
            x_plus,
            x_minus,
        })
    }

    /// Number of sample pairs.
    pub fn len(&self) -> usize {
        self.x_plus.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.x_plus.cols()
    }
}

/// Specification of the planted factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelSpec {
    ambient_dim: usize,
    b_hat: DenseMatrix,
    b_tilde: DenseMatrix,
    latent_scale: f64,
    noise_scale: f64,
}

impl FactorModelSpec {
    /// Validates loading shapes, non-negative finite scales, and joint
    /// full row rank of the stacked loadings (smallest singular value of
    /// `[B_hat; B_tilde]` above `1e-8`).
    pub fn new(
        b_hat: DenseMatrix,
        b_tilde: DenseMatrix,
        latent_scale: f64,
        noise_scale: f64,
    ) -> Result<Self> {
        let d = b_hat.cols();
        if b_tilde.cols() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("loadings with {d} columns"),
                got: format!("{} columns", b_tilde.cols()),
            });
        }
        if !(latent_scale.is_finite() && noise_scale.is_finite())
            || latent_scale < 0.0
            || noise_scale < 0.0
        {
            return Err(Error::InvalidSpec(
                "scales must be finite and non-negative".into(),
            ));
        }
        let stacked = stack_rows(&b_hat, &b_tilde)?;
        let spectrum = svd(&stacked)?.sigma;
        let smallest = spectrum.last().copied().unwrap_or(0.0);
        if stacked.rows() > d || smallest <= 1e-8 {
            return Err(Error::InvalidSpec(format!(
                "stacked loadings are rank-deficient (smallest singular value {smallest:.3e})"
            )));
        }
        Ok(Self {
            ambient_dim: d,
            b_hat,
            b_tilde,
            latent_scale,
            noise_scale,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn k_hat(&self) -> usize {
        self.b_hat.rows()
    }

    pub fn k_tilde(&self) -> usize {
        self.b_tilde.rows()
    }

    pub fn b_hat(&self) -> &DenseMatrix {
        &self.b_hat
    }

    pub fn b_tilde(&self) -> &DenseMatrix {
        &self.b_tilde
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    /// Orthonormal basis of the planted spurious row space.
    pub fn true_subspace(&self) -> Result<Subspace> {
        orthonormal_rowspace(&self.b_tilde)
    }
}

/// Draws `n` paired samples from the factor model. The draw order is fixed
/// per sample (`f_hat`, `f_tilde`, `u_plus`, `u_minus`, each row-major), so
/// a `(spec, n, seed)` triple always produces bitwise-identical features.
///
/// Requires `n >= k_tilde` so the paired difference can reach the planted
/// rank.
pub fn generate_factor_pairs(
    spec: &FactorModelSpec,
    n: usize,
    seed: u64,
) -> Result<PairedFeatureSet> {
    if n < spec.k_tilde() {
        return Err(Error::InvalidSpec(format!(
            "need at least k_tilde = {} sample pairs, got {n}",
            spec.k_tilde()
        )));
    }
    let d = spec.ambient_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_plus = DenseMatrix::zeros(n, d)?;
    let mut x_minus = DenseMatrix::zeros(n, d)?;
    for i in 0..n {
        let f_hat = gaussian_vec(&mut rng, spec.k_hat(), spec.latent_scale);
        let f_tilde = gaussian_vec(&mut rng, spec.k_tilde(), spec.latent_scale);
        let u_plus = gaussian_vec(&mut rng, d, spec.noise_scale);
        let u_minus = gaussian_vec(&mut rng, d, spec.noise_scale);
        let shared = spec.b_hat.vec_mat(&f_hat)?;
        let spurious = spec.b_tilde.vec_mat(&f_tilde)?;
        for j in 0..d {
            x_plus.set(i, j, shared[j] + spurious[j] + u_plus[j]);
            x_minus.set(i, j, shared[j] + u_minus[j]);
        }
    }
    PairedFeatureSet::new(0, x_plus, x_minus)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn stack_rows(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    DenseMatrix::new(a.rows() + b.rows(), a.cols(), data)
}

/// Orthonormal basis of the row space of `m` at its admissible rank.
pub fn orthonormal_rowspace(m: &DenseMatrix) -> Result<Subspace> {
    let decomp = svd(m)?;
    let rank = decomp.admissible_rank();
    if rank == 0 {
        return Err(Error::RankDeficient {
            requested: 1,
            admissible: 0,
        });
    }
    top_k_subspace(&decomp, rank)
}

/// A uniformly random k-dimensional subspace of `R^dim`, built by
/// orthonormalizing Gaussian directions (re-orthogonalized for stability).
/// `sigma` is set to ones.
pub fn random_subspace(dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Subspace> {
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!(
            "subspace rank must be in 1..={dim}, got {k}"
        )));
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
    while columns.len() < k {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for _ in 0..2 {
            for q in &columns {
                let c = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        for vi in &mut v {
            *vi /= n;
        }
        columns.push(v);
    }
    let basis = DenseMatrix::from_fn(dim, k, |i, j| columns[j][i])?;
    Subspace::new(basis, vec![1.0; k])
}

/// A uniformly random unit vector in `R^dim`.
pub fn random_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = norm(&v);
        if n >= 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
