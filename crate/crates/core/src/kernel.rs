//! Channel-attention activation, the population kernel `K`, the width-`m`
//! empirical kernel `K̂`, and gram-matrix spectra.
//!
//! All kernels are assembled from dot products through the addition theorem
//! `Σ_j Y_ℓj(x)·Y_ℓj(x') = N(d,ℓ)·P_ℓ(⟨x,x'⟩)`; no explicit harmonic basis is
//! ever formed.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::*;
use crate::points::{check_same_dim, check_unit, dot, UnitPoints};
use crate::sphere::{self, Recurrence};

/// Relative tolerance below which negative eigenvalues are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-8;
/// Relative asymmetry accepted by [`gram_spectrum`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Channel weights `τ_0..=τ_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn new(tau: Vec<f64>) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::Empty("attention weights"));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("attention weights"));
        }
        Ok(Self(tau))
    }

    pub fn ones(max_degree: usize) -> Self {
        Self(vec![1.0; max_degree + 1])
    }

    pub fn zeros(max_degree: usize) -> Self {
        Self(vec![0.0; max_degree + 1])
    }

    /// `τ_ℓ = √N(d,ℓ)` where `mask[ℓ]`, zero elsewhere.
    pub fn finalized(dim: usize, mask: &[bool]) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Empty("channel mask"));
        }
        let roots = sphere::sqrt_dims(dim, mask.len() - 1)?;
        Ok(Self(
            mask.iter()
                .zip(roots)
                .map(|(&on, r)| if on { r } else { 0.0 })
                .collect(),
        ))
    }

    /// Finalized weights with exactly the channels `0..=ell_hat` switched on.
    pub fn oracle(dim: usize, ell_hat: usize, max_degree: usize) -> Result<Self> {
        if ell_hat > max_degree {
            return Err(Error::InvalidParameter(format!(
                "selected degree {ell_hat} exceeds max degree {max_degree}"
            )));
        }
        let mask: Vec<bool> = (0..=max_degree).map(|l| l <= ell_hat).collect();
        Self::finalized(dim, &mask)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max_degree(&self) -> usize {
        self.0.len() - 1
    }

    /// Highest degree with a nonzero weight.
    pub fn highest_active(&self) -> Option<usize> {
        self.0.iter().rposition(|&t| t != 0.0)
    }

    /// Weights with trailing zero channels dropped (at least one entry kept).
    pub(crate) fn trimmed(&self) -> &[f64] {
        &self.0[..self.highest_active().map_or(1, |l| l + 1)]
    }

    /// Upper bound on the rank of any kernel built from these weights:
    /// `Σ N(d,ℓ)` over active channels.
    pub fn rank_bound(&self, dim: usize) -> Result<u64> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0.0)
            .try_fold(0u64, |acc, (l, _)| Ok(acc + sphere::harmonic_dim(dim, l)?))
    }
}

/// Random first-layer weights `q_1..q_m`, fixed during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstLayerDirections {
    q: UnitPoints,
}

impl FirstLayerDirections {
    pub fn new(q: UnitPoints) -> Self {
        Self { q }
    }

    pub fn sample(width: usize, dim: usize, seed: u64) -> Result<Self> {
        if width == 0 {
            return Err(Error::Empty("first-layer width"));
        }
        Ok(Self {
            q: UnitPoints::sample(width, dim, seed)?,
        })
    }

    pub fn width(&self) -> usize {
        self.q.len()
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn points(&self) -> &UnitPoints {
        &self.q
    }
}

/// `σ_τ(x, x') = Σ_ℓ τ_ℓ·P_ℓ(⟨x, x'⟩)`.
pub fn activation(x: &[f64], x_prime: &[f64], tau: &AttentionWeights, dim: usize) -> Result<f64> {
    if x.len() != dim || x_prime.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "activation inputs",
            expected: dim,
            found: if x.len() != dim { x.len() } else { x_prime.len() },
        });
    }
    check_unit(x, 0)?;
    check_unit(x_prime, 1)?;
    let rec = Recurrence::new(dim, tau.max_degree())?;
    Ok(rec.weighted_sum(dot(x, x_prime), tau.as_slice()))
}

/// Matrix of pairwise inner products `⟨X_i, X'_j⟩`.
pub fn dot_products(x: &UnitPoints, x_prime: &UnitPoints) -> Result<DMatrix<f64>> {
    check_same_dim(x, x_prime, "dot products")?;
    let cols: Vec<Vec<f64>> = (0..x_prime.len())
        .into_par_iter()
        .map(|j| {
            let b = x_prime.row(j);
            x.rows().map(|a| dot(a, b)).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(x.len(), x_prime.len(), |i, j| cols[j][i]))
}

/// Builds an `n × n'` matrix from an entry function; computes one triangle
/// and mirrors it when `symmetric`.
fn assemble<F>(rows: usize, cols: usize, symmetric: bool, entry: F) -> DMatrix<f64>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let columns: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map(|j| {
            let upto = if symmetric { j + 1 } else { rows };
            (0..upto).map(|i| entry(i, j)).collect()
        })
        .collect();
    let mut out = DMatrix::zeros(rows, cols);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[(i, j)] = v;
            if symmetric {
                out[(j, i)] = v;
            }
        }
    }
    out
}

/// Population gram `K(X_i, X'_j) = Σ_{ℓ ≤ ℓ̂} P_ℓ(⟨X_i, X'_j⟩)`.
///
/// Passing the same point set twice yields an exactly symmetric matrix.
pub fn population_gram(x: &UnitPoints, x_prime: &UnitPoints, ell_hat: usize) -> Result<DMatrix<f64>> {
    check_same_dim(x, x_prime, "population gram")?;
    let rec = Recurrence::new(x.dim(), ell_hat)?;
    let weights = vec![1.0; ell_hat + 1];
    let symmetric = std::ptr::eq(x, x_prime);
    Ok(assemble(x.len(), x_prime.len(), symmetric, |i, j| {
        rec.weighted_sum(dot(x.row(i), x_prime.row(j)), &weights)
    }))
}

/// Row-major `n × m` matrix of activations `σ_τ(X_i, q_r)`.
pub(crate) fn activation_rows(x: &UnitPoints, q: &FirstLayerDirections, tau: &AttentionWeights) -> Result<Vec<f64>> {
    check_same_dim(x, q.points(), "activation matrix")?;
    let weights = tau.trimmed();
    let rec = Recurrence::new(x.dim(), weights.len().saturating_sub(1))?;
    let m = q.width();
    let mut out = vec![0.0; x.len() * m];
    out.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for (r, v) in row.iter_mut().enumerate() {
            *v = rec.weighted_sum(dot(xi, q.points().row(r)), weights);
        }
    });
    Ok(out)
}

/// Empirical gram `K̂(X_i, X'_j) = (1/m)·Σ_r σ_τ(X_i, q_r)·σ_τ(q_r, X'_j)`.
pub fn empirical_gram(
    x: &UnitPoints,
    x_prime: &UnitPoints,
    q: &FirstLayerDirections,
    tau: &AttentionWeights,
) -> Result<DMatrix<f64>> {
    let m = q.width();
    if m == 0 {
        return Err(Error::Empty("first-layer width"));
    }
    let symmetric = std::ptr::eq(x, x_prime);
    let a = activation_rows(x, q, tau)?;
    let b = if symmetric {
        None
    } else {
        Some(activation_rows(x_prime, q, tau)?)
    };
    let b = b.as_deref().unwrap_or(&a);
    let inv_m = 1.0 / m as f64;
    Ok(assemble(x.len(), x_prime.len(), symmetric, |i, j| {
        dot(&a[i * m..(i + 1) * m], &b[j * m..(j + 1) * m]) * inv_m
    }))
}

/// `K̂(left_i, right_i)` for each aligned pair of rows.
pub fn empirical_kernel_pairs(
    left: &UnitPoints,
    right: &UnitPoints,
    q: &FirstLayerDirections,
    tau: &AttentionWeights,
) -> Result<Vec<f64>> {
    if left.len() != right.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel pairs",
            expected: left.len(),
            found: right.len(),
        });
    }
    let m = q.width();
    let a = activation_rows(left, q, tau)?;
    let b = activation_rows(right, q, tau)?;
    Ok((0..left.len())
        .map(|i| dot(&a[i * m..(i + 1) * m], &b[i * m..(i + 1) * m]) / m as f64)
        .collect())
}

/// `K(left_i, right_i)` for each aligned pair of rows.
pub fn population_kernel_pairs(left: &UnitPoints, right: &UnitPoints, ell_hat: usize) -> Result<Vec<f64>> {
    check_same_dim(left, right, "kernel pairs")?;
    if left.len() != right.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel pairs",
            expected: left.len(),
            found: right.len(),
        });
    }
    let rec = Recurrence::new(left.dim(), ell_hat)?;
    let w = vec![1.0; ell_hat + 1];
    Ok(left
        .rows()
        .zip(right.rows())
        .map(|(a, b)| rec.weighted_sum(dot(a, b), &w))
        .collect())
}

/// `K / n`.
pub fn normalized_gram(k: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Empty("normalization count"));
    }
    if !k.is_square() {
        return Err(Error::DimensionMismatch {
            context: "normalized gram (square)",
            expected: k.nrows(),
            found: k.ncols(),
        });
    }
    Ok(k / n as f64)
}

/// Largest `|A_ij − A_ji|` relative to the largest entry magnitude.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Eigen-decomposition of a symmetric gram, eigenvalues non-increasing.
#[derive(Debug, Clone)]
pub struct GramEigen {
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector of `values[i]`.
    pub vectors: DMatrix<f64>,
}

pub fn gram_eigen(k_n: &DMatrix<f64>) -> Result<GramEigen> {
    if !k_n.is_square() {
        return Err(Error::DimensionMismatch {
            context: "gram spectrum (square)",
            expected: k_n.nrows(),
            found: k_n.ncols(),
        });
    }
    if k_n.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gram matrix"));
    }
    let asym = relative_asymmetry(k_n);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (k_n + k_n.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda_max = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let values = order
        .iter()
        .map(|&i| {
            let v = eig.eigenvalues[i];
            if v < 0.0 && v >= -EIGEN_CLAMP * lambda_max {
                0.0
            } else {
                v
            }
        })
        .collect();
    let vectors = DMatrix::from_fn(k_n.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(GramEigen { values, vectors })
}

/// Non-increasing eigenvalues of a symmetric gram, tiny negatives clamped to 0.
pub fn gram_spectrum(k_n: &DMatrix<f64>) -> Result<Vec<f64>> {
    gram_eigen(k_n).map(|e| e.values)
}

/// The empirical and population grams of one point set with their spectrum.
#[derive(Debug, Clone)]
pub struct GramSet {
    pub k_hat: DMatrix<f64>,
    pub k_pop: DMatrix<f64>,
    /// `K_pop / n`.
    pub k_n: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl GramSet {
    pub fn build(x: &UnitPoints, q: &FirstLayerDirections, tau: &AttentionWeights, ell_hat: usize) -> Result<Self> {
        let k_hat = empirical_gram(x, x, q, tau)?;
        let k_pop = population_gram(x, x, ell_hat)?;
        let k_n = normalized_gram(&k_pop, x.len())?;
        let eigenvalues = gram_spectrum(&k_n)?;
        Ok(Self {
            k_hat,
            k_pop,
            k_n,
            eigenvalues,
        })
    }
}
