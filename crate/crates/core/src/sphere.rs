//! Harmonic-space dimensions and Gegenbauer polynomials on S^{d-1}.
//!
//! `P_k^{(d)}` is normalized so that `P_k(1) = 1`; for d = 3 these are the
//! Legendre polynomials and for d = 2 the Chebyshev polynomials `T_k`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::*;
use crate::points::UnitPoints;

/// Slack allowed on polynomial arguments before they are clamped to [-1, 1].
pub const DOMAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereConfig {
    pub dim: usize,
    pub max_degree: usize,
}

impl SphereConfig {
    pub fn new(dim: usize, max_degree: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { dim, max_degree })
    }
}

pub(crate) fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        Err(Error::InvalidDimension(dim))
    } else {
        Ok(())
    }
}

/// `C(n, r)` by the multiplicative formula; every partial product is an
/// integer so the division is exact.
fn binomial(n: u128, r: u128) -> Option<u128> {
    let r = r.min(n - r);
    let mut c: u128 = 1;
    for i in 1..=r {
        c = c.checked_mul(n - r + i)? / i;
    }
    Some(c)
}

/// Dimension `N(d, k)` of the space of degree-`k` spherical harmonics on S^{d-1}.
pub fn harmonic_dim(dim: usize, degree: usize) -> Result<u64> {
    check_dim(dim)?;
    if degree == 0 {
        return Ok(1);
    }
    let overflow = Error::Overflow { dim, degree };
    let (d, k) = (dim as u128, degree as u128);
    let c = binomial(k + d - 3, d - 2).ok_or(overflow)?;
    let n = c
        .checked_mul(2 * k + d - 2)
        .map(|v| v / k)
        .ok_or(Error::Overflow { dim, degree })?;
    u64::try_from(n).map_err(|_| Error::Overflow { dim, degree })
}

/// `m_ℓ = Σ_{k ≤ ℓ} N(d, k)`, the rank of a kernel spanning degrees `0..=ℓ`.
pub fn cumulative_dim(dim: usize, degree: usize) -> Result<u64> {
    (0..=degree).try_fold(0u64, |acc, k| {
        acc.checked_add(harmonic_dim(dim, k)?)
            .ok_or(Error::Overflow { dim, degree })
    })
}

/// `√N(d, ℓ)` for each `ℓ ≤ max_degree`, as floats.
pub fn sqrt_dims(dim: usize, max_degree: usize) -> Result<Vec<f64>> {
    (0..=max_degree)
        .map(|l| harmonic_dim(dim, l).map(|n| (n as f64).sqrt()))
        .collect()
}

/// Precomputed coefficients of the forward three-term recurrence
/// `P_{k+1} = ((2k+d-2)·t·P_k − k·P_{k-1}) / (k+d-2)`.
#[derive(Debug, Clone)]
pub struct Recurrence {
    dim: usize,
    // (alpha_k, beta_k) for k = 1..max_degree-1, so P_{k+1} = alpha·t·P_k − beta·P_{k-1}.
    coeffs: Vec<(f64, f64)>,
}

impl Recurrence {
    pub fn new(dim: usize, max_degree: usize) -> Result<Self> {
        check_dim(dim)?;
        let d = dim as f64;
        let coeffs = (1..max_degree)
            .map(|k| {
                let k = k as f64;
                let denom = k + d - 2.0;
                ((2.0 * k + d - 2.0) / denom, k / denom)
            })
            .collect();
        Ok(Self { dim, coeffs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.coeffs.len() + 1
    }

    /// Writes `P_0(t) ..= P_{out.len()-1}(t)` into `out`. `t` is clamped to [-1, 1].
    #[inline]
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(-1.0, 1.0);
        let Some(first) = out.first_mut() else {
            return;
        };
        *first = 1.0;
        if out.len() == 1 {
            return;
        }
        out[1] = t;
        debug_assert!(out.len() <= self.coeffs.len() + 2);
        for k in 1..out.len() - 1 {
            let (alpha, beta) = self.coeffs[k - 1];
            out[k + 1] = alpha * t * out[k] - beta * out[k - 1];
        }
    }

    /// `Σ_ℓ weights[ℓ]·P_ℓ(t)` without allocating.
    #[inline]
    pub fn weighted_sum(&self, t: f64, weights: &[f64]) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        let Some(&w0) = weights.first() else {
            return 0.0;
        };
        let mut acc = w0;
        if weights.len() == 1 {
            return acc;
        }
        let (mut prev, mut cur) = (1.0, t);
        acc += weights[1] * cur;
        for (k, &w) in weights.iter().enumerate().skip(2) {
            let (alpha, beta) = self.coeffs[k - 2];
            let next = alpha * t * cur - beta * prev;
            prev = cur;
            cur = next;
            acc += w * cur;
        }
        acc
    }
}

fn check_arg(t: f64, index: usize) -> Result<()> {
    if t.is_nan() || t.abs() > 1.0 + DOMAIN_TOL {
        Err(Error::OutOfDomain { value: t, index })
    } else {
        Ok(())
    }
}

/// `[P_0(t), ..., P_L(t)]` in dimension `dim`, in O(L) work.
pub fn gegenbauer_all(t: f64, dim: usize, max_degree: usize) -> Result<Vec<f64>> {
    check_arg(t, 0)?;
    let rec = Recurrence::new(dim, max_degree)?;
    let mut out = vec![0.0; max_degree + 1];
    rec.eval_into(t, &mut out);
    Ok(out)
}

/// Polynomial values `P_0..=P_L` at a list of arguments, stored degree-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GegenbauerTable {
    dim: usize,
    max_degree: usize,
    count: usize,
    values: Vec<f64>,
}

impl GegenbauerTable {
    pub fn new(args: &[f64], dim: usize, max_degree: usize) -> Result<Self> {
        for (i, &t) in args.iter().enumerate() {
            check_arg(t, i)?;
        }
        let rec = Recurrence::new(dim, max_degree)?;
        let count = args.len();
        let mut values = vec![0.0; (max_degree + 1) * count];
        let mut buf = vec![0.0; max_degree + 1];
        for (i, &t) in args.iter().enumerate() {
            rec.eval_into(t, &mut buf);
            for (l, &v) in buf.iter().enumerate() {
                values[l * count + i] = v;
            }
        }
        Ok(Self {
            dim,
            max_degree,
            count,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Values of `P_degree` at every argument.
    pub fn degree(&self, degree: usize) -> &[f64] {
        &self.values[degree * self.count..(degree + 1) * self.count]
    }
}

/// Applies `gegenbauer_all` entrywise: `out[ℓ][(i, j)] = P_ℓ(gram[(i, j)])`.
pub fn gegenbauer_matrix(gram: &DMatrix<f64>, dim: usize, max_degree: usize) -> Result<Vec<DMatrix<f64>>> {
    let (rows, cols) = gram.shape();
    if let Some((index, &value)) = gram
        .iter()
        .enumerate()
        .find(|(_, t)| t.is_nan() || t.abs() > 1.0 + DOMAIN_TOL)
    {
        return Err(Error::OutOfDomain { value, index });
    }
    let rec = Recurrence::new(dim, max_degree)?;
    let per_column: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map(|j| {
            let mut buf = vec![0.0; max_degree + 1];
            let mut col = vec![0.0; (max_degree + 1) * rows];
            for i in 0..rows {
                rec.eval_into(gram[(i, j)], &mut buf);
                for (l, &v) in buf.iter().enumerate() {
                    col[l * rows + i] = v;
                }
            }
            col
        })
        .collect();
    Ok((0..=max_degree)
        .map(|l| DMatrix::from_fn(rows, cols, |i, j| per_column[j][l * rows + i]))
        .collect())
}

/// `count` points drawn uniformly from S^{dim-1}; see [`UnitPoints::sample`].
pub fn sample_sphere(count: usize, dim: usize, seed: u64) -> Result<UnitPoints> {
    UnitPoints::sample(count, dim, seed)
}
