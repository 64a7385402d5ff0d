use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::*;
use crate::seed;

/// Tolerance on row norms accepted from callers.
pub const UNIT_TOL: f64 = 1e-10;

/// Rows sampled per independently seeded block in [`UnitPoints::sample`].
const SAMPLE_BLOCK: usize = 512;

/// Row-major matrix whose rows are unit vectors in R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitPoints {
    dim: usize,
    data: Vec<f64>,
}

impl UnitPoints {
    /// Validates that `data` holds whole rows of length `dim`, each of unit norm.
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                context: "row-major point data",
                expected: dim * (data.len() / dim + 1),
                found: data.len(),
            });
        }
        for (row, x) in data.chunks_exact(dim).enumerate() {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitRow { row, norm });
            }
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("point set"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "point rows",
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, dim)
    }

    /// Normalizes each row of `data`; rows of zero norm are rejected.
    pub fn normalized(mut data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        for (row, x) in data.chunks_exact_mut(dim).enumerate() {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonUnitRow { row, norm });
            }
            x.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(data, dim)
    }

    /// Draws `count` points uniformly on the unit sphere in R^`dim`.
    ///
    /// Rows come in blocks of 512, each block seeded from `split(seed, block)`,
    /// so the output does not depend on the number of worker threads.
    pub fn sample(count: usize, dim: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Empty("sample count"));
        }
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        let mut data = vec![0.0; count * dim];
        data.par_chunks_mut(SAMPLE_BLOCK * dim)
            .enumerate()
            .for_each(|(block, chunk)| {
                let mut rng = seed::rng(seed::split(seed, block as u64));
                for x in chunk.chunks_exact_mut(dim) {
                    fill_unit(x, &mut rng);
                }
            });
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// True when two rows are bitwise equal. Sorting makes this O(n log n).
    pub fn has_duplicate_rows(&self) -> bool {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| cmp_rows(self.row(a), self.row(b)));
        idx.windows(2)
            .any(|w| cmp_rows(self.row(w[0]), self.row(w[1])).is_eq())
    }

    #[cfg(test)]
    pub(crate) fn from_raw(data: Vec<f64>, dim: usize) -> Self {
        debug_assert!(data.len() % dim == 0);
        Self { dim, data }
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Overwrites `x` with a uniform draw from the sphere. A zero-norm Gaussian
/// draw has probability zero; it is redrawn.
pub(crate) fn fill_unit<R: rand::Rng>(x: &mut [f64], rng: &mut R) {
    loop {
        for v in x.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            x.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Validates that a single vector is a unit vector.
pub(crate) fn check_unit(x: &[f64], row: usize) -> Result<()> {
    let norm = dot(x, x).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitRow { row, norm });
    }
    Ok(())
}

pub(crate) fn check_same_dim(a: &UnitPoints, b: &UnitPoints, context: &'static str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}
