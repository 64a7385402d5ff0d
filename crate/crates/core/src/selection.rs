//! Stage one: one-step gradient updates of the second layer and the channel
//! weights, then thresholding into finalized attention weights.
//!
//! Both updates reduce to the per-direction degree projections
//! `v_r[ℓ] = Σ_i y_i·P_ℓ(⟨x_i, q_r⟩)`:
//!
//! ```text
//! a(1)_r = (1/(n√m)) · Σ_ℓ N(d,ℓ)·v_r[ℓ]
//! τ_ℓ(1) = (1/(n√m)) · N(d,ℓ) · Σ_r v_r[ℓ]·a(1)_r
//! ```
//!
//! The `n × m` Gegenbauer stack is never materialized. Each `v_r` is a
//! sequential sum over samples and the sum over `r` runs in index order, so
//! results are bit-identical for any thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AttentionWeights, FirstLayerDirections};
use crate::par::*;
use crate::points::dot;
use crate::sphere::{self, Recurrence};
use crate::target::LabeledDataset;

/// Row-major `m × (L+1)` matrix of degree projections `v_r[ℓ]`.
fn degree_projections(data: &LabeledDataset, q: &FirstLayerDirections, max_degree: usize) -> Result<Vec<f64>> {
    let n = data.len();
    let m = q.width();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    if m == 0 {
        return Err(Error::Empty("first-layer width"));
    }
    if data.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            context: "selection inputs",
            expected: data.dim(),
            found: q.dim(),
        });
    }
    let rec = Recurrence::new(q.dim(), max_degree)?;
    let width = max_degree + 1;
    let mut v = vec![0.0; m * width];
    v.par_chunks_mut(width).enumerate().for_each(|(r, out)| {
        let qr = q.points().row(r);
        let mut buf = vec![0.0; width];
        for (xi, &yi) in data.features.rows().zip(&data.y) {
            rec.eval_into(dot(xi, qr), &mut buf);
            for (o, p) in out.iter_mut().zip(&buf) {
                *o += yi * p;
            }
        }
    });
    Ok(v)
}

fn prefactor(n: usize, m: usize) -> f64 {
    1.0 / (n as f64 * (m as f64).sqrt())
}

fn a_from_projections(v: &[f64], dims: &[f64], n: usize, m: usize) -> Vec<f64> {
    let c = prefactor(n, m);
    v.chunks_exact(dims.len())
        .map(|vr| c * vr.iter().zip(dims).map(|(p, nd)| nd * p).sum::<f64>())
        .collect()
}

fn tau_from_projections(v: &[f64], a1: &[f64], dims: &[f64], n: usize, m: usize) -> Vec<f64> {
    let c = prefactor(n, m);
    let mut acc = vec![0.0; dims.len()];
    for (vr, &ar) in v.chunks_exact(dims.len()).zip(a1) {
        for (s, p) in acc.iter_mut().zip(vr) {
            *s += p * ar;
        }
    }
    acc.iter().zip(dims).map(|(s, nd)| c * nd * s).collect()
}

fn harmonic_dims_f64(dim: usize, max_degree: usize) -> Result<Vec<f64>> {
    (0..=max_degree)
        .map(|l| sphere::harmonic_dim(dim, l).map(|n| n as f64))
        .collect()
}

/// Second-layer weights after one gradient step from zero with channel weights `N(d,ℓ)`.
pub fn stage1_a(data: &LabeledDataset, q: &FirstLayerDirections, max_degree: usize) -> Result<Vec<f64>> {
    let v = degree_projections(data, q, max_degree)?;
    let dims = harmonic_dims_f64(q.dim(), max_degree)?;
    Ok(a_from_projections(&v, &dims, data.len(), q.width()))
}

/// Raw channel weights `τ_ℓ(1)` given the stage-one second-layer weights.
pub fn stage1_tau(data: &LabeledDataset, q: &FirstLayerDirections, a1: &[f64], max_degree: usize) -> Result<Vec<f64>> {
    if a1.len() != q.width() {
        return Err(Error::DimensionMismatch {
            context: "stage-one weights",
            expected: q.width(),
            found: a1.len(),
        });
    }
    let v = degree_projections(data, q, max_degree)?;
    let dims = harmonic_dims_f64(q.dim(), max_degree)?;
    Ok(tau_from_projections(&v, a1, &dims, data.len(), q.width()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub tau_raw: Vec<f64>,
    pub mask: Vec<bool>,
    pub tau_final: AttentionWeights,
    pub ell_hat: usize,
    pub epsilon0: f64,
}

#[derive(Serialize, Deserialize)]
struct SelectionWire {
    tau_raw: Vec<f64>,
    mask: Vec<bool>,
    ell_hat: usize,
    epsilon0: f64,
}

impl SelectionResult {
    /// True when every channel below `ell_hat` is also selected.
    pub fn is_contiguous(&self) -> bool {
        self.mask[..=self.ell_hat].iter().all(|&b| b)
    }

    /// Smallest raw weight among channels `0..=ell0` minus the largest
    /// magnitude among channels above `ell0`. Positive when a threshold
    /// separating the two groups exists.
    pub fn gap(&self, ell0: usize) -> f64 {
        raw_gap(&self.tau_raw, ell0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SelectionWire {
            tau_raw: self.tau_raw.clone(),
            mask: self.mask.clone(),
            ell_hat: self.ell_hat,
            epsilon0: self.epsilon0,
        })
        .expect("plain data serializes")
    }

    /// Rebuilds a result from its JSON form; `tau_final` is recomputed from the mask.
    pub fn from_json(text: &str, dim: usize) -> Result<Self> {
        let w: SelectionWire =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("selection JSON: {e}")))?;
        let tau_final = AttentionWeights::finalized(dim, &w.mask)?;
        Ok(Self {
            tau_raw: w.tau_raw,
            mask: w.mask,
            tau_final,
            ell_hat: w.ell_hat,
            epsilon0: w.epsilon0,
        })
    }
}

/// `min_{ℓ ≤ ℓ₀} τ_ℓ − max_{ℓ > ℓ₀} |τ_ℓ|`; when there are no redundant channels the
/// second term is zero.
pub fn raw_gap(tau_raw: &[f64], ell0: usize) -> f64 {
    let informative = tau_raw[..=ell0.min(tau_raw.len() - 1)]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let redundant = tau_raw
        .get(ell0 + 1..)
        .unwrap_or(&[])
        .iter()
        .map(|t| t.abs())
        .fold(0.0, f64::max);
    informative - redundant
}

/// Keeps channels with `τ_ℓ(1) ≥ 2ε₀` and assigns them weight `√N(d,ℓ)`.
pub fn threshold(tau_raw: &[f64], epsilon0: f64, dim: usize) -> Result<SelectionResult> {
    if !(epsilon0 > 0.0) || !epsilon0.is_finite() {
        return Err(Error::InvalidParameter(format!("threshold epsilon0 = {epsilon0}")));
    }
    if tau_raw.is_empty() {
        return Err(Error::Empty("raw channel weights"));
    }
    let mask: Vec<bool> = tau_raw.iter().map(|&t| t >= 2.0 * epsilon0).collect();
    let Some(ell_hat) = mask.iter().rposition(|&b| b) else {
        return Err(Error::EmptySelection {
            tau_raw: tau_raw.to_vec(),
        });
    };
    let tau_final = AttentionWeights::finalized(dim, &mask)?;
    let result = SelectionResult {
        tau_raw: tau_raw.to_vec(),
        mask,
        tau_final,
        ell_hat,
        epsilon0,
    };
    if !result.is_contiguous() {
        log::warn!(
            "non-contiguous channel selection {:?}; using ell_hat = {ell_hat}",
            result.mask
        );
    }
    Ok(result)
}

/// One pass computing the raw weights `τ(1)` (and `a(1)` along the way).
pub fn raw_weights(data: &LabeledDataset, q: &FirstLayerDirections, max_degree: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = degree_projections(data, q, max_degree)?;
    let dims = harmonic_dims_f64(q.dim(), max_degree)?;
    let a1 = a_from_projections(&v, &dims, data.len(), q.width());
    let tau = tau_from_projections(&v, &a1, &dims, data.len(), q.width());
    Ok((a1, tau))
}

/// Full stage one: `a(1)`, then `τ(1)`, then thresholding.
pub fn select_channels(
    data: &LabeledDataset,
    q: &FirstLayerDirections,
    max_degree: usize,
    epsilon0: f64,
) -> Result<SelectionResult> {
    let (_, tau) = raw_weights(data, q, max_degree)?;
    threshold(&tau, epsilon0, q.dim())
}
