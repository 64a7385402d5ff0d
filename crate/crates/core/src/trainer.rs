//! Stage two: full-batch gradient descent on the second-layer weights with
//! the first layer and the channel weights frozen.
//!
//! With `Z[r][i] = σ_τ(x_i, q_r)/√m` the network output on the training set is
//! `ŷ = Zᵀa`, the loss is `‖ŷ − y‖²/(2n)` and one step reads
//! `a ← a − (η/n)·Z·(ŷ − y)`. Because the model is linear in `a`, the
//! residual obeys `u(t+1) = (I − η·K̂_n)·u(t)` exactly, with `K̂_n = ZᵀZ/n`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, AttentionWeights, FirstLayerDirections};
use crate::par::*;
use crate::points::{check_same_dim, dot, UnitPoints};
use crate::seed;
use crate::sphere::Recurrence;
use crate::target::LabeledDataset;

/// `t` up to which [`closed_form_residual`] multiplies repeatedly.
pub const POWER_STEPS_MAX: usize = 10_000;
/// Growth of the residual norm across [`DIVERGENCE_WINDOW`] steps that aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_WINDOW: usize = 5;
/// Accepted relative Frobenius error of the low-rank factorization of `Z`.
const FACTOR_TOL: f64 = 1e-10;
const FACTOR_OVERSAMPLE: usize = 8;
const COLUMN_BLOCK: usize = 256;

/// Row-major `m × n` matrix `Z[r][i] = σ_τ(x_i, q_r)/√m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    m: usize,
    n: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.m
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, i: usize) -> f64 {
        self.data[r * self.n + i]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n..(r + 1) * self.n]
    }

    /// `Zᵀ·a`, the network output on the training set.
    pub fn apply_transpose(&self, a: &[f64]) -> Vec<f64> {
        assert_eq!(a.len(), self.m);
        let mut out = vec![0.0; self.n];
        out.par_chunks_mut(COLUMN_BLOCK).enumerate().for_each(|(blk, chunk)| {
            let c0 = blk * COLUMN_BLOCK;
            for (r, &ar) in a.iter().enumerate() {
                let zr = &self.data[r * self.n + c0..r * self.n + c0 + chunk.len()];
                for (o, z) in chunk.iter_mut().zip(zr) {
                    *o += ar * z;
                }
            }
        });
        out
    }

    /// `Z·u`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n);
        (0..self.m).into_par_iter().map(|r| dot(self.row(r), u)).collect()
    }

    /// `ZᵀZ`, which equals the empirical gram `K̂` on the training set.
    pub fn gram(&self) -> DMatrix<f64> {
        let z = DMatrix::from_row_slice(self.m, self.n, &self.data);
        let k = z.transpose() * &z;
        (&k + k.transpose()) * 0.5
    }
}

/// Builds `Z` for the training features `x`.
pub fn feature_matrix(x: &UnitPoints, q: &FirstLayerDirections, tau: &AttentionWeights) -> Result<FeatureMatrix> {
    check_same_dim(x, q.points(), "feature matrix")?;
    let m = q.width();
    let n = x.len();
    if m == 0 {
        return Err(Error::Empty("first-layer width"));
    }
    let weights = tau.trimmed();
    let rec = Recurrence::new(x.dim(), weights.len() - 1)?;
    let scale = 1.0 / (m as f64).sqrt();
    let mut data = vec![0.0; m * n];
    data.par_chunks_mut(n.max(1)).enumerate().for_each(|(r, row)| {
        let qr = q.points().row(r);
        for (v, xi) in row.iter_mut().zip(x.rows()) {
            *v = rec.weighted_sum(dot(xi, qr), weights) * scale;
        }
    });
    Ok(FeatureMatrix { m, n, data })
}

/// Network output `f(a, x) = (1/√m)·Σ_r a_r·σ_τ(x, q_r)` at each row of `x`.
pub fn predict(a: &[f64], x: &UnitPoints, q: &FirstLayerDirections, tau: &AttentionWeights) -> Result<Vec<f64>> {
    check_same_dim(x, q.points(), "prediction")?;
    if a.len() != q.width() {
        return Err(Error::DimensionMismatch {
            context: "second-layer weights",
            expected: q.width(),
            found: a.len(),
        });
    }
    let weights = tau.trimmed();
    let rec = Recurrence::new(x.dim(), weights.len() - 1)?;
    let scale = 1.0 / (q.width() as f64).sqrt();
    Ok((0..x.len())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let s: f64 = q
                .points()
                .rows()
                .zip(a)
                .map(|(qr, ar)| ar * rec.weighted_sum(dot(xi, qr), weights))
                .sum();
            s * scale
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub a: Vec<f64>,
    pub t: usize,
    pub eta: f64,
    z: FeatureMatrix,
    y_hat: Vec<f64>,
}

impl TrainerState {
    /// The zero initialization `a(0) = 0`, hence `ŷ(0) = 0`.
    pub fn new(z: FeatureMatrix, eta: f64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidParameter(format!("learning rate {eta}")));
        }
        Ok(Self {
            a: vec![0.0; z.m],
            t: 0,
            eta,
            y_hat: vec![0.0; z.n],
            z,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.z
    }

    /// `ŷ(t) = Zᵀa(t)`.
    pub fn predictions(&self) -> &[f64] {
        &self.y_hat
    }

    /// Training loss `‖ŷ − y‖²/(2n)`.
    pub fn loss(&self, y: &[f64]) -> f64 {
        sq_dist(&self.y_hat, y) / (2.0 * y.len() as f64)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One exact gradient step on the training loss.
pub fn gd_step(mut state: TrainerState, y: &[f64]) -> Result<TrainerState> {
    let n = state.z.n;
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "responses",
            expected: n,
            found: y.len(),
        });
    }
    let u: Vec<f64> = state.y_hat.iter().zip(y).map(|(p, y)| p - y).collect();
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: state.t,
            residual_norm: f64::INFINITY,
        });
    }
    let grad = state.z.apply(&u);
    let c = state.eta / n as f64;
    for (a, g) in state.a.iter_mut().zip(&grad) {
        *a -= c * g;
    }
    state.t += 1;
    state.y_hat = state.z.apply_transpose(&state.a);
    Ok(state)
}

/// Per-step record of training. Index `t` holds the value at `a(t)`, `t = 0..=T`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Training loss `‖ŷ(t) − y‖²/(2n)`.
    pub loss: Vec<f64>,
    pub residual_norm: Vec<f64>,
    /// `‖ŷ(t) − f*(S)‖²/n`, the loss against the clean labels.
    pub clean_loss: Vec<f64>,
    /// `(t, a(t))` at the steps requested in [`TrainOptions::snapshot_at`].
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl TrainingTrace {
    fn record(&mut self, y_hat: &[f64], data: &LabeledDataset) {
        let n = data.len() as f64;
        let r2 = sq_dist(y_hat, &data.y);
        self.loss.push(r2 / (2.0 * n));
        self.residual_norm.push(r2.sqrt());
        self.clean_loss.push(sq_dist(y_hat, &data.f_star) / n);
    }

    fn check_divergence(&self) -> Result<()> {
        let t = self.residual_norm.len() - 1;
        let now = self.residual_norm[t];
        if !now.is_finite() {
            return Err(Error::Divergence {
                step: t,
                residual_norm: now,
            });
        }
        if t >= DIVERGENCE_WINDOW {
            let before = self.residual_norm[t - DIVERGENCE_WINDOW];
            if now > DIVERGENCE_FACTOR * before {
                return Err(Error::Divergence {
                    step: t,
                    residual_norm: now,
                });
            }
        }
        Ok(())
    }

    /// CSV with columns `t,loss,residual_norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = String::from("t,loss,residual_norm\n");
        for (t, (l, r)) in self.loss.iter().zip(&self.residual_norm).enumerate() {
            out.push_str(&format!("{t},{l},{r}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(out.as_bytes()).map_err(io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    /// Factored when the rank bound of `Z` is small, dense otherwise.
    #[default]
    Auto,
    /// Iterate with the materialized `m × n` matrix `Z`.
    Dense,
    /// Iterate in an orthonormal basis of the range of `Z`.
    Factored,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub solver: Solver,
    /// Steps at which to keep a copy of the weights.
    pub snapshot_at: Vec<usize>,
    /// Seed of the Gaussian sketch used by the factored solver.
    pub sketch_seed: u64,
}

/// `Z = U·B` with `U` (`m × k`) having orthonormal columns.
struct Factored {
    u: DMatrix<f64>,
    /// Row-major `k × n`.
    b: Vec<f64>,
    k: usize,
}

impl Factored {
    /// Range finder: sketch `Z·G` with a Gaussian `G`, orthonormalize, project.
    /// Returns `None` if the factorization does not reproduce `Z`.
    fn build(z: &FeatureMatrix, rank_bound: usize, sketch_seed: u64) -> Option<Self> {
        let (m, n) = (z.m, z.n);
        let k = rank_bound + FACTOR_OVERSAMPLE;
        if 2 * k >= m.min(n) {
            return None;
        }
        let mut rng = seed::rng(seed::tagged(sketch_seed, seed::stream::SKETCH));
        let g: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sketch: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|r| {
                let mut acc = vec![0.0; k];
                for (zi, gi) in z.row(r).iter().zip(g.chunks_exact(k)) {
                    for (a, gv) in acc.iter_mut().zip(gi) {
                        *a += zi * gv;
                    }
                }
                acc
            })
            .collect();
        let y = DMatrix::from_fn(m, k, |r, j| sketch[r][j]);
        let u = y.qr().q();
        let k = u.ncols();

        let mut b = vec![0.0; k * n];
        let blocks: Vec<Vec<f64>> = (0..n.div_ceil(COLUMN_BLOCK))
            .into_par_iter()
            .map(|blk| {
                let c0 = blk * COLUMN_BLOCK;
                let w = COLUMN_BLOCK.min(n - c0);
                let mut acc = vec![0.0; k * w];
                for r in 0..m {
                    let zr = &z.row(r)[c0..c0 + w];
                    for j in 0..k {
                        let ur = u[(r, j)];
                        for (a, zv) in acc[j * w..(j + 1) * w].iter_mut().zip(zr) {
                            *a += ur * zv;
                        }
                    }
                }
                acc
            })
            .collect();
        for (blk, acc) in blocks.iter().enumerate() {
            let c0 = blk * COLUMN_BLOCK;
            let w = acc.len() / k;
            for j in 0..k {
                b[j * n + c0..j * n + c0 + w].copy_from_slice(&acc[j * w..(j + 1) * w]);
            }
        }

        let (err2, norm2) = (0..m)
            .into_par_iter()
            .map(|r| {
                let mut e = 0.0;
                let mut s = 0.0;
                for i in 0..n {
                    let approx: f64 = (0..k).map(|j| u[(r, j)] * b[j * n + i]).sum();
                    let zv = z.get(r, i);
                    e += (zv - approx) * (zv - approx);
                    s += zv * zv;
                }
                (e, s)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((0.0, 0.0), |acc, (e, s)| (acc.0 + e, acc.1 + s));
        if err2.sqrt() > FACTOR_TOL * norm2.sqrt().max(f64::MIN_POSITIVE) {
            log::debug!("low-rank factorization rejected: rel err {:e}", (err2 / norm2).sqrt());
            return None;
        }
        Some(Self { u, b, k })
    }

    fn outputs(&self, coords: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (j, c) in coords.iter().enumerate() {
            for (o, bv) in out.iter_mut().zip(&self.b[j * n..(j + 1) * n]) {
                *o += c * bv;
            }
        }
        out
    }

    fn weights(&self, coords: &[f64]) -> Vec<f64> {
        (self.u.clone() * DVector::from_column_slice(coords)).as_slice().to_vec()
    }
}

/// Runs `steps` gradient steps from `a(0) = 0` and records the trace.
pub fn train(
    data: &LabeledDataset,
    q: &FirstLayerDirections,
    tau: &AttentionWeights,
    eta: f64,
    steps: usize,
    opts: &TrainOptions,
) -> Result<(TrainerState, TrainingTrace)> {
    if steps == 0 {
        return Err(Error::InvalidParameter("number of steps must be at least 1".into()));
    }
    let z = feature_matrix(&data.features, q, tau)?;
    let state = TrainerState::new(z, eta)?;
    let mut trace = TrainingTrace::default();
    let wants = |t: usize| opts.snapshot_at.contains(&t);

    let factored = match opts.solver {
        Solver::Dense => None,
        Solver::Auto | Solver::Factored => {
            let bound = tau.rank_bound(q.dim())? as usize;
            let f = Factored::build(&state.z, bound, opts.sketch_seed);
            if f.is_none() && opts.solver == Solver::Factored {
                log::warn!("factored solver unavailable; falling back to dense iteration");
            }
            f
        }
    };

    match factored {
        None => {
            let mut state = state;
            trace.record(&state.y_hat, data);
            if wants(0) {
                trace.snapshots.push((0, state.a.clone()));
            }
            for _ in 0..steps {
                state = gd_step(state, &data.y)?;
                trace.record(&state.y_hat, data);
                trace.check_divergence()?;
                if wants(state.t) {
                    trace.snapshots.push((state.t, state.a.clone()));
                }
            }
            Ok((state, trace))
        }
        Some(f) => {
            let n = data.len();
            let c = eta / n as f64;
            let mut coords = vec![0.0; f.k];
            let mut y_hat = vec![0.0; n];
            trace.record(&y_hat, data);
            if wants(0) {
                trace.snapshots.push((0, vec![0.0; q.width()]));
            }
            for t in 1..=steps {
                let u: Vec<f64> = y_hat.iter().zip(&data.y).map(|(p, y)| p - y).collect();
                for (j, cj) in coords.iter_mut().enumerate() {
                    *cj -= c * dot(&f.b[j * n..(j + 1) * n], &u);
                }
                y_hat = f.outputs(&coords, n);
                trace.record(&y_hat, data);
                trace.check_divergence()?;
                if wants(t) {
                    trace.snapshots.push((t, f.weights(&coords)));
                }
            }
            let mut state = state;
            state.a = f.weights(&coords);
            state.t = steps;
            state.y_hat = y_hat;
            Ok((state, trace))
        }
    }
}

fn check_closed_form_inputs(k_hat_n: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if !k_hat_n.is_square() || k_hat_n.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "closed-form residual",
            expected: y.len(),
            found: k_hat_n.nrows(),
        });
    }
    let asym = kernel::relative_asymmetry(k_hat_n);
    if asym > kernel::SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// `−(I − η·K̂_n)^t·y` by `t` matrix–vector products.
pub fn closed_form_residual_power(k_hat_n: &DMatrix<f64>, y: &[f64], eta: f64, t: usize) -> Result<Vec<f64>> {
    check_closed_form_inputs(k_hat_n, y)?;
    let mut u = -DVector::from_column_slice(y);
    for _ in 0..t {
        let ku = k_hat_n * &u;
        u.axpy(-eta, &ku, 1.0);
    }
    Ok(u.as_slice().to_vec())
}

/// `−U·diag((1 − η·λ_i)^t)·Uᵀ·y` from the eigen-decomposition of `K̂_n`.
pub fn closed_form_residual_spectral(k_hat_n: &DMatrix<f64>, y: &[f64], eta: f64, t: usize) -> Result<Vec<f64>> {
    check_closed_form_inputs(k_hat_n, y)?;
    let eig = kernel::gram_eigen(k_hat_n)?;
    let yv = DVector::from_column_slice(y);
    let coef = eig.vectors.transpose() * &yv;
    let exp = i32::try_from(t).map_err(|_| Error::InvalidParameter(format!("step count {t}")))?;
    let scaled = DVector::from_iterator(
        coef.len(),
        coef.iter()
            .zip(&eig.values)
            .map(|(c, l)| -c * (1.0 - eta * l).powi(exp)),
    );
    Ok((eig.vectors * scaled).as_slice().to_vec())
}

/// The residual `ŷ(t) − y` predicted by the linear recursion
/// `u(t+1) = (I − η·K̂_n)·u(t)`, `u(0) = −y`.
pub fn closed_form_residual(k_hat_n: &DMatrix<f64>, y: &[f64], eta: f64, t: usize) -> Result<Vec<f64>> {
    if t <= POWER_STEPS_MAX {
        closed_form_residual_power(k_hat_n, y, eta, t)
    } else {
        closed_form_residual_spectral(k_hat_n, y, eta, t)
    }
}
