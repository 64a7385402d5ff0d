//! Kernel complexity functionals, critical radii, Monte Carlo risk and the
//! empirical loss against clean labels.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, AttentionWeights, FirstLayerDirections};
use crate::par::*;
use crate::points::UnitPoints;
use crate::seed;
use crate::sphere::harmonic_dim;
use crate::target::{eval_target, ZonalTarget};
use crate::trainer;

/// Fixed number of Monte Carlo chunks, so estimates do not depend on the thread count.
pub const MC_CHUNKS: usize = 64;
/// Lower end of the bisection bracket for critical radii.
pub const RADIUS_FLOOR: f64 = 1e-8;
const RADIUS_LARGE: f64 = 1e6;
const RADIUS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumSource {
    Empirical,
    Population,
}

/// Eigenvalues of a normalized kernel, non-increasing and non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpectrum {
    pub eigenvalues: Vec<f64>,
    pub n: usize,
    pub source: SpectrumSource,
}

impl KernelSpectrum {
    /// Spectrum of `K_n` computed by eigen-decomposition.
    pub fn empirical(k_n: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            eigenvalues: kernel::gram_spectrum(k_n)?,
            n: k_n.nrows(),
            source: SpectrumSource::Empirical,
        })
    }

    /// `1/N(d,ℓ)` with multiplicity `N(d,ℓ)` for each `ℓ ≤ ℓ̂`, padded with zeros to length `n`.
    pub fn population(dim: usize, ell_hat: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("sample count"));
        }
        let mut eigenvalues = Vec::new();
        for l in 0..=ell_hat {
            let mult = harmonic_dim(dim, l)?;
            let mult = usize::try_from(mult).map_err(|_| Error::Overflow { dim, degree: l })?;
            eigenvalues.extend(std::iter::repeat_n(1.0 / mult as f64, mult));
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        if eigenvalues.len() < n {
            eigenvalues.resize(n, 0.0);
        }
        Ok(Self {
            eigenvalues,
            n,
            source: SpectrumSource::Population,
        })
    }

    pub fn complexity(&self, eps: f64) -> Result<f64> {
        empirical_complexity(self, eps)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("radius {eps} must be positive")));
    }
    Ok(())
}

/// `√((1/n)·Σ_i min(λ_i, ε²))`.
pub fn empirical_complexity(spec: &KernelSpectrum, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if spec.eigenvalues.is_empty() || spec.n == 0 {
        return Err(Error::Empty("spectrum"));
    }
    let e2 = eps * eps;
    let s: f64 = spec.eigenvalues.iter().map(|&l| l.min(e2)).sum();
    Ok((s / spec.n as f64).sqrt())
}

/// Closed form of the population complexity, summed per degree.
pub fn population_complexity(dim: usize, ell_hat: usize, n: usize, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let e2 = eps * eps;
    let mut s = 0.0;
    for l in 0..=ell_hat {
        let big_n = harmonic_dim(dim, l)? as f64;
        s += big_n * (1.0 / big_n).min(e2);
    }
    Ok((s / n as f64).sqrt())
}

/// Fixed point `σ₀·R(ε) = ε²` by bisection on the sign of `σ₀·R(ε) − ε²`.
pub fn critical_radius<F>(complexity: F, sigma0: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(Error::InvalidParameter(format!("noise level {sigma0} must be positive")));
    }
    let r_large = complexity(RADIUS_LARGE)?;
    if r_large == 0.0 {
        return Ok(0.0);
    }
    let g = |e: f64| -> Result<f64> { Ok(sigma0 * complexity(e)? - e * e) };
    let mut lo = RADIUS_FLOOR;
    let mut hi = (sigma0 * r_large).sqrt() + 1.0;
    let (glo, ghi) = (g(lo)?, g(hi)?);
    if !(glo > 0.0 && ghi < 0.0) {
        return Err(Error::NoSignChange { lo, hi });
    }
    let mut best = (ghi.abs(), hi);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid)?;
        if gm.abs() < best.0 {
            best = (gm.abs(), mid);
        }
        if gm.abs() <= RADIUS_TOL * (mid * mid).max(1.0) && hi - lo <= RADIUS_TOL * mid {
            break;
        }
        if gm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// Critical radius of the population kernel of degree `ℓ̂`.
pub fn population_critical_radius(dim: usize, ell_hat: usize, n: usize, sigma0: f64) -> Result<f64> {
    critical_radius(|e| population_complexity(dim, ell_hat, n, e), sigma0)
}

/// Something that can be evaluated on a batch of sphere points.
pub trait Predictor: Sync {
    fn predict(&self, x: &UnitPoints) -> Result<Vec<f64>>;
}

impl<F> Predictor for F
where
    F: Fn(&UnitPoints) -> Result<Vec<f64>> + Sync,
{
    fn predict(&self, x: &UnitPoints) -> Result<Vec<f64>> {
        self(x)
    }
}

impl Predictor for ZonalTarget {
    fn predict(&self, x: &UnitPoints) -> Result<Vec<f64>> {
        eval_target(self, x)
    }
}

/// The two-layer network with frozen first layer and channel weights.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    pub a: &'a [f64],
    pub q: &'a FirstLayerDirections,
    pub tau: &'a AttentionWeights,
}

impl Predictor for Network<'_> {
    fn predict(&self, x: &UnitPoints) -> Result<Vec<f64>> {
        trainer::predict(self.a, x, self.q, self.tau)
    }
}

/// Monte Carlo estimate of `E[(f − f*)²]` over fresh uniform points,
/// returned with its standard error.
pub fn mc_risk<P: Predictor + ?Sized>(
    predictor: &P,
    target: &ZonalTarget,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if num_samples < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 Monte Carlo samples, got {num_samples}")));
    }
    let base = seed::tagged(seed, seed::stream::MONTE_CARLO);
    let chunks = MC_CHUNKS.min(num_samples);
    let parts: Vec<Result<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let size = num_samples / chunks + usize::from(c < num_samples % chunks);
            let x = UnitPoints::sample(size, target.dim(), seed::split(base, c as u64))?;
            let f = predictor.predict(&x)?;
            let t = eval_target(target, &x)?;
            if f.len() != t.len() {
                return Err(Error::DimensionMismatch {
                    context: "predictor output",
                    expected: t.len(),
                    found: f.len(),
                });
            }
            let mut s = 0.0;
            let mut s2 = 0.0;
            for (a, b) in f.iter().zip(&t) {
                let e = (a - b) * (a - b);
                s += e;
                s2 += e * e;
            }
            Ok((s, s2))
        })
        .collect();
    let (mut s, mut s2) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        s += a;
        s2 += b;
    }
    let n = num_samples as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    if !mean.is_finite() {
        return Err(Error::NonFinite("Monte Carlo risk"));
    }
    Ok((mean, (var / n).sqrt()))
}

/// `(1/n)·‖f(S) − f*(S)‖²`.
pub fn empirical_loss(predictions: &[f64], f_star: &[f64]) -> Result<f64> {
    if predictions.len() != f_star.len() {
        return Err(Error::DimensionMismatch {
            context: "empirical loss",
            expected: f_star.len(),
            found: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let s: f64 = predictions.iter().zip(f_star).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub r_empirical: f64,
    pub r_population: f64,
}

pub fn complexity_curve(
    empirical: &KernelSpectrum,
    population: &KernelSpectrum,
    eps_grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    eps_grid
        .iter()
        .map(|&eps| {
            Ok(CurvePoint {
                eps,
                r_empirical: empirical_complexity(empirical, eps)?,
                r_population: empirical_complexity(population, eps)?,
            })
        })
        .collect()
}

/// CSV with columns `eps,R_empirical,R_population`.
pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::from("eps,R_empirical,R_population\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.eps, p.r_empirical, p.r_population));
    }
    std::fs::File::create(path).map_err(io)?.write_all(out.as_bytes()).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::make_target;

    fn spec(ev: Vec<f64>, n: usize) -> KernelSpectrum {
        KernelSpectrum {
            eigenvalues: ev,
            n,
            source: SpectrumSource::Empirical,
        }
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(empirical_complexity(&spec(vec![0.0; 5], 5), 0.3).unwrap(), 0.0);
        assert!((empirical_complexity(&spec(vec![4.0, 1.0], 2), 1.0).unwrap() - 1.0).abs() < 1e-15);
        let ev = vec![3.0, 1.5, 0.25, 0.0];
        let trace: f64 = ev.iter().sum();
        let r = empirical_complexity(&spec(ev, 4), 100.0).unwrap();
        assert!((r - (trace / 4.0).sqrt()).abs() < 1e-15);
        assert!(empirical_complexity(&spec(vec![], 3), 1.0).is_err());
        assert!(empirical_complexity(&spec(vec![1.0], 1), 0.0).is_err());
    }

    #[test]
    fn population_examples() {
        let r = population_complexity(3, 2, 50, 1.5).unwrap();
        assert!((r - (3.0f64 / 50.0).sqrt()).abs() < 1e-15);
        let eps = 0.1;
        let r = population_complexity(3, 2, 50, eps).unwrap();
        assert!((r - eps * (9.0f64 / 50.0).sqrt()).abs() < 1e-15);
        assert!((population_complexity(5, 0, 4, 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn population_spectrum_layout() {
        let s = KernelSpectrum::population(3, 2, 20).unwrap();
        assert_eq!(s.eigenvalues.len(), 20);
        assert_eq!(s.eigenvalues[0], 1.0);
        assert!(s.eigenvalues[1..4].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(s.eigenvalues[4..9].iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(s.eigenvalues[9..].iter().all(|&v| v == 0.0));
        for eps in [0.01, 0.3, 0.5, 2.0] {
            let a = s.complexity(eps).unwrap();
            let b = population_complexity(3, 2, 20, eps).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn radius_zero_and_closed_form() {
        assert_eq!(critical_radius(|_| Ok(0.0), 1.0).unwrap(), 0.0);
        let e = population_critical_radius(3, 2, 900, 1.0).unwrap();
        assert!((e * e - 0.01).abs() < 1e-10);
        let e2 = population_critical_radius(3, 2, 900, 2.0).unwrap();
        assert!((e2 * e2 / (e * e) - 4.0).abs() < 1e-8);
        assert!(critical_radius(|_| Ok(1.0), 0.0).is_err());
    }

    #[test]
    fn radius_residual() {
        let s = spec(vec![2.0, 0.7, 0.3, 0.05, 0.01, 0.0], 6);
        let e = critical_radius(|x| empirical_complexity(&s, x), 0.4).unwrap();
        let g = 0.4 * empirical_complexity(&s, e).unwrap() - e * e;
        assert!(g.abs() <= 1e-12 * (e * e).max(1.0));
    }

    #[test]
    fn mc_risk_basics() {
        let t = make_target(3, 1, &[1.0, 1.0], 1).unwrap();
        let (r, se) = mc_risk(&t, &t, 1000, 2).unwrap();
        assert_eq!((r, se), (0.0, 0.0));
        let zero = |x: &UnitPoints| Ok(vec![0.0; x.len()]);
        let (r, se) = mc_risk(&zero, &t, 200_000, 3).unwrap();
        assert!((r - 4.0 / 3.0).abs() < 5.0 * se, "{r} ± {se}");
        assert_eq!(mc_risk(&zero, &t, 5000, 3).unwrap(), mc_risk(&zero, &t, 5000, 3).unwrap());
        assert!(mc_risk(&zero, &t, 1, 3).is_err());
    }

    #[test]
    fn empirical_loss_examples() {
        let f = [0.5, -1.0, 2.0];
        assert_eq!(empirical_loss(&f, &f).unwrap(), 0.0);
        let g: Vec<f64> = f.iter().map(|v| v + 1.0).collect();
        assert!((empirical_loss(&g, &f).unwrap() - 1.0).abs() < 1e-15);
        assert!(empirical_loss(&f[..2], &f).is_err());
    }

    #[test]
    fn curve_csv() {
        let e = spec(vec![1.0, 0.5], 2);
        let p = KernelSpectrum::population(3, 1, 2).unwrap();
        let c = complexity_curve(&e, &p, &[0.1, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_curve_csv(&c, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("eps,R_empirical,R_population\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
