//! Zonal spherical-polynomial targets and noisy labeled datasets.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::*;
use crate::points::{dot, UnitPoints};
use crate::seed::{self, stream};
use crate::sphere::{self, Recurrence};

/// `f*(x) = Σ_ℓ c_ℓ · mean_j P_ℓ(⟨x, w_ℓj⟩)` for `ℓ = 0..=ℓ₀`.
///
/// With one direction per degree (the default) the harmonic coefficients are
/// `β_ℓj = c_ℓ·Y_ℓj(w_ℓ)/N(d,ℓ)`, the RKHS norm is `√Σ c_ℓ²` and the squared
/// L² norm is `Σ c_ℓ²/N(d,ℓ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonalTarget {
    dim: usize,
    coeffs: Vec<f64>,
    /// `directions[ℓ]` holds the zonal poles of degree `ℓ`.
    directions: Vec<UnitPoints>,
}

impl ZonalTarget {
    /// Assembles a target from explicit poles, one or more per degree.
    pub fn from_parts(coeffs: Vec<f64>, directions: Vec<UnitPoints>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Empty("target coefficients"));
        }
        if directions.len() != coeffs.len() {
            return Err(Error::DimensionMismatch {
                context: "target directions per degree",
                expected: coeffs.len(),
                found: directions.len(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("target coefficients"));
        }
        if *coeffs.last().unwrap() == 0.0 {
            return Err(Error::InvalidParameter(
                "leading target coefficient must be nonzero".into(),
            ));
        }
        let dim = directions[0].dim();
        for w in &directions {
            if w.is_empty() {
                return Err(Error::Empty("target directions"));
            }
            if w.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "target direction dimension",
                    expected: dim,
                    found: w.dim(),
                });
            }
        }
        Ok(Self {
            dim,
            coeffs,
            directions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The target degree `ℓ₀`.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn directions(&self) -> &[UnitPoints] {
        &self.directions
    }

    /// `Σ_{j,j'} P_ℓ(⟨w_ℓj, w_ℓj'⟩) / k_ℓ²` for each degree.
    fn self_overlaps(&self) -> Vec<f64> {
        let rec = Recurrence::new(self.dim, self.degree()).expect("validated dimension");
        let mut buf = vec![0.0; self.degree() + 1];
        self.directions
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let k = w.len() as f64;
                let mut s = 0.0;
                for a in w.rows() {
                    for b in w.rows() {
                        rec.eval_into(dot(a, b), &mut buf);
                        s += buf[l];
                    }
                }
                s / (k * k)
            })
            .collect()
    }
}

/// One uniformly drawn pole per degree.
pub fn make_target(dim: usize, ell0: usize, coeffs: &[f64], seed: u64) -> Result<ZonalTarget> {
    make_target_multi(dim, ell0, coeffs, 1, seed)
}

/// `per_degree` uniformly drawn poles per degree, averaged.
pub fn make_target_multi(dim: usize, ell0: usize, coeffs: &[f64], per_degree: usize, seed: u64) -> Result<ZonalTarget> {
    sphere::check_dim(dim)?;
    if coeffs.len() != ell0 + 1 {
        return Err(Error::DimensionMismatch {
            context: "target coefficients (ell0 + 1)",
            expected: ell0 + 1,
            found: coeffs.len(),
        });
    }
    if per_degree == 0 {
        return Err(Error::Empty("directions per degree"));
    }
    let base = seed::tagged(seed, stream::TARGET);
    let directions = (0..=ell0)
        .map(|l| UnitPoints::sample(per_degree, dim, seed::split(base, l as u64)))
        .collect::<Result<Vec<_>>>()?;
    ZonalTarget::from_parts(coeffs.to_vec(), directions)
}

/// Target values at each row of `x`.
pub fn eval_target(target: &ZonalTarget, x: &UnitPoints) -> Result<Vec<f64>> {
    if x.dim() != target.dim {
        return Err(Error::DimensionMismatch {
            context: "target evaluation",
            expected: target.dim,
            found: x.dim(),
        });
    }
    let ell0 = target.degree();
    let rec = Recurrence::new(target.dim, ell0)?;
    Ok((0..x.len())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut buf = vec![0.0; ell0 + 1];
            let mut acc = 0.0;
            for (l, (c, w)) in target.coeffs.iter().zip(&target.directions).enumerate() {
                if *c == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for wj in w.rows() {
                    rec.eval_into(dot(xi, wj), &mut buf[..=l]);
                    s += buf[l];
                }
                acc += c * s / w.len() as f64;
            }
            acc
        })
        .collect())
}

/// RKHS norm with respect to the kernel `Σ_ℓ P_ℓ`; equals `√Σ c_ℓ²` for one pole per degree.
pub fn rkhs_norm(target: &ZonalTarget) -> f64 {
    target
        .self_overlaps()
        .iter()
        .zip(&target.coeffs)
        .map(|(s, c)| c * c * s)
        .sum::<f64>()
        .sqrt()
}

/// `E_P[f*²]` under the uniform measure; equals `Σ c_ℓ²/N(d,ℓ)` for one pole per degree.
pub fn l2_norm_sq(target: &ZonalTarget) -> f64 {
    target
        .self_overlaps()
        .iter()
        .zip(&target.coeffs)
        .enumerate()
        .map(|(l, (s, c))| {
            let n = sphere::harmonic_dim(target.dim, l).expect("validated dimension") as f64;
            c * c * s / n
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: UnitPoints,
    pub f_star: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma0: f64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    /// The realized noise `y − f*(S)`.
    pub fn noise(&self) -> Vec<f64> {
        self.y.iter().zip(&self.f_star).map(|(y, f)| y - f).collect()
    }
}

/// `n` uniform features with responses `y_i = f*(x_i) + w_i`, `w_i ~ N(0, σ₀²)`.
pub fn gen_dataset(target: &ZonalTarget, n: usize, sigma0: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Empty("dataset size"));
    }
    if !(sigma0 >= 0.0) || !sigma0.is_finite() {
        return Err(Error::InvalidParameter(format!("noise scale {sigma0}")));
    }
    let features = UnitPoints::sample(n, target.dim, seed::tagged(seed, stream::FEATURES))?;
    if features.has_duplicate_rows() {
        return Err(Error::InvalidParameter("duplicate feature rows".into()));
    }
    let f_star = eval_target(target, &features)?;
    let y = if sigma0 == 0.0 {
        f_star.clone()
    } else {
        let normal = Normal::new(0.0, sigma0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = seed::rng(seed::tagged(seed, stream::NOISE));
        f_star.iter().map(|f| f + normal.sample(&mut rng)).collect()
    };
    Ok(LabeledDataset {
        features,
        f_star,
        y,
        sigma0,
    })
}

/// JSON sidecar describing how a dataset CSV was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d: usize,
    pub ell0: usize,
    pub coeffs: Vec<f64>,
    /// `directions[ℓ]` lists the poles of degree `ℓ`.
    pub directions: Vec<Vec<Vec<f64>>>,
    pub sigma0: f64,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn new(target: &ZonalTarget, sigma0: f64, seed: u64) -> Self {
        Self {
            d: target.dim,
            ell0: target.degree(),
            coeffs: target.coeffs.clone(),
            directions: target
                .directions
                .iter()
                .map(|w| w.rows().map(<[f64]>::to_vec).collect())
                .collect(),
            sigma0,
            seed,
        }
    }

    pub fn target(&self) -> Result<ZonalTarget> {
        let dirs = self
            .directions
            .iter()
            .map(|w| UnitPoints::from_rows(w))
            .collect::<Result<Vec<_>>>()?;
        ZonalTarget::from_parts(self.coeffs.clone(), dirs)
    }
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the dataset as CSV (`x_0..x_{d-1},f_star,y`) and the metadata as a JSON sidecar.
pub fn write_dataset(path: &Path, data: &LabeledDataset, meta: &DatasetMeta) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    header.push("f_star".into());
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, x) in data.features.rows().enumerate() {
        let mut rec: Vec<String> = x.iter().map(f64::to_string).collect();
        rec.push(data.f_star[i].to_string());
        rec.push(data.y[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).map_err(|source| Error::Json {
        path: side.clone(),
        source,
    })?;
    std::fs::write(&side, json + "\n").map_err(|source| Error::Io { path: side, source })
}

pub fn read_dataset(path: &Path) -> Result<(LabeledDataset, DatasetMeta)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|source| Error::Io {
        path: side.clone(),
        source,
    })?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| Error::Json { path: side, source })?;
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let d = meta.d;
    if header.len() != d + 2 {
        return Err(Error::DimensionMismatch {
            context: "dataset CSV columns",
            expected: d + 2,
            found: header.len(),
        });
    }
    let (mut xs, mut f_star, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        xs.extend_from_slice(&vals[..d]);
        f_star.push(vals[d]);
        y.push(vals[d + 1]);
    }
    let data = LabeledDataset {
        features: UnitPoints::new(xs, d)?,
        f_star,
        y,
        sigma0: meta.sigma0,
    };
    Ok((data, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn fixed_target(d: usize, coeffs: &[f64]) -> ZonalTarget {
        let dirs = (0..coeffs.len())
            .map(|l| UnitPoints::from_rows(&[basis(d, l % d)]).unwrap())
            .collect();
        ZonalTarget::from_parts(coeffs.to_vec(), dirs).unwrap()
    }

    #[test]
    fn constant_target() {
        let t = make_target(4, 0, &[1.0], 3).unwrap();
        let x = UnitPoints::sample(10, 4, 1).unwrap();
        assert!(eval_target(&t, &x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_target_is_inner_product() {
        let t = make_target(3, 1, &[0.0, 1.0], 5).unwrap();
        let w = t.directions()[1].row(0).to_vec();
        let x = UnitPoints::sample(10, 3, 2).unwrap();
        let f = eval_target(&t, &x).unwrap();
        for (i, r) in x.rows().enumerate() {
            assert!((f[i] - dot(r, &w)).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_examples() {
        let t = fixed_target(3, &[0.0, 1.0]);
        let at = |v: Vec<f64>| eval_target(&t, &UnitPoints::from_rows(&[v]).unwrap()).unwrap()[0];
        assert_eq!(at(basis(3, 1)), 1.0);
        assert_eq!(at(basis(3, 0)), 0.0);
        let t2 = fixed_target(3, &[0.0, 0.0, 1.0]);
        let x = UnitPoints::from_rows(&[vec![0.0, 0.0, -1.0]]).unwrap();
        assert!((eval_target(&t2, &x).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn norm_examples() {
        assert_eq!(rkhs_norm(&fixed_target(3, &[0.0, 0.0, 0.0, 2.0])), 2.0);
        assert!((rkhs_norm(&make_target(5, 1, &[3.0, 4.0], 1).unwrap()) - 5.0).abs() < 1e-12);
        for d in [2, 3, 7] {
            let t = make_target(d, 1, &[1.0, 1.0], d as u64).unwrap();
            assert!((rkhs_norm(&t) - 2f64.sqrt()).abs() < 1e-12);
        }
        assert_eq!(l2_norm_sq(&fixed_target(6, &[1.0])), 1.0);
        assert!((l2_norm_sq(&fixed_target(3, &[1.0, 1.0])) - 4.0 / 3.0).abs() < 1e-14);
        assert!((l2_norm_sq(&fixed_target(2, &[0.0, 0.0, 1.0])) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn target_errors() {
        assert!(make_target(3, 1, &[1.0, 0.0], 1).is_err());
        assert!(make_target(3, 2, &[1.0, 1.0], 1).is_err());
        assert!(make_target(1, 0, &[1.0], 1).is_err());
        let t = make_target(3, 0, &[1.0], 1).unwrap();
        assert!(eval_target(&t, &UnitPoints::sample(2, 4, 1).unwrap()).is_err());
    }

    #[test]
    fn noiseless_dataset() {
        let t = make_target(4, 2, &[1.0, 1.0, 1.0], 2).unwrap();
        let ds = gen_dataset(&t, 100, 0.0, 9).unwrap();
        assert_eq!(ds.y, ds.f_star);
        assert_eq!(ds, gen_dataset(&t, 100, 0.0, 9).unwrap());
        assert!(gen_dataset(&t, 0, 0.0, 9).is_err());
        assert!(gen_dataset(&t, 5, -1.0, 9).is_err());
    }

    #[test]
    fn noise_level() {
        let t = make_target(4, 1, &[1.0, 1.0], 2).unwrap();
        let n = 10_000;
        let ds = gen_dataset(&t, n, 1.0, 4).unwrap();
        let w = ds.noise();
        let mean = w.iter().sum::<f64>() / n as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((0.95..=1.05).contains(&sd), "{sd}");
        assert!(mean.abs() <= 5.0 / (n as f64).sqrt());
    }

    #[test]
    fn multi_direction_norms_match_monte_carlo() {
        let t = make_target_multi(3, 2, &[0.5, 1.0, -1.0], 3, 8).unwrap();
        let x = UnitPoints::sample(200_000, 3, 77).unwrap();
        let f = eval_target(&t, &x).unwrap();
        let mc = f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|v| (v * v - mc).powi(2)).sum::<f64>() / (f.len() - 1) as f64;
        let se = (var / f.len() as f64).sqrt();
        assert!((mc - l2_norm_sq(&t)).abs() < 5.0 * se, "{mc} vs {}", l2_norm_sq(&t));
        assert!(rkhs_norm(&t).powi(2) > l2_norm_sq(&t));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let t = make_target(3, 2, &[0.3, -1.0, 2.0], 4).unwrap();
        let ds = gen_dataset(&t, 25, 0.2, 6).unwrap();
        let meta = DatasetMeta::new(&t, 0.2, 6);
        write_dataset(&path, &ds, &meta).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x_0,x_1,x_2,f_star,y\n"));
        let (back, meta_back) = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(meta_back, meta);
        assert_eq!(meta_back.target().unwrap(), t);
    }
}
