//! Run reports: per-trial records, aggregates recomputable from them, and
//! JSON/CSV emission.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::complexity::{self, CurvePoint};
use crate::error::{Error, Result};
use crate::stats::{self, LineFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Select,
    Train,
    RiskSweep,
    KernelConv,
    CalibrateEps0,
    ComplexityCurve,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Select => "select",
            Experiment::Train => "train",
            Experiment::RiskSweep => "risk-sweep",
            Experiment::KernelConv => "kernel-conv",
            Experiment::CalibrateEps0 => "calibrate-eps0",
            Experiment::ComplexityCurve => "complexity-curve",
        }
    }

    /// The grid variable results are grouped by.
    fn group_key(self, r: &TrialRecord) -> usize {
        match self {
            Experiment::KernelConv => r.m,
            _ => r.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(Error::Config(format!("unknown format {s:?}; expected json or csv"))),
        }
    }
}

/// Outcome of one trial (one seed at one grid point).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialRecord {
    /// Seed index `k`; the trial seed is `split(base_seed, k)`.
    pub trial: usize,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub numerical_failure: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_raw: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ell_hat: Option<usize>,
    /// Selected channels are exactly `0..=ell0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovered: Option<bool>,
    /// Smallest informative raw weight minus largest redundant magnitude.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Training loss `‖ŷ − y‖²/(2n)` at the last step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// `‖f(S) − f*(S)‖²/n` at the last step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_se: Option<f64>,
    /// Risk at intermediate steps, `(t, risk)`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checkpoint_risks: Vec<(usize, f64)>,
    /// `C = 10·η·loss(10)` for the envelope `loss(t) ≤ C/(ηt)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_ok: Option<bool>,
    /// Largest `|K̂ − K|` over the fixed pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_error: Option<f64>,
    /// Critical radius `ε̂` of the empirical spectrum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_radius: Option<f64>,
    /// Empirical complexity on the configured radius grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complexity: Option<Vec<f64>>,
}

impl TrialRecord {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }

    pub(crate) fn fail(&mut self, err: &Error) {
        self.failure = Some(err.to_string());
        self.numerical_failure = err.is_numerical();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub degree: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Statistics over the successful trials at one grid value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSummary {
    /// `n` for training and complexity runs, `m` for kernel convergence.
    pub key: usize,
    pub trials: usize,
    pub ok: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_risk: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_empirical_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_kernel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_critical_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Aggregates {
    pub trials: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_positive_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<ChannelSummary>>,
    /// Threshold calibrated from the trials' raw weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon0: Option<f64>,
    pub groups: Vec<GroupSummary>,
    /// Log-log slope of the group medians against the grid variable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<LineFit>,
    /// Population critical radius at the first `n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population_radius: Option<f64>,
    /// Median empirical complexity and the population complexity per radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<CurvePoint>>,
}

fn rate(hits: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut k, mut total) = (0usize, 0usize);
    for h in hits {
        total += 1;
        k += usize::from(h);
    }
    (total > 0).then(|| k as f64 / total as f64)
}

/// Threshold `ε₀` placing `2ε₀` midway between the median smallest informative
/// raw weight and the median largest redundant one.
pub fn calibrate_threshold(tau_raw: &[&[f64]], ell0: usize) -> Option<f64> {
    let mut lows = Vec::new();
    let mut highs = Vec::new();
    for t in tau_raw {
        let k = (ell0 + 1).min(t.len());
        lows.push(t[..k].iter().copied().fold(f64::INFINITY, f64::min));
        if t.len() > k {
            highs.push(t[k..].iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
    }
    let low = stats::median(&lows)?;
    let cut = match stats::median(&highs) {
        Some(high) => 0.5 * (low + high),
        None => 0.5 * low,
    };
    Some((0.5 * cut).max(0.0))
}

impl Aggregates {
    /// Recomputes every aggregate from the trial records alone (plus the config).
    pub fn compute(experiment: Experiment, config: &ExperimentConfig, trials: &[TrialRecord]) -> Self {
        let mut agg = Aggregates {
            trials: trials.len(),
            failures: trials.iter().filter(|r| !r.ok()).count(),
            ..Default::default()
        };
        let taus: Vec<&[f64]> = trials.iter().filter_map(|r| r.tau_raw.as_deref()).collect();
        match experiment {
            Experiment::Select => {
                agg.success_rate = rate(trials.iter().map(|r| r.recovered == Some(true)));
                agg.gap_positive_rate = rate(trials.iter().filter_map(|r| r.gap).map(|g| g > 0.0));
            }
            Experiment::CalibrateEps0 => {
                agg.epsilon0 = calibrate_threshold(&taus, config.ell0);
            }
            _ => {}
        }
        if matches!(experiment, Experiment::Select | Experiment::CalibrateEps0) && !taus.is_empty() {
            let width = taus.iter().map(|t| t.len()).min().unwrap_or(0);
            agg.channels = Some(
                (0..width)
                    .map(|l| {
                        let col: Vec<f64> = taus.iter().map(|t| t[l]).collect();
                        ChannelSummary {
                            degree: l,
                            mean: stats::mean(&col).unwrap_or(f64::NAN),
                            min: col.iter().copied().fold(f64::INFINITY, f64::min),
                            max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        }
                    })
                    .collect(),
            );
        }
        if matches!(
            experiment,
            Experiment::Train | Experiment::RiskSweep | Experiment::KernelConv | Experiment::ComplexityCurve
        ) {
            let mut keys: Vec<usize> = trials.iter().map(|r| experiment.group_key(r)).collect();
            keys.sort_unstable();
            keys.dedup();
            for key in keys {
                let group: Vec<&TrialRecord> =
                    trials.iter().filter(|r| experiment.group_key(r) == key).collect();
                let ok: Vec<&&TrialRecord> = group.iter().filter(|r| r.ok()).collect();
                let med = |f: fn(&TrialRecord) -> Option<f64>| {
                    let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                    stats::median(&v)
                };
                agg.groups.push(GroupSummary {
                    key,
                    trials: group.len(),
                    ok: ok.len(),
                    median_risk: med(|r| r.risk),
                    median_empirical_loss: med(|r| r.empirical_loss),
                    median_kernel_error: med(|r| r.kernel_error),
                    median_critical_radius: med(|r| r.critical_radius),
                    envelope_rate: rate(ok.iter().filter_map(|r| r.envelope_ok)),
                });
            }
            let series: Option<(Vec<f64>, Vec<f64>)> = match experiment {
                Experiment::RiskSweep => Some(
                    agg.groups
                        .iter()
                        .filter_map(|g| g.median_risk.map(|v| (g.key as f64, v)))
                        .unzip(),
                ),
                Experiment::KernelConv => Some(
                    agg.groups
                        .iter()
                        .filter_map(|g| g.median_kernel_error.map(|v| (g.key as f64, v)))
                        .unzip(),
                ),
                _ => None,
            };
            if let Some((x, y)) = series {
                agg.fit = stats::loglog_fit(&x, &y).ok();
            }
        }
        if experiment == Experiment::ComplexityCurve {
            let n = config.n[0];
            let ell_hat = config.kernel_degree();
            if config.sigma0 > 0.0 {
                agg.population_radius =
                    complexity::population_critical_radius(config.d, ell_hat, n, config.sigma0).ok();
            }
            let curves: Vec<&Vec<f64>> = trials.iter().filter_map(|r| r.complexity.as_ref()).collect();
            let grid = config.eps_grid();
            if !curves.is_empty() && curves.iter().all(|c| c.len() == grid.len()) {
                agg.curve = grid
                    .iter()
                    .enumerate()
                    .map(|(i, &eps)| {
                        let col: Vec<f64> = curves.iter().map(|c| c[i]).collect();
                        Some(CurvePoint {
                            eps,
                            r_empirical: stats::median(&col)?,
                            r_population: complexity::population_complexity(config.d, ell_hat, n, eps).ok()?,
                        })
                    })
                    .collect();
            }
        }
        agg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: Experiment,
    pub version: String,
    pub config: ExperimentConfig,
    /// Selection threshold used by the trials, when selection ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon0: Option<f64>,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn new(experiment: Experiment, config: ExperimentConfig, epsilon0: Option<f64>, trials: Vec<TrialRecord>) -> Self {
        let aggregates = Aggregates::compute(experiment, &config, &trials);
        Self {
            experiment,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            epsilon0,
            trials,
            aggregates,
        }
    }

    /// True when every trial failed for numerical reasons.
    pub fn all_numerical_failures(&self) -> bool {
        !self.trials.is_empty() && self.trials.iter().all(|r| r.numerical_failure)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Columns of the per-trial CSV table.
pub const CSV_HEADER: [&str; 20] = [
    "trial",
    "seed",
    "n",
    "m",
    "status",
    "failure",
    "ell_hat",
    "recovered",
    "gap",
    "tau_raw",
    "mask",
    "steps",
    "final_loss",
    "empirical_loss",
    "risk",
    "risk_se",
    "envelope_ok",
    "kernel_error",
    "critical_radius",
    "checkpoint_risks",
];

/// Columns of the complexity-curve CSV table.
pub const CURVE_HEADER: [&str; 3] = ["eps", "R_empirical", "R_population"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined<T: ToString>(v: Option<&[T]>) -> String {
    v.map(|xs| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"))
        .unwrap_or_default()
}

fn csv_row(r: &TrialRecord) -> Vec<String> {
    let mask: Option<Vec<u8>> = r.mask.as_ref().map(|m| m.iter().map(|&b| u8::from(b)).collect());
    let checkpoints: Vec<String> = r.checkpoint_risks.iter().map(|(t, v)| format!("{t}:{v}")).collect();
    vec![
        r.trial.to_string(),
        r.seed.to_string(),
        r.n.to_string(),
        r.m.to_string(),
        if r.ok() { "ok" } else { "failed" }.to_string(),
        r.failure.clone().unwrap_or_default(),
        opt(r.ell_hat),
        opt(r.recovered),
        opt(r.gap),
        joined(r.tau_raw.as_deref()),
        joined(mask.as_deref()),
        opt(r.steps),
        opt(r.final_loss),
        opt(r.empirical_loss),
        opt(r.risk),
        opt(r.risk_se),
        opt(r.envelope_ok),
        opt(r.kernel_error),
        opt(r.critical_radius),
        checkpoints.join(";"),
    ]
}

fn csv_bytes(report: &RunReport) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if report.experiment == Experiment::ComplexityCurve {
        w.write_record(CURVE_HEADER)?;
        for p in report.aggregates.curve.iter().flatten() {
            w.write_record([p.eps.to_string(), p.r_empirical.to_string(), p.r_population.to_string()])?;
        }
    } else {
        w.write_record(CSV_HEADER)?;
        for r in &report.trials {
            w.write_record(csv_row(r))?;
        }
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Writes the report: the full report as JSON, or the flat per-trial table as
/// CSV (the complexity curve for `complexity-curve`).
pub fn emit_report(report: &RunReport, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Json => report.to_json().into_bytes(),
        Format::Csv => csv_bytes(report).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?,
    };
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::File::create(path).map_err(io)?.write_all(&bytes).map_err(io)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> RunReport {
        let cfg = ExperimentConfig {
            n: vec![100, 400],
            ..Default::default()
        };
        let mut trials = Vec::new();
        for (i, &n) in [100usize, 100, 400, 400].iter().enumerate() {
            trials.push(TrialRecord {
                trial: i % 2,
                seed: i as u64 * 7 + 1,
                n,
                m: 50,
                risk: Some(1.0 / n as f64 * (1.0 + 0.1 * i as f64)),
                empirical_loss: Some(0.3 / n as f64),
                envelope_ok: Some(i != 1),
                ..Default::default()
            });
        }
        trials[3].fail(&Error::NonFinite("risk"));
        trials[3].risk = None;
        RunReport::new(Experiment::RiskSweep, cfg, None, trials)
    }

    #[test]
    fn aggregates_from_records() {
        let r = sample_report();
        assert_eq!(r.aggregates.trials, 4);
        assert_eq!(r.aggregates.failures, 1);
        assert_eq!(r.aggregates.groups.len(), 2);
        assert_eq!(r.aggregates.groups[1].ok, 1);
        assert!((r.aggregates.groups[0].median_risk.unwrap() - 1.05 / 100.0).abs() < 1e-15);
        assert_eq!(r.aggregates.groups[0].envelope_rate, Some(0.5));
        assert!(r.aggregates.fit.is_some());
        assert!(!r.all_numerical_failures());
    }

    #[test]
    fn json_round_trip_and_csv_header() {
        let r = sample_report();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        emit_report(&r, &p, Format::Json).unwrap();
        let back = read_report(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(
            Aggregates::compute(back.experiment, &back.config, &back.trials),
            r.aggregates
        );
        let c = dir.path().join("sub/r.csv");
        emit_report(&r, &c, Format::Csv).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(4).unwrap().contains(",failed,"));
    }

    #[test]
    fn threshold_midpoint() {
        let a = [1.0, 0.8, 0.1, 0.2];
        let b = [1.2, 0.6, 0.3, 0.0];
        let c = [0.9, 0.7, 0.2, 0.1];
        let e = calibrate_threshold(&[&a, &b, &c], 1).unwrap();
        assert!((2.0 * e - 0.5 * (0.7 + 0.2)).abs() < 1e-15);
        assert_eq!(calibrate_threshold(&[], 1), None);
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert!("xml".parse::<Format>().is_err());
    }
}
