//! Experiment configuration: a flat `key = value` text format or JSON, with
//! command-line overrides applied last.

use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::sphere;

/// Number of gradient steps: a fixed count or `auto`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Steps {
    /// `max(1, round(n/(η·d^ℓ₀)))`.
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for Steps {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Steps::Auto => s.serialize_str("auto"),
            Steps::Fixed(t) => s.serialize_u64(*t as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Steps {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "auto" => Ok(Steps::Auto),
            Value::Number(n) => n
                .as_u64()
                .map(|t| Steps::Fixed(t as usize))
                .ok_or_else(|| de::Error::custom(format!("T must be a non-negative integer, got {n}"))),
            other => Err(de::Error::custom(format!("T must be an integer or \"auto\", got {other}"))),
        }
    }
}

/// Which channels stage two trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    /// Degrees `0..=ell0` with weights `√N(d,ℓ)`.
    #[default]
    Oracle,
    /// The output of channel selection.
    Selected,
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: de::DeserializeOwned,
{
    let v = Value::deserialize(d)?;
    let v = if v.is_array() { v } else { Value::Array(vec![v]) };
    serde_json::from_value(v).map_err(de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub ell0: usize,
    /// Highest channel degree `L`.
    #[serde(rename = "L")]
    pub max_degree: usize,
    /// Sample sizes; a single value or a strictly increasing grid.
    #[serde(deserialize_with = "one_or_many")]
    pub n: Vec<usize>,
    /// Widths; a single value or a strictly increasing grid.
    #[serde(deserialize_with = "one_or_many")]
    pub m: Vec<usize>,
    pub eta: f64,
    #[serde(rename = "T")]
    pub steps: Steps,
    pub sigma0: f64,
    /// Selection threshold; calibrated on separate seeds when absent.
    pub epsilon0: Option<f64>,
    #[serde(deserialize_with = "one_or_many")]
    pub coeffs: Vec<f64>,
    /// Poles averaged per target degree.
    pub directions_per_degree: usize,
    pub channels: Channels,
    /// Kernel degree for `kernel-conv` and `complexity-curve`; defaults to `ell0`.
    pub ell_hat: Option<usize>,
    pub num_seeds: usize,
    pub calibration_seeds: usize,
    pub num_mc_samples: usize,
    /// Number of fixed point pairs for the kernel error.
    pub num_pairs: usize,
    /// Extra steps at which `train` also reports the risk.
    #[serde(deserialize_with = "one_or_many")]
    pub checkpoints: Vec<usize>,
    pub eps_min: f64,
    pub eps_max: f64,
    pub eps_points: usize,
    pub base_seed: u64,
    /// Where the CLI writes the report. Not echoed into reports.
    #[serde(skip_serializing)]
    pub output_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 3,
            ell0: 1,
            max_degree: 3,
            n: vec![500],
            m: vec![1000],
            eta: 0.5,
            steps: Steps::Auto,
            sigma0: 0.1,
            epsilon0: None,
            coeffs: vec![1.0, 1.0],
            directions_per_degree: 1,
            channels: Channels::Oracle,
            ell_hat: None,
            num_seeds: 10,
            calibration_seeds: 10,
            num_mc_samples: 20_000,
            num_pairs: 200,
            checkpoints: Vec::new(),
            eps_min: 1e-3,
            eps_max: 2.0,
            eps_points: 40,
            base_seed: 0,
            output_path: None,
        }
    }
}

/// Turns a scalar text value into JSON: numbers stay numbers, the rest are strings.
fn scalar(text: &str) -> Value {
    let t = text.trim();
    if let Ok(i) = t.parse::<u64>() {
        return Value::from(i);
    }
    if let Ok(i) = t.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(x) = t.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    match t {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        "null" | "none" => Value::Null,
        _ => Value::String(t.trim_matches('"').to_string()),
    }
}

/// Parses the value of a `key = value` pair; commas or brackets make a list.
pub fn parse_value(text: &str) -> Value {
    let t = text.trim();
    let inner = t.strip_prefix('[').and_then(|s| s.strip_suffix(']'));
    match inner {
        Some(body) if body.trim().is_empty() => Value::Array(Vec::new()),
        Some(body) => Value::Array(body.split(',').map(scalar).collect()),
        None if t.contains(',') => Value::Array(t.split(',').map(scalar).collect()),
        None => scalar(t),
    }
}

fn parse_flat(text: &str) -> Result<Map<String, Value>> {
    let mut map = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        map.insert(k.trim().to_string(), parse_value(v));
    }
    Ok(map)
}

/// Reads a config file. JSON files may hold the config itself or a report
/// whose `config` field is used.
pub fn read_config_map(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        match v {
            Value::Object(mut o) => match o.remove("config") {
                Some(Value::Object(c)) => Ok(c),
                Some(_) => Err(Error::Config("`config` field is not an object".into())),
                None => Ok(o),
            },
            _ => Err(Error::Config("config JSON must be an object".into())),
        }
    } else {
        parse_flat(&text)
    }
}

impl ExperimentConfig {
    /// Builds a config from file values and `key=value` overrides (overrides win),
    /// then validates it.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut map = match path {
            Some(p) => read_config_map(p)?,
            None => Map::new(),
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        let cfg: Self =
            serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if sphere::check_dim(self.d).is_err() {
            return bad(format!("d = {} must be at least 2", self.d));
        }
        if self.coeffs.len() != self.ell0 + 1 {
            return bad(format!("coeffs has {} entries, expected ell0 + 1 = {}", self.coeffs.len(), self.ell0 + 1));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return bad("coeffs must be finite".into());
        }
        if self.coeffs.last() == Some(&0.0) {
            return bad("the coefficient of degree ell0 must be nonzero".into());
        }
        for (name, grid) in [("n", &self.n), ("m", &self.m)] {
            if grid.is_empty() {
                return bad(format!("{name} grid is empty"));
            }
            if grid.contains(&0) {
                return bad(format!("{name} values must be positive"));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} grid must be strictly increasing"));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta = {} must be positive", self.eta));
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return bad(format!("sigma0 = {} must be non-negative", self.sigma0));
        }
        if let Some(e) = self.epsilon0 {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("epsilon0 = {e} must be non-negative"));
            }
        }
        if self.steps == Steps::Fixed(0) {
            return bad("T must be at least 1".into());
        }
        if self.num_seeds == 0 || self.calibration_seeds == 0 {
            return bad("seed counts must be positive".into());
        }
        if self.num_mc_samples < 2 {
            return bad("num_mc_samples must be at least 2".into());
        }
        if self.num_pairs == 0 || self.directions_per_degree == 0 {
            return bad("num_pairs and directions_per_degree must be positive".into());
        }
        if !(self.eps_min > 0.0 && self.eps_max > self.eps_min && self.eps_points >= 2) {
            return bad("need 0 < eps_min < eps_max and eps_points >= 2".into());
        }
        if self.max_degree < self.ell0 {
            log::warn!(
                "L = {} is below ell0 = {}: channel selection cannot recover the target degree",
                self.max_degree,
                self.ell0
            );
        }
        Ok(())
    }

    /// True when selection can, in principle, recover `ell0`.
    pub fn selection_feasible(&self) -> bool {
        self.max_degree >= self.ell0
    }

    pub fn kernel_degree(&self) -> usize {
        self.ell_hat.unwrap_or(self.ell0)
    }

    /// Resolved step count for sample size `n`.
    pub fn steps_for(&self, n: usize) -> usize {
        match self.steps {
            Steps::Fixed(t) => t,
            Steps::Auto => {
                let scale = self.eta * (self.d as f64).powi(self.ell0 as i32);
                ((n as f64 / scale).round() as usize).max(1)
            }
        }
    }

    /// Log-spaced radii from `eps_min` to `eps_max`.
    pub fn eps_grid(&self) -> Vec<f64> {
        let (a, b) = (self.eps_min.ln(), self.eps_max.ln());
        let k = self.eps_points - 1;
        (0..=k).map(|i| (a + (b - a) * i as f64 / k as f64).exp()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "# sweep\nd = 6\nell0 = 1\nL = 3\nn = 500, 1000,2000\nT = auto\ncoeffs = [1, 2.5]\nsigma0=0.5\n").unwrap();
        let c = ExperimentConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.d, 6);
        assert_eq!(c.n, vec![500, 1000, 2000]);
        assert_eq!(c.coeffs, vec![1.0, 2.5]);
        assert_eq!(c.steps, Steps::Auto);
        assert_eq!(c.steps_for(3000), 1000);
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"d": 4, "ell0": 0, "coeffs": 1.0, "T": 7}"#).unwrap();
        let c = ExperimentConfig::load(Some(&p), &[("d".into(), parse_value("5"))]).unwrap();
        assert_eq!(c.d, 5);
        assert_eq!(c.coeffs, vec![1.0]);
        assert_eq!(c.steps_for(1), 7);
    }

    #[test]
    fn rejects_bad_configs() {
        let set = |k: &str, v: &str| ExperimentConfig::load(None, &[(k.into(), parse_value(v))]);
        assert!(matches!(set("n", "100,50"), Err(Error::Config(_))));
        assert!(matches!(set("m", "[]"), Err(Error::Config(_))));
        assert!(matches!(set("bogus", "1"), Err(Error::Config(_))));
        assert!(matches!(set("eta", "0"), Err(Error::Config(_))));
        assert!(matches!(set("T", "soon"), Err(Error::Config(_))));
        let low = ExperimentConfig::load(None, &[("L".into(), parse_value("0"))]).unwrap();
        assert!(!low.selection_feasible());
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig {
            epsilon0: Some(0.25),
            steps: Steps::Fixed(12),
            ..Default::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn eps_grid_endpoints() {
        let g = ExperimentConfig::default().eps_grid();
        assert_eq!(g.len(), 40);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[39] - 2.0).abs() < 1e-12);
    }
}
