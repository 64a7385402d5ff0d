//! The experiment runners behind the CLI subcommands.
//!
//! Trial `k` uses `split(base_seed, k)` for everything it draws (target poles,
//! features, noise, first-layer directions, Monte Carlo points), so adding
//! seeds never changes earlier trials. The same trial seed is reused across
//! grid points, which nests the samples of a sweep.

use super::config::{Channels, ExperimentConfig};
use super::report::{calibrate_threshold, Experiment, RunReport, TrialRecord};
use crate::complexity::{self, KernelSpectrum, Network};
use crate::error::{Error, Result};
use crate::kernel::{self, AttentionWeights, FirstLayerDirections};
use crate::par::*;
use crate::points::UnitPoints;
use crate::seed::{self, stream};
use crate::selection;
use crate::target::{gen_dataset, make_target_multi, LabeledDataset, ZonalTarget};
use crate::trainer::{self, TrainOptions};

/// Training steps at which the loss envelope is anchored.
pub const ENVELOPE_ANCHOR: usize = 10;
const ENVELOPE_SLACK: f64 = 1e-12;

pub fn trial_seed(base: u64, k: usize) -> u64 {
    seed::split(base, k as u64)
}

fn calibration_seed(base: u64, k: usize) -> u64 {
    seed::split(seed::tagged(base, stream::CALIBRATION), k as u64)
}

struct Problem {
    target: ZonalTarget,
    data: LabeledDataset,
    q: FirstLayerDirections,
}

fn problem(cfg: &ExperimentConfig, n: usize, m: usize, seed: u64) -> Result<Problem> {
    let target = make_target_multi(cfg.d, cfg.ell0, &cfg.coeffs, cfg.directions_per_degree, seed)?;
    let data = gen_dataset(&target, n, cfg.sigma0, seed)?;
    let q = FirstLayerDirections::sample(m, cfg.d, seed::tagged(seed, stream::DIRECTIONS))?;
    Ok(Problem { target, data, q })
}

fn expected_mask(cfg: &ExperimentConfig) -> Vec<bool> {
    (0..=cfg.max_degree).map(|l| l <= cfg.ell0).collect()
}

/// Runs `f` for every `(grid value, seed index)` pair concurrently and returns
/// the records in grid-then-seed order. Errors become failure records.
fn run_trials<F>(grid: &[usize], seeds: usize, f: F) -> Vec<TrialRecord>
where
    F: Fn(usize, usize, &mut TrialRecord) -> Result<()> + Sync,
{
    let jobs: Vec<(usize, usize)> = grid.iter().flat_map(|&g| (0..seeds).map(move |k| (g, k))).collect();
    jobs.into_par_iter()
        .map(|(g, k)| {
            let mut rec = TrialRecord {
                trial: k,
                ..Default::default()
            };
            if let Err(e) = f(g, k, &mut rec) {
                log::warn!("trial {k} at grid value {g} failed: {e}");
                rec.fail(&e);
            }
            rec
        })
        .collect()
}

fn raw_weights_for(cfg: &ExperimentConfig, n: usize, m: usize, seed: u64) -> Result<Vec<f64>> {
    let p = problem(cfg, n, m, seed)?;
    Ok(selection::raw_weights(&p.data, &p.q, cfg.max_degree)?.1)
}

/// Threshold calibrated on seeds disjoint from the trial seeds.
pub fn calibrated_epsilon0(cfg: &ExperimentConfig) -> Result<f64> {
    let (n, m) = (cfg.n[0], cfg.m[0]);
    let taus: Vec<Vec<f64>> = (0..cfg.calibration_seeds)
        .into_par_iter()
        .map(|k| raw_weights_for(cfg, n, m, calibration_seed(cfg.base_seed, k)))
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = taus.iter().map(|t| t.as_slice()).collect();
    calibrate_threshold(&refs, cfg.ell0).ok_or(Error::Empty("calibration runs"))
}

fn threshold_for(cfg: &ExperimentConfig) -> Result<f64> {
    match cfg.epsilon0 {
        Some(e) => Ok(e),
        None => calibrated_epsilon0(cfg),
    }
}

fn record_selection(cfg: &ExperimentConfig, rec: &mut TrialRecord, tau_raw: &[f64], eps0: f64) -> Result<Vec<bool>> {
    rec.tau_raw = Some(tau_raw.to_vec());
    if cfg.max_degree > cfg.ell0 {
        rec.gap = Some(selection::raw_gap(tau_raw, cfg.ell0));
    }
    rec.recovered = Some(false);
    let sel = selection::threshold(tau_raw, eps0, cfg.d)?;
    rec.recovered = Some(sel.mask == expected_mask(cfg));
    rec.ell_hat = Some(sel.ell_hat);
    rec.mask = Some(sel.mask.clone());
    Ok(sel.mask)
}

/// Repeated channel selection; reports the recovery rate and raw-weight spread.
pub fn run_channel_selection_trials(cfg: &ExperimentConfig) -> Result<RunReport> {
    let eps0 = threshold_for(cfg)?;
    let (n, m) = (cfg.n[0], cfg.m[0]);
    let trials = run_trials(&[n], cfg.num_seeds, |_, k, rec| {
        let s = trial_seed(cfg.base_seed, k);
        rec.seed = s;
        rec.n = n;
        rec.m = m;
        let tau = raw_weights_for(cfg, n, m, s)?;
        record_selection(cfg, rec, &tau, eps0).map(|_| ())
    });
    Ok(RunReport::new(Experiment::Select, cfg.clone(), Some(eps0), trials))
}

/// Raw weights on the trial seeds, with the threshold calibrated from them.
pub fn run_calibration(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (n, m) = (cfg.n[0], cfg.m[0]);
    let trials = run_trials(&[n], cfg.num_seeds, |_, k, rec| {
        let s = trial_seed(cfg.base_seed, k);
        rec.seed = s;
        rec.n = n;
        rec.m = m;
        let tau = raw_weights_for(cfg, n, m, s)?;
        if cfg.max_degree > cfg.ell0 {
            rec.gap = Some(selection::raw_gap(&tau, cfg.ell0));
        }
        rec.tau_raw = Some(tau);
        Ok(())
    });
    Ok(RunReport::new(Experiment::CalibrateEps0, cfg.clone(), None, trials))
}

/// Does `loss(t) ≤ C/(ηt)` hold on `[anchor, T]` with `C` fitted at the anchor?
/// Returns `(C, holds)`; `None` when the run is shorter than the anchor.
pub fn envelope_check(loss: &[f64], eta: f64, anchor: usize) -> Option<(f64, bool)> {
    let last = loss.len().checked_sub(1)?;
    if last < anchor || anchor == 0 {
        return None;
    }
    let c = anchor as f64 * eta * loss[anchor];
    let holds = (anchor..=last).all(|t| loss[t] <= c / (eta * t as f64) * (1.0 + ENVELOPE_SLACK));
    Some((c, holds))
}

fn training_trial(cfg: &ExperimentConfig, n: usize, m: usize, seed: u64, eps0: Option<f64>, rec: &mut TrialRecord) -> Result<()> {
    rec.seed = seed;
    rec.n = n;
    rec.m = m;
    let p = problem(cfg, n, m, seed)?;
    let tau = match cfg.channels {
        Channels::Oracle => AttentionWeights::oracle(cfg.d, cfg.ell0, cfg.max_degree.max(cfg.ell0))?,
        Channels::Selected => {
            let raw = selection::raw_weights(&p.data, &p.q, cfg.max_degree)?.1;
            let mask = record_selection(cfg, rec, &raw, eps0.expect("threshold resolved"))?;
            AttentionWeights::finalized(cfg.d, &mask)?
        }
    };
    let steps = cfg.steps_for(n);
    rec.steps = Some(steps);
    let opts = TrainOptions {
        snapshot_at: cfg.checkpoints.iter().copied().filter(|&t| t < steps).collect(),
        sketch_seed: seed,
        ..Default::default()
    };
    let (state, trace) = trainer::train(&p.data, &p.q, &tau, cfg.eta, steps, &opts)?;
    rec.final_loss = trace.loss.last().copied();
    rec.empirical_loss = Some(complexity::empirical_loss(state.predictions(), &p.data.f_star)?);
    if let Some((c, ok)) = envelope_check(&trace.clean_loss, cfg.eta, ENVELOPE_ANCHOR) {
        rec.envelope_c = Some(c);
        rec.envelope_ok = Some(ok);
    }
    for (t, a) in &trace.snapshots {
        let net = Network { a, q: &p.q, tau: &tau };
        let (r, _) = complexity::mc_risk(&net, &p.target, cfg.num_mc_samples, seed)?;
        rec.checkpoint_risks.push((*t, r));
    }
    let net = Network {
        a: &state.a,
        q: &p.q,
        tau: &tau,
    };
    let (risk, se) = complexity::mc_risk(&net, &p.target, cfg.num_mc_samples, seed)?;
    rec.risk = Some(risk);
    rec.risk_se = Some(se);
    Ok(())
}

fn training_report(cfg: &ExperimentConfig, experiment: Experiment) -> Result<RunReport> {
    let eps0 = match cfg.channels {
        Channels::Oracle => None,
        Channels::Selected => Some(threshold_for(cfg)?),
    };
    let m = cfg.m[0];
    let trials = run_trials(&cfg.n, cfg.num_seeds, |n, k, rec| {
        training_trial(cfg, n, m, trial_seed(cfg.base_seed, k), eps0, rec)
    });
    Ok(RunReport::new(experiment, cfg.clone(), eps0, trials))
}

/// Stage two (optionally after selection) at every `n` of the config.
pub fn run_training_run(cfg: &ExperimentConfig) -> Result<RunReport> {
    training_report(cfg, Experiment::Train)
}

/// Training over an `n` grid with a log-log fit of the median risk.
pub fn run_risk_sweep(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (lo, hi) = (cfg.n[0], *cfg.n.last().unwrap_or(&0));
    if cfg.n.len() < 4 || hi < 10 * lo {
        return Err(Error::Config(format!(
            "risk-sweep needs at least 4 sample sizes spanning a decade, got {:?}",
            cfg.n
        )));
    }
    training_report(cfg, Experiment::RiskSweep)
}

/// Fixed point pairs shared by every trial and width.
pub fn kernel_pairs(cfg: &ExperimentConfig) -> Result<(UnitPoints, UnitPoints)> {
    let base = seed::tagged(cfg.base_seed, stream::PAIRS);
    Ok((
        UnitPoints::sample(cfg.num_pairs, cfg.d, seed::split(base, 0))?,
        UnitPoints::sample(cfg.num_pairs, cfg.d, seed::split(base, 1))?,
    ))
}

/// Largest `|K̂ − K|` over the pairs for width `m`.
pub fn kernel_error(cfg: &ExperimentConfig, pairs: &(UnitPoints, UnitPoints), m: usize, seed: u64) -> Result<f64> {
    let ell_hat = cfg.kernel_degree();
    let q = FirstLayerDirections::sample(m, cfg.d, seed::tagged(seed, stream::DIRECTIONS))?;
    let tau = AttentionWeights::oracle(cfg.d, ell_hat, ell_hat)?;
    let emp = kernel::empirical_kernel_pairs(&pairs.0, &pairs.1, &q, &tau)?;
    let pop = kernel::population_kernel_pairs(&pairs.0, &pairs.1, ell_hat)?;
    let err = emp.iter().zip(&pop).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if !err.is_finite() {
        return Err(Error::NonFinite("kernel error"));
    }
    Ok(err)
}

/// Kernel error over an `m` grid with a log-log fit of the median error.
pub fn run_kernel_convergence(cfg: &ExperimentConfig) -> Result<RunReport> {
    if cfg.m.len() < 3 {
        return Err(Error::Config(format!("kernel-conv needs at least 3 widths, got {:?}", cfg.m)));
    }
    let pairs = kernel_pairs(cfg)?;
    let trials = run_trials(&cfg.m, cfg.num_seeds, |m, k, rec| {
        let s = trial_seed(cfg.base_seed, k);
        rec.seed = s;
        rec.m = m;
        rec.kernel_error = Some(kernel_error(cfg, &pairs, m, s)?);
        Ok(())
    });
    Ok(RunReport::new(Experiment::KernelConv, cfg.clone(), None, trials))
}

/// Empirical complexity of the degree-`ℓ̂` kernel on fresh samples of size
/// `n`, with its critical radius, against the population closed form.
pub fn run_complexity_curve(cfg: &ExperimentConfig) -> Result<RunReport> {
    let n = cfg.n[0];
    let ell_hat = cfg.kernel_degree();
    let grid = cfg.eps_grid();
    let trials = run_trials(&[n], cfg.num_seeds, |_, k, rec| {
        let s = trial_seed(cfg.base_seed, k);
        rec.seed = s;
        rec.n = n;
        let x = UnitPoints::sample(n, cfg.d, seed::tagged(s, stream::FEATURES))?;
        let gram = kernel::population_gram(&x, &x, ell_hat)?;
        let spec = KernelSpectrum::empirical(&kernel::normalized_gram(&gram, n)?)?;
        rec.complexity = Some(grid.iter().map(|&e| spec.complexity(e)).collect::<Result<_>>()?);
        if cfg.sigma0 > 0.0 {
            rec.critical_radius = Some(complexity::critical_radius(|e| spec.complexity(e), cfg.sigma0)?);
        }
        Ok(())
    });
    Ok(RunReport::new(Experiment::ComplexityCurve, cfg.clone(), None, trials))
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<RunReport> {
    match experiment {
        Experiment::Select => run_channel_selection_trials(cfg),
        Experiment::Train => run_training_run(cfg),
        Experiment::RiskSweep => run_risk_sweep(cfg),
        Experiment::KernelConv => run_kernel_convergence(cfg),
        Experiment::CalibrateEps0 => run_calibration(cfg),
        Experiment::ComplexityCurve => run_complexity_curve(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Steps;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            d: 3,
            ell0: 1,
            max_degree: 3,
            n: vec![200],
            m: vec![300],
            sigma0: 0.1,
            coeffs: vec![1.0, 3f64.sqrt()],
            num_seeds: 3,
            calibration_seeds: 3,
            num_mc_samples: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn envelope_examples() {
        let loss: Vec<f64> = (0..30).map(|t| (t as f64 + 1.0).powi(-2)).collect();
        let (c, ok) = envelope_check(&loss, 0.5, 10).unwrap();
        assert!((c - 10.0 * 0.5 / 121.0).abs() < 1e-15);
        assert!(ok);
        let mut bad = loss.clone();
        bad[20] = 1.0;
        assert!(!envelope_check(&bad, 0.5, 10).unwrap().1);
        assert!(envelope_check(&loss[..5], 0.5, 10).is_none());
    }

    #[test]
    fn more_seeds_keep_earlier_trials() {
        let mut cfg = small();
        cfg.epsilon0 = Some(0.05);
        let a = run_channel_selection_trials(&cfg).unwrap();
        cfg.num_seeds = 5;
        let b = run_channel_selection_trials(&cfg).unwrap();
        assert_eq!(a.trials[..], b.trials[..3]);
    }

    #[test]
    fn degree_zero_selection() {
        let cfg = ExperimentConfig {
            ell0: 0,
            max_degree: 3,
            coeffs: vec![1.0],
            n: vec![400],
            m: vec![400],
            ..small()
        };
        let r = run_channel_selection_trials(&cfg).unwrap();
        assert!(r.aggregates.success_rate.unwrap() >= 0.9, "{:?}", r.trials);
    }

    #[test]
    fn training_noiseless_fits() {
        let cfg = ExperimentConfig {
            sigma0: 0.0,
            steps: Steps::Fixed(400),
            num_seeds: 1,
            ..small()
        };
        let r = run_training_run(&cfg).unwrap();
        let t = &r.trials[0];
        assert!(t.ok(), "{:?}", t.failure);
        assert!(t.empirical_loss.unwrap() < 1e-6, "{:?}", t.empirical_loss);
        assert_eq!(t.envelope_ok, Some(true));
    }

    #[test]
    fn selected_channels_training() {
        let cfg = ExperimentConfig {
            channels: Channels::Selected,
            num_seeds: 2,
            checkpoints: vec![5],
            ..small()
        };
        let r = run_training_run(&cfg).unwrap();
        assert!(r.epsilon0.is_some());
        for t in &r.trials {
            if t.ok() {
                assert_eq!(t.checkpoint_risks.len(), 1);
                assert!(t.mask.is_some());
            }
        }
    }

    #[test]
    fn grid_preconditions() {
        let cfg = ExperimentConfig {
            n: vec![100, 200],
            ..small()
        };
        assert!(matches!(run_risk_sweep(&cfg), Err(Error::Config(_))));
        assert!(matches!(run_kernel_convergence(&small()), Err(Error::Config(_))));
    }

    #[test]
    fn complexity_curve_report() {
        let cfg = ExperimentConfig {
            n: vec![60],
            ell_hat: Some(2),
            sigma0: 1.0,
            ..small()
        };
        let r = run_complexity_curve(&cfg).unwrap();
        let curve = r.aggregates.curve.as_ref().unwrap();
        assert_eq!(curve.len(), cfg.eps_points);
        let last = curve.last().unwrap();
        assert!((last.r_empirical - last.r_population).abs() < 1e-9);
        assert!(r.aggregates.population_radius.is_some());
        assert!(r.trials.iter().all(|t| t.critical_radius.is_some()));
    }
}
