use proptest::prelude::*;

use sphattn::complexity::{critical_radius, empirical_complexity, population_critical_radius, KernelSpectrum, SpectrumSource};
use sphattn::kernel::{self, AttentionWeights, FirstLayerDirections};
use sphattn::points::UnitPoints;
use sphattn::selection;
use sphattn::sphere::{gegenbauer_all, harmonic_dim};
use sphattn::target::{gen_dataset, make_target};
use sphattn::trainer::{closed_form_residual_power, closed_form_residual_spectral, train, TrainOptions};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gegenbauer_bounded_and_parity(t in -1.0f64..=1.0, d in 2usize..25) {
        let p = gegenbauer_all(t, d, 12).unwrap();
        let pm = gegenbauer_all(-t, d, 12).unwrap();
        for (l, (a, b)) in p.iter().zip(&pm).enumerate() {
            prop_assert!(a.abs() <= 1.0 + 1e-12);
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            prop_assert!((a - sign * b).abs() <= 1e-12);
        }
        let one = gegenbauer_all(1.0, d, 12).unwrap();
        prop_assert!(one.iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn sampling_is_prefix_stable(seed in any::<u64>(), n in 1usize..700, extra in 1usize..600) {
        let a = UnitPoints::sample(n, 4, seed).unwrap();
        let b = UnitPoints::sample(n + extra, 4, seed).unwrap();
        prop_assert_eq!(a.as_slice(), &b.as_slice()[..n * 4]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn grams_are_psd(seed in any::<u64>(), d in 2usize..7, ell_hat in 0usize..4) {
        let x = UnitPoints::sample(40, d, seed).unwrap();
        let pop = kernel::population_gram(&x, &x, ell_hat).unwrap();
        let q = FirstLayerDirections::sample(30, d, seed ^ 1).unwrap();
        let tau = AttentionWeights::oracle(d, ell_hat, ell_hat).unwrap();
        let emp = kernel::empirical_gram(&x, &x, &q, &tau).unwrap();
        for k in [pop, emp] {
            let ev = kernel::gram_spectrum(&kernel::normalized_gram(&k, 40).unwrap()).unwrap();
            prop_assert!(ev.iter().all(|&v| v >= -1e-10 * ev[0].max(1.0)));
        }
    }

    #[test]
    fn raw_weights_scale_quadratically(seed in any::<u64>(), c in -5.0f64..5.0) {
        let target = make_target(4, 1, &[0.5, 1.0], seed).unwrap();
        let data = gen_dataset(&target, 60, 0.2, seed).unwrap();
        let q = FirstLayerDirections::sample(50, 4, seed ^ 7).unwrap();
        let mut scaled = data.clone();
        scaled.y.iter_mut().for_each(|v| *v *= c);
        let (a, t) = selection::raw_weights(&data, &q, 3).unwrap();
        let (ac, tc) = selection::raw_weights(&scaled, &q, 3).unwrap();
        let ascale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tscale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(&ac) {
            prop_assert!((c * x - y).abs() <= 1e-12 * ascale.max(1e-300) * c.abs().max(1.0));
        }
        for (x, y) in t.iter().zip(&tc) {
            prop_assert!((c * c * x - y).abs() <= 1e-12 * tscale.max(1e-300) * (c * c).max(1.0));
        }
    }

    #[test]
    fn threshold_is_monotone(tau in prop::collection::vec(0.0f64..2.0, 4), e1 in 0.0f64..0.5, de in 0.0f64..0.5) {
        let lo = selection::threshold(&tau, e1, 3);
        let hi = selection::threshold(&tau, e1 + de, 3);
        if let Ok(hi) = hi {
            let lo = lo.unwrap();
            for (a, b) in lo.mask.iter().zip(&hi.mask) {
                prop_assert!(!b || *a);
            }
        }
    }

    #[test]
    fn gd_loss_is_monotone(seed in any::<u64>(), eta in 0.05f64..1.0) {
        let target = make_target(3, 1, &[1.0, 1.0], seed).unwrap();
        let data = gen_dataset(&target, 50, 0.3, seed).unwrap();
        let q = FirstLayerDirections::sample(80, 3, seed ^ 3).unwrap();
        let tau = AttentionWeights::oracle(3, 2, 2).unwrap();
        let k = kernel::empirical_gram(&data.features, &data.features, &q, &tau).unwrap();
        let lmax = kernel::gram_spectrum(&kernel::normalized_gram(&k, 50).unwrap()).unwrap()[0];
        let step = eta / lmax;
        let (_, trace) = train(&data, &q, &tau, step, 40, &TrainOptions::default()).unwrap();
        for w in trace.loss.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn closed_form_routes_agree(seed in any::<u64>(), t in 0usize..300, eta in 0.01f64..1.5) {
        let x = UnitPoints::sample(30, 3, seed).unwrap();
        let k = kernel::normalized_gram(&kernel::population_gram(&x, &x, 2).unwrap(), 30).unwrap();
        let y: Vec<f64> = x.rows().map(|r| r[0] - 0.5 * r[2]).collect();
        let a = closed_form_residual_power(&k, &y, eta, t).unwrap();
        let b = closed_form_residual_spectral(&k, &y, eta, t).unwrap();
        let scale = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-9 * scale * (1.0 + a.iter().map(|v| v.abs()).fold(0.0, f64::max)));
    }

    #[test]
    fn complexity_is_sub_root(ev in prop::collection::vec(0.0f64..3.0, 1..20), sigma0 in 0.05f64..3.0) {
        let mut ev = ev;
        ev.sort_by(|a, b| b.total_cmp(a));
        let spec = KernelSpectrum { n: ev.len(), eigenvalues: ev, source: SpectrumSource::Empirical };
        let grid: Vec<f64> = (0..60).map(|i| 1e-4 * 1.2f64.powi(i)).collect();
        let r: Vec<f64> = grid.iter().map(|&e| empirical_complexity(&spec, e).unwrap()).collect();
        for i in 1..grid.len() {
            prop_assert!(r[i] >= r[i - 1] * (1.0 - 1e-12));
            prop_assert!(r[i] / grid[i] <= r[i - 1] / grid[i - 1] * (1.0 + 1e-12));
        }
        let e = critical_radius(|x| empirical_complexity(&spec, x), sigma0).unwrap();
        if e > 0.0 {
            let g = |x: f64| sigma0 * empirical_complexity(&spec, x).unwrap() - x * x;
            prop_assert!(g(e).abs() <= 1e-12 * (e * e).max(1.0));
            for &x in &grid {
                if x < e * (1.0 - 1e-9) {
                    prop_assert!(g(x) >= 0.0);
                } else if x > e * (1.0 + 1e-9) {
                    prop_assert!(g(x) <= 0.0);
                }
            }
        }
    }

    #[test]
    fn population_radius_closed_form(d in 2usize..6, ell_hat in 0usize..4, n in 100usize..100_000, sigma0 in 0.01f64..1.0) {
        let r = (0..=ell_hat).map(|l| harmonic_dim(d, l).unwrap() as f64).sum::<f64>();
        let smallest = 1.0 / harmonic_dim(d, ell_hat).unwrap() as f64;
        let closed = sigma0 * sigma0 * r / n as f64;
        prop_assume!(closed <= smallest);
        let e = population_critical_radius(d, ell_hat, n, sigma0).unwrap();
        prop_assert!((e * e - closed).abs() <= 1e-10);
    }
}

/// `E[P_k(⟨x,u⟩)·P_l(⟨x,u⟩)] = δ_kl / N(d,k)` for uniform `x`.
#[test]
fn gegenbauer_orthogonality_monte_carlo() {
    let d = 4;
    let max_degree = 3;
    let count = 1_000_000;
    let x = UnitPoints::sample(count, d, 99).unwrap();
    let w = max_degree + 1;
    let mut sum = vec![0.0; w * w];
    let mut sum2 = vec![0.0; w * w];
    for row in x.rows() {
        let p = gegenbauer_all(row[0], d, max_degree).unwrap();
        for k in 0..w {
            for l in 0..w {
                let v = p[k] * p[l];
                sum[k * w + l] += v;
                sum2[k * w + l] += v * v;
            }
        }
    }
    let n = count as f64;
    for k in 0..w {
        for l in 0..w {
            let mean = sum[k * w + l] / n;
            let se = ((sum2[k * w + l] / n - mean * mean) / n).sqrt();
            let expect = if k == l { 1.0 / harmonic_dim(d, k).unwrap() as f64 } else { 0.0 };
            assert!((mean - expect).abs() <= 5.0 * se + 1e-12, "({k},{l}): {mean} vs {expect} ± {se}");
        }
    }
}

/// Over 10 seeds the empirical critical radius stays within a factor 3 of the population one.
#[test]
fn empirical_and_population_radii_are_comparable() {
    let (d, ell_hat, n, sigma0) = (3, 2, 2000, 1.0);
    let pop = population_critical_radius(d, ell_hat, n, sigma0).unwrap();
    for seed in 0..10 {
        let x = UnitPoints::sample(n, d, 1000 + seed).unwrap();
        let k = kernel::population_gram(&x, &x, ell_hat).unwrap();
        let spec = KernelSpectrum::empirical(&kernel::normalized_gram(&k, n).unwrap()).unwrap();
        let emp = critical_radius(|e| spec.complexity(e), sigma0).unwrap();
        let ratio = (emp * emp) / (pop * pop);
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "seed {seed}: ratio {ratio}");
    }
}
