mod common;

use common::{rng, scrambled, small_spec};
use flowpath_core::flow::Flow;
use flowpath_core::matrix::Matrix;
use flowpath_core::sampling::{
    batch_means_se, bootstrap_interval, forward_ess, hmc_sample, log_weights, log_z_hat, nis_estimate, reverse_ess,
    weighted_mean, HmcConfig,
};
use flowpath_core::target::{DoubleWell, GaussianTarget, SelfTarget, Target};
use proptest::prelude::*;

proptest! {
    #[test]
    fn reverse_ess_ignores_common_offset(lw in proptest::collection::vec(-30.0f64..30.0, 2..40), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = lw.iter().map(|v| v + c).collect();
        let a = reverse_ess(&lw).unwrap();
        let b = reverse_ess(&shifted).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a > 0.0 && a <= 1.0 + 1e-12);
        prop_assert!(a >= 1.0 / lw.len() as f64 - 1e-12);
    }

    #[test]
    fn weighted_mean_of_constant_is_exact(lw in proptest::collection::vec(-300.0f64..0.0, 2..40), c in -1e3f64..1e3) {
        let (m, _) = weighted_mean(&lw, &vec![c; lw.len()]).unwrap();
        prop_assert_eq!(m, c);
    }
}

#[test]
fn self_target_weights_are_flat() {
    let flow = scrambled(small_spec(4, 4), 1, 0.3);
    let target = SelfTarget::new(&flow);
    let (_, x, _) = flow.sample(500, &mut rng(3)).unwrap();
    let lw = log_weights(&flow, &target, &x).unwrap();
    assert!((reverse_ess(&lw).unwrap() - 1.0).abs() <= 1e-9);

    // forward ESS with p-samples drawn from the flow itself and Ẑ from an
    // independent q batch
    let (_, xq, _) = flow.sample(10_000, &mut rng(4)).unwrap();
    let (_, xp, _) = flow.sample(10_000, &mut rng(5)).unwrap();
    let lz = log_z_hat(&log_weights(&flow, &target, &xq).unwrap()).unwrap();
    let fwd = forward_ess(&log_weights(&flow, &target, &xp).unwrap(), lz).unwrap();
    assert!((fwd - 1.0).abs() <= 0.02, "forward ESS {fwd}");
}

#[test]
fn nis_reduces_to_sample_mean_when_q_is_p() {
    let flow = scrambled(small_spec(4, 2), 2, 0.3);
    let target = SelfTarget::new(&flow);
    let obs = |x: &[f64]| x[0] * x[0] + x[1];
    let (mean, se) = nis_estimate(&flow, &target, obs, 2000, &mut rng(8)).unwrap();
    let (_, x, _) = flow.sample(2000, &mut rng(8)).unwrap();
    let vals: Vec<f64> = (0..x.rows()).map(|i| obs(x.row(i))).collect();
    let plain = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - plain) * (v - plain)).sum::<f64>() / (vals.len() - 1) as f64;
    assert!((mean - plain).abs() <= 1e-12 * plain.abs().max(1.0));
    assert!((se - (var / 2000.0).sqrt()).abs() <= 0.01 * se);
    let (one, _) = nis_estimate(&flow, &DoubleWell::new(4), |_| 1.0, 100, &mut rng(1)).unwrap();
    assert_eq!(one, 1.0);
}

#[test]
fn bootstrap_brackets_the_statistic() {
    let vals: Vec<f64> = (0..400).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let mean = vals.iter().sum::<f64>() / 400.0;
    let (lo, hi) = bootstrap_interval(&vals, 1000, &mut rng(2), |v| Ok(v.iter().sum::<f64>() / v.len() as f64)).unwrap();
    assert!(lo < mean && mean < hi);
    // 16–84 % band of a mean ≈ ±1 standard error
    let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 399.0).sqrt();
    let half = 0.5 * (hi - lo);
    assert!((half / (sd / 20.0) - 1.0).abs() < 0.15);
}

#[test]
fn hmc_gaussian_variance() {
    let sigma = 1.7;
    let g = GaussianTarget::new(&[0.5], &[sigma]).unwrap();
    let cfg = HmcConfig { n_chains: 4, n_steps: 25_000, n_leapfrog: 10, step_size: 0.3, burn_in: 1000, seed: 3, ..Default::default() };
    let run = hmc_sample(&g, &cfg, 1).unwrap();
    assert_eq!(run.samples.rows(), 100_000);
    assert!(run.acceptance > 0.5 && run.acceptance < 0.9, "acceptance {}", run.acceptance);
    let x = run.samples.as_slice();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let sq: Vec<f64> = x.iter().map(|v| (v - 0.5) * (v - 0.5)).collect();
    let var = sq.iter().sum::<f64>() / sq.len() as f64;
    let se = batch_means_se(&sq, 100);
    assert!((var - sigma * sigma).abs() <= 4.0 * se, "variance {var} ± {se}");
    assert!((mean - 0.5).abs() <= 4.0 * batch_means_se(x, 100));
}

#[test]
fn hmc_double_well_visits_both_wells() {
    let dw = DoubleWell::new(8);
    assert!(dw.is_even());
    let cfg = HmcConfig { n_chains: 4, n_steps: 10_000, n_leapfrog: 20, burn_in: 1000, seed: 11, ..Default::default() };
    let run = hmc_sample(&dw, &cfg, 1).unwrap();
    assert_eq!(run.mirror_rejections, 0);
    assert!(run.mirror_moves > 0);
    let positive = (0..run.samples.rows()).filter(|&i| run.samples.row(i).iter().sum::<f64>() > 0.0).count();
    let frac = positive as f64 / run.samples.rows() as f64;
    assert!((frac - 0.5).abs() <= 0.02, "occupancy {frac}");
}

#[test]
fn hmc_mirror_rejections_expose_odd_actions() {
    let g = GaussianTarget::new(&[2.0], &[0.5]).unwrap();
    assert!(!g.is_even());
    let cfg = HmcConfig { n_chains: 1, n_steps: 500, n_leapfrog: 5, burn_in: 50, seed: 1, ..Default::default() };
    let run = hmc_sample(&g, &cfg, 1).unwrap();
    assert!(run.mirror_rejections > 0);
    // stays in the right place despite the mirror proposals
    let m = run.samples.as_slice().iter().sum::<f64>() / 500.0;
    assert!((m - 2.0).abs() < 0.2);
}

#[test]
fn log_weights_need_matching_dimensions() {
    let flow = scrambled(small_spec(4, 2), 2, 0.1);
    assert!(log_weights(&flow, &DoubleWell::new(4), &Matrix::zeros(3, 5)).is_err());
    let t: &dyn Target = &DoubleWell::new(4);
    assert_eq!(t.dim(), 4);
}
