mod common;

use common::{scrambled, small_spec as spec};
use flowpath_core::autodiff::Tape;
use flowpath_core::estimators::{path_grad_logq, per_sample_terms, EstimatorId};
use flowpath_core::flow::{AffineFlow, Flow, RealNvp, RealNvpSpec};
use flowpath_core::matrix::Matrix;
use flowpath_core::target::DoubleWell;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn round_trip_and_change_of_variables(seed in 0u64..1000, rows in proptest::collection::vec(-3.0f64..3.0, 4 * 5)) {
        let flow = scrambled(spec(4, 8), seed, 0.3);
        let z = Matrix::from_vec(5, 4, rows);
        let (x, ld) = flow.forward(&z).unwrap();
        let (back, ldi) = flow.inverse(&x).unwrap();
        for (a, b) in back.as_slice().iter().zip(z.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let lq = flow.log_prob(&x).unwrap();
        for i in 0..5 {
            prop_assert!((ld[i] + ldi[i]).abs() <= 1e-10);
            let expect = flow.base().log_prob(z.row(i)) - ld[i];
            prop_assert!((lq[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn params_round_trip(seed in 0u64..1000) {
        let flow = scrambled(spec(3, 2), seed, 0.5);
        let copy = RealNvp::from_params(*flow.spec(), flow.seed(), flow.params().to_vec()).unwrap();
        prop_assert_eq!(copy.params(), flow.params());
    }
}

#[test]
fn identity_flow_log_prob_at_origin() {
    let flow = RealNvp::new(RealNvpSpec { dim: 6, n_layers: 3, hidden_layers: 1, width: 4, ..Default::default() }, 0);
    let lq = flow.log_prob(&Matrix::zeros(1, 6)).unwrap()[0];
    let expect = -3.0 * (2.0 * std::f64::consts::PI * 100.0).ln();
    assert!((lq - expect).abs() < 1e-12);
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let mut flow = scrambled(RealNvpSpec { dim: 1, n_layers: 4, hidden_layers: 1, width: 4, base_stddev: 10.0, clamp: 5.0 }, 3, 0.4);
    flow.set_layer_affine(1, 0.6, 2.0).unwrap();
    // Trapezoid rule over ±50σ of the image of the base.
    let (lo, hi, n) = (-500.0 * 2.0, 500.0 * 2.0, 400_001);
    let h = (hi - lo) / (n - 1) as f64;
    let x = Matrix::column(&(0..n).map(|i| lo + i as f64 * h).collect::<Vec<_>>());
    let lq = flow.log_prob(&x).unwrap();
    let mut total = 0.0;
    for (i, l) in lq.iter().enumerate() {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        total += w * l.exp();
    }
    total *= h;
    assert!((total - 1.0).abs() < 1e-6, "∫q = {total}");
}

/// `(∂ log q/∂x) · (∂x/∂θ)` by central differences over θ, with the density
/// held at the current parameters.
fn fd_path_grad<F: Flow + Clone>(flow: &F, z: &Matrix, h: f64) -> Vec<f64> {
    let frozen = flow.clone();
    let theta = flow.params().to_vec();
    let mut out = vec![0.0; theta.len()];
    let mut moved = flow.clone();
    for k in 0..theta.len() {
        let mut eval = |delta: f64| -> f64 {
            let mut t = theta.clone();
            t[k] += delta;
            moved.set_params(&t).unwrap();
            let (x, _) = moved.forward(z).unwrap();
            frozen.log_prob(&x).unwrap().iter().sum()
        };
        out[k] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    out
}

#[test]
fn path_grad_logq_matches_finite_differences() {
    let flow = scrambled(RealNvpSpec { dim: 4, n_layers: 2, hidden_layers: 1, width: 6, base_stddev: 1.0, clamp: 5.0 }, 11, 0.4);
    let z = flow.base().sample(3, &mut ChaCha8Rng::seed_from_u64(5));
    let ad = path_grad_logq(&flow, &z).unwrap();
    let fd = fd_path_grad(&flow, &z, 1e-5);
    let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = ad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!(err <= 1e-4 * scale, "relative error {}", err / scale);
}

#[test]
fn total_gradient_splits_into_path_and_score_per_sample() {
    let flow = scrambled(spec(4, 3), 2, 0.3);
    let target = DoubleWell::new(4);
    let z = flow.base().sample(6, &mut ChaCha8Rng::seed_from_u64(9));
    let total = per_sample_terms(EstimatorId::RepQP, &flow, &target, &z).unwrap();
    let path = per_sample_terms(EstimatorId::PathQP, &flow, &target, &z).unwrap();
    let score = per_sample_terms(EstimatorId::Score, &flow, &target, &z).unwrap();
    for ((t, p), s) in total.as_slice().iter().zip(path.as_slice()).zip(score.as_slice()) {
        assert!((t - p - s).abs() <= 1e-9);
    }
}

#[test]
fn affine_flow_is_a_location_scale_map() {
    let f = AffineFlow::new(&[0.5], &[2.0], 1.0).unwrap();
    let x = Matrix::column(&[0.5, 2.5]);
    let lq = f.log_prob(&x).unwrap();
    let norm = -0.5 * (2.0 * std::f64::consts::PI).ln() - 2f64.ln();
    assert!((lq[0] - norm).abs() < 1e-14);
    assert!((lq[1] - (norm - 0.5)).abs() < 1e-14);
    let mut t = Tape::new();
    let theta = t.var(Matrix::row_vector(f.params())).unwrap();
    let xv = t.constant(x).unwrap();
    let l = f.log_q_on(&mut t, theta, xv).unwrap();
    let s = t.sum(l).unwrap();
    // Σ ∂/∂loc = Σ (x−loc)/s², Σ ∂/∂s = Σ (−1/s + (x−loc)²/s³)
    let g = t.gradient(s, &[theta]).unwrap().pop().unwrap();
    assert!((g.as_slice()[0] - 0.5).abs() < 1e-14);
    assert!((g.as_slice()[1] - (-1.0 + 0.5)).abs() < 1e-14);
}
