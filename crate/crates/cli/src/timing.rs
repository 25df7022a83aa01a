//! Wall-clock cost of one gradient evaluation per estimator.

use std::time::Instant;

use flowpath_core::estimators::{estimate, EstimatorId};
use flowpath_core::flow::Flow;
use flowpath_core::target::Target;
use flowpath_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub estimator: EstimatorId,
    pub batch_size: usize,
    /// Median over the repetitions, in milliseconds.
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Times `reps` evaluations of each estimator on the same batch of `n`
/// base samples, after one untimed warm-up call. Estimators are
/// interleaved across repetitions so drifts in machine load hit all of
/// them alike.
pub fn timing_probe<F: Flow, T: Target>(
    flow: &F,
    target: &T,
    n: usize,
    reps: usize,
    estimators: &[EstimatorId],
    workers: usize,
) -> Result<Vec<Timing>> {
    let z = flow.base().sample(n, &mut ChaCha8Rng::seed_from_u64(0));
    let mut samples = vec![Vec::with_capacity(reps); estimators.len()];
    for &id in estimators {
        estimate(id, flow, target, &z, workers)?;
    }
    for _ in 0..reps.max(1) {
        for (k, &id) in estimators.iter().enumerate() {
            let t0 = Instant::now();
            let est = estimate(id, flow, target, &z, workers)?;
            samples[k].push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(est);
        }
    }
    Ok(estimators
        .iter()
        .zip(samples)
        .map(|(&estimator, samples_ms)| Timing { estimator, batch_size: n, median_ms: median(&samples_ms), samples_ms })
        .collect())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
