//! Gumbel-softmax relaxation of categorical sampling.

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Clamp for the uniform draw feeding `-log(-log(u))`.
pub const GUMBEL_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Add Gumbel noise before the softmax.
    Sample,
    /// Plain `softmax(logits / tau)`.
    Deterministic,
}

/// How gradients flow through a categorical choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// One-hot forward, soft-vector gradient.
    StraightThrough,
    /// Soft vector in both directions.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardSample {
    pub index: usize,
    pub soft: Vec<f64>,
}

impl HardSample {
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.soft.len()];
        v[self.index] = 1.0;
        v
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn gumbel_noise(rng: &mut Rng) -> f64 {
    let u = rng.uniform().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Numerically stable softmax of `logits / tau`, written into `out`.
fn tempered_softmax(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        // keep every entry strictly inside (0, 1) even when exp underflows
        *o = (*o / sum).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    }
}

fn check(logits: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::param("empty logit vector"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::param("non-finite logit"));
    }
    Ok(())
}

pub fn gumbel_softmax(
    logits: &[f64],
    tau: f64,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<Vec<f64>> {
    check(logits, tau)?;
    let mut out = vec![0.0; logits.len()];
    match mode {
        SampleMode::Deterministic => tempered_softmax(logits, tau, &mut out),
        SampleMode::Sample => {
            let noisy: Vec<f64> = logits.iter().map(|l| l + gumbel_noise(rng)).collect();
            tempered_softmax(&noisy, tau, &mut out);
        }
    }
    Ok(out)
}

/// One-hot at the argmax of the (possibly noised) soft vector, plus the
/// soft vector itself for the straight-through backward pass.
pub fn gumbel_softmax_hard(
    logits: &[f64],
    tau: f64,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<HardSample> {
    let soft = gumbel_softmax(logits, tau, rng, mode)?;
    Ok(HardSample {
        index: argmax(&soft),
        soft,
    })
}

/// Gradient with respect to the logits given the gradient with respect to
/// the soft output `y = softmax((logits + g) / tau)`:
/// `dl_i = y_i (dy_i - Σ_j y_j dy_j) / tau`.
///
/// Under straight-through estimation the upstream gradient of the one-hot
/// output is passed here unchanged.
pub fn softmax_backward(soft: &[f64], upstream: &[f64], tau: f64, out: &mut [f64]) {
    let inner: f64 = soft.iter().zip(upstream).map(|(y, g)| y * g).sum();
    for ((o, &y), &g) in out.iter_mut().zip(soft).zip(upstream) {
        *o = y * (g - inner) / tau;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let mut rng = Rng::new(0);
        for tau in [0.1, 1.0, 7.0] {
            let p = gumbel_softmax(&[0.0, 0.0, 0.0], tau, &mut rng, SampleMode::Deterministic)
                .unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dominant_logit_wins() {
        let mut rng = Rng::new(0);
        let p = gumbel_softmax(&[0.0, 10.0, 0.0], 0.1, &mut rng, SampleMode::Deterministic)
            .unwrap();
        assert_eq!(argmax(&p), 1);
        assert!(p[1] > 0.999);
    }

    #[test]
    fn non_positive_tau_rejected() {
        let mut rng = Rng::new(0);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                gumbel_softmax(&[1.0, 2.0], tau, &mut rng, SampleMode::Sample),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn sampling_is_symmetric_for_equal_logits() {
        let mut rng = Rng::new(2024);
        let draws = 10_000;
        let zeros = (0..draws)
            .filter(|_| {
                gumbel_softmax_hard(&[0.0, 0.0], 0.5, &mut rng, SampleMode::Sample)
                    .unwrap()
                    .index
                    == 0
            })
            .count();
        let freq = zeros as f64 / draws as f64;
        assert!((0.48..=0.52).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn hard_sample_is_argmax() {
        let mut rng = Rng::new(0);
        let s = gumbel_softmax_hard(&[2.0, 1.0, 0.0], 1.0, &mut rng, SampleMode::Deterministic)
            .unwrap();
        assert_eq!(s.one_hot(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let mut rng = Rng::new(0);
        let s = gumbel_softmax_hard(&[1.0, 1.0], 1.0, &mut rng, SampleMode::Deterministic)
            .unwrap();
        assert_eq!(s.one_hot(), vec![1.0, 0.0]);
    }

    #[test]
    fn straight_through_gradient_matches_soft_finite_differences() {
        // loss = c · y; through the hard path the upstream gradient of the
        // one-hot is c, and the straight-through estimate must equal the
        // true derivative of the soft path.
        let logits = [0.3, -1.2, 0.8, 0.1];
        let c = [1.5, -0.7, 0.2, 2.0];
        let tau = 0.7;
        let mut rng = Rng::new(0);
        let hard =
            gumbel_softmax_hard(&logits, tau, &mut rng, SampleMode::Deterministic).unwrap();
        let mut analytic = [0.0; 4];
        softmax_backward(&hard.soft, &c, tau, &mut analytic);

        let loss = |l: &[f64]| -> f64 {
            let mut r = Rng::new(0);
            let y = gumbel_softmax(l, tau, &mut r, SampleMode::Deterministic).unwrap();
            y.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let h = 1e-4;
        for i in 0..4 {
            let mut plus = logits;
            let mut minus = logits;
            plus[i] += h;
            minus[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs());
            assert!(rel <= 1e-3, "index {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(99);
        let l = [0.5, -0.25, 3.0];
        assert_eq!(
            gumbel_softmax(&l, 0.9, &mut a, SampleMode::Deterministic).unwrap(),
            gumbel_softmax(&l, 0.9, &mut b, SampleMode::Deterministic).unwrap()
        );
    }

    proptest! {
        #[test]
        fn output_is_a_probability_vector(
            logits in proptest::collection::vec(-1e6f64..1e6, 1..12),
            tau in 1e-3f64..=100.0,
            seed in 0u64..1000,
            sample in proptest::bool::ANY,
        ) {
            let mut rng = Rng::new(seed);
            let mode = if sample { SampleMode::Sample } else { SampleMode::Deterministic };
            let p = gumbel_softmax(&logits, tau, &mut rng, mode).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
