//! Linear-chain CRF over `T` tags.
//!
//! Transitions are a `(T+2) x (T+2)` matrix indexed `[from][to]`; row `T`
//! is the start state and column `T+1` the stop state. A path
//! `y_1..y_L` scores
//! `trans[start][y_1] + Σ_t emit[t][y_t] + Σ_t trans[y_t][y_{t+1}] + trans[y_L][stop]`.
//! Entries into start and out of stop never contribute.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Matrix};

pub fn start_state(num_tags: usize) -> usize {
    num_tags
}

pub fn stop_state(num_tags: usize) -> usize {
    num_tags + 1
}

fn check_shapes(emissions: &Matrix, transitions: &Matrix) -> Result<usize> {
    let t = emissions.cols();
    if emissions.rows() == 0 || t == 0 {
        return Err(Error::dim("CRF needs at least one position and one tag"));
    }
    if transitions.shape() != (t + 2, t + 2) {
        return Err(Error::dim(format!(
            "transitions must be {0}x{0} for {1} tags, got {2:?}",
            t + 2,
            t,
            transitions.shape()
        )));
    }
    Ok(t)
}

fn check_tags(tags: &[usize], emissions: &Matrix) -> Result<()> {
    if tags.len() != emissions.rows() {
        return Err(Error::dim(format!(
            "{} gold tags for {} positions",
            tags.len(),
            emissions.rows()
        )));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= emissions.cols()) {
        return Err(Error::Label(format!(
            "tag id {bad} out of range for {} tags",
            emissions.cols()
        )));
    }
    Ok(())
}

pub fn path_score(emissions: &Matrix, transitions: &Matrix, tags: &[usize]) -> Result<f64> {
    let t = check_shapes(emissions, transitions)?;
    check_tags(tags, emissions)?;
    let mut score = transitions.get(start_state(t), tags[0]);
    for (i, &y) in tags.iter().enumerate() {
        score += emissions.get(i, y);
        if i > 0 {
            score += transitions.get(tags[i - 1], y);
        }
    }
    Ok(score + transitions.get(*tags.last().unwrap(), stop_state(t)))
}

/// Forward scores `alpha[i][y]`: log-sum of all prefixes ending in `y` at `i`.
fn forward_table(emissions: &Matrix, transitions: &Matrix, t: usize) -> Vec<Vec<f64>> {
    let l = emissions.rows();
    let mut alpha = vec![vec![0.0; t]; l];
    for y in 0..t {
        alpha[0][y] = transitions.get(start_state(t), y) + emissions.get(0, y);
    }
    let mut buf = vec![0.0; t];
    for i in 1..l {
        for y in 0..t {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha[i - 1][p] + transitions.get(p, y);
            }
            alpha[i][y] = log_sum_exp(&buf) + emissions.get(i, y);
        }
    }
    alpha
}

/// Backward scores `beta[i][y]`: log-sum of all suffixes after `y` at `i`.
fn backward_table(emissions: &Matrix, transitions: &Matrix, t: usize) -> Vec<Vec<f64>> {
    let l = emissions.rows();
    let mut beta = vec![vec![0.0; t]; l];
    for y in 0..t {
        beta[l - 1][y] = transitions.get(y, stop_state(t));
    }
    let mut buf = vec![0.0; t];
    for i in (0..l - 1).rev() {
        for y in 0..t {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = transitions.get(y, n) + emissions.get(i + 1, n) + beta[i + 1][n];
            }
            beta[i][y] = log_sum_exp(&buf);
        }
    }
    beta
}

fn log_z(alpha: &[Vec<f64>], transitions: &Matrix, t: usize) -> f64 {
    let last = alpha.last().unwrap();
    let ends: Vec<f64> = (0..t).map(|y| last[y] + transitions.get(y, stop_state(t))).collect();
    log_sum_exp(&ends)
}

/// `log Σ_paths exp(score(path))` by the forward algorithm.
pub fn crf_log_partition(emissions: &Matrix, transitions: &Matrix) -> Result<f64> {
    let t = check_shapes(emissions, transitions)?;
    Ok(log_z(&forward_table(emissions, transitions, t), transitions, t))
}

/// Negative log-likelihood of `gold` under the CRF.
pub fn crf_nll(emissions: &Matrix, transitions: &Matrix, gold: &[usize]) -> Result<f64> {
    let gold_score = path_score(emissions, transitions, gold)?;
    Ok((crf_log_partition(emissions, transitions)? - gold_score).max(0.0))
}

/// NLL together with its gradients: `(nll, d_emissions, d_transitions)`.
/// Both gradients are expected counts minus gold counts.
pub fn crf_nll_with_grad(emissions: &Matrix, transitions: &Matrix, gold: &[usize]) -> Result<(f64, Matrix, Matrix)> {
    let t = check_shapes(emissions, transitions)?;
    check_tags(gold, emissions)?;
    let l = emissions.rows();
    let alpha = forward_table(emissions, transitions, t);
    let beta = backward_table(emissions, transitions, t);
    let z = log_z(&alpha, transitions, t);
    let gold_score = path_score(emissions, transitions, gold)?;

    let mut d_emit = Matrix::zeros(l, t);
    let mut d_trans = Matrix::zeros(t + 2, t + 2);
    for i in 0..l {
        for y in 0..t {
            d_emit.set(i, y, (alpha[i][y] + beta[i][y] - z).exp());
        }
    }
    for y in 0..t {
        d_trans.set(start_state(t), y, d_emit.get(0, y));
        d_trans.set(y, stop_state(t), d_emit.get(l - 1, y));
    }
    for i in 0..l.saturating_sub(1) {
        for p in 0..t {
            for n in 0..t {
                let pm = (alpha[i][p] + transitions.get(p, n) + emissions.get(i + 1, n) + beta[i + 1][n] - z).exp();
                d_trans.set(p, n, d_trans.get(p, n) + pm);
            }
        }
    }
    for (i, &y) in gold.iter().enumerate() {
        d_emit.set(i, y, d_emit.get(i, y) - 1.0);
        if i > 0 {
            let p = gold[i - 1];
            d_trans.set(p, y, d_trans.get(p, y) - 1.0);
        }
    }
    let s = start_state(t);
    d_trans.set(s, gold[0], d_trans.get(s, gold[0]) - 1.0);
    let last = gold[l - 1];
    d_trans.set(last, stop_state(t), d_trans.get(last, stop_state(t)) - 1.0);
    Ok(((z - gold_score).max(0.0), d_emit, d_trans))
}

/// Highest-scoring path; among equal scores the lexicographically
/// smallest wins.
pub fn viterbi(emissions: &Matrix, transitions: &Matrix) -> Result<Vec<usize>> {
    let t = check_shapes(emissions, transitions)?;
    let l = emissions.rows();
    // best[i][y]: best score of positions i..L given tag y at i, stop included
    let mut best = vec![vec![0.0; t]; l];
    for y in 0..t {
        best[l - 1][y] = emissions.get(l - 1, y) + transitions.get(y, stop_state(t));
    }
    for i in (0..l - 1).rev() {
        for y in 0..t {
            let tail = (0..t)
                .map(|n| transitions.get(y, n) + best[i + 1][n])
                .fold(f64::NEG_INFINITY, f64::max);
            best[i][y] = emissions.get(i, y) + tail;
        }
    }
    let mut path = Vec::with_capacity(l);
    let mut prev = start_state(t);
    for row in &best {
        let mut choice = 0;
        let mut top = f64::NEG_INFINITY;
        for (y, b) in row.iter().enumerate() {
            let s = transitions.get(prev, y) + b;
            if s > top {
                top = s;
                choice = y;
            }
        }
        path.push(choice);
        prev = choice;
    }
    Ok(path)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::{grad_check, HasParameters, Parameter, Rng};
    use proptest::prelude::*;

    /// Every tag sequence of length `l` over `t` tags, in lexicographic order.
    pub(crate) fn all_paths(l: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..l {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..t).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub(crate) fn brute_force(e: &Matrix, tr: &Matrix) -> (f64, f64, Vec<usize>) {
        let paths = all_paths(e.rows(), e.cols());
        let scores: Vec<f64> = paths.iter().map(|p| path_score(e, tr, p).unwrap()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best = paths[scores.iter().position(|&s| s == max).unwrap()].clone();
        (log_sum_exp(&scores), max, best)
    }

    fn random_instance(l: usize, t: usize, rng: &mut Rng) -> (Matrix, Matrix) {
        (
            Matrix::random_normal(l, t, 1.5, rng),
            Matrix::random_normal(t + 2, t + 2, 1.5, rng),
        )
    }

    #[test]
    fn uniform_scores() {
        let (e, tr) = (Matrix::zeros(2, 2), Matrix::zeros(4, 4));
        assert!((crf_log_partition(&e, &tr).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((crf_nll(&e, &tr, &[1, 0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(viterbi(&e, &tr).unwrap(), vec![0, 0]);
    }

    #[test]
    fn single_step_is_log_sum_exp() {
        let e = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let z = crf_log_partition(&e, &Matrix::zeros(5, 5)).unwrap();
        assert!((z - log_sum_exp(&[0.3, -1.0, 2.0])).abs() < 1e-12);
    }

    #[test]
    fn dominant_gold_path() {
        let gold = [2, 0, 1];
        let mut e = Matrix::zeros(3, 3);
        for (i, &y) in gold.iter().enumerate() {
            e.set(i, y, 40.0);
        }
        let tr = Matrix::zeros(5, 5);
        assert!(crf_nll(&e, &tr, &gold).unwrap() < 1e-12);
        assert_eq!(viterbi(&e, &tr).unwrap(), gold);
    }

    #[test]
    fn out_of_range_tag() {
        let (e, tr) = (Matrix::zeros(2, 2), Matrix::zeros(4, 4));
        assert!(matches!(crf_nll(&e, &tr, &[0, 2]), Err(Error::Label(_))));
        assert!(matches!(crf_nll(&e, &tr, &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let l = 1 + rng.below(4);
            let t = 1 + rng.below(4);
            // small integer scores make exact ties frequent
            let e = Matrix::new(l, t, (0..l * t).map(|_| rng.below(3) as f64).collect()).unwrap();
            let tr = Matrix::new(t + 2, t + 2, (0..(t + 2) * (t + 2)).map(|_| rng.below(2) as f64).collect()).unwrap();
            assert_eq!(viterbi(&e, &tr).unwrap(), brute_force(&e, &tr).2);
        }
    }

    #[test]
    fn exhaustive_oracle_over_all_small_shapes() {
        let mut rng = Rng::new(11);
        let mut instances = 0;
        while instances < 200 {
            for l in 1..=4 {
                for t in 1..=4 {
                    let (e, tr) = random_instance(l, t, &mut rng);
                    let (z, max, _) = brute_force(&e, &tr);
                    assert!((crf_log_partition(&e, &tr).unwrap() - z).abs() <= 1e-9);
                    let path = viterbi(&e, &tr).unwrap();
                    assert!((path_score(&e, &tr, &path).unwrap() - max).abs() <= 1e-9);
                    instances += 1;
                }
            }
        }
    }

    struct CrfProbe {
        emissions: Parameter,
        transitions: Parameter,
        gold: Vec<usize>,
    }

    impl HasParameters for CrfProbe {
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.emissions, &mut self.transitions]
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        for (l, t) in [(1, 3), (4, 3), (3, 4)] {
            let (e, tr) = random_instance(l, t, &mut rng);
            let gold = (0..l).map(|_| rng.below(t)).collect();
            let mut probe = CrfProbe {
                emissions: Parameter::new("e", e),
                transitions: Parameter::new("tr", tr),
                gold,
            };
            let report = grad_check(
                &mut probe,
                |p, with_grad| {
                    let (nll, de, dt) =
                        crf_nll_with_grad(&p.emissions.value, &p.transitions.value, &p.gold).unwrap();
                    if with_grad {
                        p.emissions.grad.add_scaled(1.0, &de).unwrap();
                        p.transitions.grad.add_scaled(1.0, &dt).unwrap();
                    }
                    nll
                },
                1e-4,
                1e-3,
            );
            assert!(report.passed(), "{report:?}");
        }
    }

    proptest! {
        #[test]
        fn nll_is_non_negative_and_partition_dominates(l in 1usize..6, t in 1usize..5, seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let (e, tr) = random_instance(l, t, &mut rng);
            let gold: Vec<usize> = (0..l).map(|_| rng.below(t)).collect();
            let z = crf_log_partition(&e, &tr).unwrap();
            prop_assert!(z >= path_score(&e, &tr, &gold).unwrap() - 1e-12);
            prop_assert!(crf_nll(&e, &tr, &gold).unwrap() >= 0.0);
            let (nll, _, _) = crf_nll_with_grad(&e, &tr, &gold).unwrap();
            prop_assert!((nll - crf_nll(&e, &tr, &gold).unwrap()).abs() < 1e-12);
        }
    }
}
