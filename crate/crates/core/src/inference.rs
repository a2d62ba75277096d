//! Posterior beliefs over the consensus class given partial votes.
//!
//! In the finite-pool regime the unseen completion of the expert pool is a
//! Dirichlet-multinomial draw and the consensus is the argmax of the completed
//! histogram. In the infinite-pool limit the completed histogram is swapped
//! for the population belief vector π itself. Both posteriors are estimated by
//! Monte Carlo; the finite case also has an exact enumeration oracle for small
//! pools.

use rand::Rng;

use crate::distributions::{
    composition_count, dirichlet_sample, dirmult_logpmf, dirmult_sample, for_each_composition,
    ConcentrationVector, CountVector, Simplex,
};
use crate::error::{Error, Result};
use crate::likelihood::MAX_EXACT_SUPPORT;
use crate::rng::SplitRng;

/// Default Monte-Carlo sample count per query decision.
pub const DEFAULT_INFERENCE_SAMPLES: usize = 2048;

/// Posterior over the consensus class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusPosterior {
    probs: Simplex,
    acc: f64,
    argmax_class: usize,
}

impl ConsensusPosterior {
    /// Normalize non-negative weights into a posterior.
    pub fn from_weights(weights: Vec<f64>) -> Self {
        let probs = Simplex::normalized(weights).expect("posterior weights");
        let argmax_class = probs.argmax_set()[0];
        let acc = probs.get(argmax_class);
        ConsensusPosterior {
            probs,
            acc,
            argmax_class,
        }
    }

    pub fn probs(&self) -> &Simplex {
        &self.probs
    }

    /// Posterior probability of the most likely consensus class.
    pub fn acc(&self) -> f64 {
        self.acc
    }

    pub fn argmax_class(&self) -> usize {
        self.argmax_class
    }
}

/// Finite-pool Monte-Carlo posterior: complete the pool `m` times with
/// `votes + DirMult(N − n, α + votes)` and tally the argmax of each completed
/// histogram, ties broken uniformly per draw.
pub fn consensus_posterior_finexp(
    votes: &CountVector,
    alpha: &ConcentrationVector,
    n_pool: u32,
    m: usize,
    rng: &mut SplitRng,
) -> ConsensusPosterior {
    assert!(m >= 1, "need at least one Monte-Carlo sample");
    let n = votes.sum();
    assert!(n <= n_pool, "votes exceed the pool size");
    let post = alpha.posterior(votes);
    let remaining = n_pool - n;
    let mut tallies = vec![0u32; votes.len()];
    for _ in 0..m {
        let completion = dirmult_sample(remaining, &post, rng);
        let h = votes.plus(&completion);
        let tied = h.argmax_set();
        let pick = if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.gen_range(0..tied.len())]
        };
        tallies[pick] += 1;
    }
    ConsensusPosterior::from_weights(tallies.into_iter().map(|t| t as f64).collect())
}

/// Infinite-pool Monte-Carlo posterior: P(argmax π = k) under
/// π ~ Dirichlet(α + votes). Exact ties are measure-zero but still broken
/// uniformly.
pub fn consensus_posterior_infexp(
    votes: &CountVector,
    alpha: &ConcentrationVector,
    m: usize,
    rng: &mut SplitRng,
) -> ConsensusPosterior {
    assert!(m >= 1, "need at least one Monte-Carlo sample");
    let post = alpha.posterior(votes);
    let mut tallies = vec![0u32; votes.len()];
    for _ in 0..m {
        let pi = dirichlet_sample(&post, rng);
        let tied = pi.argmax_set();
        let pick = if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.gen_range(0..tied.len())]
        };
        tallies[pick] += 1;
    }
    ConsensusPosterior::from_weights(tallies.into_iter().map(|t| t as f64).collect())
}

/// Exact finite-pool posterior by enumerating every completion, splitting tie
/// mass uniformly among the tied classes. The Monte-Carlo estimator's oracle.
pub fn consensus_posterior_exact_finexp(
    votes: &CountVector,
    alpha: &ConcentrationVector,
    n_pool: u32,
) -> Result<ConsensusPosterior> {
    let n = votes.sum();
    if n > n_pool {
        return Err(Error::Mismatch(format!(
            "{n} votes exceed the pool of {n_pool}"
        )));
    }
    let k = votes.len();
    let remaining = n_pool - n;
    let support = composition_count(remaining, k);
    if support > MAX_EXACT_SUPPORT {
        return Err(Error::SupportTooLarge {
            support,
            limit: MAX_EXACT_SUPPORT,
        });
    }
    let post = alpha.posterior(votes);
    let mut mass = vec![0.0f64; k];
    for_each_composition(remaining, k, &mut |d| {
        let completion = CountVector::from_unchecked(d.to_vec());
        let w = dirmult_logpmf(&completion, remaining, &post)
            .expect("sums match")
            .exp();
        let h = votes.plus(&completion);
        let tied = h.argmax_set();
        let share = w / tied.len() as f64;
        for class in tied {
            mass[class] += share;
        }
    });
    Ok(ConsensusPosterior::from_weights(mass))
}

/// Posterior once the consensus is fully determined by observed votes (pool
/// exhausted, or the leader's margin exceeds the votes remaining): the
/// realized plurality with tie mass split uniformly.
pub fn determined_posterior(votes: &CountVector) -> ConsensusPosterior {
    let tied = votes.argmax_set();
    let share = 1.0 / tied.len() as f64;
    let mut mass = vec![0.0; votes.len()];
    for class in tied {
        mass[class] = share;
    }
    ConsensusPosterior::from_weights(mass)
}

/// Highest-posterior class; exact float ties broken uniformly at random.
pub fn predict(posterior: &ConsensusPosterior, rng: &mut SplitRng) -> usize {
    let tied = posterior.probs().argmax_set();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.gen_range(0..tied.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> SplitRng {
        SplitRng::seed_from(seed)
    }

    fn counts(c: &[u32]) -> CountVector {
        CountVector::new(c.to_vec()).unwrap()
    }

    fn conc(a: &[f64]) -> ConcentrationVector {
        ConcentrationVector::new(a.to_vec()).unwrap()
    }

    #[test]
    fn finexp_exhausted_pool_is_certain() {
        let p = consensus_posterior_finexp(&counts(&[2, 1]), &conc(&[1.0, 1.0]), 3, 64, &mut rng(1));
        assert_eq!(p.argmax_class(), 0);
        assert_abs_diff_eq!(p.acc(), 1.0);
        assert_abs_diff_eq!(p.probs().get(1), 0.0);
    }

    #[test]
    fn finexp_symmetric_single_expert() {
        let p =
            consensus_posterior_finexp(&counts(&[0, 0]), &conc(&[1.0, 1.0]), 1, 100_000, &mut rng(2));
        assert_abs_diff_eq!(p.probs().get(0), 0.5, epsilon = 0.01);
    }

    #[test]
    fn finexp_hand_enumerated_five_sixths() {
        // remaining 2 votes ~ DirMult(2, [2,1]): completions [2,0],[1,1],[0,2]
        // with probs 1/2, 1/3, 1/6 ⇒ P(class 0) = 1/2 + 1/3 = 5/6
        let exact =
            consensus_posterior_exact_finexp(&counts(&[1, 0]), &conc(&[1.0, 1.0]), 3).unwrap();
        assert_abs_diff_eq!(exact.probs().get(0), 5.0 / 6.0, epsilon = 1e-12);
        let mc = consensus_posterior_finexp(
            &counts(&[1, 0]),
            &conc(&[1.0, 1.0]),
            3,
            100_000,
            &mut rng(3),
        );
        assert_abs_diff_eq!(mc.probs().get(0), 5.0 / 6.0, epsilon = 0.01);
    }

    #[test]
    fn infexp_symmetric_and_concentrated() {
        let p = consensus_posterior_infexp(&counts(&[0, 0]), &conc(&[1.0, 1.0]), 50_000, &mut rng(4));
        assert_abs_diff_eq!(p.probs().get(0), 0.5, epsilon = 0.012);
        let p =
            consensus_posterior_infexp(&counts(&[0, 0]), &conc(&[100.0, 1.0]), 20_000, &mut rng(5));
        assert!(p.probs().get(0) >= 0.999);
    }

    #[test]
    fn infexp_beta_cdf_oracle() {
        // α + votes = [2,1]: P(argmax = 0) = P(Beta(2,1) > 1/2) = 3/4
        let p =
            consensus_posterior_infexp(&counts(&[1, 0]), &conc(&[1.0, 1.0]), 100_000, &mut rng(6));
        assert_abs_diff_eq!(p.probs().get(0), 0.75, epsilon = 0.01);
    }

    #[test]
    fn exact_splits_tie_mass_symmetrically() {
        // uniform everything, even pool, no votes: exactly one half each
        let p = consensus_posterior_exact_finexp(&counts(&[0, 0]), &conc(&[1.0, 1.0]), 4).unwrap();
        assert_abs_diff_eq!(p.probs().get(0), 0.5, epsilon = 1e-12);
        let total: f64 = p.probs().probs().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_refuses_large_supports() {
        let votes = CountVector::zeros(8);
        let alpha = ConcentrationVector::new(vec![1.0; 8]).unwrap();
        assert!(matches!(
            consensus_posterior_exact_finexp(&votes, &alpha, 500),
            Err(Error::SupportTooLarge { .. })
        ));
    }

    #[test]
    fn vote_monotonicity_at_the_exact_oracle() {
        // adding one vote for class k never decreases P(consensus = k);
        // exhaustive over K ∈ {2,3}, N ≤ 6
        for k in [2usize, 3] {
            let alpha = ConcentrationVector::new(
                (0..k).map(|i| 0.7 + 0.3 * i as f64).collect(),
            )
            .unwrap();
            for n_pool in 1..=6u32 {
                for n in 0..n_pool {
                    for_each_composition(n, k, &mut |v| {
                        let votes = CountVector::from_unchecked(v.to_vec());
                        let base =
                            consensus_posterior_exact_finexp(&votes, &alpha, n_pool).unwrap();
                        for class in 0..k {
                            let mut plus = votes.clone();
                            plus.increment(class);
                            let boosted =
                                consensus_posterior_exact_finexp(&plus, &alpha, n_pool).unwrap();
                            assert!(
                                boosted.probs().get(class) >= base.probs().get(class) - 1e-12,
                                "K={k} N={n_pool} votes={v:?} class={class}"
                            );
                        }
                    });
                }
            }
        }
    }

    #[test]
    fn mc_error_shrinks_at_root_m_rate() {
        // error at M=1e4 vs M=1e6 should shrink roughly 10x
        let votes = counts(&[1, 0]);
        let alpha = conc(&[1.0, 1.0]);
        let truth = 5.0 / 6.0;
        let reps = 32;
        let mut err_small = 0.0;
        let mut err_large = 0.0;
        for i in 0..reps {
            let mut r1 = SplitRng::derive(50, &[i]);
            let mut r2 = SplitRng::derive(60, &[i]);
            err_small +=
                (consensus_posterior_finexp(&votes, &alpha, 3, 10_000, &mut r1).probs().get(0)
                    - truth)
                    .abs();
            err_large +=
                (consensus_posterior_finexp(&votes, &alpha, 3, 1_000_000, &mut r2).probs().get(0)
                    - truth)
                    .abs();
        }
        let ratio = err_small / err_large;
        assert!(
            (5.0..20.0).contains(&ratio),
            "expected ~10x shrink, got {ratio:.2}"
        );
    }

    #[test]
    fn determined_posterior_cases() {
        let p = determined_posterior(&counts(&[3, 1, 0]));
        assert_eq!(p.argmax_class(), 0);
        assert_abs_diff_eq!(p.acc(), 1.0);
        let p = determined_posterior(&counts(&[2, 2, 0]));
        assert_abs_diff_eq!(p.acc(), 0.5);
        assert_abs_diff_eq!(p.probs().get(2), 0.0);
    }

    #[test]
    fn predict_contract() {
        let mut r = rng(7);
        let sure = ConsensusPosterior::from_weights(vec![0.9, 0.1]);
        assert_eq!(predict(&sure, &mut r), 0);
        let onehot = ConsensusPosterior::from_weights(vec![0.0, 1.0, 0.0]);
        assert_eq!(predict(&onehot, &mut r), 1);
        let tied = ConsensusPosterior::from_weights(vec![0.5, 0.5]);
        let draws = 100_000;
        let mut zero = 0;
        for _ in 0..draws {
            if predict(&tied, &mut r) == 0 {
                zero += 1;
            }
        }
        assert_abs_diff_eq!(zero as f64 / draws as f64, 0.5, epsilon = 0.01);
    }

    #[test]
    fn posteriors_are_seed_deterministic() {
        let votes = counts(&[1, 0, 1]);
        let alpha = conc(&[0.8, 1.1, 1.4]);
        let a = consensus_posterior_finexp(&votes, &alpha, 5, 512, &mut rng(8));
        let b = consensus_posterior_finexp(&votes, &alpha, 5, 512, &mut rng(8));
        assert_eq!(a.probs().probs(), b.probs().probs());
        let a = consensus_posterior_infexp(&votes, &alpha, 512, &mut rng(9));
        let b = consensus_posterior_infexp(&votes, &alpha, 512, &mut rng(9));
        assert_eq!(a.probs().probs(), b.probs().probs());
    }
}
