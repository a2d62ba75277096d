//! Querying policies: the posterior-threshold family (learnable or with
//! pinned prior parameters, under finite- or infinite-pool inference) and the
//! random / entropy / model-picker baselines that draw a per-sample binomial
//! query budget.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::distributions::{plurality, CountVector, Simplex};
use crate::error::{Error, Result};
use crate::inference::{
    consensus_posterior_finexp, consensus_posterior_infexp, determined_posterior, predict,
    ConsensusPosterior, DEFAULT_INFERENCE_SAMPLES,
};
use crate::prior::{alpha_from, prior_mode, HyperPriorConfig, PriorParams, Regime};
use crate::rng::SplitRng;

/// Default learning rate of the model-picker loss weights.
pub const DEFAULT_MP_ETA: f64 = 0.3;

/// Inference/learning variant of the threshold policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRegime {
    /// Finite-pool inference, Θ learned online.
    FinExp,
    /// Infinite-pool inference, Θ learned online.
    InfExp,
    /// Finite-pool inference, Θ pinned at θ = φ = τ = 1.
    FixedFin,
    /// Infinite-pool inference, Θ pinned at θ = φ = τ = 1.
    FixedInf,
}

impl ThresholdRegime {
    pub fn learnable(self) -> bool {
        matches!(self, ThresholdRegime::FinExp | ThresholdRegime::InfExp)
    }

    pub fn likelihood_regime(self) -> Regime {
        match self {
            ThresholdRegime::FinExp | ThresholdRegime::FixedFin => Regime::FinExp,
            ThresholdRegime::InfExp | ThresholdRegime::FixedInf => Regime::InfExp,
        }
    }
}

/// Policy family and hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Query until the posterior consensus probability clears `rho`.
    Threshold { rho: f64, regime: ThresholdRegime },
    /// Query Binomial(N, beta) experts regardless of the classifier.
    Random { beta: f64 },
    /// Random with beta driven by the classifier's prediction entropy.
    Entropy { v: f64 },
    /// Random with beta driven by exponential-weights per-class loss tracking.
    ModelPicker {
        scale: f64,
        #[serde(default = "default_eta")]
        eta: f64,
    },
}

fn default_eta() -> f64 {
    DEFAULT_MP_ETA
}

/// Mutable policy state carried along one stream.
#[derive(Debug, Clone)]
pub struct PolicyState {
    kind: PolicyKind,
    params: PriorParams,
    hyper: HyperPriorConfig,
    /// Model-picker per-class loss estimates.
    losses: Vec<f64>,
    pool_size: u32,
    mc_samples: usize,
}

impl PolicyState {
    pub fn new(kind: PolicyKind, k: usize, pool_size: u32) -> Result<Self> {
        Self::with_mc_samples(kind, k, pool_size, DEFAULT_INFERENCE_SAMPLES)
    }

    pub fn with_mc_samples(
        kind: PolicyKind,
        k: usize,
        pool_size: u32,
        mc_samples: usize,
    ) -> Result<Self> {
        match kind {
            PolicyKind::Threshold { rho, .. } => {
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::Validation(format!("rho must be in [0,1], got {rho}")));
                }
            }
            PolicyKind::Random { beta } => {
                if !(0.0..=1.0).contains(&beta) {
                    return Err(Error::Validation(format!(
                        "beta must be in [0,1], got {beta}"
                    )));
                }
            }
            PolicyKind::Entropy { v } => {
                if !(v >= 0.0) {
                    return Err(Error::Validation(format!("v must be ≥ 0, got {v}")));
                }
            }
            PolicyKind::ModelPicker { scale, eta } => {
                if !(scale >= 0.0) || !(eta >= 0.0) {
                    return Err(Error::Validation(format!(
                        "scale and eta must be ≥ 0, got scale={scale}, eta={eta}"
                    )));
                }
            }
        }
        let (params, hyper) = match kind {
            PolicyKind::Threshold { regime, .. } => {
                let hyper = HyperPriorConfig::for_regime(regime.likelihood_regime());
                let params = if regime.learnable() {
                    prior_mode(&hyper, k)
                } else {
                    PriorParams::ones(k)
                };
                (params, hyper)
            }
            _ => (
                PriorParams::ones(k),
                HyperPriorConfig::for_regime(Regime::InfExp),
            ),
        };
        Ok(PolicyState {
            kind,
            params,
            hyper,
            losses: vec![0.0; k],
            pool_size,
            mc_samples,
        })
    }

    /// Pin Θ to explicit values (and stop learning them).
    pub fn with_pinned_params(mut self, params: PriorParams) -> Self {
        if let PolicyKind::Threshold { rho, regime } = self.kind {
            let pinned = match regime {
                ThresholdRegime::FinExp => ThresholdRegime::FixedFin,
                ThresholdRegime::InfExp => ThresholdRegime::FixedInf,
                fixed => fixed,
            };
            self.kind = PolicyKind::Threshold {
                rho,
                regime: pinned,
            };
        }
        self.params = params;
        self
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn params(&self) -> &PriorParams {
        &self.params
    }

    pub fn set_params(&mut self, params: PriorParams) {
        self.params = params;
    }

    pub fn hyper(&self) -> &HyperPriorConfig {
        &self.hyper
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn pool_size(&self) -> u32 {
        self.pool_size
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples
    }

    /// Whether the harness should refit Θ for this policy.
    pub fn learnable(&self) -> bool {
        matches!(
            self.kind,
            PolicyKind::Threshold { regime, .. } if regime.learnable()
        )
    }

    /// Stable label used in logs and sweep CSVs.
    pub fn describe(&self) -> String {
        match self.kind {
            PolicyKind::Threshold { rho, regime } => {
                let tag = match regime {
                    ThresholdRegime::FinExp => "finexp",
                    ThresholdRegime::InfExp => "infexp",
                    ThresholdRegime::FixedFin => "fixed_fin",
                    ThresholdRegime::FixedInf => "fixed_inf",
                };
                format!("threshold:{tag}:rho={rho}")
            }
            PolicyKind::Random { beta } => format!("random:beta={beta}"),
            PolicyKind::Entropy { v } => format!("entropy:v={v}"),
            PolicyKind::ModelPicker { scale, eta } => {
                format!("model_picker:scale={scale}:eta={eta}")
            }
        }
    }
}

/// Outcome of one query-or-commit decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Query,
    Commit { class: usize, acc: f64 },
}

/// Compute the regime's consensus posterior for the current votes.
pub fn threshold_posterior(
    votes: &CountVector,
    f: &Simplex,
    state: &PolicyState,
    mc_rng: &mut SplitRng,
) -> ConsensusPosterior {
    let regime = match state.kind {
        PolicyKind::Threshold { regime, .. } => regime,
        _ => panic!("threshold_posterior on a non-threshold policy"),
    };
    let n = votes.sum();
    let (top, second) = votes.top_two_counts();
    // Once the observed margin exceeds the votes left in the pool the
    // consensus is mathematically determined, for every regime.
    if n >= state.pool_size || (top - second) as u64 > (state.pool_size - n) as u64 {
        return determined_posterior(votes);
    }
    let alpha = alpha_from(f, state.params());
    match regime.likelihood_regime() {
        Regime::FinExp => {
            consensus_posterior_finexp(votes, &alpha, state.pool_size, state.mc_samples, mc_rng)
        }
        Regime::InfExp => consensus_posterior_infexp(votes, &alpha, state.mc_samples, mc_rng),
    }
}

/// Query-or-commit rule of the threshold policy: commit when the posterior
/// consensus probability clears `rho`, when the pool is exhausted, or when
/// the consensus is already determined by the observed margin.
///
/// `mc_rng` drives the posterior sampling; `pred_rng` breaks prediction ties
/// so every policy shares one tie-break stream per timestep.
pub fn threshold_decide(
    votes: &CountVector,
    f: &Simplex,
    state: &PolicyState,
    mc_rng: &mut SplitRng,
    pred_rng: &mut SplitRng,
) -> Decision {
    let rho = match state.kind {
        PolicyKind::Threshold { rho, .. } => rho,
        _ => panic!("threshold_decide on a non-threshold policy"),
    };
    let posterior = threshold_posterior(votes, f, state, mc_rng);
    let exhausted = votes.sum() >= state.pool_size;
    let determined = posterior.acc() == 1.0;
    if posterior.acc() > rho || exhausted || determined {
        Decision::Commit {
            class: predict(&posterior, pred_rng),
            acc: posterior.acc(),
        }
    } else {
        Decision::Query
    }
}

/// Number of experts the binomial baselines plan to query for one sample.
pub fn random_draw_count(beta: f64, n_pool: u32, rng: &mut SplitRng) -> u32 {
    assert!((0.0..=1.0).contains(&beta), "beta must be in [0,1]");
    if beta <= 0.0 {
        0
    } else if beta >= 1.0 {
        n_pool
    } else {
        Binomial::new(n_pool as u64, beta)
            .expect("valid binomial")
            .sample(rng) as u32
    }
}

/// Per-sample query rate of the entropy baseline:
/// `clamp(v · H(f), 0, 1)` with `H(f) = −(1/K) Σ f_k ln f_k`.
pub fn entropy_beta(f: &Simplex, v: f64) -> f64 {
    assert!(v >= 0.0, "v must be non-negative");
    let k = f.len() as f64;
    let h: f64 = f
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum::<f64>()
        / k;
    (v * h).clamp(0.0, 1.0)
}

/// Per-sample query rate of the model-picker baseline: exponential weights
/// `q = softmax(−eta · losses)` aggregate the classifier's label distribution
/// into an agreement probability `p* = Σ f_k q_k`, and the rate is the
/// normalized Bernoulli variance `clamp(scale · 4 p*(1−p*), 0, 1)`.
pub fn model_picker_beta(f: &Simplex, state: &PolicyState) -> f64 {
    let (scale, eta) = match state.kind {
        PolicyKind::ModelPicker { scale, eta } => (scale, eta),
        _ => panic!("model_picker_beta on a non-model-picker policy"),
    };
    let logits: Vec<f64> = state.losses.iter().map(|l| -eta * l).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let p_star: f64 = f
        .probs()
        .iter()
        .zip(&exps)
        .map(|(fk, e)| fk * e / z)
        .sum();
    (scale * 4.0 * p_star * (1.0 - p_star)).clamp(0.0, 1.0)
}

/// After a sample with at least one queried vote, charge every class that
/// disagrees with the queried-vote plurality (random ties) one unit of loss.
pub fn model_picker_update(
    state: &mut PolicyState,
    observed_votes: &CountVector,
    rng: &mut SplitRng,
) {
    assert!(
        matches!(state.kind, PolicyKind::ModelPicker { .. }),
        "model_picker_update on a non-model-picker policy"
    );
    if observed_votes.sum() == 0 {
        return;
    }
    let winner = plurality(observed_votes, rng);
    for (class, loss) in state.losses.iter_mut().enumerate() {
        if class != winner {
            *loss += 1.0;
        }
    }
}

/// Uniform pick from a non-empty index set.
pub(crate) fn pick_uniform(set: &[usize], rng: &mut SplitRng) -> usize {
    if set.len() == 1 {
        set[0]
    } else {
        set[rng.gen_range(0..set.len())]
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

    fn simplex(p: &[f64]) -> Simplex {
        Simplex::new(p.to_vec()).unwrap()
    }

    fn fixed_fin(rho: f64, n: u32) -> PolicyState {
        PolicyState::new(
            PolicyKind::Threshold {
                rho,
                regime: ThresholdRegime::FixedFin,
            },
            2,
            n,
        )
        .unwrap()
    }

    #[test]
    fn hyperparameters_are_range_checked() {
        assert!(PolicyState::new(
            PolicyKind::Threshold {
                rho: 1.2,
                regime: ThresholdRegime::InfExp
            },
            2,
            3
        )
        .is_err());
        assert!(PolicyState::new(PolicyKind::Random { beta: -0.1 }, 2, 3).is_err());
        assert!(PolicyState::new(PolicyKind::Entropy { v: -1.0 }, 2, 3).is_err());
        assert!(
            PolicyState::new(PolicyKind::ModelPicker { scale: 1.0, eta: -0.3 }, 2, 3).is_err()
        );
    }

    #[test]
    fn threshold_zero_rho_commits_immediately() {
        let state = fixed_fin(0.0, 3);
        let d = threshold_decide(
            &counts(&[0, 0]),
            &simplex(&[0.6, 0.4]),
            &state,
            &mut rng(1),
            &mut rng(2),
        );
        assert!(matches!(d, Decision::Commit { .. }));
    }

    #[test]
    fn threshold_rho_one_queries_until_determined() {
        let state = fixed_fin(1.0, 3);
        let f = simplex(&[0.5, 0.5]);
        // margin 1, two votes remain: not determined yet
        let d = threshold_decide(&counts(&[1, 0]), &f, &state, &mut rng(3), &mut rng(4));
        assert_eq!(d, Decision::Query);
        // margin 2 > 1 remaining: plurality mathematically guaranteed
        let d = threshold_decide(&counts(&[2, 0]), &f, &state, &mut rng(5), &mut rng(6));
        assert_eq!(d, Decision::Commit { class: 0, acc: 1.0 });
        // exhausted pool commits even on a tie
        let state2 = fixed_fin(1.0, 4);
        let d = threshold_decide(&counts(&[2, 2]), &f, &state2, &mut rng(7), &mut rng(8));
        match d {
            Decision::Commit { acc, .. } => assert_abs_diff_eq!(acc, 0.5),
            other => panic!("expected commit, got {other:?}"),
        }
    }

    #[test]
    fn threshold_five_sixths_boundary() {
        // exact posterior P(class 0) = 5/6 ≈ 0.833: commit at rho=0.8,
        // keep querying at rho=0.9
        let f = simplex(&[0.5, 0.5]);
        // Fixed Θ = 1s with uniform f gives α = [1.5, 1.5]; the hand case
        // needs α = [1,1], so pin θ explicitly
        let pinned = PriorParams::new(2.0, 1e-12, vec![1.0, 1.0]).unwrap();
        let state = fixed_fin(0.8, 3).with_pinned_params(pinned.clone());
        let d = threshold_decide(&counts(&[1, 0]), &f, &state, &mut rng(9), &mut rng(10));
        match d {
            Decision::Commit { class, acc } => {
                assert_eq!(class, 0);
                assert_abs_diff_eq!(acc, 5.0 / 6.0, epsilon = 0.03);
            }
            other => panic!("expected commit, got {other:?}"),
        }
        let state = fixed_fin(0.9, 3).with_pinned_params(pinned);
        let d = threshold_decide(&counts(&[1, 0]), &f, &state, &mut rng(9), &mut rng(10));
        assert_eq!(d, Decision::Query);
    }

    #[test]
    fn random_draw_count_cases() {
        let mut r = rng(11);
        assert_eq!(random_draw_count(0.0, 6, &mut r), 0);
        assert_eq!(random_draw_count(1.0, 6, &mut r), 6);
        let draws = 100_000;
        let mut total = 0u64;
        for _ in 0..draws {
            total += random_draw_count(0.5, 6, &mut r) as u64;
        }
        assert_abs_diff_eq!(total as f64 / draws as f64, 3.0, epsilon = 0.02);
    }

    #[test]
    fn entropy_beta_cases() {
        let onehot = simplex(&[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(entropy_beta(&onehot, 3.0), 0.0);
        let uniform = Simplex::uniform(10);
        assert_abs_diff_eq!(
            entropy_beta(&uniform, 1.0),
            0.230_258_509_299_404_57,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(entropy_beta(&uniform, 100.0), 1.0);
    }

    #[test]
    fn model_picker_beta_cases() {
        let k = 4;
        let mut state =
            PolicyState::new(PolicyKind::ModelPicker { scale: 1.0, eta: 0.3 }, k, 6).unwrap();
        // fresh losses, one-hot f: p* = 1/K
        let onehot = Simplex::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p_star = 1.0 / k as f64;
        assert_abs_diff_eq!(
            model_picker_beta(&onehot, &state),
            4.0 * p_star * (1.0 - p_star),
            epsilon = 1e-12
        );
        // K=2 with zero losses has q uniform, so p* = 0.5 for any f and the
        // variance factor 4 p*(1−p*) peaks at exactly 1
        let mut two = PolicyState::new(PolicyKind::ModelPicker { scale: 1.0, eta: 0.3 }, 2, 6)
            .unwrap();
        let f = Simplex::new(vec![0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(model_picker_beta(&f, &two), 1.0, epsilon = 1e-12);
        // dominated losses with agreeing one-hot f: p* → 1, beta → 0
        two.losses = vec![1000.0, 0.0];
        let agree = Simplex::new(vec![0.0, 1.0]).unwrap();
        assert!(model_picker_beta(&agree, &two) < 1e-6);
        // update charges non-winners
        state.losses = vec![0.0; k];
        model_picker_update(&mut state, &counts(&[0, 3, 1, 0]), &mut rng(12));
        assert_eq!(state.losses, vec![1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn fixed_regimes_report_not_learnable() {
        for regime in [ThresholdRegime::FixedFin, ThresholdRegime::FixedInf] {
            let s = PolicyState::new(
                PolicyKind::Threshold { rho: 0.5, regime },
                3,
                5,
            )
            .unwrap();
            assert!(!s.learnable());
            assert_eq!(s.params(), &PriorParams::ones(3));
        }
        for regime in [ThresholdRegime::FinExp, ThresholdRegime::InfExp] {
            let s = PolicyState::new(
                PolicyKind::Threshold { rho: 0.5, regime },
                3,
                5,
            )
            .unwrap();
            assert!(s.learnable());
        }
    }
}
