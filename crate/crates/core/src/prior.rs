//! Learnable prior parameters Θ = (θ, φ, τ), their gamma hyperpriors, and the
//! transform that fuses classifier probabilities into a Dirichlet
//! concentration:
//!
//! ```text
//! α = θ · softmax(τ ⊙ ln f) + φ
//! ```
//!
//! θ is how many expert votes the classifier is worth, φ a base concentration
//! floor shared by all classes, and τ a per-class calibration of the
//! classifier's log-probabilities.

use serde::{Deserialize, Serialize};

use crate::distributions::{gamma_logpdf, ConcentrationVector, Simplex};
use crate::error::{Error, Result};

/// Classifier probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;

/// Parameter floor used when a hyperprior's mode sits on the boundary.
pub const MODE_FLOOR: f64 = 1e-2;

/// The learnable triple (θ, φ, τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    theta: f64,
    phi: f64,
    tau: Vec<f64>,
}

impl PriorParams {
    pub fn new(theta: f64, phi: f64, tau: Vec<f64>) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(theta) || !ok(phi) || tau.is_empty() || !tau.iter().copied().all(ok) {
            return Err(Error::Validation(format!(
                "prior parameters must be finite and strictly positive: θ={theta}, φ={phi}, τ={tau:?}"
            )));
        }
        Ok(PriorParams { theta, phi, tau })
    }

    /// θ = φ = 1, τ = 1-vector; the pinned parameters of the Fixed regimes.
    pub fn ones(k: usize) -> Self {
        PriorParams {
            theta: 1.0,
            phi: 1.0,
            tau: vec![1.0; k],
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.tau.len()
    }

    /// Flatten to (ln θ, ln φ, ln τ₁, …, ln τ_K); the optimizer's coordinates.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.tau.len());
        v.push(self.theta.ln());
        v.push(self.phi.ln());
        v.extend(self.tau.iter().map(|t| t.ln()));
        v
    }

    pub fn from_log_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::Validation(
                "log-parameter vector needs at least 3 entries".into(),
            ));
        }
        PriorParams::new(v[0].exp(), v[1].exp(), v[2..].iter().map(|x| x.exp()).collect())
    }

    /// Largest absolute difference across all natural-space parameters.
    pub fn max_abs_diff(&self, other: &PriorParams) -> f64 {
        let mut d = (self.theta - other.theta).abs();
        d = d.max((self.phi - other.phi).abs());
        for (a, b) in self.tau.iter().zip(&other.tau) {
            d = d.max((a - b).abs());
        }
        d
    }

    /// Stable 64-bit digest of the parameter values (FNV-1a over the bits).
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        eat(self.theta);
        eat(self.phi);
        for &t in &self.tau {
            eat(t);
        }
        format!("{h:016x}")
    }
}

/// Likelihood regime for learning and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Exact finite expert pool: partial votes are a multivariate
    /// hypergeometric subsample of the full histogram.
    FinExp,
    /// Infinite-pool limit: consensus is the argmax of the population belief.
    InfExp,
}

/// A (shape, rate) gamma hyperprior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPair {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPair {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::Validation(format!(
                "gamma hyperprior needs positive shape/rate, got ({shape}, {rate})"
            )));
        }
        Ok(GammaPair { shape, rate })
    }

    fn mode_or_floor(&self) -> f64 {
        if self.shape > 1.0 {
            (self.shape - 1.0) / self.rate
        } else {
            MODE_FLOOR
        }
    }
}

/// Hyperprior configuration: one gamma pair per parameter group plus the
/// regime tag the likelihood dispatches on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriorConfig {
    pub theta: GammaPair,
    pub phi: GammaPair,
    pub tau: GammaPair,
    pub regime: Regime,
}

impl HyperPriorConfig {
    /// Regime defaults: the finite-pool likelihood is already regularized by
    /// the pool size, so it takes the flat Γ(1.1, 1); the infinite-pool one
    /// takes the tighter Γ(3, 2).
    pub fn for_regime(regime: Regime) -> Self {
        let pair = match regime {
            Regime::FinExp => GammaPair {
                shape: 1.1,
                rate: 1.0,
            },
            Regime::InfExp => GammaPair {
                shape: 3.0,
                rate: 2.0,
            },
        };
        HyperPriorConfig {
            theta: pair,
            phi: pair,
            tau: pair,
            regime,
        }
    }
}

/// Fuse classifier output into a Dirichlet concentration.
///
/// `f` is clamped entrywise to `[PROB_FLOOR, 1]` and renormalized before the
/// log, so exact zeros from real classifiers are safe. Every output entry is
/// ≥ φ and the entries sum to θ + K·φ.
pub fn alpha_from(f: &Simplex, params: &PriorParams) -> ConcentrationVector {
    let k = f.len();
    assert_eq!(
        params.num_classes(),
        k,
        "τ has {} entries but f has {k} classes",
        params.num_classes()
    );
    let clamped: Vec<f64> = f.probs().iter().map(|p| p.clamp(PROB_FLOOR, 1.0)).collect();
    let sum: f64 = clamped.iter().sum();
    // u_k = τ_k · ln f̃_k, shifted by the max for a stable softmax
    let u: Vec<f64> = clamped
        .iter()
        .zip(params.tau())
        .map(|(p, t)| t * (p / sum).ln())
        .collect();
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    ConcentrationVector::new(
        exps.into_iter()
            .map(|e| params.theta() * (e / z) + params.phi())
            .collect(),
    )
    .expect("positive by construction")
}

/// Softmax weights of τ ⊙ ln f̃ (the α transform without θ and φ); exposed
/// for gradient computations.
pub(crate) fn calibration_softmax(f: &Simplex, params: &PriorParams) -> (Vec<f64>, Vec<f64>) {
    let clamped: Vec<f64> = f.probs().iter().map(|p| p.clamp(PROB_FLOOR, 1.0)).collect();
    let sum: f64 = clamped.iter().sum();
    let logf: Vec<f64> = clamped.iter().map(|p| (p / sum).ln()).collect();
    let u: Vec<f64> = logf
        .iter()
        .zip(params.tau())
        .map(|(lf, t)| t * lf)
        .collect();
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    (exps.into_iter().map(|e| e / z).collect(), logf)
}

/// Log-density of Θ under the configured hyperpriors.
pub fn log_prior(params: &PriorParams, hyper: &HyperPriorConfig) -> f64 {
    let g = |x: f64, p: GammaPair| gamma_logpdf(x, p.shape, p.rate).expect("positive params");
    let mut lp = g(params.theta(), hyper.theta) + g(params.phi(), hyper.phi);
    for &t in params.tau() {
        lp += g(t, hyper.tau);
    }
    lp
}

/// Parameters at the mode of each hyperprior (floored when the mode is on the
/// boundary); the optimizer's cold-start point.
pub fn prior_mode(hyper: &HyperPriorConfig, k: usize) -> PriorParams {
    PriorParams::new(
        hyper.theta.mode_or_floor(),
        hyper.phi.mode_or_floor(),
        vec![hyper.tau.mode_or_floor(); k],
    )
    .expect("modes are positive")
}
