//! Bayesian online consensus prediction.
//!
//! A stream of samples arrives one at a time. For each sample a pre-trained
//! classifier provides a probability vector for free, while votes from a fixed
//! pool of `N` human experts cost one unit each. The prediction target is the
//! plurality (consensus) of the full expert pool, not an oracle label. The
//! library maintains a Dirichlet prior over the experts' population belief,
//! fuses the classifier output into its concentration through a learnable
//! transform, and decides per sample whether to buy another vote or commit a
//! prediction once the posterior probability of the current consensus guess
//! clears a threshold.
//!
//! Module layout:
//!
//! - [`distributions`]: count/simplex types, samplers, and log-pmf kernels
//!   (Dirichlet, multinomial, Dirichlet-multinomial, multivariate
//!   hypergeometric).
//! - [`prior`]: the learnable parameters Θ = (θ, φ, τ), their gamma
//!   hyperpriors, and the concentration transform.
//! - [`likelihood`]: the MAP objective over a sliding window of observations,
//!   its analytic gradients, the importance-sampled finite-pool likelihood,
//!   exact enumeration oracles, and the optimizer.
//! - [`inference`]: posterior beliefs over the consensus class given partial
//!   votes, for the finite-pool and infinite-pool regimes.
//! - [`policies`]: the threshold policy plus random / entropy / model-picker
//!   baselines.
//! - [`harness`]: the online replay engine, cost accounting, refit schedule,
//!   two-phase and distribution-shift protocols, and metrics.
//! - [`datagen`]: synthetic stream generation and the on-disk dataset format.

pub mod datagen;
pub mod distributions;
pub mod error;
pub mod harness;
pub mod inference;
pub mod likelihood;
pub mod logspace;
pub mod policies;
pub mod prior;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
pub use rng::SplitRng;
