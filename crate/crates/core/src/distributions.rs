//! Vote histograms, probability vectors, and the distribution kernels the
//! consensus model composes: Dirichlet, multinomial, Dirichlet-multinomial,
//! multivariate hypergeometric, and the gamma density for the hyperpriors.
//!
//! All pmfs and densities are computed in log space (see [`crate::logspace`]);
//! probabilities only materialize at API boundaries.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma};

use crate::error::{Error, Result};
use crate::logspace::LOG_ZERO;
use crate::rng::SplitRng;
use crate::special::log_gamma;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// K-dimensional non-negative integer vote histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountVector {
    counts: Vec<u32>,
}

impl CountVector {
    /// A histogram over `counts.len() ≥ 2` classes.
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Validation(format!(
                "count vector needs at least 2 classes, got {}",
                counts.len()
            )));
        }
        Ok(CountVector { counts })
    }

    pub fn zeros(k: usize) -> Self {
        assert!(k >= 2, "count vector needs at least 2 classes");
        CountVector { counts: vec![0; k] }
    }

    pub(crate) fn from_unchecked(counts: Vec<u32>) -> Self {
        debug_assert!(counts.len() >= 2);
        CountVector { counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, class: usize) -> u32 {
        self.counts[class]
    }

    pub fn sum(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn increment(&mut self, class: usize) {
        self.counts[class] += 1;
    }

    pub fn decrement(&mut self, class: usize) {
        assert!(self.counts[class] > 0, "decrement of empty class {class}");
        self.counts[class] -= 1;
    }

    /// Element-wise sum; panics on length mismatch.
    pub fn plus(&self, other: &CountVector) -> CountVector {
        assert_eq!(self.len(), other.len(), "histogram length mismatch");
        CountVector {
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Classes attaining the maximal count (ascending order).
    pub fn argmax_set(&self) -> Vec<usize> {
        let max = *self.counts.iter().max().expect("non-empty");
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == max)
            .map(|(k, _)| k)
            .collect()
    }

    /// (leader count, runner-up count); runner-up is 0 for K = 1 leaders.
    pub fn top_two_counts(&self) -> (u32, u32) {
        let mut top = 0;
        let mut second = 0;
        for &c in &self.counts {
            if c >= top {
                second = top;
                top = c;
            } else if c > second {
                second = c;
            }
        }
        (top, second)
    }
}

/// K-dimensional probability vector (entries in [0,1], sum 1 within 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    probs: Vec<f64>,
}

impl Simplex {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Validation(format!(
                "simplex needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation(
                "simplex entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "simplex entries sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Simplex { probs })
    }

    /// Build from non-negative weights, rescaling only when the sum strays
    /// beyond the 1e-9 tolerance (so already-valid inputs round-trip bit-for-bit).
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Validation(format!(
                "simplex needs at least 2 classes, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation(
                "simplex entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Validation("cannot normalize all-zero weights".into()));
        }
        if (sum - 1.0).abs() <= 1e-9 {
            Ok(Simplex { probs: weights })
        } else {
            Ok(Simplex {
                probs: weights.into_iter().map(|w| w / sum).collect(),
            })
        }
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 2);
        Simplex {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Classes attaining the maximal probability under exact f64 equality.
    pub fn argmax_set(&self) -> Vec<usize> {
        let max = self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == max)
            .map(|(k, _)| k)
            .collect()
    }
}

/// K-dimensional Dirichlet concentration (strictly positive entries).
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationVector {
    alpha: Vec<f64>,
}

impl ConcentrationVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Validation(format!(
                "concentration needs at least 2 classes, got {}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Validation(
                "concentration entries must be finite and strictly positive".into(),
            ));
        }
        Ok(ConcentrationVector { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn get(&self, class: usize) -> f64 {
        self.alpha[class]
    }

    pub fn sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Conjugate posterior concentration after observing a vote histogram.
    pub fn posterior(&self, votes: &CountVector) -> ConcentrationVector {
        assert_eq!(self.len(), votes.len(), "dimension mismatch");
        ConcentrationVector {
            alpha: self
                .alpha
                .iter()
                .zip(votes.counts())
                .map(|(a, &c)| a + c as f64)
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Draw a probability vector from Dirichlet(alpha).
pub fn dirichlet_sample(alpha: &ConcentrationVector, rng: &mut SplitRng) -> Simplex {
    let mut raw = Vec::with_capacity(alpha.len());
    let mut sum = 0.0;
    for &a in alpha.alpha() {
        let g = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
        raw.push(g);
        sum += g;
    }
    if !(sum > 0.0) || !sum.is_finite() {
        // all gamma draws underflowed (possible only for extreme concentrations)
        return Simplex::uniform(alpha.len());
    }
    Simplex {
        probs: raw.into_iter().map(|g| g / sum).collect(),
    }
}

/// Draw a histogram of `n` iid class draws from `p`.
pub fn multinomial_sample(n: u32, p: &Simplex, rng: &mut SplitRng) -> CountVector {
    let k = p.len();
    let mut counts = vec![0u32; k];
    let mut remaining = n as u64;
    let mut prob_left = 1.0f64;
    for class in 0..k - 1 {
        if remaining == 0 {
            break;
        }
        let pk = (p.get(class) / prob_left).clamp(0.0, 1.0);
        let draw = if pk >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, pk).expect("valid binomial").sample(rng)
        };
        counts[class] = draw as u32;
        remaining -= draw;
        prob_left -= p.get(class);
    }
    counts[k - 1] = remaining as u32;
    CountVector::from_unchecked(counts)
}

/// Draw a histogram from the compound Dirichlet-multinomial DirMult(n, alpha).
pub fn dirmult_sample(n: u32, alpha: &ConcentrationVector, rng: &mut SplitRng) -> CountVector {
    let k = alpha.len();
    if n == 0 {
        return CountVector::zeros(k);
    }
    // Small draws go through the Pólya urn; large ones through the
    // Dirichlet-then-multinomial compound. Both are exact samplers.
    if (n as usize) * k <= 64 {
        let mut weights: Vec<f64> = alpha.alpha().to_vec();
        let mut total: f64 = weights.iter().sum();
        let mut counts = vec![0u32; k];
        for _ in 0..n {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = k - 1;
            for (class, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = class;
                    break;
                }
                u -= w;
            }
            counts[pick] += 1;
            weights[pick] += 1.0;
            total += 1.0;
        }
        CountVector::from_unchecked(counts)
    } else {
        let pi = dirichlet_sample(alpha, rng);
        multinomial_sample(n, &pi, rng)
    }
}

/// Draw one vote from the remaining pool, proportional to remaining counts.
///
/// The caller is responsible for decrementing the pool.
pub fn draw_vote_without_replacement(
    remaining: &CountVector,
    rng: &mut SplitRng,
) -> Result<usize> {
    let total = remaining.sum();
    if total == 0 {
        return Err(Error::EmptyPool);
    }
    let mut u = rng.gen_range(0..total);
    for (class, &c) in remaining.counts().iter().enumerate() {
        if u < c {
            return Ok(class);
        }
        u -= c;
    }
    unreachable!("u < total by construction")
}

/// Plurality class of a histogram, ties broken uniformly at random.
pub fn plurality(votes: &CountVector, rng: &mut SplitRng) -> usize {
    let tied = votes.argmax_set();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.gen_range(0..tied.len())]
    }
}

// ---------------------------------------------------------------------------
// Log-probability kernels
// ---------------------------------------------------------------------------

/// `ln C(n, k)`; [`LOG_ZERO`] when `k > n`.
pub fn log_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return LOG_ZERO;
    }
    if k == 0 || k == n {
        return 0.0;
    }
    let (n, k) = (n as f64, k as f64);
    log_gamma(n + 1.0).unwrap() - log_gamma(k + 1.0).unwrap() - log_gamma(n - k + 1.0).unwrap()
}

/// Log-pmf of the Dirichlet-multinomial: the probability of histogram `x`
/// after `n` exchangeable draws whose class probabilities follow
/// Dirichlet(alpha). Includes the multinomial coefficient.
pub fn dirmult_logpmf(x: &CountVector, n: u32, alpha: &ConcentrationVector) -> Result<f64> {
    if x.len() != alpha.len() {
        return Err(Error::Mismatch(format!(
            "histogram has {} classes, concentration has {}",
            x.len(),
            alpha.len()
        )));
    }
    if x.sum() != n {
        return Err(Error::Mismatch(format!(
            "histogram sums to {}, declared draw count is {n}",
            x.sum()
        )));
    }
    let abar = alpha.sum();
    let nf = n as f64;
    let mut lp = log_gamma(abar)? + log_gamma(nf + 1.0)? - log_gamma(abar + nf)?;
    for (&a, &c) in alpha.alpha().iter().zip(x.counts()) {
        let cf = c as f64;
        lp += log_gamma(a + cf)? - log_gamma(a)? - log_gamma(cf + 1.0)?;
    }
    Ok(lp)
}

/// Log-pmf of the K-dimensional hypergeometric distribution: the probability
/// that drawing `n_draw` of the `sum(total)` pooled votes without replacement
/// yields histogram `sub`.
pub fn mv_hypergeo_logpmf(sub: &CountVector, total: &CountVector, n_draw: u32) -> Result<f64> {
    if sub.len() != total.len() {
        return Err(Error::Mismatch(format!(
            "sub histogram has {} classes, total has {}",
            sub.len(),
            total.len()
        )));
    }
    if sub.sum() != n_draw {
        return Err(Error::Mismatch(format!(
            "sub histogram sums to {}, declared draw count is {n_draw}",
            sub.sum()
        )));
    }
    let pool = total.sum();
    if n_draw > pool {
        return Err(Error::Mismatch(format!(
            "cannot draw {n_draw} votes from a pool of {pool}"
        )));
    }
    let mut lp = 0.0;
    for (&s, &t) in sub.counts().iter().zip(total.counts()) {
        if s > t {
            return Ok(LOG_ZERO);
        }
        lp += log_choose(t as u64, s as u64);
    }
    Ok(lp - log_choose(pool as u64, n_draw as u64))
}

/// Log-density of Gamma(shape `a`, rate `b`) at `x`.
pub fn gamma_logpdf(x: f64, a: f64, b: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("gamma_logpdf requires x > 0, got {x}")));
    }
    if !a.is_finite() || a <= 0.0 || !b.is_finite() || b <= 0.0 {
        return Err(Error::Domain(format!(
            "gamma_logpdf requires positive shape/rate, got a={a}, b={b}"
        )));
    }
    Ok(a * b.ln() - log_gamma(a)? + (a - 1.0) * x.ln() - b * x)
}

// ---------------------------------------------------------------------------
// Support enumeration (used by the exact small-instance oracles)
// ---------------------------------------------------------------------------

/// Number of ways to split `n` draws over `k` classes: C(n + k - 1, k - 1).
pub(crate) fn composition_count(n: u32, k: usize) -> u128 {
    let n = n as u128;
    let k = k as u128;
    let mut num = 1u128;
    let mut den = 1u128;
    for i in 0..k - 1 {
        num = num.saturating_mul(n + k - 1 - i);
        den *= i + 1;
    }
    num / den
}

/// Visit every length-`k` histogram summing to `n`.
pub(crate) fn for_each_composition(n: u32, k: usize, f: &mut impl FnMut(&[u32])) {
    let mut buf = vec![0u32; k];
    fn rec(buf: &mut Vec<u32>, idx: usize, left: u32, f: &mut impl FnMut(&[u32])) {
        if idx == buf.len() - 1 {
            buf[idx] = left;
            f(buf);
            return;
        }
        for v in 0..=left {
            buf[idx] = v;
            rec(buf, idx + 1, left - v, f);
        }
    }
    rec(&mut buf, 0, n, f);
}
