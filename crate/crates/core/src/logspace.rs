//! Log-space arithmetic helpers.
//!
//! Probabilities are combined in log space throughout the crate; the ratio of
//! gamma functions in the Dirichlet-multinomial pmf overflows linear f64 long
//! before realistic vote counts. Zero probability is the [`LOG_ZERO`]
//! sentinel, which propagates safely through the sum helpers below.

/// Log of probability zero.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `ln(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    if a >= b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `ln Σ exp(x_i)`; returns [`LOG_ZERO`] for an empty or all-zero input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `ln( (1/n) Σ exp(x_i) )`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "log_mean_exp of empty slice");
    let lse = log_sum_exp(xs);
    if lse == LOG_ZERO {
        LOG_ZERO
    } else {
        lse - (xs.len() as f64).ln()
    }
}
