//! Log-gamma and digamma.
//!
//! `ln Γ` uses the Lanczos approximation (coefficients from Pugh's analysis,
//! g = 10.900511, accurate to ~16 significant digits over the positive axis).
//! `ψ` uses upward recurrence into the asymptotic region followed by the
//! Bernoulli-number tail expansion.

use crate::error::{Error, Result};

const LN_2_SQRT_E_OVER_PI: f64 = 0.620_782_237_635_245_2;

/// Lanczos partial-fraction coefficients, g = 10.900511.
const LANCZOS_DK: [f64; 11] = [
    2.485_740_891_387_535_5e-5,
    1.051_423_785_817_219_7,
    -3.456_870_972_220_162_5,
    4.512_277_094_668_948,
    -2.982_852_253_235_766_4,
    1.056_397_115_771_267,
    -1.954_287_731_916_458_7e-1,
    1.709_705_434_044_412e-2,
    -5.719_261_174_043_057e-4,
    4.633_994_733_599_057e-6,
    -2.719_949_084_886_077_2e-9,
];

const LANCZOS_R: f64 = 10.900511;

/// Natural log of the gamma function for `x > 0`.
///
/// Absolute error stays below 1e-10 wherever that is representable; the
/// relative error is ~1e-15 across `[1e-3, 1e6]`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    if x < 0.5 {
        // recurrence keeps the Lanczos argument away from the pole
        Ok(lanczos(x + 1.0) - x.ln())
    } else {
        Ok(lanczos(x))
    }
}

fn lanczos(x: f64) -> f64 {
    let s = LANCZOS_DK
        .iter()
        .enumerate()
        .skip(1)
        .fold(LANCZOS_DK[0], |s, (i, d)| s + d / (x + i as f64 - 1.0));
    s.ln() + LN_2_SQRT_E_OVER_PI + (x - 0.5) * ((x - 0.5 + LANCZOS_R) / std::f64::consts::E).ln()
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`, absolute error ≤ 1e-8.
pub fn digamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    // ψ(x) = ψ(x+1) - 1/x until the asymptotic series is accurate.
    let mut result = 0.0;
    let mut z = x;
    while z < 12.0 {
        result -= 1.0 / z;
        z += 1.0;
    }
    // Asymptotic tail: ψ(z) ≈ ln z - 1/(2z) - Σ B_{2n} / (2n z^{2n}).
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    result += z.ln() - 0.5 * inv;
    result -= inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    Ok(result)
}
