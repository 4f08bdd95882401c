//! Scalar special functions and small distribution-parameter types shared by
//! the rest of the crate.
//!
//! Everything here is pure and allocation-free. Probability work that has to
//! survive extreme hyperparameters (Gamma shapes in the thousands) is done in
//! log space by the callers, so this module exposes `ln_gamma` and `digamma`
//! rather than their linear-space counterparts.

use crate::{Error, Result};

/// Euler–Mascheroni constant, ψ(1) = −EULER_GAMMA.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Parameters of a Gamma distribution in shape/rate form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::Domain(format!("gamma shape must be positive, got {shape}")));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Domain(format!("gamma rate must be positive, got {rate}")));
        }
        Ok(Self { shape, rate })
    }
}

/// Parameters of a univariate Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mean: f64,
    pub std: f64,
}

impl GaussianParams {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Domain(format!("gaussian std must be positive, got {std}")));
        }
        if !mean.is_finite() {
            return Err(Error::Domain(format!("gaussian mean must be finite, got {mean}")));
        }
        Ok(Self { mean, std })
    }
}

/// A Bernoulli success probability (the "active" probability of a support).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliParams {
    pub p_active: f64,
}

impl BernoulliParams {
    pub fn new(p_active: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_active) {
            return Err(Error::Domain(format!(
                "bernoulli probability must lie in [0,1], got {p_active}"
            )));
        }
        Ok(Self { p_active })
    }
}

// Lanczos approximation, g = 7, nine coefficients. Relative error is a few
// ulps over the positive axis, which is far below anything the posterior
// updates can resolve.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma needs a positive argument");
    if x < 0.5 {
        // Reflection keeps the Lanczos sum well-conditioned near zero.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma function ψ(x) = d/dx ln Γ(x), for x > 0.
///
/// Small arguments are shifted up with ψ(x+1) = ψ(x) + 1/x until x ≥ 6, then
/// the asymptotic series is evaluated through the x⁻¹⁴ term. Absolute error
/// stays below 1e-12 for x of order one and above.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma needs a positive argument, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number tail of the asymptotic expansion.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

/// Mean and mean-log of a Gamma distribution: (shape/rate, ψ(shape) − ln rate).
pub fn gamma_expectations(g: GammaParams) -> (f64, f64) {
    let mean = g.shape / g.rate;
    let mean_log = digamma(g.shape).expect("GammaParams guarantees shape > 0") - g.rate.ln();
    (mean, mean_log)
}

/// KL divergence from N(μ, σ²) to the zero-mean Gaussian N(0, σ̃²):
/// ln(σ̃/σ) + (σ² + μ²)/(2σ̃²) − 1/2.
pub fn kl_gauss_to_centered(q: GaussianParams, prior_std: f64) -> f64 {
    debug_assert!(prior_std > 0.0);
    (prior_std / q.std).ln() + (q.std * q.std + q.mean * q.mean) / (2.0 * prior_std * prior_std)
        - 0.5
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle for ψ at positive integers: ψ(n) = −γ + Σ_{k<n} 1/k.
    fn digamma_integer_oracle(n: u32) -> f64 {
        let mut h = 0.0;
        for k in 1..n {
            h += 1.0 / k as f64;
        }
        h - EULER_GAMMA
    }

    #[test]
    fn digamma_at_one_is_minus_euler_gamma() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
    }

    #[test]
    fn digamma_at_two_follows_recurrence() {
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-12);
    }

    #[test]
    fn digamma_at_half_matches_closed_form() {
        // ψ(1/2) = −γ − 2 ln 2, an exact identity independent of our series.
        let expected = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - expected).abs() < 1e-12);
        assert!((digamma(0.5).unwrap() - (-1.963_510_026_021_423_5)).abs() < 1e-10);
    }

    #[test]
    fn digamma_matches_harmonic_oracle_at_integers() {
        for n in [1u32, 2, 3, 5, 10, 37, 100, 1000] {
            let got = digamma(n as f64).unwrap();
            let want = digamma_integer_oracle(n);
            assert!(
                (got - want).abs() < 1e-10,
                "psi({n}): got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn digamma_rejects_nonpositive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
    }

    #[test]
    fn digamma_recurrence_over_sampled_range() {
        // 10_000 points across [0.1, 100].
        for i in 0..10_000 {
            let x = 0.1 + 99.9 * (i as f64) / 9_999.0;
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            assert!(lhs.abs() < 1e-10, "recurrence residual {lhs} at x={x}");
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!(ln_gamma(2.0).abs() < 1e-13);
        let half = 0.5 * std::f64::consts::PI.ln();
        assert!((ln_gamma(0.5) - half).abs() < 1e-12);
        // Γ(10) = 362880
        assert!((ln_gamma(10.0) - 362_880.0_f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn ln_gamma_recurrence() {
        for i in 0..2_000 {
            let x = 0.05 + (i as f64) * 0.05;
            let resid = ln_gamma(x + 1.0) - ln_gamma(x) - x.ln();
            assert!(resid.abs() < 1e-9, "residual {resid} at x={x}");
        }
    }

    #[test]
    fn gamma_expectations_examples() {
        let (m, ml) = gamma_expectations(GammaParams::new(2.0, 2.0).unwrap());
        assert!((m - 1.0).abs() < 1e-15);
        let want = (1.0 - EULER_GAMMA) - 2.0_f64.ln();
        assert!((ml - want).abs() < 1e-12);
        assert!((ml - (-0.270_362_845_461_478)).abs() < 1e-10);

        let (m, ml) = gamma_expectations(GammaParams::new(1.0, 1.0).unwrap());
        assert!((m - 1.0).abs() < 1e-15);
        assert!((ml + EULER_GAMMA).abs() < 1e-12);

        let (m, ml) = gamma_expectations(GammaParams::new(100.0, 1.0).unwrap());
        assert!((m - 100.0).abs() < 1e-12);
        assert!((ml - digamma_integer_oracle(100)).abs() < 1e-10);
    }

    #[test]
    fn kl_gauss_examples() {
        let kl = kl_gauss_to_centered(GaussianParams::new(0.0, 1.0).unwrap(), 1.0);
        assert!(kl.abs() < 1e-15);
        let kl = kl_gauss_to_centered(GaussianParams::new(1.0, 1.0).unwrap(), 1.0);
        assert!((kl - 0.5).abs() < 1e-15);
        // High-precision evaluation of the closed form itself.
        let kl = kl_gauss_to_centered(GaussianParams::new(0.5, 0.3).unwrap(), 2.0);
        let want = (2.0_f64 / 0.3).ln() + (0.09 + 0.25) / 8.0 - 0.5;
        assert!((kl - want).abs() < 1e-14);
    }

    #[test]
    fn param_validation() {
        assert!(GammaParams::new(0.0, 1.0).is_err());
        assert!(GammaParams::new(1.0, -1.0).is_err());
        assert!(GaussianParams::new(0.0, 0.0).is_err());
        assert!(BernoulliParams::new(1.1).is_err());
        assert!(BernoulliParams::new(0.0).is_ok());
        assert!(BernoulliParams::new(1.0).is_ok());
    }

    proptest! {
        #[test]
        fn kl_gauss_nonnegative(mu in -5.0..5.0f64, sigma in 0.01..5.0f64, prior in 0.01..5.0f64) {
            let kl = kl_gauss_to_centered(GaussianParams::new(mu, sigma).unwrap(), prior);
            prop_assert!(kl >= -1e-12);
        }

        #[test]
        fn kl_gauss_zero_only_at_match(mu in -5.0..5.0f64, sigma in 0.01..5.0f64) {
            let kl = kl_gauss_to_centered(GaussianParams::new(mu, sigma).unwrap(), sigma);
            // With σ = σ̃ only the μ²/(2σ̃²) term remains.
            let want = mu * mu / (2.0 * sigma * sigma);
            prop_assert!((kl - want).abs() < 1e-10);
        }

        #[test]
        fn gamma_mean_log_below_log_mean(shape in 0.05..200.0f64, rate in 0.05..200.0f64) {
            let (mean, mean_log) = gamma_expectations(GammaParams::new(shape, rate).unwrap());
            prop_assert!(mean_log < mean.ln());
        }
    }
}
