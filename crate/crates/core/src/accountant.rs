//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `sigma` the order-`alpha` RDP
//! of one step is `log A_alpha / (alpha - 1)`, where `A_alpha` is the
//! binomial expansion of the mixture divergence (exact sum for integer
//! orders, the erfc series for fractional ones). Steps compose additively
//! and the total converts to `(eps, delta)` with
//!
//! ```text
//! eps = rdp + log((alpha - 1) / alpha) - (log delta + log alpha) / (alpha - 1)
//! ```
//!
//! minimised over the order grid. The conversion is valid for every order
//! and never looser than the classic `rdp + log(1/delta) / (alpha - 1)`.

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const SIGMA_MIN: f64 = 0.3;
pub const SIGMA_MAX: f64 = 100.0;
/// Relative width at which the calibration bisection stops.
pub const SIGMA_REL_TOL: f64 = 1e-3;

/// RDP orders `1.25, 1.5, .., 64`.
pub fn orders() -> Vec<f64> {
    (5..=256).map(|i| i as f64 * 0.25).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, accurate in the far tail where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let a = alpha as f64;
    let ln_fact_a = ln_gamma(a + 1.0);
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let log_binom = ln_fact_a - ln_gamma(fi + 1.0) - ln_gamma(a - fi + 1.0);
        let log_coef = log_binom + fi * q.ln() + (a - fi) * (-q).ln_1p();
        log_a = log_add(log_a, log_coef + (fi * fi - fi) / (2.0 * sigma * sigma));
    }
    log_a
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = 2.0 * sigma * sigma;
    let root2sigma = std::f64::consts::SQRT_2 * sigma;
    // Generalised binomial coefficient tracked as sign and log-magnitude.
    let (mut log_coef, mut positive) = (0.0_f64, true);
    let mut i = 0.0_f64;
    loop {
        let j = alpha - i;
        let log_t0 = log_coef + i * q.ln() + j * (-q).ln_1p();
        let log_t1 = log_coef + j * q.ln() + i * (-q).ln_1p();
        let log_e0 = 0.5_f64.ln() + log_erfc((i - z0) / root2sigma);
        let log_e1 = 0.5_f64.ln() + log_erfc((z0 - j) / root2sigma);
        let log_s0 = log_t0 + (i * i - i) / s2 + log_e0;
        let log_s1 = log_t1 + (j * j - j) / s2 + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 10_000.0 {
            break;
        }
        let ratio = (alpha - i) / (i + 1.0);
        log_coef += ratio.abs().ln();
        if ratio < 0.0 {
            positive = !positive;
        }
        i += 1.0;
    }
    log_add(log_a0, log_a1)
}

/// RDP of a single subsampled-Gaussian step at order `alpha`.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

fn check_args(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<()> {
    let mut bad = Vec::new();
    if !(sigma > 0.0 && sigma.is_finite()) {
        bad.push(format!("sigma must be positive and finite, got {sigma}"));
    }
    if !(q > 0.0 && q <= 1.0) {
        bad.push(format!("sample rate must lie in (0, 1], got {q}"));
    }
    if steps == 0 {
        bad.push("steps must be >= 1".into());
    }
    if !(delta > 0.0 && delta < 1.0) {
        bad.push(format!("delta must lie in (0, 1), got {delta}"));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Accounting(bad.join("; ")))
    }
}

/// `(eps, best order)` after `steps` compositions.
pub fn account_with_order(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<(f64, f64)> {
    check_args(sigma, q, steps, delta)?;
    let mut best = (f64::INFINITY, f64::NAN);
    for alpha in orders() {
        let rdp = steps as f64 * rdp_step(q, sigma, alpha);
        if rdp.is_nan() {
            return Err(Error::Accounting(format!(
                "RDP evaluation unstable at order {alpha} (sigma={sigma}, q={q}); use a larger sigma"
            )));
        }
        let eps = rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Accounting(format!(
            "privacy loss overflows for sigma={sigma}, q={q}, steps={steps}; use a larger sigma"
        )));
    }
    Ok((best.0.max(0.0), best.1))
}

/// `(eps, delta)`-DP epsilon of `steps` Poisson-subsampled Gaussian steps.
pub fn account_epsilon(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
    account_with_order(sigma, q, steps, delta).map(|(e, _)| e)
}

/// Smallest noise multiplier in `[0.3, 100]`, up to a relative tolerance of
/// 1e-3, whose accounted epsilon does not exceed `target_eps`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if !(target_eps > 0.0 && target_eps.is_finite()) {
        return Err(Error::Accounting(format!(
            "target epsilon must be positive, got {target_eps}"
        )));
    }
    let eps_of = |s: f64| account_epsilon(s, q, steps, delta);
    if eps_of(SIGMA_MAX)? > target_eps {
        return Err(Error::Accounting(format!(
            "epsilon {target_eps} is unreachable with sigma <= {SIGMA_MAX} (q={q}, steps={steps}, delta={delta}); \
             raise epsilon, lower the sample rate or train fewer steps"
        )));
    }
    if eps_of(SIGMA_MIN)? <= target_eps {
        return Ok(SIGMA_MIN);
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    while hi / lo > 1.0 + SIGMA_REL_TOL {
        let mid = (lo * hi).sqrt();
        if eps_of(mid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
