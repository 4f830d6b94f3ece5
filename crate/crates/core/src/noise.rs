//! Probability that m-dimensional IID Gaussian noise lies inside a δ-ball,
//! and its inversion to the δ used by the discrepancy stopping rule.
//!
//! For noise with per-component standard deviation σ the probability
//! P(‖ε‖ ≤ δ) has closed forms that differ between even and odd m; both
//! depend only on the ratio δ/σ and match the chi distribution CDF with
//! m degrees of freedom.

use libm::erf;

use crate::error::{PsError, Result};

/// Above this value of δ²/(2σ²) the partial sums are evaluated in log
/// space; the direct sums would overflow near exp(709).
const LOG_SPACE_THRESHOLD: f64 = 700.0;

/// Gaussian noise model: per-component std-dev σ over m images, with the
/// ball radius δ chosen so that ‖ε‖ ≤ δ holds with probability ≥ gamma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub m: usize,
    pub gamma: f64,
    pub delta: f64,
}

impl NoiseSpec {
    /// Derives δ from (σ, m, gamma) by inverting the ball probability.
    pub fn derive(sigma: f64, m: usize, gamma: f64) -> Result<Self> {
        let delta = invert_noise_level(gamma, sigma, m)?;
        Ok(NoiseSpec {
            sigma,
            m,
            gamma,
            delta,
        })
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(PsError::InvalidArgument(format!(
            "{name} must be positive and finite, got {value}"
        )));
    }
    Ok(())
}

/// P(‖ε‖ ≤ δ) for ε with m IID N(0, σ²) components.
pub fn noise_ball_probability(delta: f64, sigma: f64, m: usize) -> Result<f64> {
    check_positive("delta", delta)?;
    check_positive("sigma", sigma)?;
    if m == 0 {
        return Err(PsError::InvalidArgument("m must be >= 1".into()));
    }
    let u = delta / sigma;
    let x = 0.5 * u * u;
    let p = if m % 2 == 0 {
        even_case(x, m)
    } else {
        odd_case(u, x, m)
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Even m: P = 1 − exp(−x) Σ_{i=0}^{m/2−1} xⁱ/i!  with x = δ²/(2σ²).
fn even_case(x: f64, m: usize) -> f64 {
    let terms = m / 2;
    if x <= LOG_SPACE_THRESHOLD {
        let mut term = 1.0;
        let mut sum = 1.0;
        for i in 1..terms {
            term *= x / i as f64;
            sum += term;
        }
        1.0 - (-x).exp() * sum
    } else {
        let lx = x.ln();
        let mut lse = f64::NEG_INFINITY;
        let mut ln_factorial = 0.0;
        for i in 0..terms {
            lse = log_add_exp(lse, i as f64 * lx - ln_factorial);
            ln_factorial += ((i + 1) as f64).ln();
        }
        1.0 - (lse - x).exp()
    }
}

/// Odd m: P = erf(u/√2) − √(2/π) exp(−x) Σ_{k∈{1,3,…,m−2}} uᵏ/k‼ with
/// u = δ/σ. The one-dimensional Gaussian integral of the m = 1 term is the
/// error function; the double-factorial sum collects the partial
/// integrations of the higher odd dimensions.
fn odd_case(u: f64, x: f64, m: usize) -> f64 {
    let head = erf(u / std::f64::consts::SQRT_2);
    if m == 1 {
        return head;
    }
    let scale = (2.0 / std::f64::consts::PI).sqrt();
    if x <= LOG_SPACE_THRESHOLD {
        let mut term = u;
        let mut sum = u;
        let u2 = u * u;
        let mut k = 1;
        while k + 2 <= m - 2 {
            term *= u2 / (k + 2) as f64;
            sum += term;
            k += 2;
        }
        head - scale * (-x).exp() * sum
    } else {
        let lu = u.ln();
        let mut lse = f64::NEG_INFINITY;
        let mut ln_dfact = 0.0;
        let mut k = 1;
        loop {
            lse = log_add_exp(lse, k as f64 * lu - ln_dfact);
            if k + 2 > m - 2 {
                break;
            }
            k += 2;
            ln_dfact += (k as f64).ln();
        }
        head - scale * (lse - x).exp()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Smallest δ with P(‖ε‖ ≤ δ) ≥ gamma, found by bisection; the probability
/// is continuous and strictly increasing in δ with limits 0 and 1.
pub fn invert_noise_level(gamma: f64, sigma: f64, m: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(PsError::InvalidArgument(format!(
            "confidence must lie in (0,1), got {gamma}"
        )));
    }
    check_positive("sigma", sigma)?;
    if m == 0 {
        return Err(PsError::InvalidArgument("m must be >= 1".into()));
    }
    let mut hi = sigma * (m as f64).sqrt().max(1.0);
    let mut guard = 0;
    while noise_ball_probability(hi, sigma, m)? < gamma {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(PsError::InvalidArgument(
                "noise level bracket did not close".into(),
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if noise_ball_probability(mid, sigma, m)? >= gamma {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-10 * hi {
            break;
        }
    }
    Ok(hi)
}
