//! Sampling and density helpers shared by every sampler: truncated normals,
//! gamma-family draws, multinomial allocation, log densities, percentiles,
//! and a slice sampler for the one non-standard full conditional.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Floor applied to Poisson rates and rate-like denominators so exact zeros
/// never poison logs or divisions; far below one count.
pub const RATE_FLOOR: f64 = 1e-10;

/// Natural logarithm for finite, positive, normal doubles, built from plain
/// arithmetic (exponent split at √½, then the atanh series on the mantissa)
/// so hot loops can inline and auto-vectorize it; no call, no tables, no
/// branches, and identical results on every platform. Accurate to a few ulp;
/// exactly +0 at 1. Outside its domain (x ≤ 0, subnormal, ∞, NaN) the result
/// is unspecified.
#[inline]
pub(crate) fn fast_ln(x: f64) -> f64 {
    const SQRT_HALF_BITS: u64 = 0x3FE6_A09E_667F_3BCD;
    // ln 2 split so k·LN2_HI stays exact for every reachable exponent k.
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let bits = x.to_bits();
    let off = bits.wrapping_sub(SQRT_HALF_BITS);
    // k = off >> 52 arithmetically, via the high word so every step has a
    // packed SSE2 form (64-bit arithmetic shifts and i64→f64 casts do not).
    let k_i = ((off >> 32) as u32 as i32) >> 20; // x = 2^k · z, z ∈ [√½, √2)
    let z = f64::from_bits(bits.wrapping_sub(((k_i as i64) << 52) as u64));
    let s = (z - 1.0) / (z + 1.0); // ln z = 2·atanh(s), |s| ≤ √2−1 over √2+1
    let w = s * s;
    let p = 1.0
        + w * (1.0 / 3.0
            + w * (1.0 / 5.0
                + w * (1.0 / 7.0
                    + w * (1.0 / 9.0
                        + w * (1.0 / 11.0
                            + w * (1.0 / 13.0 + w * (1.0 / 15.0 + w * (1.0 / 17.0))))))));
    let k = f64::from(k_i);
    k * LN2_HI + (2.0 * s * p + k * LN2_LO)
}

/// [`fast_ln`] with a domain gate: values outside the normal positive range
/// (0, subnormals, ∞, NaN) keep `f64::ln` semantics.
#[inline]
pub(crate) fn checked_fast_ln(x: f64) -> f64 {
    if (f64::MIN_POSITIVE..=f64::MAX).contains(&x) {
        fast_ln(x)
    } else {
        x.ln()
    }
}

// ---------------------------------------------------------------------------
// Draws
// ---------------------------------------------------------------------------

/// Standard normal draw.
pub fn sample_std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal(mean, var) draw.
pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> f64 {
    mean + var.sqrt() * sample_std_normal(rng)
}

/// Draw from Normal(mean, var) truncated to [0, ∞).
///
/// Uses inverse-CDF through the survival function for moderate truncation and
/// an exponential-rejection tail method when the mean sits far below zero
/// relative to the scale (where the inverse CDF loses precision).
pub fn sample_trunc_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let alpha = -mean / sd; // standardized lower bound
    let z = if alpha <= 0.0 {
        // At least half the mass survives truncation: plain rejection on
        // standard normal draws is exact and beats the inverse CDF.
        loop {
            let cand: f64 = rng.sample(StandardNormal);
            if cand >= alpha {
                break cand;
            }
        }
    } else if alpha <= 5.0 {
        // S(z) = u·S(alpha) with S the normal survival function.
        let s_alpha = 0.5 * erfc(alpha / SQRT_2);
        let u: f64 = rng.random();
        let p = (u * s_alpha).max(1e-300);
        SQRT_2 * erfc_inv(2.0 * p)
    } else {
        // One-sided exponential rejection for deep truncation.
        let lam = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        loop {
            let u: f64 = rng.random::<f64>().max(1e-300);
            let cand = alpha - u.ln() / lam;
            let ratio = -0.5 * (cand - lam) * (cand - lam);
            if rng.random::<f64>().ln() < ratio {
                break cand;
            }
        }
    };
    (mean + sd * z).max(0.0)
}

/// Gamma(shape, rate) draw.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    rand_distr::Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters positive")
        .sample(rng)
}

/// InverseGamma(shape, rate) draw: reciprocal of a Gamma(shape, rate) draw.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    1.0 / sample_gamma(rng, shape, rate).max(f64::MIN_POSITIVE)
}

/// Exponential(rate) draw.
pub fn sample_exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    rng.sample::<f64, _>(rand_distr::Exp1) / rate
}

/// Poisson(rate) draw; a nonpositive rate yields 0.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(rate)
        .expect("poisson rate positive and finite")
        .sample(rng) as u64
}

/// Binomial(n, p) draw.
pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    rand_distr::Binomial::new(n, p)
        .expect("binomial probability in [0,1]")
        .sample(rng)
}

/// Multinomial(n; weights) draw by sequential conditional binomials.
/// `out` receives the counts as exact floats; its length fixes the category
/// count. Counts always sum to `n` exactly.
pub fn sample_multinomial_into<R: Rng + ?Sized>(
    rng: &mut R,
    n: u64,
    weights: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(weights.len(), out.len());
    let mut rem_n = n;
    let mut rem_w: f64 = weights.iter().sum();
    let last = out.len() - 1;
    for i in 0..last {
        if rem_n == 0 || rem_w <= 0.0 {
            out[i] = 0.0;
            continue;
        }
        let p = (weights[i] / rem_w).clamp(0.0, 1.0);
        let x = sample_binomial(rng, rem_n, p);
        out[i] = x as f64;
        rem_n -= x;
        rem_w -= weights[i];
    }
    out[last] = rem_n as f64;
}

/// Symmetric Dirichlet(1,…,1) draw of the given length (normalized
/// exponentials).
pub fn sample_dirichlet_unit<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| sample_exponential(rng, 1.0)).collect();
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Categorical draw from unnormalized log-weights (max-subtraction
/// normalization, computed in log space).
pub fn sample_categorical_log<R: Rng + ?Sized>(rng: &mut R, log_weights: &[f64]) -> usize {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

// ---------------------------------------------------------------------------
// Log densities
// ---------------------------------------------------------------------------

/// Poisson log-pmf up to the −lnΓ(x+1) term (constant across the chain and
/// cached per dataset by callers that need the full value).
pub fn ln_poisson_kernel(x: f64, rate: f64) -> f64 {
    let rate = rate.max(RATE_FLOOR);
    if x == 0.0 {
        -rate
    } else {
        x * rate.ln() - rate
    }
}

/// Full Poisson log-pmf.
pub fn ln_poisson_pmf(x: f64, rate: f64) -> f64 {
    ln_poisson_kernel(x, rate) - ln_gamma(x + 1.0)
}

/// Normal log-pdf.
pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + checked_fast_ln(var)) - 0.5 * d * d / var
}

/// Log-pdf of Normal(mean, var) truncated to [0, ∞), normalizer included.
pub fn ln_trunc_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let sd = var.sqrt();
    let tail = 0.5 * erfc(-mean / (sd * SQRT_2));
    ln_normal_pdf(x, mean, var) - checked_fast_ln(tail.max(1e-300))
}

/// Exponential(rate) log-pdf.
pub fn ln_exponential_pdf(x: f64, rate: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    checked_fast_ln(rate) - rate * x
}

/// Gamma(shape, rate) log-pdf.
pub fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * checked_fast_ln(rate) - ln_gamma(shape) + (shape - 1.0) * checked_fast_ln(x)
        - rate * x
}

/// InverseGamma(shape, rate) log-pdf.
pub fn ln_inverse_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Survival function of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// Trigamma function ψ′(x) by recurrence plus asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        * (1.0
            + inv * (0.5
                + inv * (1.0 / 6.0
                    - inv2
                        * (1.0 / 30.0
                            - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))))))
}

// ---------------------------------------------------------------------------
// Percentiles
// ---------------------------------------------------------------------------

/// Percentile of a sorted slice with linear interpolation between order
/// statistics (the common statistical convention). `p` in [0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Slice sampler
// ---------------------------------------------------------------------------

/// One slice-sampling transition targeting a log-concave density on (0, ∞).
///
/// Operates on the log-transformed coordinate (Jacobian folded in) so the
/// boundary never interferes; stepping-out bracket expansion is capped at 60
/// steps per side, after which an error with density diagnostics is returned.
/// `init` is the current value of the coordinate being updated.
pub fn logconcave_sample<R: Rng + ?Sized>(
    rng: &mut R,
    ln_f: impl Fn(f64) -> f64,
    init: f64,
) -> Result<f64> {
    const MAX_EXPAND: usize = 60;
    const MAX_SHRINK: usize = 200;
    let x0 = init.max(1e-300).ln();
    let g = |x: f64| ln_f(x.exp()) + x; // log target in transformed coordinates
    let g0 = g(x0);
    if !g0.is_finite() {
        return Err(Error::Numerical(format!(
            "slice sampler: log-density not finite at init {init} (value {g0})"
        )));
    }
    let y = g0 + rng.random::<f64>().max(1e-300).ln(); // slice level
    let w = 1.0;
    let mut lo = x0 - w * rng.random::<f64>();
    let mut hi = lo + w;
    let mut expansions = 0;
    while g(lo) > y {
        lo -= w;
        expansions += 1;
        if expansions > MAX_EXPAND {
            return Err(Error::Numerical(format!(
                "slice sampler: left bracket expansion exceeded {MAX_EXPAND} steps \
                 (init {init}, level {y:.6}, g(lo) {:.6})",
                g(lo)
            )));
        }
    }
    expansions = 0;
    while g(hi) > y {
        hi += w;
        expansions += 1;
        if expansions > MAX_EXPAND {
            return Err(Error::Numerical(format!(
                "slice sampler: right bracket expansion exceeded {MAX_EXPAND} steps \
                 (init {init}, level {y:.6}, g(hi) {:.6})",
                g(hi)
            )));
        }
    }
    for _ in 0..MAX_SHRINK {
        let x1 = lo + rng.random::<f64>() * (hi - lo);
        if g(x1) >= y {
            return Ok(x1.exp());
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
    }
    Err(Error::Numerical(format!(
        "slice sampler: shrinkage failed to land inside the slice after \
         {MAX_SHRINK} draws (init {init})"
    )))
}
