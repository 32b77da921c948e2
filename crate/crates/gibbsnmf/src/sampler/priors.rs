//! Hierarchical updates for the element-wise prior parameters, one conjugate
//! (or slice) draw per matrix entry against the fixed hyperpriors.

use crate::dist;
use crate::error::Result;
use crate::model::{HyperParams, ModelState, PriorParams};
use ndarray::Array2;
use rand::Rng;

/// Floor applied to factor values inside the shape slice target so ln(x)
/// stays finite when an element has collapsed to zero.
const VALUE_FLOOR: f64 = 1e-12;

/// Log density (up to a constant) of a Gamma shape α given one observation
/// `x` with rate `beta`, under the hyperprior ∝ α^(c−1)·e^(−dα).
pub(crate) fn ln_shape_density(alpha: f64, x: f64, beta: f64, c: f64, d: f64) -> f64 {
    let x = x.max(VALUE_FLOOR);
    alpha * beta.ln() + (alpha - 1.0) * x.ln() - statrs::function::gamma::ln_gamma(alpha)
        + (c - 1.0) * alpha.ln()
        - d * alpha
}

fn update_trunc_normal_side<R: Rng + ?Sized>(
    rng: &mut R,
    mu: &mut Array2<f64>,
    var: &mut Array2<f64>,
    x: &Array2<f64>,
    m: f64,
    s2: f64,
    a: f64,
    b: f64,
) {
    for ((mu_ij, var_ij), &x_ij) in mu.iter_mut().zip(var.iter_mut()).zip(x.iter()) {
        let post_var = 1.0 / (1.0 / s2 + 1.0 / *var_ij);
        let post_mean = post_var * (m / s2 + x_ij / *var_ij);
        *mu_ij = dist::sample_normal(rng, post_mean, post_var);
        let dev = x_ij - *mu_ij;
        *var_ij = dist::sample_inverse_gamma(rng, a + 0.5, b + 0.5 * dev * dev);
    }
}

fn update_exponential_side<R: Rng + ?Sized>(
    rng: &mut R,
    lambda: &mut Array2<f64>,
    x: &Array2<f64>,
    a: f64,
    b: f64,
) {
    for (l_ij, &x_ij) in lambda.iter_mut().zip(x.iter()) {
        *l_ij = dist::sample_gamma(rng, a + 1.0, b + x_ij);
    }
}

fn update_gamma_side<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: &mut Array2<f64>,
    beta: &mut Array2<f64>,
    x: &Array2<f64>,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
) {
    for ((alpha_ij, beta_ij), &x_ij) in alpha.iter_mut().zip(beta.iter_mut()).zip(x.iter()) {
        *beta_ij = dist::sample_gamma(rng, a + *alpha_ij, b + x_ij);
        let beta_now = *beta_ij;
        // The shape conditional is log-concave; a failed bracket (pathological
        // geometry) keeps the previous value for one iteration.
        if let Ok(drawn) =
            dist::logconcave_sample(rng, |t| ln_shape_density(t, x_ij, beta_now, c, d), *alpha_ij)
        {
            *alpha_ij = drawn;
        }
    }
}

/// One pass over every per-element prior parameter, both sides.
pub fn update_prior_params<R: Rng + ?Sized>(state: &mut ModelState, rng: &mut R) -> Result<()> {
    let ModelState { factors, priors, hypers, .. } = state;
    match (priors, *hypers) {
        (
            PriorParams::TruncNormal { mu_p, var_p, mu_e, var_e },
            HyperParams::TruncNormal { m, s2, a, b },
        ) => {
            update_trunc_normal_side(rng, mu_p, var_p, &factors.p, m, s2, a, b);
            update_trunc_normal_side(rng, mu_e, var_e, &factors.e, m, s2, a, b);
        }
        (PriorParams::Exponential { lambda_p, lambda_e }, HyperParams::Exponential { a, b }) => {
            update_exponential_side(rng, lambda_p, &factors.p, a, b);
            update_exponential_side(rng, lambda_e, &factors.e, a, b);
        }
        (
            PriorParams::Gamma { alpha_p, beta_p, alpha_e, beta_e },
            HyperParams::Gamma { a, b, c, d },
        ) => {
            update_gamma_side(rng, alpha_p, beta_p, &factors.p, a, b, c, d);
            update_gamma_side(rng, alpha_e, beta_e, &factors.e, a, b, c, d);
        }
        _ => unreachable!("prior and hyperprior families always match by construction"),
    }
    Ok(())
}
