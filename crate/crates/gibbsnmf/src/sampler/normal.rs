//! Exact Gibbs updates for the Normal-likelihood models: Truncated-Normal
//! full conditionals for P and E (the same algebra the MH proposals borrow,
//! with the per-variable noise variance in place of the rate) and the
//! conjugate Inverse-Gamma update for that variance.

use super::ProposalParams;
use crate::dist;
use crate::error::{Error, Result};
use crate::model::{CountMatrix, ModelState, NoiseState, PriorParams};
use rand::Rng;

/// Per-element prior pieces for the conditional; Exponential priors shift the
/// Normal mean, Truncated-Normal priors add precision.
#[derive(Debug, Clone, Copy)]
enum ElementPrior {
    TruncNormal { mu: f64, var: f64 },
    Exponential { lambda: f64 },
}

impl ElementPrior {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            ElementPrior::TruncNormal { mu, var } => dist::sample_trunc_normal(rng, mu, var),
            ElementPrior::Exponential { lambda } => dist::sample_exponential(rng, lambda),
        }
    }
}

#[inline]
fn conditional_from_sums(prior: ElementPrior, s1: f64, s2: f64) -> Option<ProposalParams> {
    match prior {
        ElementPrior::TruncNormal { mu, var } => {
            let v = 1.0 / (1.0 / var + s2);
            if !(v.is_finite() && v > 0.0) {
                return None;
            }
            Some(ProposalParams { mean: (mu / var + s1) * v, variance: v })
        }
        ElementPrior::Exponential { lambda } => {
            if s2 <= 0.0 {
                return None;
            }
            let v = 1.0 / s2;
            if !(v.is_finite() && v > 0.0) {
                return None;
            }
            Some(ProposalParams { mean: (s1 - lambda) * v, variance: v })
        }
    }
}

fn element_prior_p(priors: &PriorParams, k: usize, n: usize) -> Result<ElementPrior> {
    match priors {
        PriorParams::TruncNormal { mu_p, var_p, .. } => {
            Ok(ElementPrior::TruncNormal { mu: mu_p[[k, n]], var: var_p[[k, n]] })
        }
        PriorParams::Exponential { lambda_p, .. } => {
            Ok(ElementPrior::Exponential { lambda: lambda_p[[k, n]] })
        }
        PriorParams::Gamma { .. } => Err(Error::Contract(
            "the Normal likelihood pairs with Truncated-Normal or Exponential priors only".into(),
        )),
    }
}

fn element_prior_e(priors: &PriorParams, n: usize, g: usize) -> Result<ElementPrior> {
    match priors {
        PriorParams::TruncNormal { mu_e, var_e, .. } => {
            Ok(ElementPrior::TruncNormal { mu: mu_e[[n, g]], var: var_e[[n, g]] })
        }
        PriorParams::Exponential { lambda_e, .. } => {
            Ok(ElementPrior::Exponential { lambda: lambda_e[[n, g]] })
        }
        PriorParams::Gamma { .. } => Err(Error::Contract(
            "the Normal likelihood pairs with Truncated-Normal or Exponential priors only".into(),
        )),
    }
}

/// Truncated-Normal full-conditional parameters for P_kn under the Normal
/// likelihood; signals `ExcludedFactor` when A_nn = 0.
pub fn normal_conditional_params_p(
    k: usize,
    n: usize,
    m: &CountMatrix,
    state: &ModelState,
) -> Result<ProposalParams> {
    if state.inclusion.a[n] == 0 {
        return Err(Error::ExcludedFactor(n));
    }
    let noise = state
        .noise
        .as_ref()
        .ok_or_else(|| Error::Contract("Normal conditionals need a noise state".into()))?;
    let cur = state.factors.p[[k, n]];
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for g in 0..m.g() {
        let c = state.factors.e[[n, g]];
        if c == 0.0 {
            continue;
        }
        let w = noise.sigma2[g];
        let loo = state.m_hat[[k, g]] - cur * c;
        s1 += c * (m.values[[k, g]] - loo) / w;
        s2 += c * c / w;
    }
    conditional_from_sums(element_prior_p(&state.priors, k, n)?, s1, s2)
        .ok_or(Error::ExcludedFactor(n))
}

/// Truncated-Normal full-conditional parameters for E_ng; symmetric to
/// [`normal_conditional_params_p`] with sums over variables.
pub fn normal_conditional_params_e(
    n: usize,
    g: usize,
    m: &CountMatrix,
    state: &ModelState,
) -> Result<ProposalParams> {
    if state.inclusion.a[n] == 0 {
        return Err(Error::ExcludedFactor(n));
    }
    let noise = state
        .noise
        .as_ref()
        .ok_or_else(|| Error::Contract("Normal conditionals need a noise state".into()))?;
    let w = noise.sigma2[g];
    let cur = state.factors.e[[n, g]];
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for k in 0..m.k() {
        let c = state.factors.p[[k, n]];
        if c == 0.0 {
            continue;
        }
        let loo = state.m_hat[[k, g]] - cur * c;
        s1 += c * (m.values[[k, g]] - loo) / w;
        s2 += c * c / w;
    }
    conditional_from_sums(element_prior_e(&state.priors, n, g)?, s1, s2)
        .ok_or(Error::ExcludedFactor(n))
}

/// Exact draw for P_kn from its Truncated-Normal full conditional.
pub fn gibbs_update_normal_p<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    n: usize,
    m: &CountMatrix,
    state: &ModelState,
) -> Result<f64> {
    let params = normal_conditional_params_p(k, n, m, state)?;
    Ok(dist::sample_trunc_normal(rng, params.mean, params.variance))
}

/// Exact draw for E_ng from its Truncated-Normal full conditional.
pub fn gibbs_update_normal_e<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    g: usize,
    m: &CountMatrix,
    state: &ModelState,
) -> Result<f64> {
    let params = normal_conditional_params_e(n, g, m, state)?;
    Ok(dist::sample_trunc_normal(rng, params.mean, params.variance))
}

/// Conjugate Inverse-Gamma draw for the noise variance of variable g.
pub fn gibbs_update_sigma2<R: Rng + ?Sized>(
    rng: &mut R,
    g: usize,
    m: &CountMatrix,
    state: &ModelState,
) -> f64 {
    let kd = m.k();
    let mut ss = 0.0;
    for k in 0..kd {
        let r = m.values[[k, g]] - state.m_hat[[k, g]];
        ss += r * r;
    }
    dist::sample_inverse_gamma(
        rng,
        NoiseState::ALPHA + 0.5 * kd as f64,
        NoiseState::BETA + 0.5 * ss,
    )
}

/// One full Normal-model pass: P, then E (reconstruction maintained
/// incrementally), then the per-variable noise variances.
pub(super) fn sweep_normal<R: Rng + ?Sized>(
    m: &CountMatrix,
    state: &mut ModelState,
    rng: &mut R,
) -> Result<()> {
    let (kd, gd) = (m.k(), m.g());
    let nd = state.factors.n();
    if state.noise.is_none() {
        return Err(Error::Contract("Normal sweeps need a noise state".into()));
    }

    for n in 0..nd {
        let included = state.inclusion.a[n] == 1;
        for k in 0..kd {
            let prior = element_prior_p(&state.priors, k, n)?;
            if !included {
                state.factors.p[[k, n]] = prior.draw(rng);
                continue;
            }
            let params = normal_conditional_params_p(k, n, m, state)?;
            let cur = state.factors.p[[k, n]];
            let new_val = dist::sample_trunc_normal(rng, params.mean, params.variance);
            if new_val != cur {
                state.factors.p[[k, n]] = new_val;
                let delta = new_val - cur;
                for g in 0..gd {
                    state.m_hat[[k, g]] += delta * state.factors.e[[n, g]];
                }
            }
        }
    }

    for n in 0..nd {
        let included = state.inclusion.a[n] == 1;
        for g in 0..gd {
            let prior = element_prior_e(&state.priors, n, g)?;
            if !included {
                state.factors.e[[n, g]] = prior.draw(rng);
                continue;
            }
            let params = normal_conditional_params_e(n, g, m, state)?;
            let cur = state.factors.e[[n, g]];
            let new_val = dist::sample_trunc_normal(rng, params.mean, params.variance);
            if new_val != cur {
                state.factors.e[[n, g]] = new_val;
                let delta = new_val - cur;
                for k in 0..kd {
                    state.m_hat[[k, g]] += delta * state.factors.p[[k, n]];
                }
            }
        }
    }

    let noise = state.noise.as_mut().expect("checked above");
    for g in 0..gd {
        let mut ss = 0.0;
        for k in 0..kd {
            let r = m.values[[k, g]] - state.m_hat[[k, g]];
            ss += r * r;
        }
        noise.sigma2[g] = dist::sample_inverse_gamma(
            rng,
            NoiseState::ALPHA + 0.5 * kd as f64,
            NoiseState::BETA + 0.5 * ss,
        );
    }
    Ok(())
}
