//! Shared helpers for integration and acceptance tests.

use gibbsnmf::dist::{ln_exponential_pdf, ln_trunc_normal_pdf};
use gibbsnmf::model::{CountMatrix, PriorParams, PriorKind};
use gibbsnmf::sampler::{
    init_state, mh_proposal_params_p, mh_step_element, ElementData, MhMode, SamplerKind,
};
use ndarray::arr2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// KS distance between the kept-sample distribution of the single loading in
/// a 1×1×1 model (E and all prior parameters held fixed) and the posterior
/// obtained by grid quadrature of likelihood × prior.
///
/// The chain repeatedly applies the Normal-model-derived truncated-normal
/// proposal followed by the Poisson/Normal acceptance ratio — exactly the
/// per-element update the full sweeps perform.
pub fn toy_posterior_ks(kind: SamplerKind, draws: usize, seed: u64) -> f64 {
    const M_OBS: f64 = 5.0;
    const E_FIXED: f64 = 3.0;
    const BURN_IN: usize = 1000;

    let m = CountMatrix::new(arr2(&[[M_OBS]])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = init_state(&m, kind, 1, None, &mut rng).unwrap();
    state.inclusion.a[0] = 1;
    state.factors.e[(0, 0)] = E_FIXED;
    state.factors.p[(0, 0)] = 1.0;
    let ln_prior: fn(f64) -> f64 = match kind.prior {
        PriorKind::TruncNormal => {
            state.priors = PriorParams::TruncNormal {
                mu_p: arr2(&[[0.5]]),
                var_p: arr2(&[[1.0]]),
                mu_e: arr2(&[[0.0]]),
                var_e: arr2(&[[1.0]]),
            };
            |p| ln_trunc_normal_pdf(p, 0.5, 1.0)
        }
        PriorKind::Exponential => {
            state.priors = PriorParams::Exponential {
                lambda_p: arr2(&[[1.0]]),
                lambda_e: arr2(&[[1.0]]),
            };
            |p| ln_exponential_pdf(p, 1.0)
        }
        PriorKind::Gamma => unreachable!("Gamma priors never use MH"),
    };
    state.refresh_m_hat();

    let mut kept = Vec::with_capacity(draws);
    let observed = [M_OBS];
    let coef = [E_FIXED];
    for it in 0..draws + BURN_IN {
        let proposal = mh_proposal_params_p(0, 0, &m, &state).unwrap();
        let reconstruction = [state.m_hat[(0, 0)]];
        let data = ElementData { m: &observed, m_hat: &reconstruction, coef: &coef };
        let (value, _, _) =
            mh_step_element(&mut rng, &data, state.factors.p[(0, 0)], proposal, MhMode::Standard);
        state.factors.p[(0, 0)] = value;
        state.m_hat[(0, 0)] = value * E_FIXED;
        if it >= BURN_IN {
            kept.push(value);
        }
    }

    // Midpoint quadrature of the unnormalized log posterior. The posterior
    // mode sits near M/E ≈ 1.67; mass beyond p = 8 (rate 24) is negligible.
    let steps = 80_000usize;
    let h = 8.0 / steps as f64;
    let ln_post = |p: f64| M_OBS * (p * E_FIXED).ln() - p * E_FIXED + ln_prior(p);
    let lnw: Vec<f64> = (0..steps).map(|j| ln_post((j as f64 + 0.5) * h)).collect();
    let max = lnw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = lnw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut cum = Vec::with_capacity(steps);
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cum.push(acc);
    }
    let cdf = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let cell = ((x / h) as usize).min(steps - 1);
        let below = if cell == 0 { 0.0 } else { cum[cell - 1] };
        let frac = ((x - cell as f64 * h) / h).clamp(0.0, 1.0);
        ((below + frac * weights[cell]) / total).min(1.0)
    };

    kept.sort_by(f64::total_cmp);
    let n = kept.len() as f64;
    kept.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
