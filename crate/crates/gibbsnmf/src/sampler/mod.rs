//! One iteration of each sampler family: Metropolis-Hastings-within-Gibbs
//! with Normal-model-derived proposals, augmented Poisson Gibbs, and the
//! Normal-likelihood Gibbs baselines, plus all prior-parameter updates.

mod augmented;
mod mh;
mod normal;
mod priors;

pub use augmented::{gibbs_update_e_augmented, gibbs_update_p_augmented, gibbs_update_z};
pub use mh::{mh_proposal_params_e, mh_proposal_params_p, mh_step_element, ElementData};
pub use normal::{
    gibbs_update_normal_e, gibbs_update_normal_p, gibbs_update_sigma2,
    normal_conditional_params_e, normal_conditional_params_p,
};
pub use priors::update_prior_params;

use crate::dist;
use crate::error::{contract, Result};
use crate::model::{
    AuxCounts, CountMatrix, FactorPair, HyperParams, InclusionState, Likelihood, ModelState,
    NoiseState, PriorKind, PriorParams,
};
use crate::rank::{self, InclusionMethod};
use ndarray::Array2;
use rand::Rng;

/// A Truncated-Normal proposal (or exact full conditional) on [0, ∞).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalParams {
    pub mean: f64,
    pub variance: f64,
}

/// Cumulative Metropolis-Hastings bookkeeping for a chain.
#[derive(Debug, Clone, Copy, Default)]
pub struct MhStats {
    pub accept_count_p: u64,
    pub propose_count_p: u64,
    pub accept_count_e: u64,
    pub propose_count_e: u64,
}

impl MhStats {
    pub fn absorb(&mut self, s: &SweepStats) {
        self.accept_count_p += s.accepted_p;
        self.propose_count_p += s.proposed_p;
        self.accept_count_e += s.accepted_e;
        self.propose_count_e += s.proposed_e;
    }

    pub fn ratio_p(&self) -> f64 {
        self.accept_count_p as f64 / self.propose_count_p.max(1) as f64
    }

    pub fn ratio_e(&self) -> f64 {
        self.accept_count_e as f64 / self.propose_count_e.max(1) as f64
    }
}

/// Which of the six model variants a chain runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplerKind {
    pub likelihood: Likelihood,
    pub prior: PriorKind,
    pub use_mh: bool,
}

impl SamplerKind {
    pub const POISSON_TN_MH: Self = Self {
        likelihood: Likelihood::Poisson,
        prior: PriorKind::TruncNormal,
        use_mh: true,
    };
    pub const POISSON_EXP_MH: Self = Self {
        likelihood: Likelihood::Poisson,
        prior: PriorKind::Exponential,
        use_mh: true,
    };
    pub const POISSON_GAMMA: Self = Self {
        likelihood: Likelihood::Poisson,
        prior: PriorKind::Gamma,
        use_mh: false,
    };
    pub const POISSON_EXP: Self = Self {
        likelihood: Likelihood::Poisson,
        prior: PriorKind::Exponential,
        use_mh: false,
    };
    pub const NORMAL_TN: Self = Self {
        likelihood: Likelihood::Normal,
        prior: PriorKind::TruncNormal,
        use_mh: false,
    };
    pub const NORMAL_EXP: Self = Self {
        likelihood: Likelihood::Normal,
        prior: PriorKind::Exponential,
        use_mh: false,
    };

    /// Reject the combinations that have no valid sampler: Gamma priors are
    /// conjugate-only (no MH, never with a Normal likelihood), TruncNormal
    /// priors under a Poisson likelihood have no closed-form conditional (MH
    /// required), and Normal likelihoods never need MH.
    pub fn validate(&self) -> Result<()> {
        let valid = matches!(
            (self.likelihood, self.prior, self.use_mh),
            (Likelihood::Poisson, PriorKind::TruncNormal, true)
                | (Likelihood::Poisson, PriorKind::Exponential, true)
                | (Likelihood::Poisson, PriorKind::Gamma, false)
                | (Likelihood::Poisson, PriorKind::Exponential, false)
                | (Likelihood::Normal, PriorKind::TruncNormal, false)
                | (Likelihood::Normal, PriorKind::Exponential, false)
        );
        if valid {
            Ok(())
        } else {
            Err(contract(format!(
                "invalid sampler combination {}; valid: poisson+truncnormal+mh, \
                 poisson+exponential+mh, poisson+gamma, poisson+exponential, \
                 normal+truncnormal, normal+exponential",
                self.label()
            )))
        }
    }

    /// Augmented Poisson samplers carry the latent count tensor Z.
    pub fn is_augmented(&self) -> bool {
        self.likelihood == Likelihood::Poisson && !self.use_mh
    }

    pub fn label(&self) -> String {
        let lik = match self.likelihood {
            Likelihood::Poisson => "poisson",
            Likelihood::Normal => "normal",
        };
        let prior = match self.prior {
            PriorKind::TruncNormal => "truncnormal",
            PriorKind::Exponential => "exponential",
            PriorKind::Gamma => "gamma",
        };
        if self.use_mh {
            format!("{lik}+{prior}+mh")
        } else {
            format!("{lik}+{prior}")
        }
    }
}

/// How MH element steps behave this sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhMode {
    /// Warm-up: draw from the proposal and accept unconditionally (no
    /// acceptance ratio is evaluated).
    AcceptAll,
    /// True MH with the Poisson/Normal acceptance ratio.
    Standard,
}

/// Per-sweep settings the chain driver passes in.
#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub mh_mode: MhMode,
    /// `Some` enables the tempered A/R inclusion updates.
    pub inclusion: Option<InclusionMethod>,
}

/// Counters and the mean acceptance probability for one sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepStats {
    pub proposed_p: u64,
    pub accepted_p: u64,
    pub proposed_e: u64,
    pub accepted_e: u64,
    /// Mean of min(1, a) over every proposal this sweep; 1.0 during warm-up.
    pub mean_accept: f64,
}

/// Build an initial chain state: hyperpriors scaled from the data, prior
/// parameters at their hyperprior means, factors drawn from the priors, all
/// factors included, and (for augmented samplers) an initial Z allocation.
pub fn init_state<R: Rng + ?Sized>(
    m: &CountMatrix,
    kind: SamplerKind,
    n: usize,
    hypers_override: Option<HyperParams>,
    rng: &mut R,
) -> Result<ModelState> {
    kind.validate()?;
    if n == 0 {
        return Err(contract("maximum rank must be ≥ 1"));
    }
    if kind.likelihood == Likelihood::Poisson && !m.is_integer_valued() {
        return Err(contract("Poisson likelihoods require integer counts"));
    }
    let (k, g) = (m.k(), m.g());
    let m_bar = m.mean();
    let hypers = hypers_override.unwrap_or_else(|| HyperParams::new(kind.prior, m_bar, n));

    // Prior parameters start at their hyperprior means.
    let priors = match hypers {
        HyperParams::TruncNormal { m: hm, a, b, .. } => PriorParams::TruncNormal {
            mu_p: Array2::from_elem((k, n), hm),
            var_p: Array2::from_elem((k, n), b / (a - 1.0)),
            mu_e: Array2::from_elem((n, g), hm),
            var_e: Array2::from_elem((n, g), b / (a - 1.0)),
        },
        HyperParams::Exponential { a, b } => PriorParams::Exponential {
            lambda_p: Array2::from_elem((k, n), a / b),
            lambda_e: Array2::from_elem((n, g), a / b),
        },
        HyperParams::Gamma { a, b, c, d } => PriorParams::Gamma {
            alpha_p: Array2::from_elem((k, n), c / d),
            beta_p: Array2::from_elem((k, n), a / b),
            alpha_e: Array2::from_elem((n, g), c / d),
            beta_e: Array2::from_elem((n, g), a / b),
        },
    };

    // Factors drawn from those priors.
    let draw = |prior: &PriorParams, rows: usize, cols: usize, p_side: bool, rng: &mut R| {
        Array2::from_shape_fn((rows, cols), |(i, j)| match prior {
            PriorParams::TruncNormal { mu_p, var_p, mu_e, var_e } => {
                let (mu, var) =
                    if p_side { (mu_p[[i, j]], var_p[[i, j]]) } else { (mu_e[[i, j]], var_e[[i, j]]) };
                dist::sample_trunc_normal(rng, mu, var)
            }
            PriorParams::Exponential { lambda_p, lambda_e } => {
                let lam = if p_side { lambda_p[[i, j]] } else { lambda_e[[i, j]] };
                dist::sample_exponential(rng, lam)
            }
            PriorParams::Gamma { alpha_p, beta_p, alpha_e, beta_e } => {
                let (al, be) = if p_side {
                    (alpha_p[[i, j]], beta_p[[i, j]])
                } else {
                    (alpha_e[[i, j]], beta_e[[i, j]])
                };
                dist::sample_gamma(rng, al, be)
            }
        })
    };
    let p = draw(&priors, k, n, true, rng);
    let e = draw(&priors, n, g, false, rng);

    let factors = FactorPair { p, e };
    let inclusion = InclusionState::all_included(n);
    let m_hat = crate::model::reconstruct(&factors, &inclusion)?;

    let mut state = ModelState {
        factors,
        inclusion,
        priors,
        hypers,
        aux: if kind.is_augmented() { Some(AuxCounts::zeros(k, n, g)) } else { None },
        noise: if kind.likelihood == Likelihood::Normal {
            Some(NoiseState::prior_mean(g))
        } else {
            None
        },
        gamma: 1.0,
        iter: 0,
        m_hat,
    };
    if kind.is_augmented() {
        augmented::update_z_all(m, &mut state, rng)?;
    }
    state.validate()?;
    Ok(state)
}

/// Run one full systematic-scan iteration: prior parameters, then P, then E,
/// then Z or σ², then the tempered A and R updates when rank learning.
pub fn sweep<R: Rng + ?Sized>(
    m: &CountMatrix,
    state: &mut ModelState,
    kind: SamplerKind,
    opts: &SweepOptions,
    rng: &mut R,
) -> Result<SweepStats> {
    priors::update_prior_params(state, rng)?;

    let mut stats = SweepStats::default();
    match (kind.likelihood, kind.use_mh) {
        (Likelihood::Poisson, true) => {
            let (sum, count) = mh::sweep_mh(m, state, opts.mh_mode, rng, &mut stats);
            stats.mean_accept = if count > 0 { sum / count as f64 } else { 1.0 };
        }
        (Likelihood::Poisson, false) => {
            augmented::sweep_augmented(m, state, rng)?;
            stats.mean_accept = 1.0;
        }
        (Likelihood::Normal, _) => {
            normal::sweep_normal(m, state, rng)?;
            stats.mean_accept = 1.0;
        }
    }

    if let Some(method) = opts.inclusion {
        let gamma = state.gamma;
        let mut a_changed = false;
        for n_idx in 0..state.factors.n() {
            let before = state.inclusion.a[n_idx];
            let after = rank::update_a(rng, state, n_idx, gamma, method, m)?;
            a_changed |= before != after;
        }
        state.inclusion.r = rank::update_r(rng, state, gamma);
        // A flips change which factors the multinomial weights see; stale
        // allocations would otherwise leak counts into excluded factors.
        if kind.is_augmented() && a_changed {
            augmented::update_z_all(m, state, rng)?;
        }
    }

    state.iter += 1;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ALL_KINDS: [SamplerKind; 6] = [
        SamplerKind::POISSON_TN_MH,
        SamplerKind::POISSON_EXP_MH,
        SamplerKind::POISSON_GAMMA,
        SamplerKind::POISSON_EXP,
        SamplerKind::NORMAL_TN,
        SamplerKind::NORMAL_EXP,
    ];

    fn toy_counts() -> CountMatrix {
        CountMatrix::new(Array2::from_shape_fn((6, 8), |(k, g)| {
            ((k * 13 + g * 7) % 11) as f64
        }))
        .unwrap()
    }

    #[test]
    fn exactly_six_kinds_validate() {
        for kind in ALL_KINDS {
            kind.validate().unwrap();
        }
        let invalid = [
            SamplerKind { likelihood: Likelihood::Normal, prior: PriorKind::Gamma, use_mh: false },
            SamplerKind { likelihood: Likelihood::Normal, prior: PriorKind::Gamma, use_mh: true },
            SamplerKind { likelihood: Likelihood::Poisson, prior: PriorKind::Gamma, use_mh: true },
            SamplerKind {
                likelihood: Likelihood::Poisson,
                prior: PriorKind::TruncNormal,
                use_mh: false,
            },
            SamplerKind {
                likelihood: Likelihood::Normal,
                prior: PriorKind::TruncNormal,
                use_mh: true,
            },
            SamplerKind {
                likelihood: Likelihood::Normal,
                prior: PriorKind::Exponential,
                use_mh: true,
            },
        ];
        for kind in invalid {
            assert!(kind.validate().is_err(), "{} should be invalid", kind.label());
        }
    }

    #[test]
    fn labels_are_stable() {
        assert_eq!(SamplerKind::POISSON_TN_MH.label(), "poisson+truncnormal+mh");
        assert_eq!(SamplerKind::POISSON_GAMMA.label(), "poisson+gamma");
        assert_eq!(SamplerKind::NORMAL_EXP.label(), "normal+exponential");
    }

    #[test]
    fn init_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let m = toy_counts();
        let bad_kind = SamplerKind {
            likelihood: Likelihood::Poisson,
            prior: PriorKind::Gamma,
            use_mh: true,
        };
        assert!(init_state(&m, bad_kind, 2, None, &mut rng).is_err());
        assert!(init_state(&m, SamplerKind::POISSON_GAMMA, 0, None, &mut rng).is_err());
        let frac = CountMatrix::new(Array2::from_elem((2, 2), 1.5)).unwrap();
        assert!(init_state(&frac, SamplerKind::POISSON_GAMMA, 2, None, &mut rng).is_err());
        // The Normal likelihood accepts non-integer data.
        assert!(init_state(&frac, SamplerKind::NORMAL_TN, 2, None, &mut rng).is_ok());
    }

    #[test]
    fn init_state_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let m = toy_counts();
        for kind in ALL_KINDS {
            let state = init_state(&m, kind, 3, None, &mut rng).unwrap();
            assert_eq!(state.factors.p.dim(), (6, 3));
            assert_eq!(state.factors.e.dim(), (3, 8));
            assert!(state.factors.p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!(state.factors.e.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert_eq!(state.inclusion.effective_rank(), 3);
            assert_eq!(state.aux.is_some(), kind.is_augmented());
            assert_eq!(state.noise.is_some(), kind.likelihood == Likelihood::Normal);
            assert_eq!(state.likelihood(), kind.likelihood);
            if let Some(aux) = &state.aux {
                for k in 0..6 {
                    for g in 0..8 {
                        let tot: f64 = (0..3).map(|n| aux.z[[k, n, g]]).sum();
                        assert_eq!(tot, m.values[[k, g]]);
                    }
                }
            }
        }
    }

    // Domain invariant: after 10⁴ sweeps on random data every sampled
    // quantity is finite and respects its sign constraint.
    #[test]
    fn long_runs_stay_in_domain() {
        let m = toy_counts();
        for kind in ALL_KINDS {
            let mut rng = ChaCha8Rng::seed_from_u64(53);
            let mut state = init_state(&m, kind, 2, None, &mut rng).unwrap();
            let opts = SweepOptions {
                mh_mode: if kind.use_mh { MhMode::Standard } else { MhMode::AcceptAll },
                inclusion: None,
            };
            let mut stats = MhStats::default();
            for _ in 0..10_000 {
                let s = sweep(&m, &mut state, kind, &opts, &mut rng).unwrap();
                stats.absorb(&s);
            }
            assert!(
                state.factors.p.iter().all(|v| v.is_finite() && *v >= 0.0),
                "{}: P left its domain",
                kind.label()
            );
            assert!(
                state.factors.e.iter().all(|v| v.is_finite() && *v >= 0.0),
                "{}: E left its domain",
                kind.label()
            );
            match &state.priors {
                PriorParams::TruncNormal { mu_p, var_p, mu_e, var_e } => {
                    assert!(mu_p.iter().chain(mu_e.iter()).all(|v| v.is_finite()));
                    assert!(var_p.iter().chain(var_e.iter()).all(|v| v.is_finite() && *v > 0.0));
                }
                PriorParams::Exponential { lambda_p, lambda_e } => {
                    assert!(lambda_p
                        .iter()
                        .chain(lambda_e.iter())
                        .all(|v| v.is_finite() && *v > 0.0));
                }
                PriorParams::Gamma { alpha_p, beta_p, alpha_e, beta_e } => {
                    assert!(alpha_p
                        .iter()
                        .chain(alpha_e.iter())
                        .chain(beta_p.iter())
                        .chain(beta_e.iter())
                        .all(|v| v.is_finite() && *v > 0.0));
                }
            }
            if let Some(noise) = &state.noise {
                assert!(noise.sigma2.iter().all(|v| v.is_finite() && *v > 0.0));
            }
            if kind.use_mh {
                assert!(stats.propose_count_p > 0 && stats.propose_count_e > 0);
                assert!(stats.accept_count_p <= stats.propose_count_p);
                assert!(stats.accept_count_e <= stats.propose_count_e);
                assert!((0.0..=1.0).contains(&stats.ratio_p()));
                assert!((0.0..=1.0).contains(&stats.ratio_e()));
            }
            assert_eq!(state.iter, 10_000);
        }
    }

    // The cached reconstruction must track the factors through incremental
    // updates in every family.
    #[test]
    fn reconstruction_cache_stays_exact() {
        let m = toy_counts();
        for kind in ALL_KINDS {
            let mut rng = ChaCha8Rng::seed_from_u64(54);
            let mut state = init_state(&m, kind, 3, None, &mut rng).unwrap();
            let opts = SweepOptions {
                mh_mode: if kind.use_mh { MhMode::Standard } else { MhMode::AcceptAll },
                inclusion: Some(InclusionMethod::Sbfi),
            };
            for _ in 0..200 {
                sweep(&m, &mut state, kind, &opts, &mut rng).unwrap();
            }
            let fresh = crate::model::reconstruct(&state.factors, &state.inclusion).unwrap();
            for (cached, exact) in state.m_hat.iter().zip(fresh.iter()) {
                assert!(
                    (cached - exact).abs() <= 1e-9 * exact.abs().max(1.0),
                    "{}: cache drifted ({cached} vs {exact})",
                    kind.label()
                );
            }
        }
    }

    // Warm-up sweeps report a mean acceptance of exactly 1.
    #[test]
    fn warmup_reports_unit_acceptance() {
        let m = toy_counts();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut state = init_state(&m, SamplerKind::POISSON_TN_MH, 2, None, &mut rng).unwrap();
        let opts = SweepOptions { mh_mode: MhMode::AcceptAll, inclusion: None };
        let stats = sweep(&m, &mut state, SamplerKind::POISSON_TN_MH, &opts, &mut rng).unwrap();
        assert_eq!(stats.mean_accept, 1.0);
        assert_eq!(stats.proposed_p, stats.accepted_p);
        assert_eq!(stats.proposed_e, stats.accepted_e);
    }

    #[test]
    fn rank_learning_sweeps_track_inclusion() {
        let m = toy_counts();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let kind = SamplerKind::POISSON_GAMMA;
        let mut state = init_state(&m, kind, 4, None, &mut rng).unwrap();
        let opts = SweepOptions { mh_mode: MhMode::AcceptAll, inclusion: Some(InclusionMethod::Bfi) };
        for i in 0..300 {
            state.gamma = crate::rank::temper_gamma(i, 1500, true);
            sweep(&m, &mut state, kind, &opts, &mut rng).unwrap();
            assert!(state.inclusion.r <= 4);
            // Z must never hold counts for excluded factors.
            let aux = state.aux.as_ref().unwrap();
            for (n, &a) in state.inclusion.a.iter().enumerate() {
                if a == 0 {
                    for k in 0..6 {
                        for g in 0..8 {
                            assert_eq!(aux.z[[k, n, g]], 0.0);
                        }
                    }
                }
            }
        }
    }
}
