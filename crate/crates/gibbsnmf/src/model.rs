//! Model state containers and the shared reconstruction/likelihood metrics
//! used by every sampler.

use crate::dist;
use crate::error::{contract, Result};
use ndarray::{Array2, Array3};
use statrs::function::gamma::ln_gamma;

/// Which observation model the likelihood uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Likelihood {
    Poisson,
    Normal,
}

/// Which prior family the factor entries use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorKind {
    TruncNormal,
    Exponential,
    Gamma,
}

/// Observed K×G nonnegative data.
#[derive(Debug, Clone)]
pub struct CountMatrix {
    pub values: Array2<f64>,
}

impl CountMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(contract("count matrix must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(contract("count matrix entries must be finite and ≥ 0"));
        }
        Ok(Self { values })
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn g(&self) -> usize {
        self.values.ncols()
    }

    /// Mean across all entries (the M̄ used to scale hyperpriors).
    pub fn mean(&self) -> f64 {
        self.values.sum() / (self.k() * self.g()) as f64
    }

    /// True when every entry is an integer, as Poisson likelihoods require.
    pub fn is_integer_valued(&self) -> bool {
        self.values.iter().all(|v| v.fract() == 0.0)
    }

    /// Per-entry lnΓ(M_kg + 1), the constant part of the Poisson log-pmf;
    /// computed once per dataset.
    pub fn ln_factorial_table(&self) -> Array2<f64> {
        self.values.mapv(|v| ln_gamma(v + 1.0))
    }
}

/// The factor pair P (K×N loadings) and E (N×G scores).
#[derive(Debug, Clone)]
pub struct FactorPair {
    pub p: Array2<f64>,
    pub e: Array2<f64>,
}

impl FactorPair {
    pub fn n(&self) -> usize {
        self.p.ncols()
    }
}

/// Diagonal binary inclusion state: which factors are active, plus the
/// expected-rank variable R that drives the inclusion probability q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusionState {
    /// Diagonal of the inclusion matrix, entries in {0,1}.
    pub a: Vec<u8>,
    /// Expected-rank variable in 0..=N.
    pub r: usize,
}

impl InclusionState {
    pub fn all_included(n: usize) -> Self {
        Self { a: vec![1; n], r: n }
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Effective rank N′ = Σ A_nn.
    pub fn effective_rank(&self) -> usize {
        self.a.iter().map(|&x| x as usize).sum()
    }

    /// Inclusion probability derived from R, bounded away from 0 and 1:
    /// q = 0.4/N at R=0, R/N in between, 1 − 0.4/N at R=N.
    pub fn q(&self) -> f64 {
        q_of_r(self.r, self.n())
    }
}

/// Inclusion probability for a given expected rank r out of N.
pub fn q_of_r(r: usize, n: usize) -> f64 {
    let nf = n as f64;
    if r == 0 {
        0.4 / nf
    } else if r == n {
        1.0 - 0.4 / nf
    } else {
        r as f64 / nf
    }
}

/// Per-element prior parameters for P and E under the configured family.
#[derive(Debug, Clone)]
pub enum PriorParams {
    TruncNormal {
        mu_p: Array2<f64>,
        var_p: Array2<f64>,
        mu_e: Array2<f64>,
        var_e: Array2<f64>,
    },
    Exponential {
        lambda_p: Array2<f64>,
        lambda_e: Array2<f64>,
    },
    Gamma {
        alpha_p: Array2<f64>,
        beta_p: Array2<f64>,
        alpha_e: Array2<f64>,
        beta_e: Array2<f64>,
    },
}

impl PriorParams {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorParams::TruncNormal { .. } => PriorKind::TruncNormal,
            PriorParams::Exponential { .. } => PriorKind::Exponential,
            PriorParams::Gamma { .. } => PriorKind::Gamma,
        }
    }
}

/// Fixed hyperprior constants, scaled from the data mean M̄ and the maximum
/// rank N at construction. The same constants apply to the P and E sides.
#[derive(Debug, Clone, Copy)]
pub enum HyperParams {
    /// Normal(m, s²) hyperprior on μ and InverseGamma(a, b) on σ².
    TruncNormal { m: f64, s2: f64, a: f64, b: f64 },
    /// Gamma(a, b) hyperprior on the Exponential rate λ.
    Exponential { a: f64, b: f64 },
    /// Gamma(a, b) hyperprior on the rate β; the shape α hyperprior has
    /// density ∝ α^(c−1)·e^(−dα) coupled through the Gamma likelihood.
    Gamma { a: f64, b: f64, c: f64, d: f64 },
}

impl HyperParams {
    pub fn new(prior: PriorKind, m_bar: f64, n: usize) -> Self {
        let nf = n as f64;
        match prior {
            PriorKind::TruncNormal => HyperParams::TruncNormal {
                m: 0.0,
                s2: (m_bar / nf).sqrt(),
                a: nf + 1.0,
                b: nf.sqrt(),
            },
            PriorKind::Exponential => HyperParams::Exponential {
                a: 10.0 * nf.sqrt(),
                b: 10.0 * m_bar.sqrt(),
            },
            PriorKind::Gamma => HyperParams::Gamma {
                a: 10.0 * nf.sqrt(),
                b: 10.0,
                c: 10.0 * m_bar.sqrt(),
                d: 10.0,
            },
        }
    }
}

/// Latent factor-attributed counts Z (K×N×G), allocated only for augmented
/// Poisson samplers. Σ_n Z_kng = M_kg exactly.
#[derive(Debug, Clone)]
pub struct AuxCounts {
    pub z: Array3<f64>,
}

impl AuxCounts {
    pub fn zeros(k: usize, n: usize, g: usize) -> Self {
        Self { z: Array3::zeros((k, n, g)) }
    }
}

/// Per-sample noise variances for Normal-likelihood models, with their fixed
/// InverseGamma(3, 3) prior constants.
#[derive(Debug, Clone)]
pub struct NoiseState {
    pub sigma2: Vec<f64>,
}

impl NoiseState {
    pub const ALPHA: f64 = 3.0;
    pub const BETA: f64 = 3.0;

    pub fn prior_mean(g: usize) -> Self {
        Self { sigma2: vec![Self::BETA / (Self::ALPHA - 1.0); g] }
    }
}

/// Full sampler state for one chain.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub factors: FactorPair,
    pub inclusion: InclusionState,
    pub priors: PriorParams,
    pub hypers: HyperParams,
    pub aux: Option<AuxCounts>,
    pub noise: Option<NoiseState>,
    /// Tempering temperature γ ∈ [0,1].
    pub gamma: f64,
    /// Iteration counter.
    pub iter: usize,
    /// Cached reconstruction M̂ = PAE, kept in sync by the samplers.
    pub m_hat: Array2<f64>,
}

impl ModelState {
    /// Recompute the cached reconstruction from scratch.
    pub fn refresh_m_hat(&mut self) {
        self.m_hat = reconstruct(&self.factors, &self.inclusion)
            .expect("state dimensions consistent");
    }

    /// The likelihood family implied by the attached auxiliary state.
    pub fn likelihood(&self) -> Likelihood {
        if self.noise.is_some() {
            Likelihood::Normal
        } else {
            Likelihood::Poisson
        }
    }

    /// Check the structural invariants (dimensions, flags, domains).
    pub fn validate(&self) -> Result<()> {
        let (k, n) = self.factors.p.dim();
        let (n2, g) = self.factors.e.dim();
        if n != n2 {
            return Err(contract(format!("P is K×{n} but E is {n2}×G")));
        }
        if self.inclusion.a.len() != n {
            return Err(contract("inclusion vector length differs from N"));
        }
        if self.inclusion.r > n {
            return Err(contract("R exceeds N"));
        }
        if self.aux.is_some() && self.noise.is_some() {
            return Err(contract("aux counts and noise state are mutually exclusive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(contract("γ outside [0,1]"));
        }
        if let Some(aux) = &self.aux {
            if aux.z.dim() != (k, n, g) {
                return Err(contract("Z tensor dimensions inconsistent"));
            }
        }
        if let Some(noise) = &self.noise {
            if noise.sigma2.len() != g {
                return Err(contract("σ² length differs from G"));
            }
            if noise.sigma2.iter().any(|s| *s <= 0.0) {
                return Err(contract("σ² entries must be positive"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Reconstruction M̂ with M̂_kg = Σ_n P_kn·A_nn·E_ng.
pub fn reconstruct(factors: &FactorPair, inclusion: &InclusionState) -> Result<Array2<f64>> {
    let (_, n) = factors.p.dim();
    let (n2, _) = factors.e.dim();
    if n != n2 || inclusion.a.len() != n {
        return Err(contract(format!(
            "reconstruct: P has {n} factors, E has {n2}, A has {}",
            inclusion.a.len()
        )));
    }
    let mut masked = factors.p.clone();
    for (j, &a) in inclusion.a.iter().enumerate() {
        if a == 0 {
            masked.column_mut(j).fill(0.0);
        }
    }
    Ok(masked.dot(&factors.e))
}

/// Leave-one-out reconstruction M̂_kg/n = Σ_{n′≠n} P_kn′·A_n′n′·E_n′g.
pub fn reconstruct_loo(
    factors: &FactorPair,
    inclusion: &InclusionState,
    n: usize,
) -> Result<Array2<f64>> {
    let mut full = reconstruct(factors, inclusion)?;
    if inclusion.a[n] == 1 {
        let p_col = factors.p.column(n);
        let e_row = factors.e.row(n);
        for (k, &pk) in p_col.iter().enumerate() {
            for (g, &eg) in e_row.iter().enumerate() {
                full[[k, g]] -= pk * eg;
            }
        }
    }
    Ok(full)
}

/// Sum over entries of the log density of M at mean M̂ under the family.
///
/// Poisson: exact zero rates return −∞ when the count is positive and
/// contribute 0 when it is zero (the generalized-KL limit convention).
pub fn log_likelihood(m: &CountMatrix, state: &ModelState, family: Likelihood) -> Result<f64> {
    let m_hat = reconstruct(&state.factors, &state.inclusion)?;
    if m_hat.dim() != m.values.dim() {
        return Err(contract("log_likelihood: reconstruction shape differs from data"));
    }
    match family {
        Likelihood::Poisson => {
            if m.values.iter().any(|v| v.is_nan()) || m_hat.iter().any(|v| v.is_nan()) {
                return Err(contract("log_likelihood: NaN input"));
            }
            Ok(poisson_log_likelihood(&m.values, &m_hat, None))
        }
        Likelihood::Normal => {
            let noise = state
                .noise
                .as_ref()
                .ok_or_else(|| contract("Normal likelihood requires a noise state"))?;
            Ok(normal_log_likelihood(&m.values, &m_hat, &noise.sigma2))
        }
    }
}

/// Poisson log-likelihood of `m` under rates `m_hat`; pass the cached
/// lnΓ(M+1) table to avoid recomputing the constant term.
pub fn poisson_log_likelihood(
    m: &Array2<f64>,
    m_hat: &Array2<f64>,
    ln_fact: Option<&Array2<f64>>,
) -> f64 {
    let xs = m.as_slice().expect("standard layout");
    let rates = m_hat.as_slice().expect("standard layout");
    let table = ln_fact.map(|t| t.as_slice().expect("standard layout"));
    if let Some(t) = table {
        // With the constant term precomputed the loop runs branch-free
        // (selects instead of skips) so it vectorizes; results match the
        // general path exactly for all normal rates, and positive rates the
        // fast log cannot represent (subnormal, infinite) rerun the general
        // path instead.
        let n = xs.len();
        let (xs, rates, t) = (&xs[..n], &rates[..n], &t[..n]);
        let mut total = 0.0;
        let mut dead = false;
        let mut fallback = false;
        for i in 0..n {
            let (x, rate) = (xs[i], rates[i]);
            let term = x * dist::fast_ln(rate.max(f64::MIN_POSITIVE)) - rate - t[i];
            // x·ln(rate) and lnΓ(1) vanish exactly at x = 0; rates ≤ 0
            // contribute nothing (0·log 0 convention) unless counts are
            // present, which sinks the whole sum.
            let term = if x == 0.0 { -rate } else { term };
            total += if rate <= 0.0 { 0.0 } else { term };
            dead |= (rate <= 0.0) & (x > 0.0);
            fallback |= (rate > 0.0) & !(f64::MIN_POSITIVE..=f64::MAX).contains(&rate);
        }
        if dead {
            return f64::NEG_INFINITY;
        }
        if !fallback {
            return total;
        }
    }
    let mut total = 0.0;
    for idx in 0..xs.len() {
        let (x, rate) = (xs[idx], rates[idx]);
        if rate <= 0.0 {
            if x > 0.0 {
                return f64::NEG_INFINITY;
            }
            continue; // 0·log 0 convention: zero contribution
        }
        if x == 0.0 {
            total -= rate; // x·ln(rate) and lnΓ(1) vanish exactly
            continue;
        }
        let constant = match table {
            Some(t) => t[idx],
            None => ln_gamma(x + 1.0),
        };
        total += x * dist::checked_fast_ln(rate) - rate - constant;
    }
    total
}

/// Normal log-likelihood with per-column variances.
pub fn normal_log_likelihood(m: &Array2<f64>, m_hat: &Array2<f64>, sigma2: &[f64]) -> f64 {
    let mut total = 0.0;
    for g in 0..m.ncols() {
        let var = sigma2[g];
        for k in 0..m.nrows() {
            total += dist::ln_normal_pdf(m[[k, g]], m_hat[[k, g]], var);
        }
    }
    total
}

/// BIC = −2·loglik + log(G)·(K+G)·N′, with N′ the effective rank.
pub fn bic(m: &CountMatrix, state: &ModelState) -> Result<f64> {
    let ll = log_likelihood(m, state, state.likelihood())?;
    Ok(bic_from_loglik(ll, m.k(), m.g(), state.inclusion.effective_rank()))
}

/// BIC penalty arithmetic shared by the per-sample metric path.
pub fn bic_from_loglik(loglik: f64, k: usize, g: usize, n_eff: usize) -> f64 {
    -2.0 * loglik + (g as f64).ln() * (k + g) as f64 * n_eff as f64
}

/// Generalized KL divergence Σ (M·ln(M/M̂) − M + M̂); zero counts contribute
/// M̂ (the limit convention).
pub fn kl_divergence(m: &Array2<f64>, m_hat: &Array2<f64>) -> Result<f64> {
    if m.dim() != m_hat.dim() {
        return Err(contract("kl_divergence: shape mismatch"));
    }
    if m.iter().any(|v| *v < 0.0) || m_hat.iter().any(|v| *v < 0.0) {
        return Err(contract("kl_divergence: negative input"));
    }
    let mut total = 0.0;
    for (&x, &y) in m.iter().zip(m_hat.iter()) {
        if x == 0.0 {
            total += y;
        } else {
            if y == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += x * (x / y).ln() - x + y;
        }
    }
    Ok(total)
}

/// Root-mean-square reconstruction error.
pub fn rmse(m: &Array2<f64>, m_hat: &Array2<f64>) -> Result<f64> {
    if m.dim() != m_hat.dim() {
        return Err(contract("rmse: shape mismatch"));
    }
    let n = (m.nrows() * m.ncols()) as f64;
    let ss: f64 = m
        .iter()
        .zip(m_hat.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok((ss / n).sqrt())
}
