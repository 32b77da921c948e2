//! Automatic rank learning: Bernoulli factor-inclusion updates (plain or
//! sparse-penalized), the discrete update for the rank hyperparameter R, and
//! the tempering schedule that eases the likelihood in during burn-in.

use crate::dist::{self, RATE_FLOOR};
use crate::error::{Error, Result};
use crate::model::{q_of_r, CountMatrix, Likelihood, ModelState};
use rand::Rng;

/// Which factor-inclusion rule drives the A updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InclusionMethod {
    /// Bayesian factor inclusion: raw likelihood ratio.
    Bfi,
    /// Sparse BFI: likelihood penalized by G^(−½(K+G)) per included factor,
    /// the BIC complexity term folded into the inclusion odds.
    Sbfi,
}

/// How the factorization rank is determined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMethod {
    /// All `N` factors stay included; no A/R updates, no tempering.
    Fixed(usize),
    /// Learn inclusion over `max_rank` candidate factors.
    Bfi { max_rank: usize },
    /// As `Bfi` with the sparse penalty.
    Sbfi { max_rank: usize },
    /// One fixed-rank fit per candidate in `lo..=hi`; keep the BIC argmin.
    MinBic { lo: usize, hi: usize },
}

impl RankMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankMethod::Fixed(n) | RankMethod::Bfi { max_rank: n } | RankMethod::Sbfi { max_rank: n } => {
                if n == 0 {
                    return Err(Error::Contract("rank must be at least 1".into()));
                }
            }
            RankMethod::MinBic { lo, hi } => {
                if lo == 0 || lo > hi {
                    return Err(Error::Contract(format!(
                        "rank range {lo}..={hi} must be nonempty and start at 1 or above"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of candidate factors a single chain carries.
    pub fn model_rank(&self) -> usize {
        match *self {
            RankMethod::Fixed(n) => n,
            RankMethod::Bfi { max_rank } | RankMethod::Sbfi { max_rank } => max_rank,
            RankMethod::MinBic { hi, .. } => hi,
        }
    }

    /// The inclusion rule, when this method learns inclusion within a chain.
    pub fn inclusion(&self) -> Option<InclusionMethod> {
        match self {
            RankMethod::Bfi { .. } => Some(InclusionMethod::Bfi),
            RankMethod::Sbfi { .. } => Some(InclusionMethod::Sbfi),
            RankMethod::Fixed(_) | RankMethod::MinBic { .. } => None,
        }
    }
}

/// Likelihood-tempering schedule: γ ramps linearly from 0 to 1 over the
/// first 20% of the iteration budget when learning rank, and is pinned at 1
/// for fixed-rank fits.
#[derive(Debug, Clone, Copy)]
pub struct TemperSchedule {
    learning: bool,
    ramp_iters: usize,
}

impl TemperSchedule {
    pub fn new(learning: bool, maxiters: usize) -> Self {
        TemperSchedule { learning, ramp_iters: maxiters.div_ceil(5) }
    }

    /// γ at a given iteration (0-based).
    pub fn gamma_of(&self, iter: usize) -> f64 {
        if !self.learning || iter >= self.ramp_iters {
            1.0
        } else {
            iter as f64 / self.ramp_iters as f64
        }
    }

    /// Last iteration whose samples are tempered (0 when nothing is).
    pub fn last_tempered_iter(&self) -> usize {
        if self.learning {
            self.ramp_iters
        } else {
            0
        }
    }
}

/// Convenience form of [`TemperSchedule::gamma_of`].
pub fn temper_gamma(iter: usize, maxiters: usize, learning: bool) -> f64 {
    TemperSchedule::new(learning, maxiters).gamma_of(iter)
}

/// Log-likelihood difference from including factor n (inclusion minus
/// exclusion, everything else held fixed), via a rank-one adjustment of the
/// cached reconstruction. +∞/−∞ signal a deterministic decision; NaN means
/// both settings are impossible and the caller must surface it.
fn loglik_delta_include(m: &CountMatrix, state: &ModelState, n: usize) -> f64 {
    let (kd, gd) = (m.k(), m.g());
    let included = state.inclusion.a[n] == 1;
    let mut delta = 0.0;
    match state.likelihood() {
        Likelihood::Poisson => {
            for k in 0..kd {
                let pk = state.factors.p[[k, n]];
                if pk == 0.0 {
                    continue;
                }
                for g in 0..gd {
                    let d = pk * state.factors.e[[n, g]];
                    if d == 0.0 {
                        continue;
                    }
                    let base = state.m_hat[[k, g]];
                    let (lam1, lam0) = if included { (base, base - d) } else { (base + d, base) };
                    let x = m.values[[k, g]];
                    if x > 0.0 {
                        if lam1 <= 0.0 {
                            // λ₁ ≥ λ₀, so both rates are impossible here.
                            return f64::NAN;
                        }
                        if lam0 <= 0.0 {
                            return f64::INFINITY;
                        }
                        delta += x * (lam1.max(RATE_FLOOR) / lam0.max(RATE_FLOOR)).ln();
                    }
                    delta -= d;
                }
            }
        }
        Likelihood::Normal => {
            let noise = state.noise.as_ref().expect("Normal likelihood has noise state");
            for k in 0..kd {
                let pk = state.factors.p[[k, n]];
                if pk == 0.0 {
                    continue;
                }
                for g in 0..gd {
                    let d = pk * state.factors.e[[n, g]];
                    if d == 0.0 {
                        continue;
                    }
                    let base = state.m_hat[[k, g]];
                    let (lam1, lam0) = if included { (base, base - d) } else { (base + d, base) };
                    let x = m.values[[k, g]];
                    let r1 = x - lam1;
                    let r0 = x - lam0;
                    delta -= (r1 * r1 - r0 * r0) / (2.0 * noise.sigma2[g]);
                }
            }
        }
    }
    delta
}

/// Apply a new inclusion setting for factor n, keeping M̂ in sync by a
/// rank-one update.
fn set_inclusion(state: &mut ModelState, n: usize, new_a: u8) {
    let old = state.inclusion.a[n];
    if old == new_a {
        return;
    }
    state.inclusion.a[n] = new_a;
    let sign = if new_a == 1 { 1.0 } else { -1.0 };
    let (kd, gd) = (state.m_hat.nrows(), state.m_hat.ncols());
    for k in 0..kd {
        let pk = state.factors.p[[k, n]];
        if pk == 0.0 {
            continue;
        }
        for g in 0..gd {
            state.m_hat[[k, g]] += sign * pk * state.factors.e[[n, g]];
        }
    }
}

/// Tempered log-odds of including factor n: ln q/(1−q) + γ·(Δloglik + any
/// sparse penalty). NaN (both settings impossible) is surfaced as an error.
pub(crate) fn inclusion_log_odds(
    state: &ModelState,
    n: usize,
    gamma: f64,
    method: InclusionMethod,
    m: &CountMatrix,
) -> Result<f64> {
    let q = state.inclusion.q();
    let delta_ll = loglik_delta_include(m, state, n);
    let sparse = match method {
        InclusionMethod::Bfi => 0.0,
        // Including one more factor multiplies the likelihood by G^(−½(K+G)).
        InclusionMethod::Sbfi => -0.5 * (m.g() as f64).ln() * (m.k() + m.g()) as f64,
    };
    let log_odds = q.ln() - (1.0 - q).ln() + gamma * (delta_ll + sparse);
    if log_odds.is_nan() {
        return Err(Error::Contract(format!(
            "inclusion odds for factor {n} are undefined: both settings have zero likelihood \
             (Δloglik = {delta_ll}, q = {q}, γ = {gamma})"
        )));
    }
    Ok(log_odds)
}

/// Resample the inclusion indicator A_nn from its tempered Bernoulli
/// conditional and keep the reconstruction consistent. Returns the new
/// setting.
pub fn update_a<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ModelState,
    n: usize,
    gamma: f64,
    method: InclusionMethod,
    m: &CountMatrix,
) -> Result<u8> {
    let log_odds = inclusion_log_odds(state, n, gamma, method, m)?;
    let p1 = if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    };
    let new_a = u8::from(rng.random::<f64>() < p1);
    set_inclusion(state, n, new_a);
    Ok(new_a)
}

/// Unnormalized log-weights of the rank conditional over r = 0..=N: the flat
/// rank prior drops out, leaving γ·[n₁·ln q(r) + n₀·ln(1−q(r))].
pub(crate) fn rank_log_weights(state: &ModelState, gamma: f64) -> Vec<f64> {
    let n = state.inclusion.a.len();
    let n1 = state.inclusion.effective_rank() as f64;
    let n0 = n as f64 - n1;
    (0..=n)
        .map(|r| {
            let q = q_of_r(r, n);
            gamma * (n1 * q.ln() + n0 * (1.0 - q).ln())
        })
        .collect()
}

/// Resample the rank hyperparameter R from its tempered discrete conditional
/// over 0..=N given the current inclusion vector.
pub fn update_r<R: Rng + ?Sized>(rng: &mut R, state: &ModelState, gamma: f64) -> usize {
    dist::sample_categorical_log(rng, &rank_log_weights(state, gamma))
}

/// One candidate's outcome in a rank scan.
#[derive(Debug, Clone)]
pub struct MinBicEntry {
    pub rank: usize,
    /// Mean per-sample BIC over the fit's inference window; `None` when the
    /// fit failed outright or produced no eligible window.
    pub bic: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Failure description for fits excluded from the argmin.
    pub error: Option<String>,
}

/// A completed rank scan: the winning fit and the full per-rank table.
#[derive(Debug)]
pub struct MinBicRun {
    pub best: crate::chain::FitResult,
    pub table: Vec<MinBicEntry>,
}

impl MinBicRun {
    /// The winning candidate rank.
    pub fn best_rank(&self) -> usize {
        self.best.rank.model_rank()
    }
}

/// Fit one fixed-rank chain per candidate in `lo..=hi` and keep the one with
/// the lowest mean per-sample BIC over its inference window. Candidate r runs
/// on RNG stream `config.stream + r`, so results match whether candidates run
/// sequentially or concurrently. Failed candidates (or capped runs that never
/// produced an eligible window) stay in the table with an error note but are
/// excluded from the argmin; if every candidate fails, the first failure is
/// returned.
pub fn run_min_bic(
    m: &CountMatrix,
    config: &crate::chain::FitConfig,
    range: std::ops::RangeInclusive<usize>,
) -> Result<MinBicRun> {
    let (lo, hi) = (*range.start(), *range.end());
    RankMethod::MinBic { lo, hi }.validate()?;
    let mut table = Vec::with_capacity(hi - lo + 1);
    let mut best: Option<(f64, crate::chain::FitResult)> = None;
    for rank in range {
        let mut candidate = config.clone();
        candidate.rank = RankMethod::Fixed(rank);
        candidate.stream = config.stream + rank as u64;
        match crate::chain::run_chain(m, &candidate) {
            Ok(fit) => {
                let bic = fit.inference_bic_mean();
                table.push(MinBicEntry {
                    rank,
                    bic,
                    converged: fit.status.converged,
                    iterations: fit.status.iterations,
                    error: bic
                        .is_none()
                        .then(|| "no inference-eligible samples before the cap".to_string()),
                });
                if let Some(value) = bic {
                    if best.as_ref().is_none_or(|(b, _)| value < *b) {
                        best = Some((value, fit));
                    }
                }
            }
            Err(e) => table.push(MinBicEntry {
                rank,
                bic: None,
                converged: false,
                iterations: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((_, fit)) => Ok(MinBicRun { best: fit, table }),
        None => {
            let first = table.iter().find_map(|e| e.error.clone()).unwrap_or_default();
            Err(Error::Contract(format!(
                "every candidate rank in {lo}..={hi} failed; first failure: {first}"
            )))
        }
    }
}
