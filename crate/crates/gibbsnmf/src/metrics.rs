//! Evaluation metrics: factor recovery against a known truth, paired
//! cross-sampler agreement, and effective sample size for chain diagnostics.

use ndarray::{Array2, ArrayView1};

use crate::align::{cosine_similarity_matrix, hungarian_assign};
use crate::chain::FitResult;
use crate::error::{contract, Result};
use crate::inference::PosteriorSummary;
use crate::model;
use crate::sim::SimDataset;

/// Cosine similarity above which an aligned factor pair counts as recovered.
pub const COSINE_MATCH_THRESHOLD: f64 = 0.9;

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(contract("cosine of a zero vector is undefined"));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Fraction of true factors recovered (sensitivity) and of estimated factors
/// that recover a truth (precision), after Hungarian alignment on cosine
/// similarity; unmatched factors on either side count as misses.
pub fn sensitivity_precision(
    true_p: &Array2<f64>,
    estimated_p: &Array2<f64>,
) -> Result<(f64, f64)> {
    if true_p.ncols() == 0 || estimated_p.ncols() == 0 {
        return Err(contract("sensitivity_precision needs nonempty factor sets"));
    }
    let s = cosine_similarity_matrix(true_p, estimated_p)?;
    let pairs = hungarian_assign(&s)?;
    let hits = pairs.iter().filter(|&&(i, j)| s[(i, j)] > COSINE_MATCH_THRESHOLD).count() as f64;
    Ok((hits / true_p.ncols() as f64, hits / estimated_p.ncols() as f64))
}

/// Effective sample size n/(1 + 2Σρ(k)), summing lag correlations through the
/// first negative one inclusive. A denominator ≤ 0 (possible because the last
/// term is negative) is clamped to ESS = n, and the result never exceeds n.
pub fn ess(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 3 {
        return Err(contract("ess needs at least 3 values"));
    }
    let nf = n as f64;
    let mean = chain.iter().sum::<f64>() / nf;
    let c0 = chain.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    if c0 <= 0.0 || !c0.is_finite() {
        return Err(contract("ess is undefined for a constant chain"));
    }
    let mut sum = 0.0;
    for k in 1..n {
        let ck =
            (0..n - k).map(|t| (chain[t] - mean) * (chain[t + k] - mean)).sum::<f64>() / nf;
        let rho = ck / c0;
        sum += rho;
        if rho < 0.0 {
            break;
        }
    }
    let denom = 1.0 + 2.0 * sum;
    if denom <= 0.0 {
        return Ok(nf);
    }
    Ok((nf / denom).min(nf))
}

/// Agreement between two fits of the same data: factors matched by Hungarian
/// alignment on loading cosines, reporting the worst aligned loading and
/// score similarities. Surplus factors (rank mismatch) are counted, not
/// matched.
#[derive(Debug, Clone)]
pub struct PairedAgreement {
    pub min_cosine_p: f64,
    pub min_cosine_e: f64,
    /// Matched (factor in A, factor in B) summary-column pairs.
    pub pairs: Vec<(usize, usize)>,
    pub surplus_a: usize,
    pub surplus_b: usize,
}

pub fn paired_model_agreement(
    a: &PosteriorSummary,
    b: &PosteriorSummary,
) -> Result<PairedAgreement> {
    if a.p_hat.nrows() != b.p_hat.nrows() || a.e_hat.ncols() != b.e_hat.ncols() {
        return Err(contract("paired summaries must describe the same data dimensions"));
    }
    if a.rank() == 0 || b.rank() == 0 {
        return Err(contract("paired_model_agreement needs at least one factor on each side"));
    }
    let s = cosine_similarity_matrix(&a.p_hat, &b.p_hat)?;
    let pairs = hungarian_assign(&s)?;
    let mut min_p = f64::INFINITY;
    let mut min_e = f64::INFINITY;
    for &(i, j) in &pairs {
        min_p = min_p.min(s[(i, j)]);
        min_e = min_e.min(cosine(a.e_hat.row(i), b.e_hat.row(j))?);
    }
    Ok(PairedAgreement {
        min_cosine_p: min_p,
        min_cosine_e: min_e,
        surplus_a: a.rank() - pairs.len(),
        surplus_b: b.rank() - pairs.len(),
        pairs,
    })
}

/// Recovery metrics of one fit against the generating truth.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Reconstruction error of the posterior-mean M̂ against the observed M.
    pub rmse: f64,
    pub kl: f64,
    /// Worst aligned loading-column cosine against the true P.
    pub min_cosine_p: f64,
    /// Worst score-row cosine over the same matched pairs.
    pub min_cosine_e: f64,
    pub sensitivity: f64,
    pub precision: f64,
    /// Estimated minus true rank.
    pub rank_bias: i64,
    pub runtime_secs: f64,
    /// Mean MH acceptance over the inference window (None for non-MH runs
    /// without proposals is still Some(1.0); None when no window exists).
    pub mean_accept: Option<f64>,
    pub ess_log_posterior: Option<f64>,
    pub ess_log_likelihood: Option<f64>,
}

/// Score a fit against the dataset that generated its input.
pub fn evaluate(truth: &SimDataset, fit: &FitResult) -> Result<EvalReport> {
    let summary = fit
        .summary
        .as_ref()
        .ok_or_else(|| contract("fit produced no posterior summary to evaluate"))?;
    if summary.p_hat.nrows() != truth.p.nrows() {
        return Err(contract("fit and truth disagree on the number of variables"));
    }
    let s = cosine_similarity_matrix(&truth.p, &summary.p_hat)?;
    let pairs = hungarian_assign(&s)?;
    let mut min_p = f64::INFINITY;
    let mut min_e = f64::INFINITY;
    for &(i, j) in &pairs {
        min_p = min_p.min(s[(i, j)]);
        min_e = min_e.min(cosine(truth.e.row(i), summary.e_hat.row(j))?);
    }
    let (sensitivity, precision) = sensitivity_precision(&truth.p, &summary.p_hat)?;
    let series = |f: fn(&crate::chain::SampleMetrics) -> f64| -> Option<f64> {
        let values: Vec<f64> =
            fit.store.inference_window().iter().map(|s| f(&s.metrics)).collect();
        ess(&values).ok()
    };
    Ok(EvalReport {
        rmse: model::rmse(&truth.m.values, &summary.m_hat)?,
        kl: model::kl_divergence(&truth.m.values, &summary.m_hat)?,
        min_cosine_p: min_p,
        min_cosine_e: min_e,
        sensitivity,
        precision,
        rank_bias: summary.rank() as i64 - truth.p.ncols() as i64,
        runtime_secs: fit.wall_secs,
        mean_accept: fit.inference_accept_mean(),
        ess_log_posterior: series(|m| m.log_posterior),
        ess_log_likelihood: series(|m| m.log_likelihood),
    })
}
