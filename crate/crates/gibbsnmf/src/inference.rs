//! Posterior summarization: column normalization, MAP-inclusion filtering,
//! elementwise means, and percentile credible intervals.
//!
//! The summary convention: pick the modal inclusion vector across the
//! inference samples, keep only samples matching it exactly, rescale each so
//! the columns of P sum to one (pushing the scale into E), then report
//! elementwise means with 2.5/97.5-percentile bounds, dropping excluded
//! factors.

use ndarray::Array2;
use std::collections::HashMap;

use crate::chain::{ChainStore, ConvergenceControls, StoredSample};
use crate::dist::percentile;
use crate::error::{contract, Result};
use crate::model::{reconstruct, FactorPair, InclusionState};

/// Point estimates and credible intervals over the MAP-filtered, normalized
/// inference samples. Factor columns excluded by the MAP inclusion vector are
/// dropped; `kept` maps summary columns back to original factor indices.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    /// MAP inclusion vector over all candidate factors (length N).
    pub a_hat: Vec<u8>,
    /// Original indices of the retained factors, in summary column order.
    pub kept: Vec<usize>,
    /// K×N′ mean loadings; every column sums to 1.
    pub p_hat: Array2<f64>,
    pub p_lo: Array2<f64>,
    pub p_hi: Array2<f64>,
    /// N′×G mean scores, carrying the scale removed from P.
    pub e_hat: Array2<f64>,
    pub e_lo: Array2<f64>,
    pub e_hi: Array2<f64>,
    /// Reconstruction P̂Ê from the point estimates.
    pub m_hat: Array2<f64>,
    /// Number of samples matching the MAP inclusion vector.
    pub n_used: usize,
    /// Cleared by the chain driver when the run hit its iteration cap.
    pub converged: bool,
}

impl PosteriorSummary {
    /// Effective rank N′ of the summary.
    pub fn rank(&self) -> usize {
        self.kept.len()
    }
}

/// Rescale one sample so each included column of P sums to one, multiplying
/// the matching row of E by the removed sum; the product P·diag(A)·E is
/// unchanged. Excluded zero columns are left alone; an included zero column
/// is a contract violation.
pub fn normalize_sample(
    p: &Array2<f64>,
    e: &Array2<f64>,
    a: &[u8],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if p.ncols() != e.nrows() || p.ncols() != a.len() {
        return Err(contract("normalize_sample: factor dimensions disagree"));
    }
    let mut p = p.clone();
    let mut e = e.clone();
    for n in 0..a.len() {
        let sum: f64 = p.column(n).sum();
        if sum > 0.0 {
            p.column_mut(n).mapv_inplace(|v| v / sum);
            e.row_mut(n).mapv_inplace(|v| v * sum);
        } else if a[n] == 1 {
            return Err(contract(format!(
                "normalize_sample: included factor {n} has an all-zero loading column"
            )));
        }
    }
    Ok((p, e))
}

/// Borrowed view of one posterior sample, the unit `summarize` and the
/// window metrics operate on.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub p: &'a Array2<f64>,
    pub e: &'a Array2<f64>,
    pub a: &'a [u8],
}

impl<'a> From<&'a StoredSample> for SampleView<'a> {
    fn from(s: &'a StoredSample) -> Self {
        SampleView { p: &s.p, e: &s.e, a: &s.a }
    }
}

/// Modal inclusion vector by exact-vector count; ties break toward the
/// larger effective rank (then lexicographically largest, for determinism).
fn modal_inclusion(samples: &[SampleView<'_>]) -> Vec<u8> {
    let mut counts: HashMap<&[u8], usize> = HashMap::new();
    for s in samples {
        *counts.entry(s.a).or_insert(0) += 1;
    }
    let rank = |a: &[u8]| a.iter().map(|&x| x as usize).sum::<usize>();
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| {
            (ca, rank(a), *a).cmp(&(cb, rank(b), *b))
        })
        .map(|(a, _)| a.to_vec())
        .expect("modal_inclusion called with no samples")
}

/// MAP-filtered, normalized elementwise means at full factor width, shared
/// by the posterior summary and the windowed convergence metrics.
pub(crate) struct FilteredMean {
    pub a_hat: Vec<u8>,
    pub p_mean: Array2<f64>,
    pub e_mean: Array2<f64>,
    pub n_used: usize,
}

impl FilteredMean {
    /// Reconstruction P̄·diag(Â)·Ē from the mean factors.
    pub fn reconstruct(&self) -> Result<Array2<f64>> {
        let factors = FactorPair { p: self.p_mean.clone(), e: self.e_mean.clone() };
        let r = self.a_hat.iter().map(|&x| x as usize).sum();
        reconstruct(&factors, &InclusionState { a: self.a_hat.clone(), r })
    }
}

pub(crate) fn filtered_normalized_mean(samples: &[SampleView<'_>]) -> Result<FilteredMean> {
    if samples.is_empty() {
        return Err(contract("posterior summary needs at least one sample"));
    }
    let a_hat = modal_inclusion(samples);
    let (k, g) = (samples[0].p.nrows(), samples[0].e.ncols());
    let n = a_hat.len();
    let mut p_mean = Array2::zeros((k, n));
    let mut e_mean = Array2::zeros((n, g));
    let mut n_used = 0usize;
    for s in samples.iter().filter(|s| s.a == a_hat.as_slice()) {
        let (p, e) = normalize_sample(s.p, s.e, s.a)?;
        p_mean += &p;
        e_mean += &e;
        n_used += 1;
    }
    debug_assert!(n_used >= 1, "the mode always matches itself");
    p_mean /= n_used as f64;
    e_mean /= n_used as f64;
    Ok(FilteredMean { a_hat, p_mean, e_mean, n_used })
}

/// Summarize the inference window of a finished chain: modal-A filter,
/// normalize, elementwise mean and 2.5/97.5-percentile bounds, excluded
/// factors dropped. Errors when the store holds no inference-eligible
/// sample.
pub fn summarize(store: &ChainStore, _controls: &ConvergenceControls) -> Result<PosteriorSummary> {
    let window = store.inference_window();
    let views: Vec<SampleView<'_>> = window.iter().map(|s| SampleView::from(*s)).collect();
    summarize_views(&views)
}

/// [`summarize`] over explicit sample views.
pub fn summarize_views(samples: &[SampleView<'_>]) -> Result<PosteriorSummary> {
    if samples.is_empty() {
        return Err(contract("summarize: no inference-eligible samples in the store"));
    }
    let a_hat = modal_inclusion(samples);
    let kept: Vec<usize> =
        (0..a_hat.len()).filter(|&n| a_hat[n] == 1).collect();
    let (k, g) = (samples[0].p.nrows(), samples[0].e.ncols());

    // Normalized copies of the samples matching the MAP inclusion exactly.
    let mut matched: Vec<(Array2<f64>, Array2<f64>)> = Vec::new();
    for s in samples.iter().filter(|s| s.a == a_hat.as_slice()) {
        matched.push(normalize_sample(s.p, s.e, s.a)?);
    }
    let n_used = matched.len();
    debug_assert!(n_used >= 1);

    let n_kept = kept.len();
    let mut p_hat = Array2::zeros((k, n_kept));
    let mut p_lo = Array2::zeros((k, n_kept));
    let mut p_hi = Array2::zeros((k, n_kept));
    let mut e_hat = Array2::zeros((n_kept, g));
    let mut e_lo = Array2::zeros((n_kept, g));
    let mut e_hi = Array2::zeros((n_kept, g));

    let mut pool = vec![0.0; n_used];
    let stat = |values: &mut Vec<f64>| -> (f64, f64, f64) {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.sort_unstable_by(f64::total_cmp);
        (mean, percentile(values, 0.025), percentile(values, 0.975))
    };
    for (j, &n) in kept.iter().enumerate() {
        for row in 0..k {
            pool.clear();
            pool.extend(matched.iter().map(|(p, _)| p[(row, n)]));
            let (mean, lo, hi) = stat(&mut pool);
            p_hat[(row, j)] = mean;
            p_lo[(row, j)] = lo;
            p_hi[(row, j)] = hi;
        }
        for col in 0..g {
            pool.clear();
            pool.extend(matched.iter().map(|(_, e)| e[(n, col)]));
            let (mean, lo, hi) = stat(&mut pool);
            e_hat[(j, col)] = mean;
            e_lo[(j, col)] = lo;
            e_hi[(j, col)] = hi;
        }
    }
    let m_hat = p_hat.dot(&e_hat);
    Ok(PosteriorSummary {
        a_hat,
        kept,
        p_hat,
        p_lo,
        p_hi,
        e_hat,
        e_lo,
        e_hi,
        m_hat,
        n_used,
        converged: true,
    })
}

/// 10th/90th percentiles of elementwise credible-interval width differences
/// (`left` minus `right`), reported separately for P and E.
#[derive(Debug, Clone, Copy)]
pub struct CiWidthComparison {
    /// [10th, 90th] percentiles of w_left − w_right over P elements.
    pub p: [f64; 2],
    /// Same over E elements.
    pub e: [f64; 2],
}

pub fn ci_width_comparison(
    left: &PosteriorSummary,
    right: &PosteriorSummary,
) -> Result<CiWidthComparison> {
    if left.p_hat.dim() != right.p_hat.dim() || left.e_hat.dim() != right.e_hat.dim() {
        return Err(contract("ci_width_comparison: summary dimensions disagree"));
    }
    let spread = |lo_a: &Array2<f64>,
                  hi_a: &Array2<f64>,
                  lo_b: &Array2<f64>,
                  hi_b: &Array2<f64>| {
        let mut d: Vec<f64> = hi_a
            .iter()
            .zip(lo_a.iter())
            .zip(hi_b.iter().zip(lo_b.iter()))
            .map(|((ua, la), (ub, lb))| (ua - la) - (ub - lb))
            .collect();
        d.sort_unstable_by(f64::total_cmp);
        [percentile(&d, 0.10), percentile(&d, 0.90)]
    };
    Ok(CiWidthComparison {
        p: spread(&left.p_lo, &left.p_hi, &right.p_lo, &right.p_hi),
        e: spread(&left.e_lo, &left.e_hi, &right.e_lo, &right.e_hi),
    })
}
