//! Hypermutated-sample pre-filter: per-sample mutation totals are modeled as
//! a negative-binomial mixture fitted by EM; when more than one component is
//! supported, every sample outside the lowest-mean component is flagged.

use ndarray::Array2;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dist::trigamma;
use crate::error::{contract, Result};

const MAX_COMPONENTS: usize = 10;
const EM_MAX_ITERS: usize = 500;
const EM_REL_TOL: f64 = 1e-8;
const SIZE_BOUNDS: (f64, f64) = (1e-3, 1e8);

/// One negative-binomial mixture component in mean/size form; the success
/// probability is size/(size+mean).
#[derive(Debug, Clone, Copy)]
pub struct NbComponent {
    pub weight: f64,
    pub mean: f64,
    pub size: f64,
}

/// A converged EM fit for one component count.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    pub components: Vec<NbComponent>,
    pub log_likelihood: f64,
    pub bic: f64,
    /// G×C posterior component probabilities.
    pub responsibilities: Array2<f64>,
    pub iterations: usize,
}

impl MixtureFit {
    /// Maximum-posterior component per sample.
    pub fn assignments(&self) -> Vec<usize> {
        self.responsibilities
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(c, _)| c)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Filtering outcome: which samples to keep, why, and the model-selection
/// audit trail.
#[derive(Debug, Clone)]
pub struct HypermutationFilter {
    /// True for samples in the lowest-mean component (or everywhere when no
    /// mixture structure was found).
    pub keep: Vec<bool>,
    pub assignments: Vec<usize>,
    /// Selected component count (1 = no filtering).
    pub chosen_c: usize,
    /// BIC per attempted component count; None marks a skipped fit.
    pub bic_by_c: Vec<(usize, Option<f64>)>,
    /// Mean silhouette per converged multi-component fit.
    pub silhouette_by_c: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

/// log pmf of NegativeBinomial(size, p = size/(size+mean)) at x, valid for
/// real-valued counts via the gamma function.
fn nb_ln_pmf(x: f64, mean: f64, size: f64) -> f64 {
    let p = size / (size + mean);
    ln_gamma(x + size) - ln_gamma(size) - ln_gamma(x + 1.0) + size * p.ln()
        + x * (mean / (size + mean)).ln()
}

/// Maximize the responsibility-weighted NB log-likelihood over the size
/// parameter at a fixed mean, by safeguarded Newton steps on
/// ∂ℓ/∂r = Σ γ[ψ(x+r) − ψ(r) + ln(r/(r+μ)) + 1 − (r+x)/(r+μ)].
fn newton_size(totals: &[f64], weights: &[f64], mean: f64, start: f64) -> f64 {
    let (lo, hi) = SIZE_BOUNDS;
    let mut r = start.clamp(lo, hi);
    let weight_sum: f64 = weights.iter().sum();
    for _ in 0..10 {
        let mut score = 0.0;
        let mut hess = 0.0;
        for (&x, &w) in totals.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let denom = r + mean;
            score += w * (digamma(x + r) - digamma(r) + (r / denom).ln() + 1.0
                - (r + x) / denom);
            hess += w * (trigamma(x + r) - trigamma(r) + 1.0 / r - 1.0 / denom
                + (x - mean) / (denom * denom));
        }
        if score.abs() <= 1e-8 * weight_sum.max(1.0) {
            break;
        }
        let next = if hess < 0.0 { r - score / hess } else { f64::NAN };
        r = if next.is_finite() && next > 0.0 {
            next.clamp(lo, hi)
        } else if score > 0.0 {
            (r * 2.0).min(hi)
        } else {
            (r / 2.0).max(lo)
        };
    }
    r
}

/// Fit a C-component NB mixture by EM with quantile initialization. Errors
/// signal non-convergence (iteration cap or numerical failure), which the
/// caller treats as "skip this C".
pub fn fit_nb_mixture(totals: &[f64], c: usize) -> Result<MixtureFit> {
    let g = totals.len();
    if c < 1 || c > g {
        return Err(contract(format!("cannot fit {c} components to {g} samples")));
    }
    let mut sorted = totals.to_vec();
    sorted.sort_by(f64::total_cmp);

    // Quantile blocks of the sorted totals seed the component parameters.
    let mut components = Vec::with_capacity(c);
    for block in 0..c {
        let start = block * g / c;
        let end = ((block + 1) * g / c).max(start + 1);
        let chunk = &sorted[start..end];
        let len = chunk.len() as f64;
        let mean = (chunk.iter().sum::<f64>() / len).max(1e-6);
        let var = chunk.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len;
        let size = if var > mean { (mean * mean / (var - mean)).clamp(SIZE_BOUNDS.0, SIZE_BOUNDS.1) } else { 100.0 };
        components.push(NbComponent { weight: (end - start) as f64 / g as f64, mean, size });
    }

    let mut responsibilities = Array2::zeros((g, c));
    let mut ll_old = f64::NEG_INFINITY;
    for iteration in 1..=EM_MAX_ITERS {
        // E-step via log-sum-exp.
        let mut ll = 0.0;
        for (i, &x) in totals.iter().enumerate() {
            let logs: Vec<f64> = components
                .iter()
                .map(|comp| comp.weight.ln() + nb_ln_pmf(x, comp.mean, comp.size))
                .collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(contract(format!("EM became degenerate at iteration {iteration}")));
            }
            let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
            ll += max + sum.ln();
            for (k, &l) in logs.iter().enumerate() {
                responsibilities[(i, k)] = ((l - max).exp()) / sum;
            }
        }
        if !ll.is_finite() {
            return Err(contract(format!("log-likelihood overflow at iteration {iteration}")));
        }

        if (ll - ll_old).abs() <= EM_REL_TOL * ll.abs().max(1.0) {
            let bic = -2.0 * ll + (3 * c - 1) as f64 * (g as f64).ln();
            return Ok(MixtureFit {
                components,
                log_likelihood: ll,
                bic,
                responsibilities,
                iterations: iteration,
            });
        }
        ll_old = ll;

        // M-step.
        for (k, comp) in components.iter_mut().enumerate() {
            let gamma_k: Vec<f64> = (0..g).map(|i| responsibilities[(i, k)]).collect();
            let mass: f64 = gamma_k.iter().sum();
            if mass <= 1e-10 {
                // An emptied component cannot be updated; freeze it.
                comp.weight = 1e-10;
                continue;
            }
            comp.weight = mass / g as f64;
            comp.mean = (totals.iter().zip(&gamma_k).map(|(x, w)| x * w).sum::<f64>() / mass)
                .max(1e-6);
            comp.size = newton_size(totals, &gamma_k, comp.mean, comp.size);
        }
    }
    Err(contract(format!("EM did not converge in {EM_MAX_ITERS} iterations")))
}

/// Mean silhouette of an assignment under absolute-difference distance
/// (callers pass log-transformed totals). Singleton clusters score 0; fewer
/// than two non-empty clusters make the score −∞ (no structure).
pub(crate) fn silhouette(values: &[f64], assignments: &[usize], c: usize) -> f64 {
    let g = values.len();
    let sizes: Vec<usize> = (0..c).map(|k| assignments.iter().filter(|&&a| a == k).count()).collect();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for i in 0..g {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue; // s(i) = 0 for singletons
        }
        let mut sums = vec![0.0; c];
        for j in 0..g {
            if j != i {
                sums[assignments[j]] += (values[i] - values[j]).abs();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..c)
            .filter(|&k| k != own && sizes[k] > 0)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / g as f64
}

/// Decide which samples to keep before factorization. Fits NB mixtures for
/// C ∈ 1..=10 components; if BIC prefers a single component nothing is
/// flagged, otherwise the component count is chosen by silhouette score on
/// log totals and every sample assigned outside the lowest-mean component is
/// flagged as hypermutated.
pub fn hypermutation_filter(totals: &[f64]) -> Result<HypermutationFilter> {
    let g = totals.len();
    if g < 2 {
        return Err(contract("hypermutation filtering needs at least 2 samples"));
    }
    if totals.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(contract("sample totals must be finite and ≥ 0"));
    }

    let mut warnings = Vec::new();
    let mut fits: Vec<(usize, Option<MixtureFit>)> = Vec::new();
    for c in 1..=MAX_COMPONENTS.min(g) {
        match fit_nb_mixture(totals, c) {
            Ok(fit) => fits.push((c, Some(fit))),
            Err(e) => {
                warnings.push(format!("C={c} skipped: {e}"));
                fits.push((c, None));
            }
        }
    }
    let bic_by_c: Vec<(usize, Option<f64>)> =
        fits.iter().map(|(c, f)| (*c, f.as_ref().map(|f| f.bic))).collect();

    let keep_all = |chosen_c: usize, mut warnings: Vec<String>, note: Option<String>| {
        if let Some(note) = note {
            warnings.push(note);
        }
        HypermutationFilter {
            keep: vec![true; g],
            assignments: vec![0; g],
            chosen_c,
            bic_by_c: bic_by_c.clone(),
            silhouette_by_c: Vec::new(),
            warnings,
        }
    };

    let best_bic = fits
        .iter()
        .filter_map(|(c, f)| f.as_ref().map(|f| (*c, f.bic)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((best_c, _)) = best_bic else {
        return Ok(keep_all(1, warnings, Some("no mixture fit converged; nothing flagged".into())));
    };
    if best_c == 1 {
        return Ok(keep_all(1, warnings, None));
    }

    // Multi-component structure: pick C ≥ 2 by silhouette on log totals.
    let log_totals: Vec<f64> = totals.iter().map(|t| t.ln_1p()).collect();
    let mut silhouette_by_c = Vec::new();
    let mut best: Option<(f64, usize, &MixtureFit)> = None;
    for (c, fit) in &fits {
        let (c, Some(fit)) = (*c, fit.as_ref()) else { continue };
        if c < 2 {
            continue;
        }
        let score = silhouette(&log_totals, &fit.assignments(), c);
        silhouette_by_c.push((c, score));
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, c, fit));
        }
    }
    let Some((score, chosen_c, fit)) = best else {
        return Ok(keep_all(1, warnings, Some("no multi-component fit converged".into())));
    };
    if score == f64::NEG_INFINITY {
        let mut result = keep_all(1, warnings, Some("mixture components collapsed".into()));
        result.silhouette_by_c = silhouette_by_c;
        return Ok(result);
    }

    let assignments = fit.assignments();
    let lowest = fit
        .components
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .map(|(k, _)| k)
        .expect("at least two components");
    let keep: Vec<bool> = assignments.iter().map(|&a| a == lowest).collect();
    Ok(HypermutationFilter {
        keep,
        assignments,
        chosen_c,
        bic_by_c,
        silhouette_by_c,
        warnings,
    })
}
