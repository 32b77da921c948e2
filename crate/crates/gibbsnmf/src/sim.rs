//! Synthetic count datasets with known factors: reference signatures are
//! subsampled under a distinctness constraint, per-sample totals drawn from a
//! negative binomial, split across factors by a flat Dirichlet-multinomial,
//! and observed through Poisson noise.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, Poisson};

use crate::align::{cosine_similarity_matrix, ReferenceCatalog};
use crate::error::{contract, Result};
use crate::model::CountMatrix;

/// How many signature subsets to try before giving up on the pairwise
/// distinctness constraint.
const SUBSET_RETRIES: usize = 1000;

/// Generator settings. `r` and `p` parameterize the per-sample total count
/// m_g ~ NegativeBinomial(size = r·N, prob = p) with mean r·N·(1−p)/p, so the
/// defaults give roughly 1000 expected mutations per signature per sample.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// True rank (number of signatures drawn from the catalog).
    pub n: usize,
    /// Samples (columns of M).
    pub g: usize,
    /// Negative-binomial size component per signature.
    pub r: f64,
    /// Negative-binomial success probability.
    pub p: f64,
    /// Maximum allowed pairwise cosine between chosen signatures.
    pub distinctness: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n: usize, g: usize, seed: u64) -> Self {
        SimConfig { n, g, r: 111.11, p: 0.1, distinctness: 0.8, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.g < 1 {
            return Err(contract("simulation needs n ≥ 1 and g ≥ 1"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(contract("negative-binomial probability must lie in (0, 1)"));
        }
        if !(self.r > 0.0) {
            return Err(contract("negative-binomial size must be positive"));
        }
        if !(self.distinctness > 0.0 && self.distinctness <= 1.0) {
            return Err(contract("distinctness threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub m: CountMatrix,
    /// True loadings; every column sums to 1.
    pub p: Array2<f64>,
    /// True scores; integer counts whose column g sums to the drawn total m_g.
    pub e: Array2<f64>,
    /// Catalog names of the chosen signatures, in factor order.
    pub names: Vec<String>,
}

/// Draw signature columns whose pairwise cosines all stay below the
/// distinctness threshold, by rejection over uniform subsets.
fn distinct_subset(
    rng: &mut ChaCha8Rng,
    catalog: &ReferenceCatalog,
    config: &SimConfig,
) -> Result<Vec<usize>> {
    for _ in 0..SUBSET_RETRIES {
        let indices = rand::seq::index::sample(rng, catalog.len(), config.n).into_vec();
        let cols = Array2::from_shape_fn((catalog.k(), config.n), |(i, jj)| {
            catalog.signatures[(i, indices[jj])]
        });
        let s = cosine_similarity_matrix(&cols, &cols)?;
        let distinct = (0..config.n)
            .all(|i| (i + 1..config.n).all(|j| s[(i, j)] < config.distinctness));
        if distinct {
            return Ok(indices);
        }
    }
    Err(contract(format!(
        "no subset of {} signatures with all pairwise cosines < {} found in {SUBSET_RETRIES} tries",
        config.n, config.distinctness
    )))
}

/// Flat-Dirichlet weights: normalized unit-exponential draws (Dirichlet with
/// unit concentration is exactly this).
fn dirichlet_ones(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut w: Vec<f64> = (0..n).map(|_| rng.sample(Exp1)).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Multinomial draw by conditional binomials; the components always sum to
/// `total` exactly.
pub(crate) fn multinomial(rng: &mut ChaCha8Rng, total: u64, weights: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; weights.len()];
    let mut remaining = total;
    let mut tail: f64 = weights.iter().sum();
    for i in 0..weights.len() {
        if i + 1 == weights.len() || tail <= 0.0 {
            out[i] = remaining;
            break;
        }
        if remaining == 0 {
            break;
        }
        let q = (weights[i] / tail).clamp(0.0, 1.0);
        let x = Binomial::new(remaining, q).expect("clamped success probability").sample(rng);
        out[i] = x;
        remaining -= x;
        tail -= weights[i];
    }
    out
}

fn poisson_draw(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let draw: f64 = Poisson::new(lambda).expect("positive finite rate").sample(rng);
    draw
}

/// Poisson observations of a rate matrix.
pub(crate) fn poisson_counts(rng: &mut ChaCha8Rng, rates: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(rates.dim(), |idx| poisson_draw(rng, rates[idx]))
}

/// Generate one dataset: pick N mutually distinct catalog signatures as P,
/// draw per-sample totals m_g ~ NB(r·N, p), split each total over factors
/// with Dirichlet(1⃗)-multinomial scores E, and observe M ~ Poisson(PE).
pub fn simulate(config: &SimConfig, catalog: &ReferenceCatalog) -> Result<SimDataset> {
    config.validate()?;
    if catalog.len() < config.n {
        return Err(contract(format!(
            "catalog holds {} signatures but the simulation needs {}",
            catalog.len(),
            config.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let indices = distinct_subset(&mut rng, catalog, config)?;

    let mut p = Array2::from_shape_fn((catalog.k(), config.n), |(i, jj)| {
        catalog.signatures[(i, indices[jj])]
    });
    for mut col in p.columns_mut() {
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }

    // Gamma-Poisson mixture: m ~ Poisson(λ), λ ~ Gamma(size, (1−p)/p) is
    // NegativeBinomial(size, p), valid for non-integer size.
    let size = config.r * config.n as f64;
    let scale = (1.0 - config.p) / config.p;
    let total_dist = Gamma::new(size, scale).expect("validated parameters");
    let mut e = Array2::zeros((config.n, config.g));
    for g in 0..config.g {
        let rate = total_dist.sample(&mut rng);
        let total = poisson_draw(&mut rng, rate) as u64;
        let weights = dirichlet_ones(&mut rng, config.n);
        for (i, count) in multinomial(&mut rng, total, &weights).into_iter().enumerate() {
            e[(i, g)] = count as f64;
        }
    }

    let m = CountMatrix::new(poisson_counts(&mut rng, &p.dot(&e)))?;
    let names = indices.iter().map(|&j| catalog.names[j].clone()).collect();
    Ok(SimDataset { m, p, e, names })
}
