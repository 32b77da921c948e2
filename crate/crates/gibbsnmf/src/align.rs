//! Reference alignment: cosine similarity against a signature catalog,
//! optimal factor matching via the Hungarian algorithm, posterior
//! vote-weighted ensemble alignment, and label-switching traces.

use ndarray::Array2;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::chain::ChainStore;
use crate::error::{contract, data_err, Result};
use crate::inference::{filtered_normalized_mean, SampleView};

/// A named catalog of reference loading columns (mutation-type rows ×
/// signature columns), the target of factor alignment.
#[derive(Debug, Clone)]
pub struct ReferenceCatalog {
    /// Row labels (one per variable / mutation type).
    pub labels: Vec<String>,
    /// Column names (one per reference signature).
    pub names: Vec<String>,
    /// K×R nonnegative loadings; every column has positive mass.
    pub signatures: Array2<f64>,
}

impl ReferenceCatalog {
    pub fn new(labels: Vec<String>, names: Vec<String>, signatures: Array2<f64>) -> Result<Self> {
        if labels.len() != signatures.nrows() || names.len() != signatures.ncols() {
            return Err(contract("reference catalog dimensions disagree with its labels"));
        }
        if names.is_empty() {
            return Err(contract("reference catalog has no signatures"));
        }
        if signatures.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(data_err("reference signatures must be finite and nonnegative"));
        }
        for (j, col) in signatures.columns().into_iter().enumerate() {
            if col.sum() <= 0.0 {
                return Err(data_err(format!(
                    "reference signature {:?} (column {j}) has zero mass",
                    names[j]
                )));
            }
        }
        Ok(ReferenceCatalog { labels, names, signatures })
    }

    /// Rows (variables) in the catalog.
    pub fn k(&self) -> usize {
        self.signatures.nrows()
    }

    /// Signatures in the catalog.
    pub fn len(&self) -> usize {
        self.signatures.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Catalog restricted to the given signature columns, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        for &j in indices {
            if j >= self.len() {
                return Err(contract(format!("catalog has no signature column {j}")));
            }
        }
        let signatures = Array2::from_shape_fn((self.k(), indices.len()), |(i, jj)| {
            self.signatures[(i, indices[jj])]
        });
        ReferenceCatalog::new(
            self.labels.clone(),
            indices.iter().map(|&j| self.names[j].clone()).collect(),
            signatures,
        )
    }

    /// Parse a tab-separated catalog: a header of signature names after the
    /// label column, then one row per variable.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let m = crate::io::LabeledMatrix::from_tsv(text)?;
        ReferenceCatalog::new(m.row_labels, m.col_names, m.values)
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Serialize back to the tab-separated layout accepted by [`from_tsv`].
    /// Values print in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let m = crate::io::LabeledMatrix {
            row_labels: self.labels.clone(),
            col_names: self.names.clone(),
            values: self.signatures.clone(),
        };
        m.to_tsv("Type")
    }

    /// Deterministic test-scale catalog: 96 trinucleotide-context labels and
    /// 16 block-peaked signatures (80% of the mass on a signature-specific
    /// block of six contexts, 20% uniform background). Any two signatures
    /// have cosine similarity well below 0.8.
    pub fn synthetic() -> Self {
        const BASES: [char; 4] = ['A', 'C', 'G', 'T'];
        const SUBS: [&str; 6] = ["C>A", "C>G", "C>T", "T>A", "T>C", "T>G"];
        let mut labels = Vec::with_capacity(96);
        for sub in SUBS {
            for five in BASES {
                for three in BASES {
                    labels.push(format!("{five}[{sub}]{three}"));
                }
            }
        }
        let profile = [8.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let profile_sum: f64 = profile.iter().sum();
        let mut signatures = Array2::from_elem((96, 16), 0.2 / 96.0);
        for j in 0..16 {
            for t in 0..6 {
                let w = profile[(t + j) % 6] / profile_sum;
                signatures[(6 * j + t, j)] += 0.8 * w;
            }
        }
        let names = (1..=16).map(|j| format!("SYN{j:02}")).collect();
        ReferenceCatalog::new(labels, names, signatures).expect("static catalog is valid")
    }
}

/// Pairwise cosine similarities between the columns of `reference` (K×R) and
/// `estimated` (K×N′), as an R×N′ matrix. Zero columns have no direction and
/// are rejected.
pub fn cosine_similarity_matrix(
    reference: &Array2<f64>,
    estimated: &Array2<f64>,
) -> Result<Array2<f64>> {
    if reference.nrows() != estimated.nrows() {
        return Err(contract("cosine similarity needs matching row dimensions"));
    }
    let norms = |m: &Array2<f64>, what: &str| -> Result<Vec<f64>> {
        m.columns()
            .into_iter()
            .enumerate()
            .map(|(j, col)| {
                let n = col.dot(&col).sqrt();
                if n == 0.0 {
                    Err(contract(format!("{what} column {j} is all zeros")))
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let ref_norms = norms(reference, "reference")?;
    let est_norms = norms(estimated, "estimated")?;
    let mut s = reference.t().dot(estimated);
    for ((i, j), v) in s.indexed_iter_mut() {
        *v /= ref_norms[i] * est_norms[j];
    }
    Ok(s)
}

/// Maximum-total-similarity matching of `min(rows, cols)` pairs, found by
/// running the O(n³) Hungarian algorithm on −S (rectangular inputs are padded
/// square with a constant). Returns (row, column) pairs sorted by row.
pub fn hungarian_assign(s: &Array2<f64>) -> Result<Vec<(usize, usize)>> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(contract("hungarian_assign requires a finite matrix"));
    }
    let (r, c) = s.dim();
    if r == 0 || c == 0 {
        return Ok(Vec::new());
    }
    let n = r.max(c);
    let cost =
        Array2::from_shape_fn((n, n), |(i, j)| if i < r && j < c { -s[(i, j)] } else { 0.0 });

    // Potentials-based shortest augmenting paths, 1-based with a virtual
    // column 0 (the standard formulation).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row, 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let i = matched_row[j];
            (i >= 1 && i - 1 < r && j - 1 < c).then_some((i - 1, j - 1))
        })
        .collect();
    pairs.sort_unstable();
    debug_assert_eq!(pairs.len(), r.min(c));
    Ok(pairs)
}

/// Outcome of posterior-ensemble alignment: the mean-estimate similarity
/// matrix, per-sample matchings, weighted vote tallies, and the final
/// injective reference assignment per factor.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Reference × kept-factor cosine similarities of the MAP-filtered
    /// normalized posterior mean.
    pub s: Array2<f64>,
    /// Original factor indices behind the columns of `s`.
    pub kept: Vec<usize>,
    /// Per inference sample: (reference, original factor) matched pairs.
    pub assignments: Vec<Vec<(usize, usize)>>,
    /// Summed cosine vote weight and vote count per (factor, reference).
    pub votes: HashMap<(usize, usize), (f64, u32)>,
    /// Winning reference per original factor; `None` when the factor never
    /// gathered a vote or every voted reference was claimed by a more
    /// confident factor.
    pub mapping: Vec<Option<usize>>,
    /// Winner's share of the factor's total vote weight (0 when unmatched).
    pub vote_fraction: Vec<f64>,
}

impl AlignmentResult {
    /// (factor, reference) pairs of the final mapping.
    pub fn matched_pairs(&self) -> Vec<(usize, usize)> {
        self.mapping
            .iter()
            .enumerate()
            .filter_map(|(n, r)| r.map(|r| (n, r)))
            .collect()
    }
}

/// Align every inference sample's included factors to the catalog with the
/// Hungarian algorithm, tally cosine-weighted votes per (factor, reference)
/// pair, and resolve the final mapping greedily by descending vote weight so
/// it stays injective. Vote-weight ties break toward the higher mean cosine.
pub fn ensemble_align(store: &ChainStore, reference: &ReferenceCatalog) -> Result<AlignmentResult> {
    let samples = store.inference_window();
    if samples.is_empty() {
        return Err(contract("ensemble_align needs inference-eligible samples"));
    }
    if reference.k() != samples[0].p.nrows() {
        return Err(contract(format!(
            "catalog has {} rows but the model has {} variables",
            reference.k(),
            samples[0].p.nrows()
        )));
    }
    let n_factors = samples[0].a.len();
    let mut votes: HashMap<(usize, usize), (f64, u32)> = HashMap::new();
    let mut assignments = Vec::with_capacity(samples.len());
    for sample in &samples {
        let included: Vec<usize> = (0..n_factors).filter(|&n| sample.a[n] == 1).collect();
        if included.is_empty() {
            assignments.push(Vec::new());
            continue;
        }
        let est = Array2::from_shape_fn((sample.p.nrows(), included.len()), |(i, jj)| {
            sample.p[(i, included[jj])]
        });
        let s = cosine_similarity_matrix(&reference.signatures, &est)?;
        let pairs = hungarian_assign(&s)?;
        let mut resolved = Vec::with_capacity(pairs.len());
        for (ref_idx, sub_idx) in pairs {
            let factor = included[sub_idx];
            let entry = votes.entry((factor, ref_idx)).or_insert((0.0, 0));
            entry.0 += s[(ref_idx, sub_idx)];
            entry.1 += 1;
            resolved.push((ref_idx, factor));
        }
        assignments.push(resolved);
    }

    // Pool the votes per factor, best first: weight, then mean cosine, then
    // reference index for full determinism.
    let mut pools: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n_factors];
    for (&(factor, ref_idx), &(weight, count)) in &votes {
        pools[factor].push((ref_idx, weight, weight / count as f64));
    }
    for pool in &mut pools {
        pool.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0))
        });
    }
    // Factors claim references in descending order of their top vote weight.
    let mut order: Vec<usize> = (0..n_factors).filter(|&n| !pools[n].is_empty()).collect();
    order.sort_by(|&a, &b| {
        pools[b][0]
            .1
            .total_cmp(&pools[a][0].1)
            .then(pools[b][0].2.total_cmp(&pools[a][0].2))
            .then(a.cmp(&b))
    });
    let mut mapping = vec![None; n_factors];
    let mut vote_fraction = vec![0.0; n_factors];
    let mut claimed = vec![false; reference.len()];
    for factor in order {
        let total: f64 = pools[factor].iter().map(|(_, w, _)| w).sum();
        for &(ref_idx, weight, _) in &pools[factor] {
            if !claimed[ref_idx] {
                claimed[ref_idx] = true;
                mapping[factor] = Some(ref_idx);
                vote_fraction[factor] = weight / total;
                break;
            }
        }
    }
    debug_assert!(
        {
            let mut seen = vec![false; reference.len()];
            mapping.iter().flatten().all(|&r| !std::mem::replace(&mut seen[r], true))
        },
        "final mapping must be injective"
    );

    let views: Vec<SampleView<'_>> = samples.iter().map(|s| SampleView::from(*s)).collect();
    let mean = filtered_normalized_mean(&views)?;
    let kept: Vec<usize> = (0..n_factors).filter(|&n| mean.a_hat[n] == 1).collect();
    let est = Array2::from_shape_fn((reference.k(), kept.len()), |(i, jj)| {
        mean.p_mean[(i, kept[jj])]
    });
    let s = cosine_similarity_matrix(&reference.signatures, &est)?;

    Ok(AlignmentResult { s, kept, assignments, votes, mapping, vote_fraction })
}

/// For each retained iteration and factor, the index of the closest catalog
/// signature by cosine; `None` marks factors that were excluded (or carried
/// no mass) at that iteration.
#[derive(Debug, Clone)]
pub struct LabelTrace {
    pub iterations: Vec<usize>,
    /// One row per retained iteration, one entry per factor.
    pub closest: Vec<Vec<Option<usize>>>,
}

impl LabelTrace {
    /// Tidy (iteration, factor, reference-name) rows for plotting; absent
    /// factors are written as `-`.
    pub fn to_tsv(&self, catalog: &ReferenceCatalog) -> String {
        let mut out = String::from("iteration\tfactor\treference\n");
        for (t, &iteration) in self.iterations.iter().enumerate() {
            for (factor, closest) in self.closest[t].iter().enumerate() {
                let name = match closest {
                    Some(r) => catalog.names[*r].as_str(),
                    None => "-",
                };
                let _ = writeln!(out, "{iteration}\t{factor}\t{name}");
            }
        }
        out
    }
}

/// Track the closest reference of every factor across all retained samples,
/// the raw material of a label-switching plot.
pub fn label_trace(store: &ChainStore, reference: &ReferenceCatalog) -> Result<LabelTrace> {
    let ref_norms: Vec<f64> = reference
        .signatures
        .columns()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .collect();
    if ref_norms.iter().any(|&n| n == 0.0) {
        return Err(contract("reference catalog contains a zero column"));
    }
    let mut iterations = Vec::with_capacity(store.len());
    let mut closest = Vec::with_capacity(store.len());
    for sample in store.samples() {
        if sample.p.nrows() != reference.k() {
            return Err(contract("catalog rows do not match the model's variables"));
        }
        let mut row = Vec::with_capacity(sample.a.len());
        for n in 0..sample.a.len() {
            let col = sample.p.column(n);
            let norm = col.dot(&col).sqrt();
            if sample.a[n] == 0 || norm == 0.0 {
                row.push(None);
                continue;
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for (r, ref_col) in reference.signatures.columns().into_iter().enumerate() {
                let cos = col.dot(&ref_col) / (norm * ref_norms[r]);
                if cos > best.1 {
                    best = (r, cos);
                }
            }
            row.push(Some(best.0));
        }
        iterations.push(sample.iteration);
        closest.push(row);
    }
    Ok(LabelTrace { iterations, closest })
}
