//! Chain driver: warm-up, windowed convergence checks, the accept-all → true
//! MH switch, bounded sample retention, and the structured run log.
//!
//! A run proceeds in sweeps. Each sweep's factors, inclusion vector, and
//! per-sample metrics go into a bounded ring buffer; every `stride` sweeps
//! (once past the warm-in point) the driver computes metrics over the trailing
//! `window` samples and tests two stopping rules: the chosen metric's relative
//! change staying under `tol` across `n_nochange` consecutive checks, or no
//! new best value for `n_nobest` checks. Metropolis-Hastings samplers treat
//! everything before first convergence as an accept-all warm-up, then append
//! exactly [`POST_SWITCH_ITERS`] true-MH sweeps and use the trailing
//! [`INFERENCE_SAMPLES`] for inference; the other samplers stop at convergence
//! and use their own trailing samples.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{contract, Error, Result};
use crate::inference::{self, filtered_normalized_mean, PosteriorSummary, SampleView};
use crate::model::{self, CountMatrix, HyperParams, Likelihood, ModelState, PriorParams};
use crate::rank::{RankMethod, TemperSchedule};
use crate::sampler::{init_state, sweep, MhMode, MhStats, SamplerKind, SweepOptions};

/// Posterior samples used for inference, always the trailing ones.
pub const INFERENCE_SAMPLES: usize = 1000;
/// True-MH sweeps appended after an MH warm-up converges.
pub const POST_SWITCH_ITERS: usize = 2000;

// ---------------------------------------------------------------------------
// Controls and metric selection
// ---------------------------------------------------------------------------

/// Which windowed quantity drives convergence checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    LogPosterior,
    Bic,
    LogLikelihood,
    Rmse,
    Kl,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::LogPosterior, Metric::Bic, Metric::LogLikelihood, Metric::Rmse, Metric::Kl];

    pub fn label(self) -> &'static str {
        match self {
            Metric::LogPosterior => "log_posterior",
            Metric::Bic => "bic",
            Metric::LogLikelihood => "log_likelihood",
            Metric::Rmse => "rmse",
            Metric::Kl => "kl",
        }
    }

    /// Larger-is-better metrics; BIC, RMSE, and KL improve downward.
    pub fn improves_upward(self) -> bool {
        matches!(self, Metric::LogPosterior | Metric::LogLikelihood)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| contract(format!("unknown convergence metric {s:?}")))
    }
}

/// Knobs for the windowed convergence detector.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceControls {
    pub metric: Metric,
    /// Samples per metric window.
    pub window: usize,
    /// Sweeps between checks.
    pub stride: usize,
    /// Relative-change threshold (0.001 = 0.1%).
    pub tol: f64,
    /// Consecutive checks the metric must hold still for.
    pub n_nochange: usize,
    /// Checks without a new best value before stopping.
    pub n_nobest: usize,
    /// Sweeps before the first check.
    pub miniters: usize,
    /// Hard iteration cap.
    pub maxiters: usize,
}

impl Default for ConvergenceControls {
    fn default() -> Self {
        ConvergenceControls {
            metric: Metric::LogPosterior,
            window: 1000,
            stride: 100,
            tol: 1e-3,
            n_nochange: 5,
            n_nobest: 10,
            miniters: 2000,
            maxiters: 50_000,
        }
    }
}

impl ConvergenceControls {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.window < self.stride {
            return Err(contract("convergence controls require window ≥ stride ≥ 1"));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(contract("convergence tolerance must be a positive finite number"));
        }
        if self.n_nochange == 0 || self.n_nobest == 0 || self.maxiters == 0 {
            return Err(contract("convergence counts must be ≥ 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sample retention
// ---------------------------------------------------------------------------

/// Metrics attached to every retained sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleMetrics {
    pub log_likelihood: f64,
    pub bic: f64,
    /// Log-likelihood plus the factor-level prior densities; the slowly
    /// varying prior-parameter and inclusion terms are left out, so this is a
    /// relative convergence signal, not a full joint density.
    pub log_posterior: f64,
    /// Mean of min(1, acceptance ratio) over the sweep's proposals (1.0 for
    /// warm-up and non-MH sweeps).
    pub mean_accept: f64,
}

/// One retained posterior sample.
#[derive(Debug, Clone)]
pub struct StoredSample {
    /// 1-based sweep number.
    pub iteration: usize,
    pub p: Array2<f64>,
    pub e: Array2<f64>,
    pub a: Vec<u8>,
    /// Drawn with γ < 1; never used for checks or inference.
    pub tempered: bool,
    /// Drawn during an MH accept-all warm-up; used for checks, never for
    /// inference.
    pub warmup: bool,
    pub metrics: SampleMetrics,
}

/// Per-iteration metric record kept for the whole run (the factor matrices
/// themselves are only retained inside the ring buffer).
#[derive(Debug, Clone, Copy)]
pub struct MetricsEntry {
    pub iteration: usize,
    pub tempered: bool,
    pub warmup: bool,
    pub metrics: SampleMetrics,
}

/// Bounded ring buffer of retained samples plus the data snapshot the
/// windowed metrics are computed against.
#[derive(Debug, Clone)]
pub struct ChainStore {
    m: CountMatrix,
    capacity: usize,
    samples: VecDeque<StoredSample>,
    metrics_log: Vec<MetricsEntry>,
}

impl ChainStore {
    /// Capacity covers one check window plus the post-switch tail.
    pub fn new(m: CountMatrix, window: usize) -> Self {
        let capacity = window.max(INFERENCE_SAMPLES) + POST_SWITCH_ITERS;
        ChainStore { m, capacity, samples: VecDeque::with_capacity(capacity), metrics_log: Vec::new() }
    }

    pub fn data(&self) -> &CountMatrix {
        &self.m
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: StoredSample) {
        self.metrics_log.push(MetricsEntry {
            iteration: sample.iteration,
            tempered: sample.tempered,
            warmup: sample.warmup,
            metrics: sample.metrics,
        });
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &StoredSample> {
        self.samples.iter()
    }

    /// Last `n` retained samples in order, or `None` when fewer exist.
    pub fn recent(&self, n: usize) -> Option<Vec<&StoredSample>> {
        (self.samples.len() >= n).then(|| self.samples.iter().skip(self.samples.len() - n).collect())
    }

    /// Trailing inference-eligible samples (neither tempered nor warm-up),
    /// at most [`INFERENCE_SAMPLES`] of them.
    pub fn inference_window(&self) -> Vec<&StoredSample> {
        let mut eligible: Vec<&StoredSample> =
            self.samples.iter().filter(|s| !s.tempered && !s.warmup).collect();
        let start = eligible.len().saturating_sub(INFERENCE_SAMPLES);
        eligible.split_off(start)
    }

    /// Lightweight per-iteration metric history for the entire run.
    pub fn metrics_log(&self) -> &[MetricsEntry] {
        &self.metrics_log
    }
}

// ---------------------------------------------------------------------------
// Window metrics
// ---------------------------------------------------------------------------

/// Metrics over one trailing window: reconstruction errors from the
/// normalized, MAP-filtered window mean, and averages of the per-sample
/// metrics.
#[derive(Debug, Clone, Copy)]
pub struct WindowMetrics {
    pub rmse: f64,
    pub kl: f64,
    pub log_likelihood: f64,
    pub bic: f64,
    pub log_posterior: f64,
    /// Samples in the window.
    pub n: usize,
    /// Samples matching the window's modal inclusion vector.
    pub n_used: usize,
}

impl WindowMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::LogPosterior => self.log_posterior,
            Metric::Bic => self.bic,
            Metric::LogLikelihood => self.log_likelihood,
            Metric::Rmse => self.rmse,
            Metric::Kl => self.kl,
        }
    }
}

/// Metrics over the trailing `window` retained samples, or `None` when the
/// window is not yet full or still contains tempered draws (the check is
/// skipped). Warm-up samples are allowed: convergence is what ends the
/// warm-up.
pub fn window_metrics(store: &ChainStore, window: usize) -> Result<Option<WindowMetrics>> {
    if window == 0 {
        return Err(contract("window_metrics: window must be ≥ 1"));
    }
    let Some(samples) = store.recent(window) else {
        return Ok(None);
    };
    if samples.iter().any(|s| s.tempered) {
        return Ok(None);
    }
    let views: Vec<SampleView<'_>> = samples.iter().map(|s| SampleView::from(*s)).collect();
    let mean = filtered_normalized_mean(&views)?;
    let m_hat = mean.reconstruct()?;
    let m = &store.data().values;
    let nf = samples.len() as f64;
    let sum = |f: fn(&SampleMetrics) -> f64| samples.iter().map(|s| f(&s.metrics)).sum::<f64>() / nf;
    Ok(Some(WindowMetrics {
        rmse: model::rmse(m, &m_hat)?,
        kl: model::kl_divergence(m, &m_hat)?,
        log_likelihood: sum(|sm| sm.log_likelihood),
        bic: sum(|sm| sm.bic),
        log_posterior: sum(|sm| sm.log_posterior),
        n: samples.len(),
        n_used: mean.n_used,
    }))
}

/// Average of one per-sample scalar metric over the trailing window, under
/// the same fullness/tempering gates as [`window_metrics`] but without the
/// normalized-mean reconstruction; `None` when the window is not ready or
/// the metric derives from the window mean (RMSE/KL).
fn window_scalar_average(store: &ChainStore, window: usize, metric: Metric) -> Option<f64> {
    let pick: fn(&SampleMetrics) -> f64 = match metric {
        Metric::LogPosterior => |sm| sm.log_posterior,
        Metric::Bic => |sm| sm.bic,
        Metric::LogLikelihood => |sm| sm.log_likelihood,
        Metric::Rmse | Metric::Kl => return None,
    };
    let samples = store.recent(window)?;
    if samples.iter().any(|s| s.tempered) {
        return None;
    }
    Some(samples.iter().map(|s| pick(&s.metrics)).sum::<f64>() / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Convergence bookkeeping
// ---------------------------------------------------------------------------

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Relative metric change stayed under `tol` for `n_nochange` checks.
    NoChange,
    /// No new best metric value for `n_nobest` checks.
    NoBest,
    /// Hit the iteration cap without converging.
    MaxIters,
}

impl StopReason {
    pub fn label(self) -> &'static str {
        match self {
            StopReason::NoChange => "nochange",
            StopReason::NoBest => "nobest",
            StopReason::MaxIters => "maxiters",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Outcome of one convergence check, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    /// Not converged; keep sampling.
    Continue,
    /// First convergence of an MH warm-up: switch to true MH steps.
    Switch,
    /// Informational check during the post-switch tail.
    PostSwitch,
    /// Converged with the no-change rule; run stops.
    NoChange,
    /// Converged with the no-new-best rule; run stops.
    NoBest,
    /// Check coincided with the iteration cap; run stops unconverged.
    Capped,
}

impl CheckStatus {
    pub fn label(self) -> &'static str {
        match self {
            CheckStatus::Continue => "continue",
            CheckStatus::Switch => "switch",
            CheckStatus::PostSwitch => "post-switch",
            CheckStatus::NoChange => "nochange",
            CheckStatus::NoBest => "nobest",
            CheckStatus::Capped => "capped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            CheckStatus::Continue,
            CheckStatus::Switch,
            CheckStatus::PostSwitch,
            CheckStatus::NoChange,
            CheckStatus::NoBest,
            CheckStatus::Capped,
        ]
        .into_iter()
        .find(|c| c.label() == s)
        .ok_or_else(|| contract(format!("unknown check status {s:?}")))
    }
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One convergence check: the windowed metric value, its relative step from
/// the previous check, and the decision taken.
#[derive(Debug, Clone, Copy)]
pub struct CheckRecord {
    pub iteration: usize,
    pub gamma: f64,
    pub metric: Metric,
    pub value: f64,
    /// |value − prev| / |prev|; `None` on the first check.
    pub rel_change: Option<f64>,
    pub status: CheckStatus,
}

impl CheckRecord {
    /// Tab-separated log line: iteration, γ, metric name, window value,
    /// relative change (`-` on the first check), status. Floats print in
    /// Rust's shortest round-trip form, so parsing recovers them bit-exactly.
    pub fn log_line(&self) -> String {
        let rel = match self.rel_change {
            Some(r) => r.to_string(),
            None => "-".to_string(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration, self.gamma, self.metric, self.value, rel, self.status
        )
    }

    /// Parse a [`CheckRecord::log_line`] back; exact inverse for finite and
    /// infinite values alike.
    pub fn parse_log_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end_matches('\n').split('\t').collect();
        let [iter, gamma, metric, value, rel, status] = fields.as_slice() else {
            return Err(contract(format!("log line must have 6 tab-separated fields: {line:?}")));
        };
        let float = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| contract(format!("log line has a malformed {what}: {s:?}")))
        };
        Ok(CheckRecord {
            iteration: iter
                .parse()
                .map_err(|_| contract(format!("log line has a malformed iteration: {iter:?}")))?,
            gamma: float(gamma, "gamma")?,
            metric: metric.parse()?,
            value: float(value, "metric value")?,
            rel_change: if *rel == "-" { None } else { Some(float(rel, "relative change")?) },
            status: CheckStatus::parse(status)?,
        })
    }
}

/// How a run ended, with the full per-check history.
#[derive(Debug, Clone)]
pub struct RunStatus {
    pub converged: bool,
    /// Present iff the run converged or was capped.
    pub reason: Option<StopReason>,
    /// Total sweeps run (last checked iteration for a bare history).
    pub iterations: usize,
    pub history: Vec<CheckRecord>,
}

/// Relative step between consecutive metric values. An exact repeat of zero
/// counts as no change; any other step from zero counts as infinite.
fn relative_step(prev: f64, value: f64) -> f64 {
    if prev == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (value - prev).abs() / prev.abs()
    }
}

/// Evaluate the stopping rules over a check history: no-change when the
/// `n_nochange − 1` relative steps spanning the last `n_nochange` checks all
/// stay under `tol` (the metric "has not changed" across those checks),
/// no-best when the best value is `n_nobest` or more checks old, capped when
/// the last check sits at or past `maxiters`.
pub fn check_convergence(history: &[CheckRecord], controls: &ConvergenceControls) -> RunStatus {
    let mut status = RunStatus {
        converged: false,
        reason: None,
        iterations: history.last().map_or(0, |r| r.iteration),
        history: history.to_vec(),
    };
    if history.is_empty() {
        return status;
    }
    if history.len() >= controls.n_nochange {
        let tail = &history[history.len() - controls.n_nochange..];
        if tail.windows(2).all(|w| relative_step(w[0].value, w[1].value) < controls.tol) {
            status.converged = true;
            status.reason = Some(StopReason::NoChange);
            return status;
        }
    }
    let up = controls.metric.improves_upward();
    let mut best = 0;
    for i in 1..history.len() {
        let better = if up {
            history[i].value > history[best].value
        } else {
            history[i].value < history[best].value
        };
        if better {
            best = i;
        }
    }
    if history.len() - 1 - best >= controls.n_nobest {
        status.converged = true;
        status.reason = Some(StopReason::NoBest);
    } else if status.iterations >= controls.maxiters {
        status.reason = Some(StopReason::MaxIters);
    }
    status
}

// ---------------------------------------------------------------------------
// The chain driver
// ---------------------------------------------------------------------------

/// Everything one chain needs: sampler kind, rank handling, convergence
/// controls, optional hyperprior override, and the RNG seed/stream pair.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub kind: SamplerKind,
    pub rank: RankMethod,
    pub controls: ConvergenceControls,
    pub hypers: Option<HyperParams>,
    pub seed: u64,
    /// ChaCha stream, so concurrent chains can share a seed without sharing
    /// randomness.
    pub stream: u64,
}

impl FitConfig {
    pub fn new(kind: SamplerKind, rank: RankMethod) -> Self {
        FitConfig {
            kind,
            rank,
            controls: ConvergenceControls::default(),
            hypers: None,
            seed: 0,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        self.rank.validate()?;
        self.controls.validate()
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream.into());
        rng
    }
}

/// A finished chain: retained samples, stop status, the posterior summary
/// (absent when no inference-eligible sample exists), MH acceptance
/// bookkeeping, and the check log.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: SamplerKind,
    pub rank: RankMethod,
    pub store: ChainStore,
    pub status: RunStatus,
    pub summary: Option<PosteriorSummary>,
    /// Acceptance counters over true-MH sweeps only (warm-up excluded).
    pub mh_stats: MhStats,
    /// Iteration of the accept-all → true-MH switch, for MH samplers that
    /// reached it.
    pub switch_iteration: Option<usize>,
    /// Window KL at the switch check and at the end of the run.
    pub kl_at_switch: Option<f64>,
    pub kl_at_end: Option<f64>,
    pub log_lines: Vec<String>,
    pub wall_secs: f64,
}

impl FitResult {
    /// Mean per-sample BIC over the inference window (the minBIC criterion).
    pub fn inference_bic_mean(&self) -> Option<f64> {
        mean_over_inference(&self.store, |sm| sm.bic)
    }

    /// Mean per-sweep acceptance probability over the inference window.
    pub fn inference_accept_mean(&self) -> Option<f64> {
        mean_over_inference(&self.store, |sm| sm.mean_accept)
    }

    /// Mean per-sample log-likelihood over the inference window.
    pub fn inference_loglik_mean(&self) -> Option<f64> {
        mean_over_inference(&self.store, |sm| sm.log_likelihood)
    }
}

fn mean_over_inference(store: &ChainStore, f: fn(&SampleMetrics) -> f64) -> Option<f64> {
    let window = store.inference_window();
    if window.is_empty() {
        return None;
    }
    Some(window.iter().map(|s| f(&s.metrics)).sum::<f64>() / window.len() as f64)
}

enum Phase {
    /// MH accept-all warm-up, before first convergence.
    Warmup,
    /// Non-MH samplers: plain Gibbs until convergence.
    Sampling,
    /// MH tail: true-MH sweeps left to run.
    PostSwitch { remaining: usize },
}

/// Per-sample metrics at the current state.
fn sample_metrics(
    m: &CountMatrix,
    state: &ModelState,
    kind: SamplerKind,
    ln_fact: Option<&Array2<f64>>,
    mean_accept: f64,
) -> Result<SampleMetrics> {
    let log_likelihood = match kind.likelihood {
        Likelihood::Poisson => model::poisson_log_likelihood(&m.values, &state.m_hat, ln_fact),
        Likelihood::Normal => {
            let noise = state
                .noise
                .as_ref()
                .ok_or_else(|| contract("Normal-likelihood state is missing its noise variances"))?;
            model::normal_log_likelihood(&m.values, &state.m_hat, &noise.sigma2)
        }
    };
    let bic = model::bic_from_loglik(log_likelihood, m.k(), m.g(), state.inclusion.effective_rank());
    Ok(SampleMetrics {
        log_likelihood,
        bic,
        log_posterior: log_likelihood + factor_log_prior(state),
        mean_accept,
    })
}

/// Sum of the element-level prior log-densities of P and E under the current
/// prior parameters.
fn factor_log_prior(state: &ModelState) -> f64 {
    use crate::dist::{ln_exponential_pdf, ln_gamma_pdf, ln_trunc_normal_pdf};
    fn flat(xs: &Array2<f64>) -> &[f64] {
        xs.as_slice().expect("standard layout")
    }
    // Σ pdf(x_i; a_i[, b_i]) over flat views of same-shape arrays.
    fn sum2(xs: &Array2<f64>, a: &Array2<f64>, pdf: fn(f64, f64) -> f64) -> f64 {
        let (xs, a) = (flat(xs), flat(a));
        xs.iter().zip(a).map(|(&x, &a)| pdf(x, a)).sum()
    }
    fn sum3(xs: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>, pdf: fn(f64, f64, f64) -> f64) -> f64 {
        let (xs, a, b) = (flat(xs), flat(a), flat(b));
        xs.iter().zip(a).zip(b).map(|((&x, &a), &b)| pdf(x, a, b)).sum()
    }
    let p = &state.factors.p;
    let e = &state.factors.e;
    match &state.priors {
        PriorParams::TruncNormal { mu_p, var_p, mu_e, var_e } => {
            sum3(p, mu_p, var_p, ln_trunc_normal_pdf) + sum3(e, mu_e, var_e, ln_trunc_normal_pdf)
        }
        PriorParams::Exponential { lambda_p, lambda_e } => {
            sum2(p, lambda_p, ln_exponential_pdf) + sum2(e, lambda_e, ln_exponential_pdf)
        }
        PriorParams::Gamma { alpha_p, beta_p, alpha_e, beta_e } => {
            sum3(p, alpha_p, beta_p, ln_gamma_pdf) + sum3(e, alpha_e, beta_e, ln_gamma_pdf)
        }
    }
}

/// Run one chain end to end. MH samplers warm up with accept-all steps until
/// first convergence, append exactly [`POST_SWITCH_ITERS`] true-MH sweeps,
/// and keep the trailing [`INFERENCE_SAMPLES`] for inference; the others stop
/// at convergence. Hitting `maxiters` first yields a capped status, whatever
/// diagnostics exist, and a summary flagged non-converged (or none at all if
/// no eligible sample was ever drawn).
pub fn run_chain(m: &CountMatrix, config: &FitConfig) -> Result<FitResult> {
    let started = Instant::now();
    config.validate()?;
    if let RankMethod::MinBic { .. } = config.rank {
        return Err(contract(
            "run_chain drives a single chain; use run_min_bic for rank selection by BIC",
        ));
    }
    let kind = config.kind;
    let controls = config.controls;
    let inclusion = config.rank.inclusion();
    let schedule = TemperSchedule::new(inclusion.is_some(), controls.maxiters);
    let mut rng = config.rng();
    let mut state = init_state(m, kind, config.rank.model_rank(), config.hypers, &mut rng)?;
    let ln_fact =
        (kind.likelihood == Likelihood::Poisson).then(|| m.ln_factorial_table());

    let mut store = ChainStore::new(m.clone(), controls.window);
    let mut history: Vec<CheckRecord> = Vec::new();
    let mut log_lines: Vec<String> = Vec::new();
    let mut mh_stats = MhStats::default();
    let mut phase = if kind.use_mh { Phase::Warmup } else { Phase::Sampling };
    let mut switch_iteration = None;
    let mut kl_at_switch = None;
    let mut converged: Option<StopReason> = None;
    let mut iterations = 0;

    // Checks start once the minimum burn-in has passed AND the trailing
    // window (and eventual inference tail) can be free of tempered draws.
    let first_check = controls
        .miniters
        .max(controls.window.max(INFERENCE_SAMPLES) + schedule.last_tempered_iter());

    'run: for it in 1..=controls.maxiters {
        iterations = it;
        state.gamma = schedule.gamma_of(it - 1);
        let in_warmup = matches!(phase, Phase::Warmup);
        let in_post_switch = matches!(phase, Phase::PostSwitch { .. });
        let opts = SweepOptions {
            mh_mode: if in_warmup { MhMode::AcceptAll } else { MhMode::Standard },
            inclusion,
        };
        let stats = sweep(m, &mut state, kind, &opts, &mut rng)?;
        if kind.use_mh && !in_warmup {
            mh_stats.absorb(&stats);
        }
        let metrics = sample_metrics(m, &state, kind, ln_fact.as_ref(), stats.mean_accept)?;
        store.push(StoredSample {
            iteration: it,
            p: state.factors.p.clone(),
            e: state.factors.e.clone(),
            a: state.inclusion.a.clone(),
            tempered: state.gamma < 1.0,
            warmup: in_warmup,
            metrics,
        });

        if it % controls.stride == 0 && it >= first_check {
            if in_post_switch {
                // Informational record on the fixed-length tail: the scalar
                // window average matches `window_metrics` exactly and skips
                // the normalized-mean reconstruction; RMSE/KL metrics still
                // take the full path.
                let value = match window_scalar_average(&store, controls.window, controls.metric)
                {
                    Some(v) => Some(v),
                    None => window_metrics(&store, controls.window)?.map(|wm| wm.get(controls.metric)),
                };
                if let Some(value) = value {
                    let record = CheckRecord {
                        iteration: it,
                        gamma: state.gamma,
                        metric: controls.metric,
                        value,
                        rel_change: history.last().map(|prev| relative_step(prev.value, value)),
                        status: CheckStatus::PostSwitch,
                    };
                    history.push(record);
                    log_lines.push(record.log_line());
                }
            } else if let Some(wm) = window_metrics(&store, controls.window)? {
                let value = wm.get(controls.metric);
                let rel_change = history.last().map(|prev| relative_step(prev.value, value));
                let mut record = CheckRecord {
                    iteration: it,
                    gamma: state.gamma,
                    metric: controls.metric,
                    value,
                    rel_change,
                    status: CheckStatus::Continue,
                };
                history.push(record);
                let check = check_convergence(&history, &controls);
                if check.converged {
                    let reason = check.reason.expect("converged implies a reason");
                    converged = Some(reason);
                    if in_warmup {
                        record.status = CheckStatus::Switch;
                        phase = Phase::PostSwitch { remaining: POST_SWITCH_ITERS };
                        switch_iteration = Some(it);
                        kl_at_switch = Some(wm.kl);
                    } else {
                        record.status = match reason {
                            StopReason::NoChange => CheckStatus::NoChange,
                            StopReason::NoBest => CheckStatus::NoBest,
                            StopReason::MaxIters => CheckStatus::Capped,
                        };
                    }
                } else if it == controls.maxiters {
                    record.status = CheckStatus::Capped;
                }
                *history.last_mut().expect("just pushed") = record;
                log_lines.push(record.log_line());
                if converged.is_some() && matches!(phase, Phase::Sampling) {
                    break 'run;
                }
            }
        }

        // Count down the post-switch tail only on sweeps that actually ran
        // as true MH (the switch iteration itself was still accept-all).
        if in_post_switch {
            if let Phase::PostSwitch { remaining } = &mut phase {
                *remaining -= 1;
                if *remaining == 0 {
                    break 'run;
                }
            }
        }
    }

    let capped_mid_switch = matches!(phase, Phase::PostSwitch { remaining } if remaining > 0);
    let run_converged = converged.is_some() && !capped_mid_switch;
    let reason = if run_converged { converged } else { Some(StopReason::MaxIters) };
    let status = RunStatus { converged: run_converged, reason, iterations, history };

    let kl_at_end = window_metrics(&store, controls.window)?.map(|wm| wm.kl);
    let summary = if store.inference_window().is_empty() {
        None
    } else {
        let mut s = inference::summarize(&store, &controls)?;
        s.converged = run_converged;
        if run_converged {
            debug_assert_eq!(store.inference_window().len(), INFERENCE_SAMPLES);
        }
        Some(s)
    };

    Ok(FitResult {
        kind,
        rank: config.rank,
        store,
        status,
        summary,
        mh_stats,
        switch_iteration,
        kl_at_switch,
        kl_at_end,
        log_lines,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use std::collections::HashMap;

    fn toy_counts() -> CountMatrix {
        CountMatrix::new(arr2(&[
            [5.0, 1.0, 0.0, 2.0, 7.0, 3.0],
            [2.0, 4.0, 1.0, 0.0, 3.0, 5.0],
            [0.0, 2.0, 6.0, 3.0, 1.0, 2.0],
            [4.0, 0.0, 2.0, 5.0, 2.0, 1.0],
        ]))
        .unwrap()
    }

    fn tiny_sample(
        iteration: usize,
        scale: f64,
        tempered: bool,
        warmup: bool,
        log_likelihood: f64,
    ) -> StoredSample {
        StoredSample {
            iteration,
            p: arr2(&[[scale], [2.0 * scale]]),
            e: arr2(&[[1.0, 2.0]]),
            a: vec![1],
            tempered,
            warmup,
            metrics: SampleMetrics {
                log_likelihood,
                bic: -2.0 * log_likelihood,
                log_posterior: log_likelihood - 1.0,
                mean_accept: 1.0,
            },
        }
    }

    fn tiny_store() -> ChainStore {
        let m = CountMatrix::new(arr2(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
        ChainStore::new(m, 4)
    }

    #[test]
    fn controls_validation() {
        assert!(ConvergenceControls::default().validate().is_ok());
        let mut c = ConvergenceControls::default();
        c.stride = 0;
        assert!(c.validate().is_err());
        c = ConvergenceControls::default();
        c.window = c.stride - 1;
        assert!(c.validate().is_err());
        c = ConvergenceControls::default();
        c.tol = 0.0;
        assert!(c.validate().is_err());
        c = ConvergenceControls::default();
        c.n_nochange = 0;
        assert!(c.validate().is_err());
        c = ConvergenceControls::default();
        c.maxiters = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn metric_labels_roundtrip() {
        for m in Metric::ALL {
            assert_eq!(m.label().parse::<Metric>().unwrap(), m);
        }
        assert!("log posterior".parse::<Metric>().is_err());
        let upward: Vec<Metric> =
            Metric::ALL.into_iter().filter(|m| m.improves_upward()).collect();
        assert_eq!(upward, vec![Metric::LogPosterior, Metric::LogLikelihood]);
    }

    #[test]
    fn ring_buffer_is_bounded_and_ordered() {
        let mut store = tiny_store();
        let cap = store.capacity();
        assert_eq!(cap, INFERENCE_SAMPLES + POST_SWITCH_ITERS);
        for it in 1..=(cap + 150) {
            store.push(tiny_sample(it, 1.0, false, false, -1.0));
        }
        assert_eq!(store.len(), cap);
        assert_eq!(store.metrics_log().len(), cap + 150);
        let recent = store.recent(3).unwrap();
        let iters: Vec<usize> = recent.iter().map(|s| s.iteration).collect();
        assert_eq!(iters, vec![cap + 148, cap + 149, cap + 150]);
        assert!(store.recent(cap + 1).is_none());
    }

    #[test]
    fn inference_window_filters_flags_and_caps_at_1000() {
        let mut store = tiny_store();
        let mut it = 0;
        for _ in 0..40 {
            it += 1;
            store.push(tiny_sample(it, 1.0, true, false, -1.0));
        }
        for _ in 0..60 {
            it += 1;
            store.push(tiny_sample(it, 1.0, false, true, -1.0));
        }
        for _ in 0..1205 {
            it += 1;
            store.push(tiny_sample(it, 1.0, false, false, -1.0));
        }
        let window = store.inference_window();
        assert_eq!(window.len(), INFERENCE_SAMPLES);
        assert!(window.iter().all(|s| !s.tempered && !s.warmup));
        assert_eq!(window.first().unwrap().iteration, 100 + 1205 - 999);
        assert_eq!(window.last().unwrap().iteration, 100 + 1205);
    }

    fn check(iteration: usize, value: f64) -> CheckRecord {
        CheckRecord {
            iteration,
            gamma: 1.0,
            metric: Metric::LogPosterior,
            value,
            rel_change: None,
            status: CheckStatus::Continue,
        }
    }

    fn test_controls() -> ConvergenceControls {
        ConvergenceControls {
            metric: Metric::LogPosterior,
            window: 10,
            stride: 5,
            tol: 1e-3,
            n_nochange: 5,
            n_nobest: 50,
            miniters: 0,
            maxiters: 1_000_000,
        }
    }

    // The worked no-change case: a history whose consecutive relative steps
    // are (0.0005, 0.0009, 0.0004, 0.0008, 0.0006) with tol 0.001 converges
    // at the 5th check: by then the four steps spanning the last five checks
    // all sit below the tolerance.
    #[test]
    fn nochange_fires_on_the_fifth_check() {
        let steps = [0.0005, -0.0009, 0.0004, -0.0008, 0.0006];
        let mut values = vec![1000.0];
        for s in steps {
            values.push(values.last().unwrap() * (1.0 + s));
        }
        let history: Vec<CheckRecord> =
            values.iter().enumerate().map(|(i, &v)| check(100 * (i + 1), v)).collect();
        let controls = test_controls();
        for len in 1..=4 {
            let st = check_convergence(&history[..len], &controls);
            assert!(!st.converged, "must not converge after {len} checks");
        }
        for len in 5..=6 {
            let st = check_convergence(&history[..len], &controls);
            assert!(st.converged, "must converge by check {len}");
            assert_eq!(st.reason, Some(StopReason::NoChange));
            assert_eq!(st.iterations, 100 * len);
        }
    }

    #[test]
    fn constant_history_of_length_five_is_nochange() {
        let history: Vec<CheckRecord> =
            (1..=5).map(|i| check(100 * i, -321.5)).collect();
        let st = check_convergence(&history, &test_controls());
        assert!(st.converged);
        assert_eq!(st.reason, Some(StopReason::NoChange));
        let st = check_convergence(&history[..4], &test_controls());
        assert!(!st.converged);
    }

    #[test]
    fn strictly_improving_history_runs_to_the_cap() {
        let mut controls = test_controls();
        controls.n_nobest = 10;
        controls.maxiters = 10_000;
        let history: Vec<CheckRecord> =
            (1..=30).map(|i| check(100 * i, 1000.0 + 20.0 * i as f64)).collect();
        let st = check_convergence(&history, &controls);
        assert!(!st.converged);
        assert_eq!(st.reason, None, "cap not reached yet");
        // Same shape of history, but the last check sits on the cap.
        let mut capped = history.clone();
        capped.last_mut().unwrap().iteration = 10_000;
        let st = check_convergence(&capped, &controls);
        assert!(!st.converged);
        assert_eq!(st.reason, Some(StopReason::MaxIters));
    }

    #[test]
    fn nobest_fires_after_ten_stale_checks() {
        let mut controls = test_controls();
        controls.n_nobest = 10;
        controls.n_nochange = 99;
        // Best value first, then an oscillation that never improves on it
        // (and whose steps are far above tol, so no-change stays quiet).
        let mut history = vec![check(100, 500.0)];
        for i in 1..=10 {
            let v = if i % 2 == 0 { 400.0 } else { 440.0 };
            history.push(check(100 * (i + 1), v));
        }
        let st = check_convergence(&history[..10], &controls);
        assert!(!st.converged, "only 9 checks since the best");
        let st = check_convergence(&history, &controls);
        assert!(st.converged);
        assert_eq!(st.reason, Some(StopReason::NoBest));

        // Downward metrics flip the improvement direction.
        controls.metric = Metric::Rmse;
        let rising: Vec<CheckRecord> =
            (1..=11).map(|i| check(100 * i, 2.0 + 0.5 * i as f64)).collect();
        let st = check_convergence(&rising, &controls);
        assert!(st.converged, "rising RMSE never beats its first value");
        assert_eq!(st.reason, Some(StopReason::NoBest));
    }

    #[test]
    fn log_lines_roundtrip_bit_exactly() {
        let records = [
            CheckRecord {
                iteration: 12_345,
                gamma: 0.456_789_012_3,
                metric: Metric::LogPosterior,
                value: -98_765.432_109_876_54,
                rel_change: None,
                status: CheckStatus::Continue,
            },
            CheckRecord {
                iteration: 2,
                gamma: 1.0,
                metric: Metric::Kl,
                value: f64::INFINITY,
                rel_change: Some(0.000_123_456_789_012_34),
                status: CheckStatus::Switch,
            },
            CheckRecord {
                iteration: 77,
                gamma: 0.2,
                metric: Metric::Rmse,
                value: 1.5e-300,
                rel_change: Some(f64::INFINITY),
                status: CheckStatus::PostSwitch,
            },
            CheckRecord {
                iteration: 8,
                gamma: 1.0,
                metric: Metric::Bic,
                value: 3.0,
                rel_change: Some(0.0),
                status: CheckStatus::NoChange,
            },
            CheckRecord {
                iteration: 9,
                gamma: 1.0,
                metric: Metric::LogLikelihood,
                value: -1.0 / 3.0,
                rel_change: Some(1.0 / 7.0),
                status: CheckStatus::NoBest,
            },
            CheckRecord {
                iteration: 10,
                gamma: 1.0,
                metric: Metric::Kl,
                value: 0.1 + 0.2,
                rel_change: Some(f64::MIN_POSITIVE),
                status: CheckStatus::Capped,
            },
        ];
        for r in records {
            let parsed = CheckRecord::parse_log_line(&r.log_line()).unwrap();
            assert_records_equal(&r, &parsed);
        }
        assert!(CheckRecord::parse_log_line("1\t2\t3").is_err());
        assert!(CheckRecord::parse_log_line("1\t1.0\tbic\tx\t-\tcontinue").is_err());
        assert!(CheckRecord::parse_log_line("1\t1.0\tbic\t3.0\t-\twat").is_err());
    }

    fn assert_records_equal(a: &CheckRecord, b: &CheckRecord) {
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.gamma.to_bits(), b.gamma.to_bits(), "gamma drifted");
        assert_eq!(a.metric, b.metric);
        assert_eq!(a.value.to_bits(), b.value.to_bits(), "value drifted");
        match (a.rel_change, b.rel_change) {
            (None, None) => {}
            (Some(x), Some(y)) => assert_eq!(x.to_bits(), y.to_bits(), "rel_change drifted"),
            _ => panic!("rel_change presence mismatch"),
        }
        assert_eq!(a.status, b.status);
    }

    #[test]
    fn identical_window_reduces_to_single_sample_metrics() {
        let mut store = tiny_store();
        for it in 1..=4 {
            store.push(tiny_sample(it, 1.5, false, false, -7.0));
        }
        let wm = window_metrics(&store, 4).unwrap().unwrap();
        let s = store.recent(1).unwrap()[0].clone();
        let m_hat = s.p.dot(&s.e);
        assert_relative_eq!(
            wm.rmse,
            model::rmse(&store.data().values, &m_hat).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            wm.kl,
            model::kl_divergence(&store.data().values, &m_hat).unwrap(),
            max_relative = 1e-12
        );
        assert_eq!(wm.log_likelihood, -7.0);
        assert_eq!(wm.n, 4);
        assert_eq!(wm.n_used, 4);
    }

    #[test]
    fn two_sample_window_averages_per_sample_metrics() {
        let mut store = tiny_store();
        store.push(tiny_sample(1, 1.0, false, false, -2.0));
        store.push(tiny_sample(2, 1.0, false, false, -4.0));
        let wm = window_metrics(&store, 2).unwrap().unwrap();
        assert_eq!(wm.log_likelihood, -3.0);
        assert_eq!(wm.bic, 6.0);
        assert_eq!(wm.log_posterior, -4.0);
    }

    #[test]
    fn tempered_or_short_windows_are_skipped() {
        let mut store = tiny_store();
        store.push(tiny_sample(1, 1.0, false, false, -1.0));
        assert!(window_metrics(&store, 2).unwrap().is_none(), "window not full yet");
        store.push(tiny_sample(2, 1.0, true, false, -1.0));
        assert!(window_metrics(&store, 2).unwrap().is_none(), "tempered draw in window");
        store.push(tiny_sample(3, 1.0, false, false, -1.0));
        store.push(tiny_sample(4, 1.0, false, false, -1.0));
        assert!(window_metrics(&store, 2).unwrap().is_some());
        assert!(window_metrics(&store, 0).is_err());
    }

    // Replay oracle: rerun the window aggregation by hand from the stored
    // samples of a real (capped) run and compare every field.
    #[test]
    fn window_metrics_match_a_scripted_recomputation() {
        let m = toy_counts();
        let mut config = FitConfig::new(
            crate::sampler::SamplerKind::POISSON_GAMMA,
            RankMethod::Fixed(2),
        );
        config.seed = 11;
        config.controls = ConvergenceControls {
            window: 50,
            stride: 25,
            miniters: 10_000, // never checks; capped at 200 below
            maxiters: 200,
            ..ConvergenceControls::default()
        };
        let fit = run_chain(&m, &config).unwrap();
        assert_eq!(fit.store.len(), 200);
        let wm = window_metrics(&fit.store, 50).unwrap().unwrap();

        let tail: Vec<&StoredSample> = fit.store.recent(50).unwrap();
        // Modal inclusion vector by hand.
        let mut counts: HashMap<Vec<u8>, usize> = HashMap::new();
        for s in &tail {
            *counts.entry(s.a.clone()).or_insert(0) += 1;
        }
        let a_hat = counts.iter().max_by_key(|(_, c)| **c).unwrap().0.clone();
        // Normalized means over the matching samples.
        let matching: Vec<&&StoredSample> = tail.iter().filter(|s| s.a == a_hat).collect();
        let (k, g) = (m.k(), m.g());
        let n = a_hat.len();
        let mut p_mean = vec![vec![0.0; n]; k];
        let mut e_mean = vec![vec![0.0; g]; n];
        for s in &matching {
            for j in 0..n {
                let col_sum: f64 = (0..k).map(|i| s.p[(i, j)]).sum();
                for i in 0..k {
                    p_mean[i][j] += s.p[(i, j)] / col_sum / matching.len() as f64;
                }
                for c in 0..g {
                    e_mean[j][c] += s.e[(j, c)] * col_sum / matching.len() as f64;
                }
            }
        }
        // Reconstruction, RMSE, and KL from first principles.
        let mut se = 0.0;
        let mut kl = 0.0;
        for i in 0..k {
            for c in 0..g {
                let mut rec = 0.0;
                for j in 0..n {
                    if a_hat[j] == 1 {
                        rec += p_mean[i][j] * e_mean[j][c];
                    }
                }
                let x = m.values[(i, c)];
                se += (x - rec) * (x - rec);
                kl += if x == 0.0 { rec } else { x * (x / rec).ln() - x + rec };
            }
        }
        let rmse = (se / (k * g) as f64).sqrt();
        let mean_of = |f: fn(&SampleMetrics) -> f64| {
            tail.iter().map(|s| f(&s.metrics)).sum::<f64>() / tail.len() as f64
        };

        assert_eq!(wm.n, 50);
        assert_eq!(wm.n_used, matching.len());
        assert_relative_eq!(wm.rmse, rmse, max_relative = 1e-12);
        assert_relative_eq!(wm.kl, kl, max_relative = 1e-12);
        assert_relative_eq!(wm.log_likelihood, mean_of(|s| s.log_likelihood), max_relative = 1e-12);
        assert_relative_eq!(wm.bic, mean_of(|s| s.bic), max_relative = 1e-12);
        assert_relative_eq!(wm.log_posterior, mean_of(|s| s.log_posterior), max_relative = 1e-12);
    }

    #[test]
    fn forced_cap_yields_flagged_summary() {
        let m = toy_counts();
        let controls = ConvergenceControls {
            window: 30,
            stride: 10,
            miniters: 60,
            maxiters: 60,
            ..ConvergenceControls::default()
        };

        // Non-MH: every sample is inference-eligible, so a flagged summary
        // comes back despite the cap.
        let mut config =
            FitConfig::new(crate::sampler::SamplerKind::POISSON_EXP, RankMethod::Fixed(2));
        config.controls = controls;
        let fit = run_chain(&m, &config).unwrap();
        assert!(!fit.status.converged);
        assert_eq!(fit.status.reason, Some(StopReason::MaxIters));
        assert_eq!(fit.status.iterations, 60);
        assert!(fit.status.history.is_empty(), "first check would be at iteration 1000");
        let summary = fit.summary.expect("eligible samples exist");
        assert!(!summary.converged, "summary must be flagged non-converged");
        assert!(summary.n_used >= 1);

        // MH: everything before the switch is warm-up, so no summary at all.
        let mut config =
            FitConfig::new(crate::sampler::SamplerKind::POISSON_TN_MH, RankMethod::Fixed(2));
        config.controls = controls;
        let fit = run_chain(&m, &config).unwrap();
        assert!(!fit.status.converged);
        assert_eq!(fit.status.reason, Some(StopReason::MaxIters));
        assert!(fit.summary.is_none(), "warm-up samples must never reach inference");
        assert!(fit.switch_iteration.is_none());
    }

    #[test]
    fn gibbs_chain_converges_and_summarizes() {
        let m = toy_counts();
        let mut config =
            FitConfig::new(crate::sampler::SamplerKind::POISSON_GAMMA, RankMethod::Fixed(2));
        config.seed = 5;
        config.controls.maxiters = 20_000;
        let fit = run_chain(&m, &config).unwrap();

        assert!(fit.status.converged, "toy data should converge: {:?}", fit.status.reason);
        assert!(matches!(fit.status.reason, Some(StopReason::NoChange | StopReason::NoBest)));
        assert_eq!(fit.status.history.first().unwrap().iteration, 2000);
        assert_eq!(fit.store.metrics_log().len(), fit.status.iterations);

        let window = fit.store.inference_window();
        assert_eq!(window.len(), INFERENCE_SAMPLES);
        assert!(window.iter().all(|s| !s.tempered && !s.warmup));

        let summary = fit.summary.expect("converged runs summarize");
        assert!(summary.converged);
        assert!(summary.n_used >= 1);
        for col in summary.p_hat.columns() {
            assert_relative_eq!(col.sum(), 1.0, epsilon = 1e-9);
        }
        for ((lo, point), hi) in
            summary.p_lo.iter().zip(summary.p_hat.iter()).zip(summary.p_hi.iter())
        {
            assert!(lo <= point && point <= hi);
        }
        assert!(fit.kl_at_end.is_some());
        assert!(fit.switch_iteration.is_none(), "Gibbs chains have no MH switch");

        // The check log round-trips into the recorded history.
        assert_eq!(fit.log_lines.len(), fit.status.history.len());
        for (line, rec) in fit.log_lines.iter().zip(&fit.status.history) {
            let parsed = CheckRecord::parse_log_line(line).unwrap();
            assert_records_equal(rec, &parsed);
        }
    }

    #[test]
    fn mh_chain_switches_and_appends_exactly_2000() {
        let m = toy_counts();
        let mut config =
            FitConfig::new(crate::sampler::SamplerKind::POISSON_TN_MH, RankMethod::Fixed(2));
        config.seed = 17;
        config.controls.maxiters = 30_000;
        let fit = run_chain(&m, &config).unwrap();

        let s = fit.switch_iteration.expect("warm-up must converge on toy data");
        assert!(s >= 2000 && s % 100 == 0);
        assert!(fit.status.converged);
        assert_eq!(fit.status.iterations, s + POST_SWITCH_ITERS);
        assert!(fit.kl_at_switch.is_some());
        assert!(fit.kl_at_end.is_some());

        // Warm-up flag flips exactly at the switch.
        for sample in fit.store.samples() {
            assert_eq!(sample.warmup, sample.iteration <= s, "at {}", sample.iteration);
            assert!(!sample.tempered, "fixed-rank runs are never tempered");
        }

        // Inference uses the trailing 1000 of the 2000 true-MH sweeps.
        let window = fit.store.inference_window();
        assert_eq!(window.len(), INFERENCE_SAMPLES);
        assert_eq!(window.first().unwrap().iteration, s + 1001);
        assert_eq!(window.last().unwrap().iteration, s + 2000);

        // Acceptance accounting covers exactly the post-switch sweeps.
        let (k, n, g) = (m.k(), 2, m.g());
        assert_eq!(fit.mh_stats.propose_count_p, (POST_SWITCH_ITERS * k * n) as u64);
        assert_eq!(fit.mh_stats.propose_count_e, (POST_SWITCH_ITERS * n * g) as u64);
        assert!(fit.mh_stats.accept_count_p <= fit.mh_stats.propose_count_p);
        assert!(fit.mh_stats.accept_count_p > 0);
        // Warm-up sweeps report unit acceptance; true MH must reject sometimes.
        let warm_accept: Vec<f64> = fit
            .store
            .samples()
            .filter(|x| x.warmup)
            .map(|x| x.metrics.mean_accept)
            .collect();
        assert!(warm_accept.iter().all(|&a| a == 1.0));
        let post_accept_mean = fit.inference_accept_mean().unwrap();
        assert!(post_accept_mean > 0.0 && post_accept_mean < 1.0);

        // One switch line, then informational post-switch checks.
        let switches =
            fit.status.history.iter().filter(|r| r.status == CheckStatus::Switch).count();
        assert_eq!(switches, 1);
        let post = fit
            .status
            .history
            .iter()
            .filter(|r| r.status == CheckStatus::PostSwitch)
            .count();
        assert_eq!(post, POST_SWITCH_ITERS / 100);
        let summary = fit.summary.expect("converged MH run summarizes");
        assert!(summary.converged);
    }

    #[test]
    fn run_chain_rejects_min_bic_configs() {
        let m = toy_counts();
        let config = FitConfig::new(
            crate::sampler::SamplerKind::POISSON_GAMMA,
            RankMethod::MinBic { lo: 1, hi: 3 },
        );
        let err = run_chain(&m, &config).unwrap_err();
        assert!(err.to_string().contains("run_min_bic"));
    }
}
