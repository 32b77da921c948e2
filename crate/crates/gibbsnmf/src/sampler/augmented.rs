//! Conjugate updates for the Poisson samplers with latent count allocation.
//!
//! Each observed count splits multinomially across factors in proportion to
//! P_kn·A_nn·E_ng; the per-factor totals then make the Gamma and Exponential
//! priors conjugate, so P and E update by exact Gamma draws.

use crate::dist;
use crate::error::{Error, Result};
use crate::model::{AuxCounts, CountMatrix, ModelState, PriorParams};
use ndarray::Axis;
use rand::Rng;

fn require_aux(state: &ModelState) -> Result<&AuxCounts> {
    state
        .aux
        .as_ref()
        .ok_or_else(|| Error::Contract("latent counts are not allocated for this state".into()))
}

/// Allocate the count M_kg across factors. Returns the length-N allocation;
/// entries for excluded factors are zero unless every weight vanishes, in
/// which case the split is uniform over included factors (or all factors if
/// none are included) so the count is never dropped.
pub fn gibbs_update_z<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    g: usize,
    m: &CountMatrix,
    state: &ModelState,
) -> Vec<f64> {
    let nd = state.factors.n();
    let mut weights = vec![0.0; nd];
    for n in 0..nd {
        if state.inclusion.a[n] == 1 {
            weights[n] = state.factors.p[[k, n]] * state.factors.e[[n, g]];
        }
    }
    let mut out = vec![0.0; nd];
    draw_allocation(rng, m.values[[k, g]], &mut weights, &state.inclusion.a, &mut out);
    out
}

/// Multinomial draw of `total` over `weights` into `out`, with the
/// zero-weight fallback described on [`gibbs_update_z`]. `weights` is
/// scratch and may be overwritten.
fn draw_allocation<R: Rng + ?Sized>(
    rng: &mut R,
    total: f64,
    weights: &mut [f64],
    a: &[u8],
    out: &mut [f64],
) {
    let total = total.round() as u64;
    if total == 0 {
        out.fill(0.0);
        return;
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        let included = a.iter().filter(|&&x| x == 1).count();
        if included > 0 {
            for (w, &an) in weights.iter_mut().zip(a) {
                *w = f64::from(an);
            }
        } else {
            weights.fill(1.0);
        }
    }
    dist::sample_multinomial_into(rng, total, weights, out);
}

/// Refresh every latent allocation from the current factors.
pub(super) fn update_z_all<R: Rng + ?Sized>(
    m: &CountMatrix,
    state: &mut ModelState,
    rng: &mut R,
) -> Result<()> {
    let (kd, gd) = (m.k(), m.g());
    let nd = state.factors.n();
    let ModelState { factors, inclusion, aux, .. } = state;
    let aux = aux
        .as_mut()
        .ok_or_else(|| Error::Contract("latent counts are not allocated for this state".into()))?;
    let mv = m.values.as_slice().expect("standard layout");
    let pv = factors.p.as_slice().expect("standard layout");
    let ev = factors.e.as_slice().expect("standard layout");
    let zv = aux.z.as_slice_mut().expect("standard layout");
    let mut weights = vec![0.0; nd];
    let mut alloc = vec![0.0; nd];
    for k in 0..kd {
        let p_row = &pv[k * nd..][..nd];
        let m_row = &mv[k * gd..][..gd];
        for g in 0..gd {
            for n in 0..nd {
                weights[n] =
                    if inclusion.a[n] == 1 { p_row[n] * ev[n * gd + g] } else { 0.0 };
            }
            draw_allocation(rng, m_row[g], &mut weights, &inclusion.a, &mut alloc);
            // z is (K, N, G) in standard layout.
            let base = k * nd * gd + g;
            for n in 0..nd {
                zv[base + n * gd] = alloc[n];
            }
        }
    }
    Ok(())
}

/// Gamma shape/rate for one element from its latent-count total, pairing sum
/// `z_sum` with opposite-side coefficient total `coef_sum` masked by A.
fn posterior_pair(
    priors: &PriorParams,
    side_p: bool,
    i: usize,
    j: usize,
    z_sum: f64,
    coef_sum: f64,
    a: f64,
) -> Result<(f64, f64)> {
    match priors {
        PriorParams::Gamma { alpha_p, beta_p, alpha_e, beta_e } => {
            let (alpha, beta) = if side_p {
                (alpha_p[[i, j]], beta_p[[i, j]])
            } else {
                (alpha_e[[i, j]], beta_e[[i, j]])
            };
            Ok((alpha + z_sum, beta + a * coef_sum))
        }
        PriorParams::Exponential { lambda_p, lambda_e } => {
            let lambda = if side_p { lambda_p[[i, j]] } else { lambda_e[[i, j]] };
            Ok((1.0 + z_sum, lambda + a * coef_sum))
        }
        PriorParams::TruncNormal { .. } => Err(Error::Contract(
            "latent-count updates require a Gamma or Exponential prior".into(),
        )),
    }
}

/// Exact conjugate draw for P_kn. Returns the draw without mutating state.
pub fn gibbs_update_p_augmented<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    n: usize,
    state: &ModelState,
) -> Result<f64> {
    let aux = require_aux(state)?;
    let z_sum: f64 = aux.z.slice(ndarray::s![k, n, ..]).sum();
    let e_sum: f64 = state.factors.e.row(n).sum();
    let a = f64::from(state.inclusion.a[n]);
    let (shape, rate) = posterior_pair(&state.priors, true, k, n, z_sum, e_sum, a)?;
    Ok(dist::sample_gamma(rng, shape, rate))
}

/// Exact conjugate draw for E_ng. Returns the draw without mutating state.
pub fn gibbs_update_e_augmented<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    g: usize,
    state: &ModelState,
) -> Result<f64> {
    let aux = require_aux(state)?;
    let z_sum: f64 = aux.z.slice(ndarray::s![.., n, g]).sum();
    let p_sum: f64 = state.factors.p.column(n).sum();
    let a = f64::from(state.inclusion.a[n]);
    let (shape, rate) = posterior_pair(&state.priors, false, n, g, z_sum, p_sum, a)?;
    Ok(dist::sample_gamma(rng, shape, rate))
}

/// One full conjugate pass: P, then E, then the latent allocations, with the
/// reconstruction refreshed so later steps see current factors.
pub(super) fn sweep_augmented<R: Rng + ?Sized>(
    m: &CountMatrix,
    state: &mut ModelState,
    rng: &mut R,
) -> Result<()> {
    let (kd, gd) = (m.k(), m.g());
    let nd = state.factors.n();
    // Per-factor latent totals; the z tensor itself is untouched until the
    // refresh, so both sides read consistent allocations.
    let (zp_sum, ze_sum) = {
        let aux = require_aux(state)?;
        (aux.z.sum_axis(Axis(2)), aux.z.sum_axis(Axis(0)))
    };

    for n in 0..nd {
        let e_sum: f64 = state.factors.e.row(n).sum();
        let a = f64::from(state.inclusion.a[n]);
        for k in 0..kd {
            let (shape, rate) =
                posterior_pair(&state.priors, true, k, n, zp_sum[[k, n]], e_sum, a)?;
            state.factors.p[[k, n]] = dist::sample_gamma(rng, shape, rate);
        }
    }

    for n in 0..nd {
        let p_sum: f64 = state.factors.p.column(n).sum();
        let a = f64::from(state.inclusion.a[n]);
        for g in 0..gd {
            let (shape, rate) =
                posterior_pair(&state.priors, false, n, g, ze_sum[[n, g]], p_sum, a)?;
            state.factors.e[[n, g]] = dist::sample_gamma(rng, shape, rate);
        }
    }

    state.refresh_m_hat();
    update_z_all(m, state, rng)
}
