//! The cohomological equation `L_omega f = g` on zero-mean series.
//!
//! Mode by mode, `i (omega.k) f_k = g_k`, so `f_k = g_k / (i omega.k)` for
//! every `k != 0` and the mean of `f` is fixed to zero.

use num_complex::Complex64;
use statrs::function::gamma::gamma;

use crate::diophantine::FrequencyVector;
use crate::error::{KamError, Result};
use crate::series::FourierTaylorSeries;

/// `|omega.k|` below this fraction of `|omega|_inf` is a numerical resonance.
pub const DIVISOR_FLOOR: f64 = 1e-13;

/// Largest tolerated angular mean of the right-hand side, relative to its
/// largest coefficient.
pub const MEAN_TOLERANCE: f64 = 1e-12;

/// Unique zero-mean solution of `L_omega f = g`.
///
/// `omega` must carry a certificate whose scan depth covers the Fourier
/// cutoff of `g`. Means below `MEAN_TOLERANCE` are treated as rounding and
/// discarded.
pub fn solve(g: &FourierTaylorSeries, omega: &FrequencyVector) -> Result<FourierTaylorSeries> {
    if g.dim() != omega.dim() {
        return Err(KamError::DimensionMismatch {
            expected: omega.dim(),
            found: g.dim(),
        });
    }
    let depth = omega.certificate().map(|c| c.scan_depth).unwrap_or(0);
    if depth < g.fourier_cutoff() {
        return Err(KamError::InsufficientCertificate {
            depth,
            needed: g.fourier_cutoff(),
        });
    }
    let mean = g.average();
    let mean_size = mean.max_abs();
    if mean_size > MEAN_TOLERANCE * g.max_abs() {
        return Err(KamError::NonZeroMean {
            magnitude: mean_size,
        });
    }
    let floor = DIVISOR_FLOOR * omega.sup_norm();
    let mut terms = Vec::with_capacity(g.len());
    for mut term in g.terms() {
        if term.k.iter().all(|&k| k == 0) {
            continue;
        }
        let divisor = omega.dot(&term.k);
        if divisor.abs() < floor {
            return Err(KamError::Resonance {
                k: term.k,
                divisor: divisor.abs(),
            });
        }
        term.coeff /= Complex64::new(0.0, divisor);
        terms.push(term);
    }
    FourierTaylorSeries::from_terms(g.shape(), terms)
}

/// `I(tau, d) = int_{R^d} |x|^tau exp(-|x|) dx` with the sup norm, by radial
/// reduction: the sup-ball of radius `s` has volume `(2s)^d`, so
/// `I = d 2^d Gamma(tau + d)`.
pub fn lemma_integral(tau: f64, dim: usize) -> f64 {
    dim as f64 * 2f64.powi(dim as i32) * gamma(tau + dim as f64)
}

/// `I(tau, d) / (c delta^{tau + d})`, the constant bounding
/// `|f|_{Delta - delta} / |g|_Delta`.
pub fn lemma_bound(delta: f64, c: f64, tau: f64, dim: usize) -> Result<f64> {
    if !(delta > 0.0) || !(c > 0.0) || !tau.is_finite() || dim == 0 {
        return Err(KamError::InvalidArgument(format!(
            "lemma bound needs delta > 0, c > 0, finite tau, d >= 1 (got {delta}, {c}, {tau}, {dim})"
        )));
    }
    Ok(lemma_integral(tau, dim) / (c * delta.powf(tau + dim as f64)))
}
