//! Scalar numeric kernels used throughout inference and evaluation.
//!
//! Everything here is plain f64 and allocation-free. The guarded forms exist
//! because the model works with rates psi that range from ~1e-12 (near-empty
//! cells) to ~50 (saturated cells), and the naive expressions lose all
//! precision at one end or the other:
//!
//!   log(e^psi - 1)        -> `log_expm1`, stable at both ends
//!   theta / (1 - e^-theta) -> `ztp_mean`, series expansion near zero
//!
//! `digamma` and `ln_gamma` are evaluated by upward recurrence into the
//! asymptotic-series regime; both are accurate to ~1e-13 relative, which is
//! what the variational updates need (they exponentiate digamma values).

use crate::error::{Error, Result};
use rayon::prelude::*;

/// ln(2*pi)/2, used by the Stirling series.
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_74;

/// Digamma function psi(x) for x > 0.
///
/// Arguments below 6 are shifted up with psi(x) = psi(x+1) - 1/x, then the
/// Bernoulli asymptotic series is evaluated through the x^-14 term.
pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma requires a positive argument, got {x}");
    let mut shift = 0.0f64;
    let mut x = x;
    while x < 6.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // - sum_n B_{2n} / (2n x^{2n}), Horner in 1/x^2, through the x^-18 term
    // (truncation ~7e-15 at the shift boundary).
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2
                                                * (691.0 / 32760.0
                                                    - inv2
                                                        * (1.0 / 12.0
                                                            - inv2
                                                                * (3617.0 / 8160.0
                                                                    - inv2 * 43867.0
                                                                        / 14364.0))))))));
    shift + x.ln() - 0.5 * inv - series
}

/// Natural log of the gamma function for x > 0.
///
/// Same scheme as `digamma`: shift below 8 with ln G(x) = ln G(x+1) - ln x,
/// then the Stirling series through the x^-13 term.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma requires a positive argument, got {x}");
    let mut shift = 0.0f64;
    let mut x = x;
    while x < 8.0 {
        shift -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2
                                        * (1.0 / 1188.0
                                            - inv2
                                                * (691.0 / 360360.0
                                                    - inv2
                                                        * (1.0 / 156.0
                                                            - inv2 * 3617.0 / 122400.0)))))));
    shift + (x - 0.5) * x.ln() - x + HALF_LN_TWO_PI + series
}

/// log(e^psi - 1) for psi > 0, evaluated as psi + log(1 - e^-psi) in the
/// regime where cancellation would otherwise destroy it.
///
/// Relative error stays below 1e-12 across psi in [1e-12, 50]; by psi ~ 37
/// the result equals psi to machine precision.
pub fn log_expm1(psi: f64) -> Result<f64> {
    if !(psi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log(e^psi - 1) requires psi > 0, got {psi}"
        )));
    }
    if psi <= std::f64::consts::LN_2 {
        Ok(psi.exp_m1().ln())
    } else {
        Ok(psi + (-(-psi).exp()).ln_1p())
    }
}

/// Mean of a zero-truncated Poisson with rate theta: theta / (1 - e^-theta).
///
/// Below 1e-6 the closed form divides two near-zero quantities, so the
/// series 1 + theta/2 + theta^2/12 is used instead (error < 1e-26 there).
/// The limit at theta = 0 is 1.
#[inline]
pub fn ztp_mean(theta: f64) -> f64 {
    debug_assert!(theta >= 0.0, "ztp_mean requires theta >= 0, got {theta}");
    if theta < 1e-6 {
        1.0 + theta * 0.5 + theta * theta / 12.0
    } else {
        theta / -(-theta).exp_m1()
    }
}

/// Fixed chunk width for ordered parallel reductions.
const SUM_CHUNK: usize = 4096;

/// Sum f(0) + ... + f(n-1) with a fixed-chunk tree reduction: chunks of
/// `SUM_CHUNK` are summed left-to-right internally (possibly on different
/// threads) and the per-chunk partials are folded in chunk order. The result
/// is bit-identical for any thread count.
pub fn ordered_par_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    if n <= SUM_CHUNK {
        let mut acc = 0.0;
        for idx in 0..n {
            acc += f(idx);
        }
        return acc;
    }
    let n_chunks = n.div_ceil(SUM_CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * SUM_CHUNK;
            let hi = ((c + 1) * SUM_CHUNK).min(n);
            let mut acc = 0.0;
            for idx in lo..hi {
                acc += f(idx);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}
