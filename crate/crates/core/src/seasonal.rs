//! Seasonal extension: per-segment multiplicative adjustments on both sides
//! of the factorization.
//!
//! With days grouped into P segments by a periodicity map, the day-t rate of
//! cell (i, j) becomes
//!
//!   psi_ijt = sum_r alpha_ir gamma_{i,p(t),r} beta_jr delta_{j,p(t),r}
//!             + sum_{k,h} phi_kh x_ik y_jh
//!
//! where p(t) is day t's segment. Segment 1 is the reference: its
//! adjustments are pinned to exactly 1 so the base factors absorb the
//! overall scale and the remaining segments are interpretable as ratios.
//! The adjustments of segment p >= 2 carry their own gamma hierarchy,
//! gamma_ipr ~ Gamma(a, zeta_p) with zeta_p ~ Gamma(b, c), shared across
//! nodes and components within the segment.
//!
//! Inference is coordinate ascent on the same mean-field family as the
//! static model, extended with gamma proxies for every free adjustment and
//! per-segment rate proxies. Per observed (edge, day) there is one
//! zero-truncated Poisson proxy theta_ijt with a multinomial split chi_ijt;
//! its component weights multiply in the adjustment geometric means, with
//! the frozen segment contributing exp(log 1) = 1. Shape updates accumulate
//! edge weights over all days (base blocks) or the days of one segment
//! (adjustment blocks); rate updates group days by segment, e.g.
//!
//!   mu_ir^alpha = nu_i/xi_i
//!                 + sum_p m_p E[gamma_ipr] sum_j E[beta_jr] E[delta_jpr],
//!
//! with m_p the number of days in segment p, and the interaction block sees
//! every cell every day: mu_kh^phi = nu/xi + xtilde_k ytilde_h T. With one
//! day and one segment every update reduces bit-for-bit to the static
//! single-graph sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::cavi::{
    check_term, converge, gamma_draw, init_block, loading_block_term, log_geo_table,
    rate_proxy_term, split_rows, ztp_entropy_adjust, ElboTrace, FitOptions, SweepStats,
    THETA_UNDERFLOW,
};
use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, PeriodMap, TemporalGraphSequence};
use crate::math::{digamma, ordered_par_sum, ztp_mean};
use crate::model::{build_pair_table, link_probability, GammaGroup, Hyperparameters, PointParams};
use crate::rng::stream;

/// Multiplicative per-segment adjustments; segment 1 (index 0) is pinned
/// to 1 on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalAdjustments {
    pub n_users: usize,
    pub n_hosts: usize,
    /// Number of segments P.
    pub n_segments: usize,
    pub r: usize,
    /// |U| x P x R, row-major (i, p, r).
    pub user_gamma: Vec<f64>,
    /// |V| x P x R, row-major (j, p, r).
    pub host_delta: Vec<f64>,
}

impl SeasonalAdjustments {
    /// All adjustments 1: the seasonal model collapses to the static one.
    pub fn neutral(n_users: usize, n_hosts: usize, n_segments: usize, r: usize) -> Self {
        SeasonalAdjustments {
            n_users,
            n_hosts,
            n_segments,
            r,
            user_gamma: vec![1.0; n_users * n_segments * r],
            host_delta: vec![1.0; n_hosts * n_segments * r],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_segments < 1 {
            return Err(Error::InvalidArgument(
                "seasonal model needs at least one segment".into(),
            ));
        }
        if self.user_gamma.len() != self.n_users * self.n_segments * self.r
            || self.host_delta.len() != self.n_hosts * self.n_segments * self.r
        {
            return Err(Error::DimMismatch(
                "seasonal adjustment arrays do not match declared dimensions".into(),
            ));
        }
        for i in 0..self.n_users {
            for r in 0..self.r {
                if self.gamma_at(i, 1, r) != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "reference-segment user adjustment ({i}, {r}) must be 1"
                    )));
                }
            }
        }
        for j in 0..self.n_hosts {
            for r in 0..self.r {
                if self.delta_at(j, 1, r) != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "reference-segment host adjustment ({j}, {r}) must be 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Adjustment for user i, 1-based segment p, component r.
    #[inline]
    pub fn gamma_at(&self, i: usize, p: usize, r: usize) -> f64 {
        self.user_gamma[(i * self.n_segments + (p - 1)) * self.r + r]
    }

    #[inline]
    pub fn delta_at(&self, j: usize, p: usize, r: usize) -> f64 {
        self.host_delta[(j * self.n_segments + (p - 1)) * self.r + r]
    }

    #[inline]
    pub fn gamma_at_mut(&mut self, i: usize, p: usize, r: usize) -> &mut f64 {
        &mut self.user_gamma[(i * self.n_segments + (p - 1)) * self.r + r]
    }

    #[inline]
    pub fn delta_at_mut(&mut self, j: usize, p: usize, r: usize) -> &mut f64 {
        &mut self.host_delta[(j * self.n_segments + (p - 1)) * self.r + r]
    }
}

/// Day rate of cell (i, j) in 1-based segment `p`: latent products carry
/// both endpoint adjustments; covariate terms are season-free.
pub fn seasonal_psi(
    params: &PointParams,
    adjust: &SeasonalAdjustments,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    i: usize,
    j: usize,
    p: usize,
) -> f64 {
    let a = params.alpha_row(i);
    let b = params.beta_row(j);
    let mut acc = 0.0f64;
    for r in 0..params.r {
        acc += a[r] * adjust.gamma_at(i, p, r) * b[r] * adjust.delta_at(j, p, r);
    }
    for &k in user_covs.row(i) {
        for &h in host_covs.row(j) {
            acc += params.phi_at(k as usize, h as usize);
        }
    }
    acc
}

/// Plug-in link probability of cell (i, j) on 1-based day `t`: the day is
/// mapped to its segment and scored at the seasonal rate. Both period maps
/// are total over t >= 1, so the only rejected input is a day index of 0.
pub fn seasonal_score(
    params: &PointParams,
    adjust: &SeasonalAdjustments,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    period_map: &PeriodMap,
    i: usize,
    j: usize,
    t: usize,
) -> Result<f64> {
    if t < 1 {
        return Err(Error::InvalidArgument(
            "day indices are 1-based; got 0".into(),
        ));
    }
    let p = period_map.segment_of(t);
    Ok(link_probability(seasonal_psi(
        params, adjust, user_covs, host_covs, i, j, p,
    )))
}

/// Window scorer: the probability that a cell links on at least one day of
/// a fixed set of days, 1 - exp(-sum_t psi_ijt) under independent daily
/// counts. Days are grouped by segment so each distinct rate is evaluated
/// once.
pub struct SeasonalScorer<'a> {
    params: &'a PointParams,
    adjust: &'a SeasonalAdjustments,
    user_covs: &'a CovariateMatrix,
    host_covs: &'a CovariateMatrix,
    /// (segment, number of window days in it).
    segment_counts: Vec<(usize, f64)>,
}

impl<'a> SeasonalScorer<'a> {
    pub fn new(
        params: &'a PointParams,
        adjust: &'a SeasonalAdjustments,
        user_covs: &'a CovariateMatrix,
        host_covs: &'a CovariateMatrix,
        period_map: &PeriodMap,
        days: &[usize],
    ) -> Result<Self> {
        adjust.validate()?;
        if adjust.n_users != params.n_users
            || adjust.n_hosts != params.n_hosts
            || adjust.r != params.r
        {
            return Err(Error::DimMismatch(
                "seasonal adjustments do not match the point parameters".into(),
            ));
        }
        if days.is_empty() {
            return Err(Error::InvalidArgument(
                "a window scorer needs at least one day".into(),
            ));
        }
        if days.iter().any(|&t| t < 1) {
            return Err(Error::InvalidArgument(
                "day indices are 1-based; got 0".into(),
            ));
        }
        let mut counts = vec![0usize; period_map.n_segments()];
        for &t in days {
            counts[period_map.segment_of(t) - 1] += 1;
        }
        let segment_counts = counts
            .into_iter()
            .enumerate()
            .filter(|&(_, c)| c > 0)
            .map(|(p0, c)| (p0 + 1, c as f64))
            .collect();
        Ok(SeasonalScorer {
            params,
            adjust,
            user_covs,
            host_covs,
            segment_counts,
        })
    }
}

impl crate::eval::Scorer for SeasonalScorer<'_> {
    fn score(&self, i: usize, j: usize) -> f64 {
        let mut total = 0.0f64;
        for &(p, m) in &self.segment_counts {
            total += m
                * seasonal_psi(
                    self.params,
                    self.adjust,
                    self.user_covs,
                    self.host_covs,
                    i,
                    j,
                    p,
                );
        }
        link_probability(total)
    }
}

/// Gamma-hierarchy settings for the seasonal model: the static groups plus
/// one group each for the user- and host-side adjustments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalHyperparameters {
    pub base: Hyperparameters,
    pub gamma: GammaGroup,
    pub delta: GammaGroup,
}

impl Default for SeasonalHyperparameters {
    fn default() -> Self {
        SeasonalHyperparameters {
            base: Hyperparameters::default(),
            gamma: GammaGroup::default(),
            delta: GammaGroup::default(),
        }
    }
}

impl SeasonalHyperparameters {
    pub fn with_r(r: usize) -> Self {
        SeasonalHyperparameters {
            base: Hyperparameters::with_r(r),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.gamma.validate("gamma")?;
        self.delta.validate("delta")
    }
}

/// Per-day edge proxies: one zero-truncated Poisson rate and multinomial
/// split per observed edge of that day, plus the day's active-pair table.
#[derive(Debug, Clone, PartialEq)]
pub struct DayProxies {
    pub theta: Vec<f64>,
    pub edge_weight: Vec<f64>,
    /// nnz x R, row-major.
    pub chi_latent: Vec<f64>,
    pub chi_pair: Vec<f64>,
    pub pair_ptr: Vec<usize>,
    pub pair_idx: Vec<(u32, u32)>,
}

/// All variational parameters of the seasonal model. Adjustment blocks are
/// |nodes| x P x R row-major; the frozen reference slots (p = 1) hold
/// lambda = mu = 1 so their proxy mean is exactly 1, and every update and
/// expectation skips or substitutes constants for them.
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonalVariationalState {
    pub hyper: SeasonalHyperparameters,
    pub n_users: usize,
    pub n_hosts: usize,
    pub k: usize,
    pub h: usize,
    pub n_segments: usize,
    pub n_days: usize,
    /// Days in each segment (index p - 1).
    pub segment_days: Vec<usize>,
    /// Segment of each day (index t - 1, values 1-based).
    pub day_segment: Vec<usize>,
    pub lambda_alpha: Vec<f64>,
    pub mu_alpha: Vec<f64>,
    pub lambda_beta: Vec<f64>,
    pub mu_beta: Vec<f64>,
    pub lambda_phi: Vec<f64>,
    pub mu_phi: Vec<f64>,
    pub nu_alpha: f64,
    pub nu_beta: f64,
    pub nu_phi: f64,
    pub xi_alpha: Vec<f64>,
    pub xi_beta: Vec<f64>,
    pub xi_phi: f64,
    /// |U| x P x R user-adjustment proxies.
    pub lambda_gamma: Vec<f64>,
    pub mu_gamma: Vec<f64>,
    /// |V| x P x R host-adjustment proxies.
    pub lambda_delta: Vec<f64>,
    pub mu_delta: Vec<f64>,
    pub nu_gamma: f64,
    pub nu_delta: f64,
    /// Per-segment adjustment rate proxies; slot 0 belongs to the frozen
    /// segment and is never read.
    pub xi_gamma: Vec<f64>,
    pub xi_delta: Vec<f64>,
    pub days: Vec<DayProxies>,
    pub x_tilde: Vec<f64>,
    pub y_tilde: Vec<f64>,
}

/// Base offset of node `node`'s (1-based) segment-p adjustment row.
#[inline]
fn srow(node: usize, p: usize, n_segments: usize, r: usize) -> usize {
    (node * n_segments + (p - 1)) * r
}

/// E[log adjustment] table: 0 for frozen reference slots, Psi(lambda) -
/// log mu elsewhere (so the exp table holds exactly 1 for frozen slots).
fn adjustment_log_geo(
    lambda: &[f64],
    mu: &[f64],
    n_segments: usize,
    r: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; lambda.len()];
    out.par_chunks_mut(n_segments * r)
        .enumerate()
        .for_each(|(node, chunk)| {
            for p in 2..=n_segments {
                for t in 0..r {
                    let idx = (p - 1) * r + t;
                    let g = node * n_segments * r + idx;
                    chunk[idx] = digamma(lambda[g]) - mu[g].ln();
                }
            }
        });
    out
}

/// Prior-seeded seasonal state. Base blocks use the same streams as the
/// static initializer, so with one day and one segment the fit reproduces
/// the static fit exactly; adjustment blocks draw from their own hierarchy
/// on separate streams (a shared rate per segment, then per-node loadings).
pub fn init_seasonal_state(
    seq: &TemporalGraphSequence,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    hyper: &SeasonalHyperparameters,
    seed: u64,
) -> Result<SeasonalVariationalState> {
    hyper.validate()?;
    if user_covs.n_nodes() != seq.n_users() || host_covs.n_nodes() != seq.n_hosts() {
        return Err(Error::DimMismatch(format!(
            "covariate tables cover {} users / {} hosts but the sequence is {}x{}",
            user_covs.n_nodes(),
            host_covs.n_nodes(),
            seq.n_users(),
            seq.n_hosts()
        )));
    }
    let r = hyper.base.r;
    let (n_users, n_hosts) = (seq.n_users(), seq.n_hosts());
    let (k, h) = (user_covs.n_covariates(), host_covs.n_covariates());
    let pp = seq.period_map().n_segments();
    let n_days = seq.n_days();
    let day_segment: Vec<usize> = (1..=n_days)
        .map(|t| seq.period_map().segment_of(t))
        .collect();
    let mut segment_days = vec![0usize; pp];
    for &p in &day_segment {
        segment_days[p - 1] += 1;
    }

    let nu_alpha = hyper.base.alpha.rate_shape + r as f64 * hyper.base.alpha.shape;
    let nu_beta = hyper.base.beta.rate_shape + r as f64 * hyper.base.beta.shape;
    let nu_phi = hyper.base.phi.rate_shape + (k * h) as f64 * hyper.base.phi.shape;

    let (lambda_alpha, mu_alpha, xi_alpha) =
        init_block(n_users, r, &hyper.base.alpha, nu_alpha, seed, "init/alpha");
    let (lambda_beta, mu_beta, xi_beta) =
        init_block(n_hosts, r, &hyper.base.beta, nu_beta, seed, "init/beta");

    let (lambda_phi, mu_phi, xi_phi) = if k * h > 0 {
        let mut rng = stream(seed, "init/phi", 0);
        let zeta = gamma_draw(&mut rng, hyper.base.phi.rate_shape, hyper.base.phi.rate_rate);
        let xi = nu_phi / zeta;
        let mut lambda = vec![0.0; k * h];
        let mut mu = vec![0.0; k * h];
        for t in 0..k * h {
            let draw = gamma_draw(&mut rng, hyper.base.phi.shape, zeta);
            lambda[t] = hyper.base.phi.shape;
            mu[t] = hyper.base.phi.shape / draw;
        }
        (lambda, mu, xi)
    } else {
        (Vec::new(), Vec::new(), hyper.base.phi.rate_rate)
    };

    let nu_gamma = hyper.gamma.rate_shape + (n_users * r) as f64 * hyper.gamma.shape;
    let nu_delta = hyper.delta.rate_shape + (n_hosts * r) as f64 * hyper.delta.shape;
    let mut lambda_gamma = vec![1.0; n_users * pp * r];
    let mut mu_gamma = vec![1.0; n_users * pp * r];
    let mut lambda_delta = vec![1.0; n_hosts * pp * r];
    let mut mu_delta = vec![1.0; n_hosts * pp * r];
    let mut xi_gamma = vec![1.0; pp];
    let mut xi_delta = vec![1.0; pp];
    for p in 2..=pp {
        let mut rng = stream(seed, "init/gamma-rate", (p - 1) as u64);
        let zeta = gamma_draw(&mut rng, hyper.gamma.rate_shape, hyper.gamma.rate_rate);
        xi_gamma[p - 1] = nu_gamma / zeta;
        for i in 0..n_users {
            let mut rng = stream(seed, "init/gamma", ((p as u64) << 32) | i as u64);
            let row = srow(i, p, pp, r);
            for t in 0..r {
                let draw = gamma_draw(&mut rng, hyper.gamma.shape, zeta);
                lambda_gamma[row + t] = hyper.gamma.shape;
                mu_gamma[row + t] = hyper.gamma.shape / draw;
            }
        }
        let mut rng = stream(seed, "init/delta-rate", (p - 1) as u64);
        let zeta = gamma_draw(&mut rng, hyper.delta.rate_shape, hyper.delta.rate_rate);
        xi_delta[p - 1] = nu_delta / zeta;
        for j in 0..n_hosts {
            let mut rng = stream(seed, "init/delta", ((p as u64) << 32) | j as u64);
            let row = srow(j, p, pp, r);
            for t in 0..r {
                let draw = gamma_draw(&mut rng, hyper.delta.shape, zeta);
                lambda_delta[row + t] = hyper.delta.shape;
                mu_delta[row + t] = hyper.delta.shape / draw;
            }
        }
    }

    let days = seq
        .snapshots()
        .iter()
        .map(|g| {
            let (pair_ptr, pair_idx) = build_pair_table(g, user_covs, host_covs);
            DayProxies {
                theta: vec![0.0; g.nnz()],
                edge_weight: vec![0.0; g.nnz()],
                chi_latent: vec![0.0; g.nnz() * r],
                chi_pair: vec![0.0; pair_idx.len()],
                pair_ptr,
                pair_idx,
            }
        })
        .collect();

    Ok(SeasonalVariationalState {
        hyper: hyper.clone(),
        n_users,
        n_hosts,
        k,
        h,
        n_segments: pp,
        n_days,
        segment_days,
        day_segment,
        lambda_alpha,
        mu_alpha,
        lambda_beta,
        mu_beta,
        lambda_phi,
        mu_phi,
        nu_alpha,
        nu_beta,
        nu_phi,
        xi_alpha,
        xi_beta,
        xi_phi,
        lambda_gamma,
        mu_gamma,
        lambda_delta,
        mu_delta,
        nu_gamma,
        nu_delta,
        xi_gamma,
        xi_delta,
        days,
        x_tilde: user_covs.column_sums().iter().map(|&s| s as f64).collect(),
        y_tilde: host_covs.column_sums().iter().map(|&s| s as f64).collect(),
    })
}

impl SeasonalVariationalState {
    pub fn r(&self) -> usize {
        self.hyper.base.r
    }

    fn check_sequence(&self, seq: &TemporalGraphSequence) -> Result<()> {
        if seq.n_users() != self.n_users
            || seq.n_hosts() != self.n_hosts
            || seq.n_days() != self.n_days
            || seq.period_map().n_segments() != self.n_segments
        {
            return Err(Error::DimMismatch(format!(
                "state built for a {}x{} sequence of {} days / {} segments, \
                 got {}x{} with {} days / {} segments",
                self.n_users,
                self.n_hosts,
                self.n_days,
                self.n_segments,
                seq.n_users(),
                seq.n_hosts(),
                seq.n_days(),
                seq.period_map().n_segments()
            )));
        }
        for (d, day) in self.days.iter().enumerate() {
            if seq.day(d + 1).nnz() != day.theta.len()
                || seq.period_map().segment_of(d + 1) != self.day_segment[d]
            {
                return Err(Error::DimMismatch(format!(
                    "day {} of the sequence does not match the state",
                    d + 1
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds the per-day structures (pair tables, zeroed proxies,
    /// covariate totals) for a state whose parameter blocks came from a
    /// checkpoint. One `update_theta_chi` afterwards restores the proxies.
    pub fn rebuild_day_structures(
        &mut self,
        seq: &TemporalGraphSequence,
        user_covs: &CovariateMatrix,
        host_covs: &CovariateMatrix,
    ) -> Result<()> {
        if seq.n_users() != self.n_users
            || seq.n_hosts() != self.n_hosts
            || user_covs.n_covariates() != self.k
            || host_covs.n_covariates() != self.h
            || seq.period_map().n_segments() != self.n_segments
        {
            return Err(Error::DimMismatch(
                "checkpointed state does not match the sequence/covariates".into(),
            ));
        }
        self.n_days = seq.n_days();
        self.day_segment = (1..=self.n_days)
            .map(|t| seq.period_map().segment_of(t))
            .collect();
        self.segment_days = vec![0; self.n_segments];
        for &p in &self.day_segment {
            self.segment_days[p - 1] += 1;
        }
        let r = self.r();
        self.days = seq
            .snapshots()
            .iter()
            .map(|g| {
                let (pair_ptr, pair_idx) = build_pair_table(g, user_covs, host_covs);
                DayProxies {
                    theta: vec![0.0; g.nnz()],
                    edge_weight: vec![0.0; g.nnz()],
                    chi_latent: vec![0.0; g.nnz() * r],
                    chi_pair: vec![0.0; pair_idx.len()],
                    pair_ptr,
                    pair_idx,
                }
            })
            .collect();
        self.x_tilde = user_covs.column_sums().iter().map(|&s| s as f64).collect();
        self.y_tilde = host_covs.column_sums().iter().map(|&s| s as f64).collect();
        Ok(())
    }

    /// Sweep phase 1: refresh every day's edge proxies. The latent component
    /// terms multiply the four geometric means (base pair plus day-segment
    /// adjustments); covariate terms are day-free.
    pub fn update_theta_chi(
        &mut self,
        seq: &TemporalGraphSequence,
        stats: &mut SweepStats,
    ) -> Result<()> {
        self.check_sequence(seq)?;
        let r = self.r();
        let pp = self.n_segments;
        let lg_alpha = log_geo_table(&self.lambda_alpha, &self.mu_alpha);
        let lg_beta = log_geo_table(&self.lambda_beta, &self.mu_beta);
        let lg_phi = log_geo_table(&self.lambda_phi, &self.mu_phi);
        let lg_gamma = adjustment_log_geo(&self.lambda_gamma, &self.mu_gamma, pp, r);
        let lg_delta = adjustment_log_geo(&self.lambda_delta, &self.mu_delta, pp, r);
        let g_alpha: Vec<f64> = lg_alpha.iter().map(|&v| v.exp()).collect();
        let g_beta: Vec<f64> = lg_beta.iter().map(|&v| v.exp()).collect();
        let g_phi: Vec<f64> = lg_phi.iter().map(|&v| v.exp()).collect();
        let g_gamma: Vec<f64> = lg_gamma.iter().map(|&v| v.exp()).collect();
        let g_delta: Vec<f64> = lg_delta.iter().map(|&v| v.exp()).collect();

        let n_users = self.n_users;
        let h = self.h;
        for (d, day) in self.days.iter_mut().enumerate() {
            let graph = seq.day(d + 1);
            let p = self.day_segment[d];
            let DayProxies {
                theta,
                edge_weight,
                chi_latent,
                chi_pair,
                pair_ptr,
                pair_idx,
            } = day;
            let row_sizes: Vec<usize> =
                (0..n_users).map(|i| graph.row_range(i).len()).collect();
            let theta_rows = split_rows(theta, row_sizes.iter().copied());
            let weight_rows = split_rows(edge_weight, row_sizes.iter().copied());
            let chil_rows = split_rows(chi_latent, row_sizes.iter().map(|&s| s * r));
            let pair_sizes: Vec<usize> = (0..n_users)
                .map(|i| {
                    let rng = graph.row_range(i);
                    pair_ptr[rng.end] - pair_ptr[rng.start]
                })
                .collect();
            let chip_rows = split_rows(chi_pair, pair_sizes.iter().copied());

            let rows: Vec<_> = theta_rows
                .into_iter()
                .zip(weight_rows)
                .zip(chil_rows)
                .zip(chip_rows)
                .enumerate()
                .map(|(i, (((t, w), cl), cp))| (i, t, w, cl, cp))
                .collect();

            let pair_ptr = &*pair_ptr;
            let pair_idx = &*pair_idx;
            let outcomes: Vec<(u64, Option<(u32, u32)>)> = rows
                .into_par_iter()
                .map(|(i, theta_row, weight_row, chil_row, chip_row)| {
                    let mut guards = 0u64;
                    let edge_range = graph.row_range(i);
                    let row_edges = graph.row_edges(i);
                    let pair_base = pair_ptr[edge_range.start];
                    let jg = &g_gamma[srow(i, p, pp, r)..][..r];
                    let lgg = &lg_gamma[srow(i, p, pp, r)..][..r];
                    for (local, &(ei, j)) in row_edges.iter().enumerate() {
                        debug_assert_eq!(ei as usize, i);
                        let e = edge_range.start + local;
                        let chi = &mut chil_row[local * r..(local + 1) * r];
                        let ja = &g_alpha[i * r..(i + 1) * r];
                        let jb = &g_beta[j as usize * r..(j as usize + 1) * r];
                        let jd = &g_delta[srow(j as usize, p, pp, r)..][..r];
                        let mut total = 0.0f64;
                        for t in 0..r {
                            let v = ja[t] * jb[t] * jg[t] * jd[t];
                            chi[t] = v;
                            total += v;
                        }
                        let ps = pair_ptr[e] - pair_base;
                        let pe = pair_ptr[e + 1] - pair_base;
                        for q in ps..pe {
                            let (kk, hh) = pair_idx[pair_base + q];
                            let v = g_phi[kk as usize * h + hh as usize];
                            chip_row[q] = v;
                            total += v;
                        }
                        if !total.is_finite() {
                            return (guards, Some((i as u32, j)));
                        }
                        if total >= THETA_UNDERFLOW {
                            let inv = 1.0 / total;
                            for t in 0..r {
                                chi[t] *= inv;
                            }
                            for q in ps..pe {
                                chip_row[q] *= inv;
                            }
                            theta_row[local] = total;
                        } else {
                            guards += 1;
                            let la = &lg_alpha[i * r..(i + 1) * r];
                            let lb = &lg_beta[j as usize * r..(j as usize + 1) * r];
                            let lgd = &lg_delta[srow(j as usize, p, pp, r)..][..r];
                            let mut logs = Vec::with_capacity(r + (pe - ps));
                            for t in 0..r {
                                logs.push(la[t] + lb[t] + lgg[t] + lgd[t]);
                            }
                            for q in ps..pe {
                                let (kk, hh) = pair_idx[pair_base + q];
                                logs.push(lg_phi[kk as usize * h + hh as usize]);
                            }
                            let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let mut z = 0.0;
                            for l in &mut logs {
                                *l = (*l - m).exp();
                                z += *l;
                            }
                            for t in 0..r {
                                chi[t] = logs[t] / z;
                            }
                            for q in ps..pe {
                                chip_row[q] = logs[r + q - ps] / z;
                            }
                            theta_row[local] = (m + z.ln()).exp().max(f64::MIN_POSITIVE);
                        }
                        weight_row[local] = ztp_mean(theta_row[local]);
                    }
                    (guards, None)
                })
                .collect();

            for (g, overflow) in outcomes {
                stats.underflow_guards += g;
                if let Some((i, j)) = overflow {
                    return Err(Error::RateOverflow {
                        i: i as usize,
                        j: j as usize,
                    });
                }
            }
            stats.theta_chi_edge_visits += graph.nnz() as u64;
        }
        Ok(())
    }

    /// Host totals sum_j E[beta_jr] E[delta_jpr] per (segment, component).
    fn host_segment_totals(&self) -> Vec<f64> {
        let r = self.r();
        let pp = self.n_segments;
        let mut s_bd = vec![0.0f64; pp * r];
        for p in 1..=pp {
            for j in 0..self.n_hosts {
                let row = srow(j, p, pp, r);
                for t in 0..r {
                    s_bd[(p - 1) * r + t] += self.lambda_beta[j * r + t]
                        / self.mu_beta[j * r + t]
                        * (self.lambda_delta[row + t] / self.mu_delta[row + t]);
                }
            }
        }
        s_bd
    }

    /// User totals sum_i E[alpha_ir] E[gamma_ipr] per (segment, component).
    fn user_segment_totals(&self) -> Vec<f64> {
        let r = self.r();
        let pp = self.n_segments;
        let mut s_ag = vec![0.0f64; pp * r];
        for p in 1..=pp {
            for i in 0..self.n_users {
                let row = srow(i, p, pp, r);
                for t in 0..r {
                    s_ag[(p - 1) * r + t] += self.lambda_alpha[i * r + t]
                        / self.mu_alpha[i * r + t]
                        * (self.lambda_gamma[row + t] / self.mu_gamma[row + t]);
                }
            }
        }
        s_ag
    }

    /// Sweep phase 2: base user block, base host block, user adjustments,
    /// host adjustments, then the interaction block — each against the
    /// freshest values of the others.
    pub fn update_first_level(
        &mut self,
        seq: &TemporalGraphSequence,
        stats: &mut SweepStats,
    ) -> Result<()> {
        self.check_sequence(seq)?;
        let r = self.r();
        let pp = self.n_segments;
        let visits = AtomicU64::new(0);

        // Base user block: shapes accumulate over every day; rates group
        // days by segment.
        let s_bd = self.host_segment_totals();
        let a_alpha = self.hyper.base.alpha.shape;
        {
            let days = &self.days;
            let nu = self.nu_alpha;
            let xi = &self.xi_alpha;
            let lambda_gamma = &self.lambda_gamma;
            let mu_gamma = &self.mu_gamma;
            let segment_days = &self.segment_days;
            let s_bd = &s_bd;
            self.lambda_alpha
                .par_chunks_mut(r)
                .zip(self.mu_alpha.par_chunks_mut(r))
                .enumerate()
                .for_each(|(i, (lrow, mrow))| {
                    for t in 0..r {
                        lrow[t] = a_alpha;
                    }
                    let mut count = 0u64;
                    for (d, day) in days.iter().enumerate() {
                        let range = seq.day(d + 1).row_range(i);
                        for e in range.clone() {
                            let we = day.edge_weight[e];
                            let crow = &day.chi_latent[e * r..(e + 1) * r];
                            for t in 0..r {
                                lrow[t] += crow[t] * we;
                            }
                        }
                        count += range.len() as u64;
                    }
                    let base = nu / xi[i];
                    for t in 0..r {
                        let mut tot = 0.0f64;
                        for p in 1..=pp {
                            let g_mean = lambda_gamma[srow(i, p, pp, r) + t]
                                / mu_gamma[srow(i, p, pp, r) + t];
                            tot += segment_days[p - 1] as f64
                                * g_mean
                                * s_bd[(p - 1) * r + t];
                        }
                        mrow[t] = base + tot;
                    }
                    visits.fetch_add(count, Ordering::Relaxed);
                });
        }
        stats.alpha_edge_visits += visits.swap(0, Ordering::Relaxed);

        // Base host block against the fresh user block.
        let s_ag = self.user_segment_totals();
        let a_beta = self.hyper.base.beta.shape;
        {
            let days = &self.days;
            let nu = self.nu_beta;
            let xi = &self.xi_beta;
            let lambda_delta = &self.lambda_delta;
            let mu_delta = &self.mu_delta;
            let segment_days = &self.segment_days;
            let s_ag = &s_ag;
            self.lambda_beta
                .par_chunks_mut(r)
                .zip(self.mu_beta.par_chunks_mut(r))
                .enumerate()
                .for_each(|(j, (lrow, mrow))| {
                    for t in 0..r {
                        lrow[t] = a_beta;
                    }
                    let mut count = 0u64;
                    for (d, day) in days.iter().enumerate() {
                        let ids = seq.day(d + 1).col_edge_ids(j);
                        for &eid in ids {
                            let e = eid as usize;
                            let we = day.edge_weight[e];
                            let crow = &day.chi_latent[e * r..(e + 1) * r];
                            for t in 0..r {
                                lrow[t] += crow[t] * we;
                            }
                        }
                        count += ids.len() as u64;
                    }
                    let base = nu / xi[j];
                    for t in 0..r {
                        let mut tot = 0.0f64;
                        for p in 1..=pp {
                            let d_mean = lambda_delta[srow(j, p, pp, r) + t]
                                / mu_delta[srow(j, p, pp, r) + t];
                            tot += segment_days[p - 1] as f64
                                * d_mean
                                * s_ag[(p - 1) * r + t];
                        }
                        mrow[t] = base + tot;
                    }
                    visits.fetch_add(count, Ordering::Relaxed);
                });
        }
        stats.beta_edge_visits += visits.swap(0, Ordering::Relaxed);

        // User adjustments: each free segment's shape gathers the edge
        // weights of its own days; the frozen segment's days are untouched.
        let s_bd = self.host_segment_totals();
        let a_gamma = self.hyper.gamma.shape;
        {
            let days = &self.days;
            let day_segment = &self.day_segment;
            let nu = self.nu_gamma;
            let xi_gamma = &self.xi_gamma;
            let lambda_alpha = &self.lambda_alpha;
            let mu_alpha = &self.mu_alpha;
            let segment_days = &self.segment_days;
            let s_bd = &s_bd;
            self.lambda_gamma
                .par_chunks_mut(pp * r)
                .zip(self.mu_gamma.par_chunks_mut(pp * r))
                .enumerate()
                .for_each(|(i, (lrow, mrow))| {
                    for p in 2..=pp {
                        for t in 0..r {
                            lrow[(p - 1) * r + t] = a_gamma;
                        }
                    }
                    let mut count = 0u64;
                    for (d, day) in days.iter().enumerate() {
                        let p = day_segment[d];
                        if p == 1 {
                            continue;
                        }
                        let range = seq.day(d + 1).row_range(i);
                        for e in range.clone() {
                            let we = day.edge_weight[e];
                            let crow = &day.chi_latent[e * r..(e + 1) * r];
                            for t in 0..r {
                                lrow[(p - 1) * r + t] += crow[t] * we;
                            }
                        }
                        count += range.len() as u64;
                    }
                    for p in 2..=pp {
                        let base = nu / xi_gamma[p - 1];
                        for t in 0..r {
                            mrow[(p - 1) * r + t] = base
                                + lambda_alpha[i * r + t] / mu_alpha[i * r + t]
                                    * (segment_days[p - 1] as f64)
                                    * s_bd[(p - 1) * r + t];
                        }
                    }
                    visits.fetch_add(count, Ordering::Relaxed);
                });
        }
        stats.gamma_edge_visits += visits.swap(0, Ordering::Relaxed);

        // Host adjustments against the fresh user adjustments.
        let s_ag = self.user_segment_totals();
        let a_delta = self.hyper.delta.shape;
        {
            let days = &self.days;
            let day_segment = &self.day_segment;
            let nu = self.nu_delta;
            let xi_delta = &self.xi_delta;
            let lambda_beta = &self.lambda_beta;
            let mu_beta = &self.mu_beta;
            let segment_days = &self.segment_days;
            let s_ag = &s_ag;
            self.lambda_delta
                .par_chunks_mut(pp * r)
                .zip(self.mu_delta.par_chunks_mut(pp * r))
                .enumerate()
                .for_each(|(j, (lrow, mrow))| {
                    for p in 2..=pp {
                        for t in 0..r {
                            lrow[(p - 1) * r + t] = a_delta;
                        }
                    }
                    let mut count = 0u64;
                    for (d, day) in days.iter().enumerate() {
                        let p = day_segment[d];
                        if p == 1 {
                            continue;
                        }
                        let ids = seq.day(d + 1).col_edge_ids(j);
                        for &eid in ids {
                            let e = eid as usize;
                            let we = day.edge_weight[e];
                            let crow = &day.chi_latent[e * r..(e + 1) * r];
                            for t in 0..r {
                                lrow[(p - 1) * r + t] += crow[t] * we;
                            }
                        }
                        count += ids.len() as u64;
                    }
                    for p in 2..=pp {
                        let base = nu / xi_delta[p - 1];
                        for t in 0..r {
                            mrow[(p - 1) * r + t] = base
                                + lambda_beta[j * r + t] / mu_beta[j * r + t]
                                    * (segment_days[p - 1] as f64)
                                    * s_ag[(p - 1) * r + t];
                        }
                    }
                    visits.fetch_add(count, Ordering::Relaxed);
                });
        }
        stats.delta_edge_visits += visits.swap(0, Ordering::Relaxed);

        // Interaction block: season-free, so shapes pool every day and the
        // rate sees each covariate cell once per day.
        if self.k * self.h > 0 {
            let a_phi = self.hyper.base.phi.shape;
            for v in self.lambda_phi.iter_mut() {
                *v = a_phi;
            }
            let mut nnz_total = 0u64;
            for day in &self.days {
                for e in 0..day.theta.len() {
                    let we = day.edge_weight[e];
                    for q in day.pair_ptr[e]..day.pair_ptr[e + 1] {
                        let (kk, hh) = day.pair_idx[q];
                        self.lambda_phi[kk as usize * self.h + hh as usize] +=
                            day.chi_pair[q] * we;
                    }
                }
                nnz_total += day.theta.len() as u64;
            }
            let base = self.nu_phi / self.xi_phi;
            let t_days = self.n_days as f64;
            for kk in 0..self.k {
                for hh in 0..self.h {
                    self.mu_phi[kk * self.h + hh] =
                        base + self.x_tilde[kk] * self.y_tilde[hh] * t_days;
                }
            }
            stats.phi_edge_visits += nnz_total;
        }
        Ok(())
    }

    /// Sweep phase 3: rate-proxy updates. Base blocks as in the static
    /// model; each free segment's adjustment rate accumulates that
    /// segment's proxy means over all nodes and components.
    pub fn update_second_level(&mut self) {
        let r = self.r();
        let pp = self.n_segments;
        let c_alpha = self.hyper.base.alpha.rate_rate;
        for i in 0..self.n_users {
            let mut s = 0.0;
            for t in 0..r {
                s += self.lambda_alpha[i * r + t] / self.mu_alpha[i * r + t];
            }
            self.xi_alpha[i] = c_alpha + s;
        }
        let c_beta = self.hyper.base.beta.rate_rate;
        for j in 0..self.n_hosts {
            let mut s = 0.0;
            for t in 0..r {
                s += self.lambda_beta[j * r + t] / self.mu_beta[j * r + t];
            }
            self.xi_beta[j] = c_beta + s;
        }
        if self.k * self.h > 0 {
            let mut s = 0.0;
            for t in 0..self.k * self.h {
                s += self.lambda_phi[t] / self.mu_phi[t];
            }
            self.xi_phi = self.hyper.base.phi.rate_rate + s;
        }
        for p in 2..=pp {
            let mut s = 0.0;
            for i in 0..self.n_users {
                let row = srow(i, p, pp, r);
                for t in 0..r {
                    s += self.lambda_gamma[row + t] / self.mu_gamma[row + t];
                }
            }
            self.xi_gamma[p - 1] = self.hyper.gamma.rate_rate + s;
            let mut s = 0.0;
            for j in 0..self.n_hosts {
                let row = srow(j, p, pp, r);
                for t in 0..r {
                    s += self.lambda_delta[row + t] / self.mu_delta[row + t];
                }
            }
            self.xi_delta[p - 1] = self.hyper.delta.rate_rate + s;
        }
    }

    /// Evidence lower bound of the current state.
    pub fn compute_elbo(&self, seq: &TemporalGraphSequence) -> Result<f64> {
        self.check_sequence(seq)?;
        let r = self.r();
        let pp = self.n_segments;
        let lg_alpha = log_geo_table(&self.lambda_alpha, &self.mu_alpha);
        let lg_beta = log_geo_table(&self.lambda_beta, &self.mu_beta);
        let lg_phi = log_geo_table(&self.lambda_phi, &self.mu_phi);
        let lg_gamma = adjustment_log_geo(&self.lambda_gamma, &self.mu_gamma, pp, r);
        let lg_delta = adjustment_log_geo(&self.lambda_delta, &self.mu_delta, pp, r);

        let h = self.h;
        let mut edge_term = 0.0f64;
        for (d, day) in self.days.iter().enumerate() {
            let graph = seq.day(d + 1);
            let p = self.day_segment[d];
            let edges = graph.edges();
            edge_term += ordered_par_sum(graph.nnz(), |e| {
                let (i, j) = edges[e];
                let (i, j) = (i as usize, j as usize);
                let theta = day.theta[e];
                let m = day.edge_weight[e];
                let mut cross = 0.0f64;
                let crow = &day.chi_latent[e * r..(e + 1) * r];
                for t in 0..r {
                    let c = crow[t];
                    if c > 0.0 {
                        cross += c
                            * (lg_alpha[i * r + t]
                                + lg_beta[j * r + t]
                                + lg_gamma[srow(i, p, pp, r) + t]
                                + lg_delta[srow(j, p, pp, r) + t]
                                - c.ln());
                    }
                }
                for q in day.pair_ptr[e]..day.pair_ptr[e + 1] {
                    let c = day.chi_pair[q];
                    if c > 0.0 {
                        let (kk, hh) = day.pair_idx[q];
                        cross += c * (lg_phi[kk as usize * h + hh as usize] - c.ln());
                    }
                }
                m * cross - ztp_entropy_adjust(theta, m)
            });
        }
        check_term("edge", edge_term)?;

        // Expected total rate over every cell and day, grouped by segment.
        let mut rate_mass = 0.0f64;
        for p in 1..=pp {
            let m_p = self.segment_days[p - 1] as f64;
            for t in 0..r {
                let mut sa = 0.0;
                for i in 0..self.n_users {
                    sa += self.lambda_alpha[i * r + t] / self.mu_alpha[i * r + t]
                        * (self.lambda_gamma[srow(i, p, pp, r) + t]
                            / self.mu_gamma[srow(i, p, pp, r) + t]);
                }
                let mut sb = 0.0;
                for j in 0..self.n_hosts {
                    sb += self.lambda_beta[j * r + t] / self.mu_beta[j * r + t]
                        * (self.lambda_delta[srow(j, p, pp, r) + t]
                            / self.mu_delta[srow(j, p, pp, r) + t]);
                }
                rate_mass += m_p * (sa * sb);
            }
        }
        let t_days = self.n_days as f64;
        for kk in 0..self.k {
            for hh in 0..self.h {
                rate_mass += self.lambda_phi[kk * self.h + hh]
                    / self.mu_phi[kk * self.h + hh]
                    * self.x_tilde[kk]
                    * self.y_tilde[hh]
                    * t_days;
            }
        }
        check_term("rate-mass", rate_mass)?;

        let user_loadings = loading_block_term(
            &self.lambda_alpha,
            &self.mu_alpha,
            &lg_alpha,
            self.hyper.base.alpha.shape,
            self.nu_alpha,
            &self.xi_alpha,
            r,
        );
        check_term("user-loadings", user_loadings)?;
        let host_loadings = loading_block_term(
            &self.lambda_beta,
            &self.mu_beta,
            &lg_beta,
            self.hyper.base.beta.shape,
            self.nu_beta,
            &self.xi_beta,
            r,
        );
        check_term("host-loadings", host_loadings)?;
        let interaction_loadings = if self.k * self.h > 0 {
            let xi = [self.xi_phi];
            let v = loading_block_term(
                &self.lambda_phi,
                &self.mu_phi,
                &lg_phi,
                self.hyper.base.phi.shape,
                self.nu_phi,
                &xi,
                self.k * self.h,
            );
            check_term("interaction-loadings", v)?;
            v
        } else {
            0.0
        };

        let mut user_rates = 0.0;
        for i in 0..self.n_users {
            user_rates += rate_proxy_term(
                self.hyper.base.alpha.rate_shape,
                self.hyper.base.alpha.rate_rate,
                self.nu_alpha,
                self.xi_alpha[i],
            );
        }
        check_term("user-rates", user_rates)?;
        let mut host_rates = 0.0;
        for j in 0..self.n_hosts {
            host_rates += rate_proxy_term(
                self.hyper.base.beta.rate_shape,
                self.hyper.base.beta.rate_rate,
                self.nu_beta,
                self.xi_beta[j],
            );
        }
        check_term("host-rates", host_rates)?;
        let interaction_rate = if self.k * self.h > 0 {
            let v = rate_proxy_term(
                self.hyper.base.phi.rate_shape,
                self.hyper.base.phi.rate_rate,
                self.nu_phi,
                self.xi_phi,
            );
            check_term("interaction-rate", v)?;
            v
        } else {
            0.0
        };

        let user_adjustments = self.adjustment_block_term(
            &self.lambda_gamma,
            &self.mu_gamma,
            &lg_gamma,
            self.hyper.gamma.shape,
            self.nu_gamma,
            &self.xi_gamma,
            self.n_users,
        );
        check_term("user-adjustments", user_adjustments)?;
        let host_adjustments = self.adjustment_block_term(
            &self.lambda_delta,
            &self.mu_delta,
            &lg_delta,
            self.hyper.delta.shape,
            self.nu_delta,
            &self.xi_delta,
            self.n_hosts,
        );
        check_term("host-adjustments", host_adjustments)?;
        let mut adjustment_rates = 0.0;
        for p in 2..=pp {
            adjustment_rates += rate_proxy_term(
                self.hyper.gamma.rate_shape,
                self.hyper.gamma.rate_rate,
                self.nu_gamma,
                self.xi_gamma[p - 1],
            );
            adjustment_rates += rate_proxy_term(
                self.hyper.delta.rate_shape,
                self.hyper.delta.rate_rate,
                self.nu_delta,
                self.xi_delta[p - 1],
            );
        }
        check_term("adjustment-rates", adjustment_rates)?;

        Ok(edge_term - rate_mass
            + user_loadings
            + host_loadings
            + interaction_loadings
            + user_rates
            + host_rates
            + interaction_rate
            + user_adjustments
            + host_adjustments
            + adjustment_rates)
    }

    /// Prior-minus-proxy cross-entropy over one adjustment block's free
    /// segments; the frozen segment's point mass contributes nothing.
    fn adjustment_block_term(
        &self,
        lambda: &[f64],
        mu: &[f64],
        lg: &[f64],
        a: f64,
        nu: f64,
        xi: &[f64],
        n_nodes: usize,
    ) -> f64 {
        let r = self.r();
        let pp = self.n_segments;
        let ln_gamma_a = crate::math::ln_gamma(a);
        let mut total = 0.0;
        for p in 2..=pp {
            let e_ln_zeta = digamma(nu) - xi[p - 1].ln();
            let e_zeta = nu / xi[p - 1];
            for node in 0..n_nodes {
                let row = srow(node, p, pp, r);
                for t in 0..r {
                    let (l, m) = (lambda[row + t], mu[row + t]);
                    total += a * e_ln_zeta - ln_gamma_a + (a - l) * lg[row + t]
                        - e_zeta * (l / m)
                        - l * m.ln()
                        + crate::math::ln_gamma(l)
                        + l;
                }
            }
        }
        total
    }

    /// Proxy means as point parameters plus the adjustment table; frozen
    /// reference slots come out exactly 1.
    ///
    /// Within a free segment the likelihood only pins the product of the
    /// two endpoint adjustments — scaling every user adjustment up and
    /// every host adjustment down by a shared factor leaves all rates
    /// unchanged — so estimates are reported in the canonical scale where
    /// each (segment, component)'s loading-weighted mean host adjustment
    /// is 1. User adjustments then carry the segment's net effect, and
    /// host adjustments its relative host-to-host variation.
    pub fn point_estimates(&self) -> (PointParams, SeasonalAdjustments) {
        let div = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| x / y).collect()
        };
        let params = PointParams {
            n_users: self.n_users,
            n_hosts: self.n_hosts,
            r: self.r(),
            k: self.k,
            h: self.h,
            alpha: div(&self.lambda_alpha, &self.mu_alpha),
            beta: div(&self.lambda_beta, &self.mu_beta),
            phi: div(&self.lambda_phi, &self.mu_phi),
        };
        let mut adjust = SeasonalAdjustments {
            n_users: self.n_users,
            n_hosts: self.n_hosts,
            n_segments: self.n_segments,
            r: self.r(),
            user_gamma: div(&self.lambda_gamma, &self.mu_gamma),
            host_delta: div(&self.lambda_delta, &self.mu_delta),
        };
        let r = self.r();
        let pp = self.n_segments;
        for p in 2..=pp {
            for t in 0..r {
                let mut plain = 0.0f64;
                let mut weighted = 0.0f64;
                for j in 0..self.n_hosts {
                    let b = params.beta[j * r + t];
                    plain += b;
                    weighted += b * adjust.delta_at(j, p, t);
                }
                if plain > 0.0 && weighted > 0.0 {
                    let s = plain / weighted;
                    for j in 0..self.n_hosts {
                        *adjust.delta_at_mut(j, p, t) *= s;
                    }
                    for i in 0..self.n_users {
                        *adjust.gamma_at_mut(i, p, t) /= s;
                    }
                }
            }
        }
        (params, adjust)
    }
}

/// Runs seasonal CAVI from a prior-seeded state to convergence.
pub fn fit_seasonal(
    seq: &TemporalGraphSequence,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    hyper: &SeasonalHyperparameters,
    opts: &FitOptions,
) -> Result<(SeasonalVariationalState, ElboTrace)> {
    let state = init_seasonal_state(seq, user_covs, host_covs, hyper, opts.seed)?;
    fit_seasonal_from_state(state, seq, opts)
}

/// Runs seasonal CAVI sweeps from an existing state until the relative ELBO
/// change drops below `tol` or `max_sweeps` is hit.
pub fn fit_seasonal_from_state(
    mut state: SeasonalVariationalState,
    seq: &TemporalGraphSequence,
    opts: &FitOptions,
) -> Result<(SeasonalVariationalState, ElboTrace)> {
    let trace = converge(opts, || {
        let mut stats = SweepStats::default();
        state.update_theta_chi(seq, &mut stats)?;
        state.update_first_level(seq, &mut stats)?;
        state.update_second_level();
        let elbo = state.compute_elbo(seq)?;
        Ok((elbo, stats))
    })?;
    Ok((state, trace))
}

#[cfg(test)]
mod adjustment_tests {
    use super::*;

    #[test]
    fn neutral_adjustments_reproduce_static_rate() {
        let mut params = PointParams::zeros(2, 2, 2, 0, 0);
        params.alpha = vec![0.5, 1.0, 2.0, 0.25];
        params.beta = vec![1.5, 0.75, 0.3, 2.0];
        let adj = SeasonalAdjustments::neutral(2, 2, 3, 2);
        let covs = CovariateMatrix::empty(2);
        for i in 0..2 {
            for j in 0..2 {
                for p in 1..=3 {
                    let s = seasonal_psi(&params, &adj, &covs, &covs, i, j, p);
                    let base = params.psi(&covs, &covs, i, j);
                    assert_eq!(s.to_bits(), base.to_bits());
                }
            }
        }
    }

    #[test]
    fn validate_rejects_unpinned_reference_segment() {
        let mut adj = SeasonalAdjustments::neutral(1, 1, 2, 1);
        assert!(adj.validate().is_ok());
        *adj.gamma_at_mut(0, 1, 0) = 1.1;
        assert!(adj.validate().is_err());
        *adj.gamma_at_mut(0, 1, 0) = 1.0;
        *adj.delta_at_mut(0, 2, 0) = 0.4;
        assert!(adj.validate().is_ok());
    }

    #[test]
    fn scalar_rate_is_the_adjusted_product() {
        let mut params = PointParams::zeros(1, 1, 1, 0, 0);
        params.alpha = vec![1.0];
        params.beta = vec![1.0];
        let mut adj = SeasonalAdjustments::neutral(1, 1, 2, 1);
        *adj.gamma_at_mut(0, 2, 0) = 2.0;
        *adj.delta_at_mut(0, 2, 0) = 3.0;
        let covs = CovariateMatrix::empty(1);
        assert_eq!(seasonal_psi(&params, &adj, &covs, &covs, 0, 0, 2), 6.0);
        assert_eq!(seasonal_psi(&params, &adj, &covs, &covs, 0, 0, 1), 1.0);
    }

    #[test]
    fn rate_matches_componentwise_oracle() {
        use rand::Rng;
        let (nu, nv, r, pp) = (3usize, 4usize, 2usize, 3usize);
        let mut rng = crate::rng::labeled(42, "test/seasonal-rate");
        let mut params = PointParams::zeros(nu, nv, r, 2, 2);
        for v in params
            .alpha
            .iter_mut()
            .chain(&mut params.beta)
            .chain(&mut params.phi)
        {
            *v = rng.random_range(0.1..2.0);
        }
        let mut adj = SeasonalAdjustments::neutral(nu, nv, pp, r);
        for i in 0..nu {
            for p in 2..=pp {
                for t in 0..r {
                    *adj.gamma_at_mut(i, p, t) = rng.random_range(0.2..3.0);
                }
            }
        }
        for j in 0..nv {
            for p in 2..=pp {
                for t in 0..r {
                    *adj.delta_at_mut(j, p, t) = rng.random_range(0.2..3.0);
                }
            }
        }
        let ucovs = CovariateMatrix::single_group(nu, "role", 2, |i| Some(i % 2)).unwrap();
        let hcovs = CovariateMatrix::single_group(nv, "zone", 2, |j| Some(j % 2)).unwrap();
        for i in 0..nu {
            for j in 0..nv {
                for p in 1..=pp {
                    let mut want = 0.0f64;
                    for t in 0..r {
                        want += params.alpha[i * r + t]
                            * adj.gamma_at(i, p, t)
                            * params.beta[j * r + t]
                            * adj.delta_at(j, p, t);
                    }
                    want += params.phi[(i % 2) * 2 + (j % 2)];
                    let got = seasonal_psi(&params, &adj, &ucovs, &hcovs, i, j, p);
                    assert!((got - want).abs() < 1e-14, "cell ({i},{j}) segment {p}");
                }
            }
        }
    }
}
