//! Systematic-scan Gibbs sampler for the censored-Poisson factorization —
//! the Monte Carlo counterpart (and correctness oracle) of the variational
//! fit.
//!
//! Observing only A_ij = 1{N_ij > 0} leaves, per edge, a zero-truncated
//! Poisson total N_ij with rate psi_ij and a multinomial split Z_ij over
//! components with probabilities proportional to the component rates. All
//! remaining conditionals are gamma:
//!
//!   alpha_ir | .. ~ Gamma(a + sum_{j in row} Z_ijr, zeta_i + sum_{all j} beta_jr)
//!   phi_kh   | .. ~ Gamma(a_phi + sum_edges Z_kh,   zeta_phi + xtilde_k ytilde_h)
//!   zeta_i   | .. ~ Gamma(b + R a, c + sum_r alpha_ir)
//!
//! One scan draws counts, then user factors, then host factors, then the
//! interaction block, then the rate parameters, in that fixed order. Every
//! draw has its own counter-based stream keyed by (iteration, entity), so a
//! chain is reproducible at any thread count.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, SparseBipartiteGraph};
use crate::model::{build_pair_table, Hyperparameters, PointParams};
use crate::rng::stream;

/// Total iterations run when none are specified.
pub const DEFAULT_SAMPLES: usize = 10_000;
/// Leading iterations discarded when none are specified.
pub const DEFAULT_BURN_IN: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOptions {
    pub seed: u64,
    /// Total scans; the first `burn_in` are discarded.
    pub n_samples: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in draw.
    pub thin: usize,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            seed: 0,
            n_samples: DEFAULT_SAMPLES,
            burn_in: DEFAULT_BURN_IN,
            thin: 1,
        }
    }
}

/// Current point of the chain: factor values, rate values, and the latent
/// count allocation of every observed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub hyper: Hyperparameters,
    pub n_users: usize,
    pub n_hosts: usize,
    pub k: usize,
    pub h: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub phi: Vec<f64>,
    pub zeta_alpha: Vec<f64>,
    pub zeta_beta: Vec<f64>,
    pub zeta_phi: f64,
    /// Per-edge total count N (zero cells store nothing).
    pub counts: Vec<u64>,
    /// nnz x R latent allocations.
    pub z_latent: Vec<u64>,
    /// Ragged covariate-pair allocations, aligned with `pair_idx`.
    pub z_pair: Vec<u64>,
    pub pair_ptr: Vec<usize>,
    pub pair_idx: Vec<(u32, u32)>,
    pub x_tilde: Vec<f64>,
    pub y_tilde: Vec<f64>,
}

/// Post-burn-in draws.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub draws: Vec<PointParams>,
    pub burn_in: usize,
    pub thin: usize,
}

impl PosteriorSamples {
    pub fn m(&self) -> usize {
        self.draws.len()
    }
}

fn gamma_draw(rng: &mut impl Rng, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// Zero-truncated Poisson draw. Rejection from the untruncated Poisson for
/// lambda >= 1 (acceptance at least 1 - 1/e); pmf inversion for lambda < 1,
/// where rejection would stall.
pub fn sample_ztp(rng: &mut impl Rng, lambda: f64) -> u64 {
    debug_assert!(lambda > 0.0 && lambda.is_finite());
    if lambda >= 1.0 {
        let pois = Poisson::new(lambda).expect("positive rate");
        loop {
            let n = pois.sample(rng);
            if n >= 1.0 {
                return n as u64;
            }
        }
    } else {
        // P(N = n) = lambda^n / ((e^lambda - 1) n!), walked cumulatively.
        let u: f64 = rng.random();
        let norm = lambda.exp_m1();
        let mut pmf = lambda / norm;
        let mut cum = pmf;
        let mut n = 1u64;
        while u > cum && n < 500 {
            n += 1;
            pmf *= lambda / n as f64;
            cum += pmf;
        }
        n
    }
}

/// Splits `n` into counts proportional to `weights` by sequential binomial
/// splitting in index order.
fn multinomial_split(rng: &mut impl Rng, n: u64, weights: &[f64], out: &mut [u64]) {
    debug_assert_eq!(weights.len(), out.len());
    let mut remaining = n;
    let mut rest: f64 = weights.iter().sum();
    for l in 0..weights.len() {
        if l + 1 == weights.len() {
            out[l] = remaining;
            break;
        }
        if remaining == 0 {
            out[l] = 0;
            continue;
        }
        let p = (weights[l] / rest).clamp(0.0, 1.0);
        let z = Binomial::new(remaining, p).expect("valid binomial").sample(rng);
        out[l] = z;
        remaining -= z;
        rest -= weights[l];
    }
}

/// Prior-seeded chain state with zeroed latent counts.
pub fn init_chain(
    graph: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    hyper: &Hyperparameters,
    seed: u64,
) -> Result<GibbsState> {
    hyper.validate()?;
    if user_covs.n_nodes() != graph.n_users() || host_covs.n_nodes() != graph.n_hosts() {
        return Err(Error::DimMismatch(
            "covariate tables do not cover the graph".into(),
        ));
    }
    let r = hyper.r;
    let (n_users, n_hosts) = (graph.n_users(), graph.n_hosts());
    let (k, h) = (user_covs.n_covariates(), host_covs.n_covariates());
    let mut alpha = vec![0.0; n_users * r];
    let mut zeta_alpha = vec![0.0; n_users];
    alpha
        .par_chunks_mut(r)
        .zip(zeta_alpha.par_iter_mut())
        .enumerate()
        .for_each(|(i, (row, zeta))| {
            let mut rng = stream(seed, "gibbs-init/alpha", i as u64);
            *zeta = gamma_draw(&mut rng, hyper.alpha.rate_shape, hyper.alpha.rate_rate);
            for slot in row.iter_mut() {
                *slot = gamma_draw(&mut rng, hyper.alpha.shape, *zeta);
            }
        });
    let mut beta = vec![0.0; n_hosts * r];
    let mut zeta_beta = vec![0.0; n_hosts];
    beta.par_chunks_mut(r)
        .zip(zeta_beta.par_iter_mut())
        .enumerate()
        .for_each(|(j, (row, zeta))| {
            let mut rng = stream(seed, "gibbs-init/beta", j as u64);
            *zeta = gamma_draw(&mut rng, hyper.beta.rate_shape, hyper.beta.rate_rate);
            for slot in row.iter_mut() {
                *slot = gamma_draw(&mut rng, hyper.beta.shape, *zeta);
            }
        });
    let (phi, zeta_phi) = if k * h > 0 {
        let mut rng = stream(seed, "gibbs-init/phi", 0);
        let zeta = gamma_draw(&mut rng, hyper.phi.rate_shape, hyper.phi.rate_rate);
        let mut phi = vec![0.0; k * h];
        for slot in phi.iter_mut() {
            *slot = gamma_draw(&mut rng, hyper.phi.shape, zeta);
        }
        (phi, zeta)
    } else {
        (Vec::new(), hyper.phi.rate_shape / hyper.phi.rate_rate)
    };
    let (pair_ptr, pair_idx) = build_pair_table(graph, user_covs, host_covs);
    Ok(GibbsState {
        hyper: hyper.clone(),
        n_users,
        n_hosts,
        k,
        h,
        alpha,
        beta,
        phi,
        zeta_alpha,
        zeta_beta,
        zeta_phi,
        counts: vec![0; graph.nnz()],
        z_latent: vec![0; graph.nnz() * r],
        z_pair: vec![0; pair_idx.len()],
        pair_ptr,
        pair_idx,
        x_tilde: user_covs.column_sums().iter().map(|&s| s as f64).collect(),
        y_tilde: host_covs.column_sums().iter().map(|&s| s as f64).collect(),
    })
}

impl GibbsState {
    pub fn r(&self) -> usize {
        self.hyper.r
    }

    /// Wraps existing point values into a chain state (latent counts zeroed;
    /// the first scan draws them).
    pub fn from_params(
        params: &PointParams,
        zeta_alpha: Vec<f64>,
        zeta_beta: Vec<f64>,
        zeta_phi: f64,
        graph: &SparseBipartiteGraph,
        user_covs: &CovariateMatrix,
        host_covs: &CovariateMatrix,
        hyper: &Hyperparameters,
    ) -> Result<GibbsState> {
        params.check_dims(graph, user_covs, host_covs)?;
        let (pair_ptr, pair_idx) = build_pair_table(graph, user_covs, host_covs);
        Ok(GibbsState {
            hyper: hyper.clone(),
            n_users: params.n_users,
            n_hosts: params.n_hosts,
            k: params.k,
            h: params.h,
            alpha: params.alpha.clone(),
            beta: params.beta.clone(),
            phi: params.phi.clone(),
            zeta_alpha,
            zeta_beta,
            zeta_phi,
            counts: vec![0; graph.nnz()],
            z_latent: vec![0; graph.nnz() * params.r],
            z_pair: vec![0; pair_idx.len()],
            pair_ptr,
            pair_idx,
            x_tilde: user_covs.column_sums().iter().map(|&s| s as f64).collect(),
            y_tilde: host_covs.column_sums().iter().map(|&s| s as f64).collect(),
        })
    }

    pub fn params(&self) -> PointParams {
        PointParams {
            n_users: self.n_users,
            n_hosts: self.n_hosts,
            r: self.r(),
            k: self.k,
            h: self.h,
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            phi: self.phi.clone(),
        }
    }

    /// Conditional (shape, rate) of one user loading given counts and the
    /// host block.
    pub fn alpha_conditional(&self, graph: &SparseBipartiteGraph, i: usize, t: usize) -> (f64, f64) {
        let r = self.r();
        let mut z_sum = 0u64;
        for e in graph.row_range(i) {
            z_sum += self.z_latent[e * r + t];
        }
        let mut beta_sum = 0.0;
        for j in 0..self.n_hosts {
            beta_sum += self.beta[j * r + t];
        }
        (
            self.hyper.alpha.shape + z_sum as f64,
            self.zeta_alpha[i] + beta_sum,
        )
    }

    pub fn beta_conditional(&self, graph: &SparseBipartiteGraph, j: usize, t: usize) -> (f64, f64) {
        let r = self.r();
        let mut z_sum = 0u64;
        for &eid in graph.col_edge_ids(j) {
            z_sum += self.z_latent[eid as usize * r + t];
        }
        let mut alpha_sum = 0.0;
        for i in 0..self.n_users {
            alpha_sum += self.alpha[i * r + t];
        }
        (
            self.hyper.beta.shape + z_sum as f64,
            self.zeta_beta[j] + alpha_sum,
        )
    }

    pub fn phi_conditional(&self, kk: usize, hh: usize) -> (f64, f64) {
        let mut z_sum = 0u64;
        for (p, &(pk, ph)) in self.pair_idx.iter().enumerate() {
            if pk as usize == kk && ph as usize == hh {
                z_sum += self.z_pair[p];
            }
        }
        (
            self.hyper.phi.shape + z_sum as f64,
            self.zeta_phi + self.x_tilde[kk] * self.y_tilde[hh],
        )
    }

    /// Draws N ~ ZTP(psi) and its component split for every edge.
    pub fn sample_latent_counts(
        &mut self,
        graph: &SparseBipartiteGraph,
        seed: u64,
        iter: u64,
    ) -> Result<()> {
        self.sample_latent_counts_ordered(graph, seed, iter, None)
    }

    /// Like `sample_latent_counts`, visiting latent components in `order`
    /// (both for the rate vector and the stream of binomial splits) — the
    /// hook that makes latent-relabeling tests exact.
    fn sample_latent_counts_ordered(
        &mut self,
        graph: &SparseBipartiteGraph,
        seed: u64,
        iter: u64,
        order: Option<&[usize]>,
    ) -> Result<()> {
        let r = self.r();
        let edges = graph.edges();
        if edges.len() != self.counts.len() {
            return Err(Error::DimMismatch("state does not match the graph".into()));
        }
        let identity: Vec<usize> = (0..r).collect();
        let order = order.unwrap_or(&identity);

        // Row-sliced mutable views for disjoint parallel writes.
        let row_sizes: Vec<usize> = (0..self.n_users)
            .map(|i| graph.row_range(i).len())
            .collect();
        let count_rows = split_rows(&mut self.counts, row_sizes.iter().copied());
        let zl_rows = split_rows(&mut self.z_latent, row_sizes.iter().map(|&s| s * r));
        let pair_sizes: Vec<usize> = (0..self.n_users)
            .map(|i| {
                let rng = graph.row_range(i);
                self.pair_ptr[rng.end] - self.pair_ptr[rng.start]
            })
            .collect();
        let zp_rows = split_rows(&mut self.z_pair, pair_sizes.iter().copied());
        let rows: Vec<_> = count_rows
            .into_iter()
            .zip(zl_rows)
            .zip(zp_rows)
            .enumerate()
            .map(|(i, ((c, zl), zp))| (i, c, zl, zp))
            .collect();

        let alpha = &self.alpha;
        let beta = &self.beta;
        let phi = &self.phi;
        let pair_ptr = &self.pair_ptr;
        let pair_idx = &self.pair_idx;
        let h = self.h;
        let bad: Vec<Option<(usize, usize)>> = rows
            .into_par_iter()
            .map(|(i, count_row, zl_row, zp_row)| {
                let edge_range = graph.row_range(i);
                let pair_base = pair_ptr[edge_range.start];
                let mut weights: Vec<f64> = Vec::new();
                let mut zbuf: Vec<u64> = Vec::new();
                for (local, &(_, j)) in graph.row_edges(i).iter().enumerate() {
                    let e = edge_range.start + local;
                    let j = j as usize;
                    let ps = pair_ptr[e] - pair_base;
                    let pe = pair_ptr[e + 1] - pair_base;
                    weights.clear();
                    for &t in order {
                        weights.push(alpha[i * r + t] * beta[j * r + t]);
                    }
                    for p in ps..pe {
                        let (kk, hh) = pair_idx[pair_base + p];
                        weights.push(phi[kk as usize * h + hh as usize]);
                    }
                    let psi: f64 = weights.iter().sum();
                    if !(psi > 0.0 && psi.is_finite()) {
                        return Some((i, j));
                    }
                    let mut rng = stream(seed, "gibbs/counts", (iter << 32) | e as u64);
                    let n = sample_ztp(&mut rng, psi);
                    count_row[local] = n;
                    zbuf.resize(weights.len(), 0);
                    multinomial_split(&mut rng, n, &weights, &mut zbuf);
                    for (pos, &t) in order.iter().enumerate() {
                        zl_row[local * r + t] = zbuf[pos];
                    }
                    zp_row[ps..pe].copy_from_slice(&zbuf[r..]);
                }
                None
            })
            .collect();
        for b in bad.into_iter().flatten() {
            let (i, j) = b;
            return Err(Error::IterationFailure(format!(
                "zero or non-finite rate on observed edge ({i}, {j}); the model cannot explain it"
            )));
        }
        Ok(())
    }

    /// Draws all factor blocks from their gamma conditionals, then the rate
    /// parameters: users, hosts (against fresh users), interactions, rates.
    pub fn sample_factors(&mut self, graph: &SparseBipartiteGraph, seed: u64, iter: u64) {
        self.sample_factors_ordered(graph, seed, iter, None)
    }

    fn sample_factors_ordered(
        &mut self,
        graph: &SparseBipartiteGraph,
        seed: u64,
        iter: u64,
        order: Option<&[usize]>,
    ) {
        let r = self.r();
        let identity: Vec<usize> = (0..r).collect();
        let order = order.unwrap_or(&identity);

        let mut beta_sums = vec![0.0; r];
        for j in 0..self.n_hosts {
            for t in 0..r {
                beta_sums[t] += self.beta[j * r + t];
            }
        }
        {
            let a = self.hyper.alpha.shape;
            let z = &self.z_latent;
            let zeta = &self.zeta_alpha;
            self.alpha
                .par_chunks_mut(r)
                .enumerate()
                .for_each(|(i, row)| {
                    let mut rng = stream(seed, "gibbs/alpha", (iter << 32) | i as u64);
                    for &t in order {
                        let mut z_sum = 0u64;
                        for e in graph.row_range(i) {
                            z_sum += z[e * r + t];
                        }
                        row[t] =
                            gamma_draw(&mut rng, a + z_sum as f64, zeta[i] + beta_sums[t]);
                    }
                });
        }

        let mut alpha_sums = vec![0.0; r];
        for i in 0..self.n_users {
            for t in 0..r {
                alpha_sums[t] += self.alpha[i * r + t];
            }
        }
        {
            let a = self.hyper.beta.shape;
            let z = &self.z_latent;
            let zeta = &self.zeta_beta;
            self.beta
                .par_chunks_mut(r)
                .enumerate()
                .for_each(|(j, row)| {
                    let mut rng = stream(seed, "gibbs/beta", (iter << 32) | j as u64);
                    for &t in order {
                        let mut z_sum = 0u64;
                        for &eid in graph.col_edge_ids(j) {
                            z_sum += z[eid as usize * r + t];
                        }
                        row[t] =
                            gamma_draw(&mut rng, a + z_sum as f64, zeta[j] + alpha_sums[t]);
                    }
                });
        }

        if self.k * self.h > 0 {
            let mut z_sums = vec![0u64; self.k * self.h];
            for (p, &(kk, hh)) in self.pair_idx.iter().enumerate() {
                z_sums[kk as usize * self.h + hh as usize] += self.z_pair[p];
            }
            let mut rng = stream(seed, "gibbs/phi", iter);
            for kk in 0..self.k {
                for hh in 0..self.h {
                    let idx = kk * self.h + hh;
                    self.phi[idx] = gamma_draw(
                        &mut rng,
                        self.hyper.phi.shape + z_sums[idx] as f64,
                        self.zeta_phi + self.x_tilde[kk] * self.y_tilde[hh],
                    );
                }
            }
        }

        {
            let b = self.hyper.alpha.rate_shape + r as f64 * self.hyper.alpha.shape;
            let c = self.hyper.alpha.rate_rate;
            let alpha = &self.alpha;
            self.zeta_alpha
                .par_iter_mut()
                .enumerate()
                .for_each(|(i, zeta)| {
                    let mut rng = stream(seed, "gibbs/zeta-alpha", (iter << 32) | i as u64);
                    let s: f64 = alpha[i * r..(i + 1) * r].iter().sum();
                    *zeta = gamma_draw(&mut rng, b, c + s);
                });
        }
        {
            let b = self.hyper.beta.rate_shape + r as f64 * self.hyper.beta.shape;
            let c = self.hyper.beta.rate_rate;
            let beta = &self.beta;
            self.zeta_beta
                .par_iter_mut()
                .enumerate()
                .for_each(|(j, zeta)| {
                    let mut rng = stream(seed, "gibbs/zeta-beta", (iter << 32) | j as u64);
                    let s: f64 = beta[j * r..(j + 1) * r].iter().sum();
                    *zeta = gamma_draw(&mut rng, b, c + s);
                });
        }
        if self.k * self.h > 0 {
            let b = self.hyper.phi.rate_shape + (self.k * self.h) as f64 * self.hyper.phi.shape;
            let c = self.hyper.phi.rate_rate;
            let s: f64 = self.phi.iter().sum();
            let mut rng = stream(seed, "gibbs/zeta-phi", iter);
            self.zeta_phi = gamma_draw(&mut rng, b, c + s);
        }
    }

    /// One full scan: counts, then factors and rates.
    pub fn scan(&mut self, graph: &SparseBipartiteGraph, seed: u64, iter: u64) -> Result<()> {
        self.sample_latent_counts(graph, seed, iter)?;
        self.sample_factors(graph, seed, iter);
        Ok(())
    }

    /// `scan` with an explicit component visiting order; exercised by the
    /// label-permutation symmetry tests.
    #[cfg(test)]
    fn scan_ordered(
        &mut self,
        graph: &SparseBipartiteGraph,
        seed: u64,
        iter: u64,
        order: &[usize],
    ) -> Result<()> {
        self.sample_latent_counts_ordered(graph, seed, iter, Some(order))?;
        self.sample_factors_ordered(graph, seed, iter, Some(order));
        Ok(())
    }
}

fn split_rows<'a, T>(
    mut data: &'a mut [T],
    sizes: impl Iterator<Item = usize>,
) -> Vec<&'a mut [T]> {
    let mut out = Vec::new();
    for s in sizes {
        let (head, rest) = data.split_at_mut(s);
        out.push(head);
        data = rest;
    }
    debug_assert!(data.is_empty());
    out
}

/// Runs a prior-initialized chain and returns the kept draws.
pub fn run_chain(
    graph: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    hyper: &Hyperparameters,
    opts: &ChainOptions,
) -> Result<PosteriorSamples> {
    if opts.n_samples <= opts.burn_in {
        return Err(Error::InvalidArgument(format!(
            "total samples ({}) must exceed burn-in ({})",
            opts.n_samples, opts.burn_in
        )));
    }
    if opts.thin == 0 {
        return Err(Error::InvalidArgument("thinning interval must be >= 1".into()));
    }
    let mut state = init_chain(graph, user_covs, host_covs, hyper, opts.seed)?;
    let mut draws = Vec::new();
    for iter in 0..opts.n_samples {
        state.scan(graph, opts.seed, iter as u64)?;
        if iter >= opts.burn_in && (iter - opts.burn_in) % opts.thin == 0 {
            draws.push(state.params());
        }
    }
    Ok(PosteriorSamples {
        draws,
        burn_in: opts.burn_in,
        thin: opts.thin,
    })
}

/// Monte Carlo link probability 1 - (1/M) sum_m exp(-psi_ij^(m)).
pub fn posterior_mean_link_probability(
    samples: &PosteriorSamples,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    i: usize,
    j: usize,
) -> f64 {
    debug_assert!(samples.m() >= 1);
    let mut acc = 0.0;
    for draw in &samples.draws {
        acc += (-draw.psi(user_covs, host_covs, i, j)).exp();
    }
    1.0 - acc / samples.m() as f64
}
