//! Joint model for two bipartite graphs that share their user side.
//!
//! Each graph keeps its own hosts, host loadings, and covariate interaction
//! block, while one user-loading block drives both:
//!
//!   psi_ij  = sum_r alpha_ir beta_jr   + sum_{k,h} phi_kh  x_ik y_jh
//!   psi'_ij = sum_r alpha_ir beta'_jr  + sum_{k,h} phi'_kh x_ik y'_jh
//!
//! so evidence about a user's activity in one graph sharpens their profile
//! in the other. Inference is the same coordinate ascent as the
//! single-graph model with one change: the user block's updates pool both
//! graphs' evidence,
//!
//!   lambda_ir = a + sum_j A_ij theta_ij chi_ijr / (1 - e^{-theta_ij})
//!                 + sum_j' A'_ij' theta'_ij' chi'_ij'r / (1 - e^{-theta'_ij'})
//!   mu_ir     = nu/xi_i + sum_j E[beta_jr] + sum_j' E[beta'_j'r].
//!
//! A sweep runs the graph-a edge phase, the graph-b edge phase, the pooled
//! user update, then each graph's host and interaction blocks against the
//! fresh user block, and finally the rate proxies. With an empty second
//! graph every pooled sum gains only zero terms, and the fit reproduces the
//! single-graph fit bit for bit at equal seeds.

use serde::{Deserialize, Serialize};

use crate::cavi::{
    check_term, converge, edge_elbo_term, edge_phase, gamma_draw, host_block_update,
    init_block, interaction_shape_update, loading_block_term, log_geo_table,
    pooled_user_update, rate_proxy_term, EdgeEvidence, ElboTrace, FitOptions, SweepStats,
};
use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, SparseBipartiteGraph};
use crate::model::{build_pair_table, Hyperparameters, PointParams};
use crate::rng::stream;

/// One graph's private blocks and proxies: host loadings, interaction
/// weights, their rate proxies, and the per-edge ZTP/multinomial proxies.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHostSide {
    pub n_hosts: usize,
    pub h: usize,
    pub lambda_beta: Vec<f64>,
    pub mu_beta: Vec<f64>,
    pub lambda_phi: Vec<f64>,
    pub mu_phi: Vec<f64>,
    pub nu_beta: f64,
    pub nu_phi: f64,
    pub xi_beta: Vec<f64>,
    pub xi_phi: f64,
    pub theta: Vec<f64>,
    pub edge_weight: Vec<f64>,
    pub chi_latent: Vec<f64>,
    pub chi_pair: Vec<f64>,
    pub pair_ptr: Vec<usize>,
    pub pair_idx: Vec<(u32, u32)>,
    pub y_tilde: Vec<f64>,
}

/// All variational parameters of the joint fit: the shared user block plus
/// one [`JointHostSide`] per graph.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVariationalState {
    pub hyper: Hyperparameters,
    pub n_users: usize,
    pub k: usize,
    pub lambda_alpha: Vec<f64>,
    pub mu_alpha: Vec<f64>,
    pub nu_alpha: f64,
    pub xi_alpha: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub side_a: JointHostSide,
    pub side_b: JointHostSide,
}

/// Which of the two graphs a score or export refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphSide {
    A,
    B,
}

fn init_side(
    graph: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    hyper: &Hyperparameters,
    seed: u64,
    beta_label: &str,
    phi_label: &str,
) -> JointHostSide {
    let r = hyper.r;
    let n_hosts = graph.n_hosts();
    let (k, h) = (user_covs.n_covariates(), host_covs.n_covariates());
    let nu_beta = hyper.beta.rate_shape + r as f64 * hyper.beta.shape;
    let nu_phi = hyper.phi.rate_shape + (k * h) as f64 * hyper.phi.shape;
    let (lambda_beta, mu_beta, xi_beta) =
        init_block(n_hosts, r, &hyper.beta, nu_beta, seed, beta_label);
    let (lambda_phi, mu_phi, xi_phi) = if k * h > 0 {
        let mut rng = stream(seed, phi_label, 0);
        let zeta = gamma_draw(&mut rng, hyper.phi.rate_shape, hyper.phi.rate_rate);
        let xi = nu_phi / zeta;
        let mut lambda = vec![0.0; k * h];
        let mut mu = vec![0.0; k * h];
        for t in 0..k * h {
            let draw = gamma_draw(&mut rng, hyper.phi.shape, zeta);
            lambda[t] = hyper.phi.shape;
            mu[t] = hyper.phi.shape / draw;
        }
        (lambda, mu, xi)
    } else {
        (Vec::new(), Vec::new(), hyper.phi.rate_rate)
    };
    let (pair_ptr, pair_idx) = build_pair_table(graph, user_covs, host_covs);
    JointHostSide {
        n_hosts,
        h,
        lambda_beta,
        mu_beta,
        lambda_phi,
        mu_phi,
        nu_beta,
        nu_phi,
        xi_beta,
        xi_phi,
        theta: vec![0.0; graph.nnz()],
        edge_weight: vec![0.0; graph.nnz()],
        chi_latent: vec![0.0; graph.nnz() * r],
        chi_pair: vec![0.0; pair_idx.len()],
        pair_ptr,
        pair_idx,
        y_tilde: host_covs.column_sums().iter().map(|&s| s as f64).collect(),
    }
}

/// Prior-seeded joint state. The shared user block and graph-a blocks use
/// the same streams as the single-graph initializer; graph-b blocks draw
/// from their own streams.
pub fn init_joint_state(
    graph_a: &SparseBipartiteGraph,
    graph_b: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs_a: &CovariateMatrix,
    host_covs_b: &CovariateMatrix,
    hyper: &Hyperparameters,
    seed: u64,
) -> Result<JointVariationalState> {
    hyper.validate()?;
    if graph_a.n_users() != graph_b.n_users() {
        return Err(Error::DimMismatch(format!(
            "joint graphs must share the user set; got {} and {} users",
            graph_a.n_users(),
            graph_b.n_users()
        )));
    }
    if user_covs.n_nodes() != graph_a.n_users() {
        return Err(Error::DimMismatch(format!(
            "user covariates cover {} nodes but the graphs have {} users",
            user_covs.n_nodes(),
            graph_a.n_users()
        )));
    }
    if host_covs_a.n_nodes() != graph_a.n_hosts() || host_covs_b.n_nodes() != graph_b.n_hosts()
    {
        return Err(Error::DimMismatch(
            "host covariate tables do not match the graphs' host counts".into(),
        ));
    }
    let r = hyper.r;
    let n_users = graph_a.n_users();
    let nu_alpha = hyper.alpha.rate_shape + r as f64 * hyper.alpha.shape;
    let (lambda_alpha, mu_alpha, xi_alpha) =
        init_block(n_users, r, &hyper.alpha, nu_alpha, seed, "init/alpha");
    let side_a = init_side(
        graph_a,
        user_covs,
        host_covs_a,
        hyper,
        seed,
        "init/beta",
        "init/phi",
    );
    let side_b = init_side(
        graph_b,
        user_covs,
        host_covs_b,
        hyper,
        seed,
        "init/beta-b",
        "init/phi-b",
    );
    Ok(JointVariationalState {
        hyper: hyper.clone(),
        n_users,
        k: user_covs.n_covariates(),
        lambda_alpha,
        mu_alpha,
        nu_alpha,
        xi_alpha,
        x_tilde: user_covs.column_sums().iter().map(|&s| s as f64).collect(),
        side_a,
        side_b,
    })
}

impl JointHostSide {
    fn check_graph(&self, graph: &SparseBipartiteGraph, n_users: usize) -> Result<()> {
        if graph.n_users() != n_users
            || graph.n_hosts() != self.n_hosts
            || graph.nnz() != self.theta.len()
        {
            return Err(Error::DimMismatch(format!(
                "side built for a {}x{} graph with {} edges, got {}x{} with {}",
                n_users,
                self.n_hosts,
                self.theta.len(),
                graph.n_users(),
                graph.n_hosts(),
                graph.nnz()
            )));
        }
        Ok(())
    }

    /// Host-block mean totals sum_j lambda/mu per component.
    fn beta_totals(&self, r: usize) -> Vec<f64> {
        let mut s = vec![0.0f64; r];
        for j in 0..self.n_hosts {
            for t in 0..r {
                s[t] += self.lambda_beta[j * r + t] / self.mu_beta[j * r + t];
            }
        }
        s
    }

    fn evidence<'a>(&'a self, graph: &'a SparseBipartiteGraph) -> EdgeEvidence<'a> {
        EdgeEvidence {
            graph,
            chi_latent: &self.chi_latent,
            edge_weight: &self.edge_weight,
        }
    }
}

impl JointVariationalState {
    pub fn r(&self) -> usize {
        self.hyper.r
    }

    fn check_graphs(
        &self,
        graph_a: &SparseBipartiteGraph,
        graph_b: &SparseBipartiteGraph,
    ) -> Result<()> {
        self.side_a.check_graph(graph_a, self.n_users)?;
        self.side_b.check_graph(graph_b, self.n_users)
    }

    /// Rebuilds both sides' per-edge structures (pair tables, zeroed
    /// proxies, covariate totals) for a state whose parameter blocks came
    /// from a checkpoint. One `update_theta_chi` afterwards restores the
    /// proxies.
    pub fn rebuild_edge_structures(
        &mut self,
        graph_a: &SparseBipartiteGraph,
        graph_b: &SparseBipartiteGraph,
        user_covs: &CovariateMatrix,
        host_covs_a: &CovariateMatrix,
        host_covs_b: &CovariateMatrix,
    ) -> Result<()> {
        if graph_a.n_users() != self.n_users
            || graph_b.n_users() != self.n_users
            || graph_a.n_hosts() != self.side_a.n_hosts
            || graph_b.n_hosts() != self.side_b.n_hosts
            || user_covs.n_covariates() != self.k
            || host_covs_a.n_covariates() != self.side_a.h
            || host_covs_b.n_covariates() != self.side_b.h
        {
            return Err(Error::DimMismatch(
                "checkpointed state does not match the graphs/covariates".into(),
            ));
        }
        let r = self.r();
        for (side, graph, covs) in [
            (&mut self.side_a, graph_a, host_covs_a),
            (&mut self.side_b, graph_b, host_covs_b),
        ] {
            let (pair_ptr, pair_idx) = build_pair_table(graph, user_covs, covs);
            side.theta = vec![0.0; graph.nnz()];
            side.edge_weight = vec![0.0; graph.nnz()];
            side.chi_latent = vec![0.0; graph.nnz() * r];
            side.chi_pair = vec![0.0; pair_idx.len()];
            side.pair_ptr = pair_ptr;
            side.pair_idx = pair_idx;
            side.y_tilde = covs.column_sums().iter().map(|&s| s as f64).collect();
        }
        self.x_tilde = user_covs.column_sums().iter().map(|&s| s as f64).collect();
        Ok(())
    }

    /// Sweep phase 1: the graph-a edge phase, then the graph-b edge phase.
    pub fn update_theta_chi(
        &mut self,
        graph_a: &SparseBipartiteGraph,
        graph_b: &SparseBipartiteGraph,
        stats: &mut SweepStats,
    ) -> Result<()> {
        self.check_graphs(graph_a, graph_b)?;
        let r = self.r();
        let lg_alpha = log_geo_table(&self.lambda_alpha, &self.mu_alpha);
        let g_alpha: Vec<f64> = lg_alpha.iter().map(|&v| v.exp()).collect();
        for (side, graph) in [(&mut self.side_a, graph_a), (&mut self.side_b, graph_b)] {
            let lg_beta = log_geo_table(&side.lambda_beta, &side.mu_beta);
            let lg_phi = log_geo_table(&side.lambda_phi, &side.mu_phi);
            let g_beta: Vec<f64> = lg_beta.iter().map(|&v| v.exp()).collect();
            let g_phi: Vec<f64> = lg_phi.iter().map(|&v| v.exp()).collect();
            stats.underflow_guards += edge_phase(
                graph,
                r,
                side.h,
                &lg_alpha,
                &g_alpha,
                &lg_beta,
                &g_beta,
                &lg_phi,
                &g_phi,
                &side.pair_ptr,
                &side.pair_idx,
                &mut side.theta,
                &mut side.edge_weight,
                &mut side.chi_latent,
                &mut side.chi_pair,
            )?;
            stats.theta_chi_edge_visits += graph.nnz() as u64;
        }
        Ok(())
    }

    /// Sweep phase 2: the pooled user update, then each graph's host and
    /// interaction blocks against the fresh user block.
    pub fn update_first_level(
        &mut self,
        graph_a: &SparseBipartiteGraph,
        graph_b: &SparseBipartiteGraph,
        stats: &mut SweepStats,
    ) -> Result<()> {
        self.check_graphs(graph_a, graph_b)?;
        let r = self.r();

        let s_beta_a = self.side_a.beta_totals(r);
        let s_beta_b = self.side_b.beta_totals(r);
        stats.alpha_edge_visits += pooled_user_update(
            &[
                self.side_a.evidence(graph_a),
                self.side_b.evidence(graph_b),
            ],
            &[&s_beta_a, &s_beta_b],
            r,
            self.hyper.alpha.shape,
            self.nu_alpha,
            &self.xi_alpha,
            &mut self.lambda_alpha,
            &mut self.mu_alpha,
        );

        let mut s_alpha = vec![0.0f64; r];
        for i in 0..self.n_users {
            for t in 0..r {
                s_alpha[t] += self.lambda_alpha[i * r + t] / self.mu_alpha[i * r + t];
            }
        }
        let a_beta = self.hyper.beta.shape;
        let a_phi = self.hyper.phi.shape;
        let k = self.k;
        let x_tilde = &self.x_tilde;
        for (side, graph) in [(&mut self.side_a, graph_a), (&mut self.side_b, graph_b)] {
            stats.beta_edge_visits += host_block_update(
                &EdgeEvidence {
                    graph,
                    chi_latent: &side.chi_latent,
                    edge_weight: &side.edge_weight,
                },
                &s_alpha,
                r,
                a_beta,
                side.nu_beta,
                &side.xi_beta,
                &mut side.lambda_beta,
                &mut side.mu_beta,
            );
            if k * side.h > 0 {
                stats.phi_edge_visits += interaction_shape_update(
                    &EdgeEvidence {
                        graph,
                        chi_latent: &side.chi_latent,
                        edge_weight: &side.edge_weight,
                    },
                    &side.chi_pair,
                    &side.pair_ptr,
                    &side.pair_idx,
                    side.h,
                    a_phi,
                    &mut side.lambda_phi,
                );
                let base = side.nu_phi / side.xi_phi;
                for kk in 0..k {
                    for hh in 0..side.h {
                        side.mu_phi[kk * side.h + hh] =
                            base + x_tilde[kk] * side.y_tilde[hh];
                    }
                }
            }
        }
        Ok(())
    }

    /// Sweep phase 3: rate-proxy updates for the shared user block and both
    /// sides' host/interaction blocks.
    pub fn update_second_level(&mut self) {
        let r = self.r();
        let c_alpha = self.hyper.alpha.rate_rate;
        for i in 0..self.n_users {
            let mut s = 0.0;
            for t in 0..r {
                s += self.lambda_alpha[i * r + t] / self.mu_alpha[i * r + t];
            }
            self.xi_alpha[i] = c_alpha + s;
        }
        let c_beta = self.hyper.beta.rate_rate;
        let c_phi = self.hyper.phi.rate_rate;
        let k = self.k;
        for side in [&mut self.side_a, &mut self.side_b] {
            for j in 0..side.n_hosts {
                let mut s = 0.0;
                for t in 0..r {
                    s += side.lambda_beta[j * r + t] / side.mu_beta[j * r + t];
                }
                side.xi_beta[j] = c_beta + s;
            }
            if k * side.h > 0 {
                let mut s = 0.0;
                for t in 0..k * side.h {
                    s += side.lambda_phi[t] / side.mu_phi[t];
                }
                side.xi_phi = c_phi + s;
            }
        }
    }

    /// Evidence lower bound of the current state: both graphs' edge and
    /// rate-mass terms, the shared user block's prior terms, and each
    /// side's host/interaction prior terms.
    pub fn compute_elbo(
        &self,
        graph_a: &SparseBipartiteGraph,
        graph_b: &SparseBipartiteGraph,
    ) -> Result<f64> {
        self.check_graphs(graph_a, graph_b)?;
        let r = self.r();
        let lg_alpha = log_geo_table(&self.lambda_alpha, &self.mu_alpha);
        let lg_beta_a = log_geo_table(&self.side_a.lambda_beta, &self.side_a.mu_beta);
        let lg_phi_a = log_geo_table(&self.side_a.lambda_phi, &self.side_a.mu_phi);
        let lg_beta_b = log_geo_table(&self.side_b.lambda_beta, &self.side_b.mu_beta);
        let lg_phi_b = log_geo_table(&self.side_b.lambda_phi, &self.side_b.mu_phi);

        let edge_term = edge_elbo_term(
            graph_a,
            r,
            self.side_a.h,
            &self.side_a.theta,
            &self.side_a.edge_weight,
            &self.side_a.chi_latent,
            &self.side_a.chi_pair,
            &self.side_a.pair_ptr,
            &self.side_a.pair_idx,
            &lg_alpha,
            &lg_beta_a,
            &lg_phi_a,
        ) + edge_elbo_term(
            graph_b,
            r,
            self.side_b.h,
            &self.side_b.theta,
            &self.side_b.edge_weight,
            &self.side_b.chi_latent,
            &self.side_b.chi_pair,
            &self.side_b.pair_ptr,
            &self.side_b.pair_idx,
            &lg_alpha,
            &lg_beta_b,
            &lg_phi_b,
        );
        check_term("edge", edge_term)?;

        // Expected total rate: each graph's cells, factorized per side.
        let mut rate_mass = 0.0f64;
        for side in [&self.side_a, &self.side_b] {
            for t in 0..r {
                let mut sa = 0.0;
                for i in 0..self.n_users {
                    sa += self.lambda_alpha[i * r + t] / self.mu_alpha[i * r + t];
                }
                let mut sb = 0.0;
                for j in 0..side.n_hosts {
                    sb += side.lambda_beta[j * r + t] / side.mu_beta[j * r + t];
                }
                rate_mass += sa * sb;
            }
        }
        for side in [&self.side_a, &self.side_b] {
            for kk in 0..self.k {
                for hh in 0..side.h {
                    rate_mass += side.lambda_phi[kk * side.h + hh]
                        / side.mu_phi[kk * side.h + hh]
                        * self.x_tilde[kk]
                        * side.y_tilde[hh];
                }
            }
        }
        check_term("rate-mass", rate_mass)?;

        let user_loadings = loading_block_term(
            &self.lambda_alpha,
            &self.mu_alpha,
            &lg_alpha,
            self.hyper.alpha.shape,
            self.nu_alpha,
            &self.xi_alpha,
            r,
        );
        check_term("user-loadings", user_loadings)?;
        let mut user_rates = 0.0;
        for i in 0..self.n_users {
            user_rates += rate_proxy_term(
                self.hyper.alpha.rate_shape,
                self.hyper.alpha.rate_rate,
                self.nu_alpha,
                self.xi_alpha[i],
            );
        }
        check_term("user-rates", user_rates)?;

        let mut host_loadings = 0.0;
        let mut interaction_loadings = 0.0;
        let mut host_rates = 0.0;
        let mut interaction_rates = 0.0;
        for (side, lg_beta, lg_phi) in [
            (&self.side_a, &lg_beta_a, &lg_phi_a),
            (&self.side_b, &lg_beta_b, &lg_phi_b),
        ] {
            host_loadings += loading_block_term(
                &side.lambda_beta,
                &side.mu_beta,
                lg_beta,
                self.hyper.beta.shape,
                side.nu_beta,
                &side.xi_beta,
                r,
            );
            for j in 0..side.n_hosts {
                host_rates += rate_proxy_term(
                    self.hyper.beta.rate_shape,
                    self.hyper.beta.rate_rate,
                    side.nu_beta,
                    side.xi_beta[j],
                );
            }
            if self.k * side.h > 0 {
                let xi = [side.xi_phi];
                interaction_loadings += loading_block_term(
                    &side.lambda_phi,
                    &side.mu_phi,
                    lg_phi,
                    self.hyper.phi.shape,
                    side.nu_phi,
                    &xi,
                    self.k * side.h,
                );
                interaction_rates += rate_proxy_term(
                    self.hyper.phi.rate_shape,
                    self.hyper.phi.rate_rate,
                    side.nu_phi,
                    side.xi_phi,
                );
            }
        }
        check_term("host-loadings", host_loadings)?;
        check_term("interaction-loadings", interaction_loadings)?;
        check_term("host-rates", host_rates)?;
        check_term("interaction-rates", interaction_rates)?;

        Ok(edge_term - rate_mass
            + user_loadings
            + host_loadings
            + interaction_loadings
            + user_rates
            + host_rates
            + interaction_rates)
    }

    /// Proxy means as one [`PointParams`] per graph; the user block is the
    /// same array in both.
    pub fn point_estimates(&self) -> (PointParams, PointParams) {
        let div = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| x / y).collect()
        };
        let alpha = div(&self.lambda_alpha, &self.mu_alpha);
        let mk = |side: &JointHostSide| PointParams {
            n_users: self.n_users,
            n_hosts: side.n_hosts,
            r: self.r(),
            k: self.k,
            h: side.h,
            alpha: alpha.clone(),
            beta: div(&side.lambda_beta, &side.mu_beta),
            phi: div(&side.lambda_phi, &side.mu_phi),
        };
        (mk(&self.side_a), mk(&self.side_b))
    }
}

/// Runs joint CAVI from a prior-seeded state to convergence.
pub fn fit_joint(
    graph_a: &SparseBipartiteGraph,
    graph_b: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs_a: &CovariateMatrix,
    host_covs_b: &CovariateMatrix,
    hyper: &Hyperparameters,
    opts: &FitOptions,
) -> Result<(JointVariationalState, ElboTrace)> {
    let state = init_joint_state(
        graph_a,
        graph_b,
        user_covs,
        host_covs_a,
        host_covs_b,
        hyper,
        opts.seed,
    )?;
    fit_joint_from_state(state, graph_a, graph_b, opts)
}

/// Runs joint CAVI sweeps from an existing state until the relative ELBO
/// change drops below `tol` or `max_sweeps` is hit.
pub fn fit_joint_from_state(
    mut state: JointVariationalState,
    graph_a: &SparseBipartiteGraph,
    graph_b: &SparseBipartiteGraph,
    opts: &FitOptions,
) -> Result<(JointVariationalState, ElboTrace)> {
    let trace = converge(opts, || {
        let mut stats = SweepStats::default();
        state.update_theta_chi(graph_a, graph_b, &mut stats)?;
        state.update_first_level(graph_a, graph_b, &mut stats)?;
        state.update_second_level();
        let elbo = state.compute_elbo(graph_a, graph_b)?;
        Ok((elbo, stats))
    })?;
    Ok((state, trace))
}
