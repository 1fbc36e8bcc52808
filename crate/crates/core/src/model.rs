//! Model definition: factorized Poisson rates, the censoring link, and the
//! sparse log-likelihood.
//!
//! A cell's Poisson rate decomposes into R latent products plus one term per
//! active covariate pair:
//!
//!   psi_ij = sum_r alpha_ir beta_jr + sum_{k,h} phi_kh x_ik y_jh
//!
//! and the observed binary adjacency is the censoring A_ij = 1{N_ij > 0},
//! giving P(A_ij = 1) = 1 - exp(-psi_ij). Because only the probability of
//! "zero vs nonzero" enters, the log-likelihood collapses to a sum over
//! observed edges plus two factorized totals, making evaluation O(nnz):
//!
//!   log L = sum_{A_ij>0} log(e^{psi_ij} - 1)
//!           - (sum_i alpha_i)' (sum_j beta_j) - sum_{k,h} phi_kh xt_k yt_h
//!
//! Components are indexed l = r for the latent part and l = R + k*H + h for
//! covariate pair (k, h) (0-based); the map is fixed so checkpoints stay
//! portable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, SparseBipartiteGraph};
use crate::math::{log_expm1, ordered_par_sum};
use rayon::prelude::*;

/// Gamma prior settings for one parameter group: loadings are
/// Gamma(shape, zeta) with the rate zeta itself Gamma(rate_shape, rate_rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaGroup {
    /// Shape of the loading prior (the "a" of the group).
    pub shape: f64,
    /// Shape of the prior on the loading rate (the "b").
    pub rate_shape: f64,
    /// Rate of the prior on the loading rate (the "c").
    pub rate_rate: f64,
}

impl Default for GammaGroup {
    fn default() -> Self {
        GammaGroup {
            shape: 1.0,
            rate_shape: 1.0,
            rate_rate: 0.1,
        }
    }
}

impl GammaGroup {
    pub fn validate(&self, name: &str) -> Result<()> {
        for (field, v) in [
            ("shape", self.shape),
            ("rate_shape", self.rate_shape),
            ("rate_rate", self.rate_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "hyperparameter {name}.{field} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Full hyperparameter set: one gamma group per factor block plus the
/// latent dimension R. Defaults are shape = rate_shape = 1, rate_rate = 0.1,
/// R = 20; all overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub r: usize,
    pub alpha: GammaGroup,
    pub beta: GammaGroup,
    pub phi: GammaGroup,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            r: 20,
            alpha: GammaGroup::default(),
            beta: GammaGroup::default(),
            phi: GammaGroup::default(),
        }
    }
}

impl Hyperparameters {
    pub fn with_r(r: usize) -> Self {
        Hyperparameters {
            r,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::InvalidArgument(format!(
                "latent dimension R must be >= 1, got {}",
                self.r
            )));
        }
        self.alpha.validate("alpha")?;
        self.beta.validate("beta")?;
        self.phi.validate("phi")
    }
}

/// Point values of all model parameters, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointParams {
    pub n_users: usize,
    pub n_hosts: usize,
    pub r: usize,
    /// User covariate count K.
    pub k: usize,
    /// Host covariate count H.
    pub h: usize,
    /// |U| x R, row-major.
    pub alpha: Vec<f64>,
    /// |V| x R, row-major.
    pub beta: Vec<f64>,
    /// K x H, row-major.
    pub phi: Vec<f64>,
}

impl PointParams {
    pub fn zeros(n_users: usize, n_hosts: usize, r: usize, k: usize, h: usize) -> Self {
        PointParams {
            n_users,
            n_hosts,
            r,
            k,
            h,
            alpha: vec![0.0; n_users * r],
            beta: vec![0.0; n_hosts * r],
            phi: vec![0.0; k * h],
        }
    }

    #[inline]
    pub fn alpha_row(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.r..(i + 1) * self.r]
    }

    #[inline]
    pub fn beta_row(&self, j: usize) -> &[f64] {
        &self.beta[j * self.r..(j + 1) * self.r]
    }

    #[inline]
    pub fn phi_at(&self, k: usize, h: usize) -> f64 {
        self.phi[k * self.h + h]
    }

    /// Checks that dimensions line up with a graph and covariate pair.
    pub fn check_dims(
        &self,
        graph: &SparseBipartiteGraph,
        user_covs: &CovariateMatrix,
        host_covs: &CovariateMatrix,
    ) -> Result<()> {
        if self.n_users != graph.n_users()
            || self.n_hosts != graph.n_hosts()
            || self.k != user_covs.n_covariates()
            || self.h != host_covs.n_covariates()
            || user_covs.n_nodes() != graph.n_users()
            || host_covs.n_nodes() != graph.n_hosts()
        {
            return Err(Error::DimMismatch(format!(
                "params are {}x{} (R={}, K={}, H={}) but graph is {}x{} with \
                 {} user / {} host covariates",
                self.n_users,
                self.n_hosts,
                self.r,
                self.k,
                self.h,
                graph.n_users(),
                graph.n_hosts(),
                user_covs.n_covariates(),
                host_covs.n_covariates()
            )));
        }
        Ok(())
    }

    /// Total rate for one cell; the scoring hot path (no decomposition).
    #[inline]
    pub fn psi(
        &self,
        user_covs: &CovariateMatrix,
        host_covs: &CovariateMatrix,
        i: usize,
        j: usize,
    ) -> f64 {
        let a = self.alpha_row(i);
        let b = self.beta_row(j);
        let mut acc = 0.0f64;
        for r in 0..self.r {
            acc += a[r] * b[r];
        }
        for &k in user_covs.row(i) {
            for &h in host_covs.row(j) {
                acc += self.phi_at(k as usize, h as usize);
            }
        }
        acc
    }
}

/// The component index of covariate pair (k, h): latent components occupy
/// 0..R and pair (k, h) sits at R + k*H + h.
#[inline]
pub fn component_index(r: usize, n_host_covs: usize, k: usize, h: usize) -> usize {
    r + k * n_host_covs + h
}

/// Per-edge list of active covariate pairs: prefix offsets (length nnz+1)
/// into a flat (k, h) array, pairs enumerated in user-column-major order.
pub fn build_pair_table(
    graph: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
) -> (Vec<usize>, Vec<(u32, u32)>) {
    let mut ptr = Vec::with_capacity(graph.nnz() + 1);
    let mut idx = Vec::new();
    ptr.push(0usize);
    for &(i, j) in graph.edges() {
        for &k in user_covs.row(i as usize) {
            for &h in host_covs.row(j as usize) {
                idx.push((k, h));
            }
        }
        ptr.push(idx.len());
    }
    (ptr, idx)
}

/// A cell rate split into its additive components.
#[derive(Debug, Clone, PartialEq)]
pub struct RateDecomposition {
    pub psi: f64,
    /// Length R + K*H; latent products first, then covariate pairs in
    /// `component_index` order (inactive pairs are zero).
    pub components: Vec<f64>,
}

/// Full rate decomposition for cell (i, j). Validates that every parameter
/// touched is non-negative.
pub fn rate(
    params: &PointParams,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    i: usize,
    j: usize,
) -> Result<RateDecomposition> {
    let r = params.r;
    let mut components = vec![0.0; r + params.k * params.h];
    let a = params.alpha_row(i);
    let b = params.beta_row(j);
    for l in 0..r {
        if a[l] < 0.0 || b[l] < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative loading in latent component {l} of cell ({i}, {j})"
            )));
        }
        components[l] = a[l] * b[l];
    }
    for &k in user_covs.row(i) {
        for &h in host_covs.row(j) {
            let v = params.phi_at(k as usize, h as usize);
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "negative interaction weight for covariate pair ({k}, {h})"
                )));
            }
            components[component_index(r, params.h, k as usize, h as usize)] = v;
        }
    }
    // psi is the component sum, taken in component order so the
    // decomposition invariant holds exactly.
    let psi = components.iter().sum();
    Ok(RateDecomposition { psi, components })
}

/// P(A_ij = 1) = 1 - exp(-psi), computed as -expm1(-psi). Lies in [0, 1).
#[inline]
pub fn link_probability(psi: f64) -> f64 {
    debug_assert!(psi >= 0.0, "link probability needs psi >= 0, got {psi}");
    -(-psi).exp_m1()
}

/// A log-likelihood that may be degenerate: a zero rate under an observed
/// edge drives the likelihood to -inf, reported with the offending edge
/// rather than as a bare NaN/inf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogLikelihood {
    Finite(f64),
    NegativeInfinite { edge: (usize, usize) },
}

impl LogLikelihood {
    pub fn value(&self) -> f64 {
        match self {
            LogLikelihood::Finite(v) => *v,
            LogLikelihood::NegativeInfinite { .. } => f64::NEG_INFINITY,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, LogLikelihood::Finite(_))
    }
}

/// Sparse Bernoulli log-likelihood of the adjacency under `params`:
/// edge terms via the guarded log(e^psi - 1), zero cells absorbed into the
/// factorized totals. Touches each edge once; reduction is fixed-chunk
/// deterministic.
pub fn sparse_log_likelihood(
    graph: &SparseBipartiteGraph,
    params: &PointParams,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
) -> Result<LogLikelihood> {
    params.check_dims(graph, user_covs, host_covs)?;
    let r = params.r;

    let psis: Vec<f64> = graph
        .edges()
        .par_iter()
        .map(|&(i, j)| params.psi(user_covs, host_covs, i as usize, j as usize))
        .collect();
    if let Some(e) = psis.iter().position(|&p| p <= 0.0) {
        let (i, j) = graph.edges()[e];
        return Ok(LogLikelihood::NegativeInfinite {
            edge: (i as usize, j as usize),
        });
    }

    let edge_sum = ordered_par_sum(psis.len(), |e| {
        log_expm1(psis[e]).expect("positive rate checked above")
    });

    // (sum_i alpha_i)' (sum_j beta_j)
    let mut alpha_tot = vec![0.0f64; r];
    for i in 0..params.n_users {
        let row = params.alpha_row(i);
        for l in 0..r {
            alpha_tot[l] += row[l];
        }
    }
    let mut beta_tot = vec![0.0f64; r];
    for j in 0..params.n_hosts {
        let row = params.beta_row(j);
        for l in 0..r {
            beta_tot[l] += row[l];
        }
    }
    let mut rate_mass = 0.0f64;
    for l in 0..r {
        rate_mass += alpha_tot[l] * beta_tot[l];
    }
    let xt = user_covs.column_sums();
    let yt = host_covs.column_sums();
    for k in 0..params.k {
        for h in 0..params.h {
            rate_mass += params.phi_at(k, h) * xt[k] as f64 * yt[h] as f64;
        }
    }

    Ok(LogLikelihood::Finite(edge_sum - rate_mass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Dense Bernoulli log-likelihood over every cell; the independent
    /// reference for the sparse form.
    fn dense_log_likelihood(
        graph: &SparseBipartiteGraph,
        params: &PointParams,
        ucovs: &CovariateMatrix,
        hcovs: &CovariateMatrix,
    ) -> f64 {
        let mut total = 0.0;
        for i in 0..graph.n_users() {
            for j in 0..graph.n_hosts() {
                let psi = params.psi(ucovs, hcovs, i, j);
                let p = link_probability(psi);
                if graph.has_edge(i, j) {
                    total += p.ln();
                } else {
                    total += (1.0 - p).ln();
                }
            }
        }
        total
    }

    fn random_params(
        rng: &mut impl Rng,
        n_users: usize,
        n_hosts: usize,
        r: usize,
        k: usize,
        h: usize,
    ) -> PointParams {
        let mut p = PointParams::zeros(n_users, n_hosts, r, k, h);
        for v in p.alpha.iter_mut().chain(&mut p.beta).chain(&mut p.phi) {
            *v = rng.random::<f64>() * 0.8 + 0.01;
        }
        p
    }

    #[test]
    fn rate_of_zero_params_is_zero() {
        let params = PointParams::zeros(2, 2, 3, 0, 0);
        let covs = CovariateMatrix::empty(2);
        let d = rate(&params, &covs, &covs, 0, 1).unwrap();
        assert_eq!(d.psi, 0.0);
        assert!(d.components.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn rate_scalar_product() {
        let mut params = PointParams::zeros(1, 1, 1, 0, 0);
        params.alpha[0] = 2.0;
        params.beta[0] = 0.5;
        let covs = CovariateMatrix::empty(1);
        let d = rate(&params, &covs, &covs, 0, 0).unwrap();
        assert_eq!(d.psi, 1.0);
    }

    #[test]
    fn rate_decomposition_with_active_pair() {
        let mut params = PointParams::zeros(1, 1, 2, 1, 1);
        params.alpha = vec![1.0, 2.0];
        params.beta = vec![3.0, 4.0];
        params.phi = vec![0.25];
        let ucovs = CovariateMatrix::single_group(1, "g", 1, |_| Some(0)).unwrap();
        let hcovs = CovariateMatrix::single_group(1, "g", 1, |_| Some(0)).unwrap();
        let d = rate(&params, &ucovs, &hcovs, 0, 0).unwrap();
        assert_eq!(d.psi, 11.25);
        assert_eq!(d.components, vec![3.0, 8.0, 0.25]);
        // Exact decomposition: same summation order as psi.
        let repl: f64 = d.components.iter().sum();
        assert_eq!(repl.to_bits(), d.psi.to_bits());
    }

    #[test]
    fn rate_rejects_negative_parameters() {
        let mut params = PointParams::zeros(1, 1, 1, 0, 0);
        params.alpha[0] = -0.5;
        let covs = CovariateMatrix::empty(1);
        assert!(rate(&params, &covs, &covs, 0, 0).is_err());
    }

    #[test]
    fn link_probability_anchors() {
        assert_eq!(link_probability(0.0), 0.0);
        let p1 = link_probability(1.0);
        assert!((p1 - 0.6321206).abs() < 1e-7);
        assert!((p1 - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!(link_probability(30.0) < 1.0);
        // Beyond ~36.7 the complement is below one ulp of 1.0 and the
        // probability rounds up to exactly 1.0; it must still be finite.
        assert!(link_probability(700.0) <= 1.0);
    }

    #[test]
    fn link_probability_matches_poisson_censoring_frequency() {
        use rand_distr::{Distribution, Poisson};
        let psi = 11.25;
        let p = link_probability(psi);
        let n = 1_000_000usize;
        let mut rng = crate::rng::labeled(17, "test/censoring");
        let pois = Poisson::new(psi).unwrap();
        let nonzero = (0..n)
            .filter(|_| pois.sample(&mut rng) > 0.5)
            .count();
        let freq = nonzero as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "censoring frequency {freq} vs probability {p} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn probability_is_strictly_monotone_in_parameters() {
        let mut rng = crate::rng::labeled(3, "test/monotone");
        for _ in 0..50 {
            let mut params = random_params(&mut rng, 2, 2, 3, 1, 1);
            let ucovs = CovariateMatrix::single_group(2, "g", 1, |_| Some(0)).unwrap();
            let hcovs = CovariateMatrix::single_group(2, "g", 1, |_| Some(0)).unwrap();
            let base = link_probability(params.psi(&ucovs, &hcovs, 0, 1));
            let l = rng.random_range(0..3usize);
            params.alpha[l] += 0.3;
            let bumped_alpha = link_probability(params.psi(&ucovs, &hcovs, 0, 1));
            assert!(bumped_alpha > base, "alpha bump must raise probability");
            params.beta[3 + l] += 0.2; // row 1 of beta
            let bumped_beta = link_probability(params.psi(&ucovs, &hcovs, 0, 1));
            assert!(bumped_beta > bumped_alpha, "beta bump must raise probability");
            params.phi[0] += 0.1; // pair is active for every cell here
            let bumped_phi = link_probability(params.psi(&ucovs, &hcovs, 0, 1));
            assert!(bumped_phi > bumped_beta, "phi bump must raise probability");
        }
    }

    #[test]
    fn likelihood_of_empty_graph() {
        let graph = SparseBipartiteGraph::from_edges(3, 2, vec![]).unwrap();
        let covs_u = CovariateMatrix::empty(3);
        let covs_h = CovariateMatrix::empty(2);
        let zero = PointParams::zeros(3, 2, 2, 0, 0);
        let ll = sparse_log_likelihood(&graph, &zero, &covs_u, &covs_h).unwrap();
        assert_eq!(ll.value(), 0.0);

        let mut rng = crate::rng::labeled(9, "test/emptyll");
        let params = random_params(&mut rng, 3, 2, 2, 0, 0);
        let ll = sparse_log_likelihood(&graph, &params, &covs_u, &covs_h).unwrap();
        let alpha_tot: Vec<f64> = (0..2)
            .map(|l| (0..3).map(|i| params.alpha_row(i)[l]).sum())
            .collect();
        let beta_tot: Vec<f64> = (0..2)
            .map(|l| (0..2).map(|j| params.beta_row(j)[l]).sum())
            .collect();
        let want = -(alpha_tot[0] * beta_tot[0] + alpha_tot[1] * beta_tot[1]);
        assert!((ll.value() - want).abs() < 1e-12);
    }

    #[test]
    fn likelihood_flags_zero_rate_edge() {
        let graph = SparseBipartiteGraph::from_edges(2, 2, vec![(1, 1)]).unwrap();
        let covs = CovariateMatrix::empty(2);
        let params = PointParams::zeros(2, 2, 2, 0, 0);
        let ll = sparse_log_likelihood(&graph, &params, &covs, &covs).unwrap();
        assert_eq!(
            ll,
            LogLikelihood::NegativeInfinite { edge: (1, 1) }
        );
        assert_eq!(ll.value(), f64::NEG_INFINITY);
    }

    #[test]
    fn sparse_likelihood_matches_dense_oracle() {
        let mut rng = crate::rng::labeled(23, "test/densell");
        for trial in 0..100 {
            let n_users = rng.random_range(1..=10usize);
            let n_hosts = rng.random_range(1..=10usize);
            let r = rng.random_range(1..=4usize);
            let with_covs = trial % 2 == 0;
            let (k, h) = if with_covs { (2, 2) } else { (0, 0) };
            let mut edges = Vec::new();
            for i in 0..n_users as u32 {
                for j in 0..n_hosts as u32 {
                    if rng.random::<f64>() < 0.35 {
                        edges.push((i, j));
                    }
                }
            }
            let graph = SparseBipartiteGraph::from_edges(n_users, n_hosts, edges).unwrap();
            let ucovs = if with_covs {
                CovariateMatrix::single_group(n_users, "g", k, |i| Some(i % k)).unwrap()
            } else {
                CovariateMatrix::empty(n_users)
            };
            let hcovs = if with_covs {
                CovariateMatrix::single_group(n_hosts, "g", h, |j| Some(j % h)).unwrap()
            } else {
                CovariateMatrix::empty(n_hosts)
            };
            let params = random_params(&mut rng, n_users, n_hosts, r, k, h);
            let sparse = sparse_log_likelihood(&graph, &params, &ucovs, &hcovs).unwrap();
            let dense = dense_log_likelihood(&graph, &params, &ucovs, &hcovs);
            let rel = (sparse.value() - dense).abs() / dense.abs().max(1e-12);
            assert!(
                rel < 1e-10,
                "trial {trial}: sparse {} vs dense {dense} (rel {rel})",
                sparse.value()
            );
        }
    }

    #[test]
    fn covariate_free_reduction_is_plain_factorization() {
        let mut rng = crate::rng::labeled(29, "test/reduction");
        let params = random_params(&mut rng, 4, 3, 2, 0, 0);
        let covs_u = CovariateMatrix::empty(4);
        let covs_h = CovariateMatrix::empty(3);
        for i in 0..4 {
            for j in 0..3 {
                let d = rate(&params, &covs_u, &covs_h, i, j).unwrap();
                let dot: f64 = (0..2)
                    .map(|l| params.alpha_row(i)[l] * params.beta_row(j)[l])
                    .sum();
                assert_eq!(d.psi, dot);
                assert_eq!(d.components.len(), 2);
            }
        }
    }
}
