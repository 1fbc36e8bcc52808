//! Link-prediction evaluation: probability scorers, rank-based AUC with
//! mid-rank tie handling, ROC curves, negative subsampling, cold-start and
//! new-link categories, covariate ablation, and degree / truncated-SVD /
//! truncated-Katz baselines.
//!
//! The AUC here is the probability that a uniformly chosen positive pair
//! outranks a uniformly chosen negative pair, with ties counted one half. It
//! is computed from mid-ranks in a single pass over the sorted scores, which
//! is algebraically identical to the pairwise count and to the trapezoidal
//! integral of the ROC curve.

pub mod svd;

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::cavi::VariationalState;
use crate::error::{Error, Result};
use crate::gibbs::PosteriorSamples;
use crate::graph::{new_link_mask, CovariateMatrix, SparseBipartiteGraph};
use crate::model::{link_probability, PointParams};
use crate::rng::{cell_counter, derive_seed, stream};

pub use svd::{scree, truncated_svd, SvdMethod, TruncatedSvd};

/// Negatives drawn per positive when nothing else is requested.
pub const DEFAULT_NEGATIVE_RATIO: f64 = 3.0;
/// Proxy draws per cell for the Monte Carlo scorer.
pub const DEFAULT_MC_SAMPLES: usize = 100;
/// Resampling repetitions in stability reports.
pub const DEFAULT_STABILITY_REPEATS: usize = 500;
/// Spectral shrinkage weight for the truncated-Katz baseline.
pub const DEFAULT_KATZ_ETA: f64 = 1e-4;

/// Which slice of test pairs an evaluation run looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Every test edge against test-zero cells.
    All,
    /// Test edges absent from training, against cells zero in both graphs.
    New,
    /// Pairs in rows of users that appear only in the test window.
    ColdStartUser,
    /// Pairs in columns of hosts that appear only in the test window.
    ColdStartHost,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::All => "all",
            Category::New => "new",
            Category::ColdStartUser => "cold_start_user",
            Category::ColdStartHost => "cold_start_host",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub label: bool,
    pub category: Category,
}

/// Rank-based AUC plus the ROC polyline it integrates to.
#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc_points: Vec<(f64, f64)>,
    pub sampling_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub ratio: f64,
    pub category: Category,
    pub seed: u64,
    /// Also exclude training edges from the negative pool in the `All`
    /// category (the `New` and cold-start pools never contain them).
    pub exclude_train_edges: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ratio: DEFAULT_NEGATIVE_RATIO,
            category: Category::All,
            seed: 0,
            exclude_train_edges: false,
        }
    }
}

/// Anything that turns a (user, host) pair into a link score. Scores must be
/// deterministic in (training data, construction seed).
pub trait Scorer: Sync {
    fn score(&self, i: usize, j: usize) -> f64;
}

fn gamma_draw(rng: &mut impl Rng, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// Plug-in probability 1 - exp(-psi) at the point estimates.
pub struct PluginScorer<'a> {
    pub params: &'a PointParams,
    pub user_covs: &'a CovariateMatrix,
    pub host_covs: &'a CovariateMatrix,
}

impl Scorer for PluginScorer<'_> {
    fn score(&self, i: usize, j: usize) -> f64 {
        link_probability(self.params.psi(self.user_covs, self.host_covs, i, j))
    }
}

/// Averages the censoring probability over proxy draws from the fitted
/// variational gammas: 1 - (1/M) sum_m exp(-psi^(m)).
pub struct MonteCarloScorer<'a> {
    pub state: &'a VariationalState,
    pub user_covs: &'a CovariateMatrix,
    pub host_covs: &'a CovariateMatrix,
    pub m: usize,
    pub seed: u64,
}

impl Scorer for MonteCarloScorer<'_> {
    fn score(&self, i: usize, j: usize) -> f64 {
        let r = self.state.r();
        let h = self.state.h;
        let mut rng = stream(self.seed, "score/mc", cell_counter(i, j));
        let mut acc = 0.0;
        for _ in 0..self.m {
            let mut psi = 0.0;
            for t in 0..r {
                let a = gamma_draw(
                    &mut rng,
                    self.state.lambda_alpha[i * r + t],
                    self.state.mu_alpha[i * r + t],
                );
                let b = gamma_draw(
                    &mut rng,
                    self.state.lambda_beta[j * r + t],
                    self.state.mu_beta[j * r + t],
                );
                psi += a * b;
            }
            for &k in self.user_covs.row(i) {
                for &hh in self.host_covs.row(j) {
                    let idx = k as usize * h + hh as usize;
                    psi += gamma_draw(
                        &mut rng,
                        self.state.lambda_phi[idx],
                        self.state.mu_phi[idx],
                    );
                }
            }
            acc += (-psi).exp();
        }
        1.0 - acc / self.m as f64
    }
}

/// Averages the censoring probability over stored posterior draws.
pub struct GibbsScorer<'a> {
    pub samples: &'a PosteriorSamples,
    pub user_covs: &'a CovariateMatrix,
    pub host_covs: &'a CovariateMatrix,
}

impl Scorer for GibbsScorer<'_> {
    fn score(&self, i: usize, j: usize) -> f64 {
        crate::gibbs::posterior_mean_link_probability(
            self.samples,
            self.user_covs,
            self.host_covs,
            i,
            j,
        )
    }
}

/// Plug-in scorer that imputes the latent features of nodes unseen in
/// training with the mean feature of the trained nodes on the same side,
/// while the covariate block stays active through the new node's indicators.
/// Nodes that carry covariate groups but no known level fall back to
/// all-zero indicators and are flagged.
pub struct ColdStartScorer<'a> {
    params: &'a PointParams,
    user_covs: &'a CovariateMatrix,
    host_covs: &'a CovariateMatrix,
    mean_alpha: Vec<f64>,
    mean_beta: Vec<f64>,
    trained_user: Vec<bool>,
    trained_host: Vec<bool>,
    flagged_users: Vec<usize>,
    flagged_hosts: Vec<usize>,
}

impl<'a> ColdStartScorer<'a> {
    pub fn new(
        params: &'a PointParams,
        train: &SparseBipartiteGraph,
        user_covs: &'a CovariateMatrix,
        host_covs: &'a CovariateMatrix,
    ) -> Self {
        let r = params.r;
        let trained_user: Vec<bool> = (0..params.n_users)
            .map(|i| train.out_degree(i) > 0)
            .collect();
        let trained_host: Vec<bool> = (0..params.n_hosts)
            .map(|j| train.in_degree(j) > 0)
            .collect();
        let mean_of = |rows: &[f64], keep: &[bool]| -> Vec<f64> {
            let mut mean = vec![0.0; r];
            let n = keep.iter().filter(|&&k| k).count();
            if n == 0 {
                return mean;
            }
            for (node, &k) in keep.iter().enumerate() {
                if k {
                    for t in 0..r {
                        mean[t] += rows[node * r + t];
                    }
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            mean
        };
        let mean_alpha = mean_of(&params.alpha, &trained_user);
        let mean_beta = mean_of(&params.beta, &trained_host);
        let flagged = |covs: &CovariateMatrix, keep: &[bool]| -> Vec<usize> {
            if covs.n_covariates() == 0 {
                return Vec::new();
            }
            keep.iter()
                .enumerate()
                .filter(|&(node, &k)| !k && covs.row(node).is_empty())
                .map(|(node, _)| node)
                .collect()
        };
        let flagged_users = flagged(user_covs, &trained_user);
        let flagged_hosts = flagged(host_covs, &trained_host);
        ColdStartScorer {
            params,
            user_covs,
            host_covs,
            mean_alpha,
            mean_beta,
            trained_user,
            trained_host,
            flagged_users,
            flagged_hosts,
        }
    }

    /// New nodes whose covariate levels are unknown (scored on the mean
    /// feature alone).
    pub fn flagged_users(&self) -> &[usize] {
        &self.flagged_users
    }

    pub fn flagged_hosts(&self) -> &[usize] {
        &self.flagged_hosts
    }
}

impl Scorer for ColdStartScorer<'_> {
    fn score(&self, i: usize, j: usize) -> f64 {
        let r = self.params.r;
        let a: &[f64] = if self.trained_user[i] {
            self.params.alpha_row(i)
        } else {
            &self.mean_alpha
        };
        let b: &[f64] = if self.trained_host[j] {
            self.params.beta_row(j)
        } else {
            &self.mean_beta
        };
        let mut psi = 0.0;
        for t in 0..r {
            psi += a[t] * b[t];
        }
        let h = self.params.h;
        for &k in self.user_covs.row(i) {
            for &hh in self.host_covs.row(j) {
                psi += self.params.phi[k as usize * h + hh as usize];
            }
        }
        link_probability(psi)
    }
}

/// 1 - exp(-outdegree_i * indegree_j) from the training graph.
pub struct DegreeScorer {
    out_deg: Vec<f64>,
    in_deg: Vec<f64>,
}

impl DegreeScorer {
    pub fn new(train: &SparseBipartiteGraph) -> Self {
        DegreeScorer {
            out_deg: (0..train.n_users())
                .map(|i| train.out_degree(i) as f64)
                .collect(),
            in_deg: (0..train.n_hosts())
                .map(|j| train.in_degree(j) as f64)
                .collect(),
        }
    }
}

impl Scorer for DegreeScorer {
    fn score(&self, i: usize, j: usize) -> f64 {
        link_probability(self.out_deg[i] * self.in_deg[j])
    }
}

/// score(i, j) = sum_r w_r u_ir v_jr over a truncated spectral factorization,
/// with w the raw singular values (truncated SVD) or their Katz transform.
pub struct SpectralScorer {
    svd: TruncatedSvd,
    weights: Vec<f64>,
}

impl Scorer for SpectralScorer {
    fn score(&self, i: usize, j: usize) -> f64 {
        let u = self.svd.u_row(i);
        let v = self.svd.v_row(j);
        let mut acc = 0.0;
        for t in 0..self.svd.rank {
            acc += self.weights[t] * u[t] * v[t];
        }
        acc
    }
}

/// Uniform noise per cell; the floor every informative scorer must clear.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, i: usize, j: usize) -> f64 {
        stream(self.seed, "score/random", cell_counter(i, j)).random()
    }
}

pub fn baseline_degree(train: &SparseBipartiteGraph) -> DegreeScorer {
    DegreeScorer::new(train)
}

pub fn baseline_tsvd(train: &SparseBipartiteGraph, r: usize) -> Result<SpectralScorer> {
    let svd = truncated_svd(train, r, SvdMethod::Randomized)?;
    let weights = svd.s.clone();
    Ok(SpectralScorer { svd, weights })
}

/// As the truncated SVD with each singular value d mapped through
/// f(d) = 1/(1 - eta d) - 1, the closed form of the weighted path series
/// sum_k (eta d)^k; requires eta * d_1 < 1.
pub fn baseline_tkatz(train: &SparseBipartiteGraph, r: usize, eta: f64) -> Result<SpectralScorer> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "katz weight eta must be positive and finite, got {eta}"
        )));
    }
    let svd = truncated_svd(train, r, SvdMethod::Randomized)?;
    if eta * svd.s[0] >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "eta * d_1 = {} >= 1: the path series diverges",
            eta * svd.s[0]
        )));
    }
    let weights = svd.s.iter().map(|&d| 1.0 / (1.0 - eta * d) - 1.0).collect();
    Ok(SpectralScorer { svd, weights })
}

/// Rank-based AUC with mid-rank ties, plus the ROC polyline. `sampling_seed`
/// is zero here; evaluation entry points stamp their own.
pub fn auc(scored: &[ScoredPair]) -> Result<AucResult> {
    for sp in scored {
        if !sp.score.is_finite() {
            return Err(Error::NonFiniteScore { i: sp.i, j: sp.j });
        }
    }
    let n_pos = scored.iter().filter(|sp| sp.label).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_unstable_by(|&a, &b| scored[a].score.partial_cmp(&scored[b].score).unwrap());

    // Mid-rank sum over positives: ranks are 1-based, tied groups share the
    // group's average rank (a half-integer, exact in floating point).
    let mut rank_sum_pos = 0.0;
    let mut s = 0;
    while s < idx.len() {
        let mut e = s;
        while e + 1 < idx.len() && scored[idx[e + 1]].score == scored[idx[s]].score {
            e += 1;
        }
        let avg_rank = (s + e) as f64 / 2.0 + 1.0;
        for &t in &idx[s..=e] {
            if scored[t].label {
                rank_sum_pos += avg_rank;
            }
        }
        s = e + 1;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    let auc = (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);

    // ROC sweep from the highest score down, one point per distinct score.
    let mut roc_points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut e = idx.len();
    while e > 0 {
        let mut s = e;
        while s > 0 && scored[idx[s - 1]].score == scored[idx[e - 1]].score {
            s -= 1;
        }
        for &t in &idx[s..e] {
            if scored[t].label {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        roc_points.push((fp as f64 / nn, tp as f64 / np));
        e = s;
    }
    Ok(AucResult {
        auc,
        n_pos,
        n_neg,
        roc_points,
        sampling_seed: 0,
    })
}

/// Trapezoidal integral of an ROC polyline (compensated summation, so it
/// reproduces the rank-based AUC to near machine precision).
pub fn roc_trapezoid(roc_points: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for w in roc_points.windows(2) {
        let term = (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
        let y = term - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Users appearing in test rows but never in training.
pub fn new_users(train: &SparseBipartiteGraph, test: &SparseBipartiteGraph) -> Vec<usize> {
    (0..train.n_users())
        .filter(|&i| train.out_degree(i) == 0 && test.out_degree(i) > 0)
        .collect()
}

/// Hosts appearing in test columns but never in training.
pub fn new_hosts(train: &SparseBipartiteGraph, test: &SparseBipartiteGraph) -> Vec<usize> {
    (0..train.n_hosts())
        .filter(|&j| train.in_degree(j) == 0 && test.in_degree(j) > 0)
        .collect()
}

/// Positive pairs of a category, from the test graph.
pub fn positives(
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    category: Category,
) -> Result<Vec<(u32, u32)>> {
    if !train.same_universe(test) {
        return Err(Error::DimMismatch(
            "train and test graphs must share node universes".into(),
        ));
    }
    Ok(match category {
        Category::All => test.edges().to_vec(),
        Category::New => new_link_mask(train, test)?,
        Category::ColdStartUser => test
            .edges()
            .iter()
            .filter(|&&(i, _)| train.out_degree(i as usize) == 0)
            .copied()
            .collect(),
        Category::ColdStartHost => test
            .edges()
            .iter()
            .filter(|&&(_, j)| train.in_degree(j as usize) == 0)
            .copied()
            .collect(),
    })
}

struct NegativePool<'a> {
    train: &'a SparseBipartiteGraph,
    test: &'a SparseBipartiteGraph,
    category: Category,
    exclude_train: bool,
    /// Row pool for cold-start-user, column pool for cold-start-host.
    nodes: Vec<usize>,
}

impl<'a> NegativePool<'a> {
    fn build(
        train: &'a SparseBipartiteGraph,
        test: &'a SparseBipartiteGraph,
        category: Category,
        exclude_train: bool,
    ) -> Self {
        let nodes = match category {
            Category::ColdStartUser => new_users(train, test),
            Category::ColdStartHost => new_hosts(train, test),
            _ => Vec::new(),
        };
        NegativePool {
            train,
            test,
            category,
            exclude_train,
            nodes,
        }
    }

    fn eligible(&self, i: usize, j: usize) -> bool {
        if self.test.has_edge(i, j) {
            return false;
        }
        match self.category {
            Category::All => !self.exclude_train || !self.train.has_edge(i, j),
            Category::New => !self.train.has_edge(i, j),
            // Cold-start rows/columns have no training edges by definition.
            Category::ColdStartUser | Category::ColdStartHost => true,
        }
    }

    fn available(&self) -> usize {
        let n_users = self.train.n_users();
        let n_hosts = self.train.n_hosts();
        match self.category {
            Category::All => {
                let mut avail = n_users * n_hosts - self.test.nnz();
                if self.exclude_train {
                    let train_only = self
                        .train
                        .edges()
                        .iter()
                        .filter(|&&(i, j)| !self.test.has_edge(i as usize, j as usize))
                        .count();
                    avail -= train_only;
                }
                avail
            }
            Category::New => {
                let union = self.test.nnz()
                    + self
                        .train
                        .edges()
                        .iter()
                        .filter(|&&(i, j)| !self.test.has_edge(i as usize, j as usize))
                        .count();
                n_users * n_hosts - union
            }
            Category::ColdStartUser => self
                .nodes
                .iter()
                .map(|&i| n_hosts - self.test.out_degree(i))
                .sum(),
            Category::ColdStartHost => self
                .nodes
                .iter()
                .map(|&j| n_users - self.test.in_degree(j))
                .sum(),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> (usize, usize) {
        match self.category {
            Category::ColdStartUser => (
                self.nodes[rng.random_range(0..self.nodes.len())],
                rng.random_range(0..self.train.n_hosts()),
            ),
            Category::ColdStartHost => (
                rng.random_range(0..self.train.n_users()),
                self.nodes[rng.random_range(0..self.nodes.len())],
            ),
            _ => (
                rng.random_range(0..self.train.n_users()),
                rng.random_range(0..self.train.n_hosts()),
            ),
        }
    }

    /// Every eligible cell in row-major order.
    fn enumerate(&self) -> Vec<(u32, u32)> {
        let mut pool = Vec::new();
        match self.category {
            Category::ColdStartUser => {
                for &i in &self.nodes {
                    for j in 0..self.train.n_hosts() {
                        if self.eligible(i, j) {
                            pool.push((i as u32, j as u32));
                        }
                    }
                }
            }
            Category::ColdStartHost => {
                for i in 0..self.train.n_users() {
                    for &j in &self.nodes {
                        if self.eligible(i, j) {
                            pool.push((i as u32, j as u32));
                        }
                    }
                }
            }
            _ => {
                for i in 0..self.train.n_users() {
                    for j in 0..self.train.n_hosts() {
                        if self.eligible(i, j) {
                            pool.push((i as u32, j as u32));
                        }
                    }
                }
            }
        }
        pool
    }
}

/// Uniform sample without replacement of `round(ratio * n_positives)` cells
/// (at least one) from the category's zero-cell pool. Training edges stay in
/// the `All` pool, matching the protocol of sampling from test-zero cells;
/// see `subsample_negatives_with` for the exclusion variant.
pub fn subsample_negatives(
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    ratio: f64,
    category: Category,
    seed: u64,
) -> Result<Vec<(u32, u32)>> {
    subsample_negatives_with(train, test, ratio, category, seed, false)
}

pub fn subsample_negatives_with(
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    ratio: f64,
    category: Category,
    seed: u64,
    exclude_train_edges: bool,
) -> Result<Vec<(u32, u32)>> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "negative ratio must be positive and finite, got {ratio}"
        )));
    }
    let n_pos = positives(train, test, category)?.len();
    let requested = ((ratio * n_pos as f64).round() as usize).max(1);
    let pool = NegativePool::build(train, test, category, exclude_train_edges);
    let available = pool.available();
    if requested > available {
        return Err(Error::NegativePoolExhausted {
            requested,
            available,
        });
    }
    let mut rng = stream(seed, "eval/negatives", 0);
    if requested * 2 > available {
        // The pool is mostly consumed: enumerate it and take a partial
        // Fisher-Yates prefix instead of rejection-sampling the remainder.
        let mut cells = pool.enumerate();
        debug_assert_eq!(cells.len(), available);
        for k in 0..requested {
            let swap = k + rng.random_range(0..cells.len() - k);
            cells.swap(k, swap);
        }
        cells.truncate(requested);
        Ok(cells)
    } else {
        let mut chosen = HashSet::with_capacity(requested);
        let mut out = Vec::with_capacity(requested);
        while out.len() < requested {
            let (i, j) = pool.draw(&mut rng);
            if pool.eligible(i, j) && chosen.insert((i as u32, j as u32)) {
                out.push((i as u32, j as u32));
            }
        }
        Ok(out)
    }
}

fn score_pairs(
    scorer: &dyn Scorer,
    pairs: &[(u32, u32)],
    label: bool,
    category: Category,
) -> Vec<ScoredPair> {
    pairs
        .par_iter()
        .map(|&(i, j)| ScoredPair {
            i: i as usize,
            j: j as usize,
            score: scorer.score(i as usize, j as usize),
            label,
            category,
        })
        .collect()
}

/// Scores the category's positives against a fresh negative subsample and
/// returns both the scored pairs and the AUC summary.
pub fn evaluate(
    scorer: &dyn Scorer,
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    opts: &EvalOptions,
) -> Result<(Vec<ScoredPair>, AucResult)> {
    let pos = positives(train, test, opts.category)?;
    let neg = subsample_negatives_with(
        train,
        test,
        opts.ratio,
        opts.category,
        opts.seed,
        opts.exclude_train_edges,
    )?;
    let mut scored = score_pairs(scorer, &pos, true, opts.category);
    scored.extend(score_pairs(scorer, &neg, false, opts.category));
    let mut result = auc(&scored)?;
    result.sampling_seed = opts.seed;
    Ok((scored, result))
}

/// AUC against the entire eligible zero-cell pool (no subsampling).
pub fn evaluate_full_negatives(
    scorer: &dyn Scorer,
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    category: Category,
    exclude_train_edges: bool,
) -> Result<AucResult> {
    let pos = positives(train, test, category)?;
    let pool = NegativePool::build(train, test, category, exclude_train_edges);
    let neg = pool.enumerate();
    let mut scored = score_pairs(scorer, &pos, true, category);
    scored.extend(score_pairs(scorer, &neg, false, category));
    auc(&scored)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioStability {
    pub ratio: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Mean and standard deviation of the subsampled AUC across `n_repeats`
/// resampling seeds, for each requested negative ratio.
pub fn auc_stability(
    scorer: &dyn Scorer,
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    ratios: &[f64],
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<RatioStability>> {
    if n_repeats < 2 {
        return Err(Error::InvalidArgument(
            "stability needs at least two repeats".into(),
        ));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let aucs: Result<Vec<f64>> = (0..n_repeats)
                .into_par_iter()
                .map(|rep| {
                    let rep_seed =
                        derive_seed(seed, &format!("eval/stability/{ratio}/{rep}"));
                    let opts = EvalOptions {
                        ratio,
                        seed: rep_seed,
                        ..Default::default()
                    };
                    Ok(evaluate(scorer, train, test, &opts)?.1.auc)
                })
                .collect();
            let aucs = aucs?;
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (aucs.len() - 1) as f64;
            Ok(RatioStability {
                ratio,
                mean,
                sd: var.sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Host,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub side: Side,
    pub group: usize,
    pub group_name: String,
    pub full_auc: f64,
    pub ablated_auc: f64,
    /// full - ablated: positive when the group carries predictive signal.
    pub delta: f64,
}

/// Refits without one covariate group and reports the AUC it was worth.
/// Both fits are evaluated on the identical positive/negative pair sample.
#[allow(clippy::too_many_arguments)]
pub fn ablate_covariate(
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
    hyper: &crate::model::Hyperparameters,
    fit_opts: &crate::cavi::FitOptions,
    side: Side,
    group: usize,
    eval_opts: &EvalOptions,
) -> Result<AblationReport> {
    let (full_state, _) = crate::cavi::fit(train, user_covs, host_covs, hyper, fit_opts)?;
    let full_params = full_state.point_estimates();
    let full_scorer = PluginScorer {
        params: &full_params,
        user_covs,
        host_covs,
    };
    let (_, full) = evaluate(&full_scorer, train, test, eval_opts)?;

    let (abl_user, abl_host, group_name) = match side {
        Side::User => {
            let dropped = user_covs.drop_group(group)?;
            let name = user_covs.group_names()[group].clone();
            (dropped, host_covs.clone(), name)
        }
        Side::Host => {
            let dropped = host_covs.drop_group(group)?;
            let name = host_covs.group_names()[group].clone();
            (user_covs.clone(), dropped, name)
        }
    };
    let (abl_state, _) = crate::cavi::fit(train, &abl_user, &abl_host, hyper, fit_opts)?;
    let abl_params = abl_state.point_estimates();
    let abl_scorer = PluginScorer {
        params: &abl_params,
        user_covs: &abl_user,
        host_covs: &abl_host,
    };
    let (_, ablated) = evaluate(&abl_scorer, train, test, eval_opts)?;

    Ok(AblationReport {
        side,
        group,
        group_name,
        full_auc: full.auc,
        ablated_auc: ablated.auc,
        delta: full.auc - ablated.auc,
    })
}

/// Spearman rank correlation with mid-rank ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0 + 1.0;
            for &t in &idx[s..=e] {
                r[t] = avg;
            }
            s = e + 1;
        }
        r
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for t in 0..ra.len() {
        cov += (ra[t] - ma) * (rb[t] - mb);
        va += (ra[t] - ma) * (ra[t] - ma);
        vb += (rb[t] - mb) * (rb[t] - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}
