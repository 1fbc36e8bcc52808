//! End-to-end acceptance checks, one test per shipped guarantee:
//! objective monotonicity, likelihood agreement with dense enumeration, the
//! censoring law of the generator, variational/Gibbs agreement, recovery
//! power on synthetic truths, covariate uplift, subsampled-AUC stability,
//! seasonal recovery, joint-model consistency, baseline exactness, AUC
//! exactness, and sparse sweep-cost scaling.
//!
//! Each test prints a single `[cNN] PASS — ...` summary line (visible with
//! `--nocapture`); the harness line itself is the pass/fail verdict.

use std::collections::BTreeSet;
use std::time::Instant;

use bplink::cavi::{self, FitOptions};
use bplink::eval::{
    auc, auc_stability, baseline_tkatz, evaluate_full_negatives, spearman, truncated_svd,
    Category, DegreeScorer, PluginScorer, Scorer, ScoredPair, SvdMethod,
};
use bplink::gibbs::{self, ChainOptions};
use bplink::graph::{CovariateMatrix, PeriodMap, SparseBipartiteGraph, TemporalGraphSequence};
use bplink::joint;
use bplink::model::{
    link_probability, sparse_log_likelihood, GammaGroup, Hyperparameters, PointParams,
};
use bplink::seasonal::{self, SeasonalAdjustments, SeasonalHyperparameters, SeasonalScorer};
use bplink::{rng, synth};
use rand::Rng;

/// Generator hyperparameters with a concentrated rate hyperprior so synthetic
/// truths land in a predictable density band: zeta ~ Gamma(24, 24/mean) keeps
/// the block rate near `zeta_mean`, hence loadings near 1/zeta_mean.
fn concentrated_hyper(r: usize, zeta_mean: f64) -> Hyperparameters {
    let group = GammaGroup {
        shape: 1.0,
        rate_shape: 24.0,
        rate_rate: 24.0 / zeta_mean,
    };
    Hyperparameters {
        r,
        alpha: group,
        beta: group,
        phi: group,
    }
}

fn union_of(snaps: &[SparseBipartiteGraph]) -> SparseBipartiteGraph {
    let mut set = BTreeSet::new();
    for g in snaps {
        set.extend(g.edges().iter().copied());
    }
    SparseBipartiteGraph::from_edges(
        snaps[0].n_users(),
        snaps[0].n_hosts(),
        set.into_iter().collect(),
    )
    .unwrap()
}

/// Full-negative-enumeration AUC of a plug-in scorer for fitted parameters.
fn plugin_auc(
    params: &PointParams,
    ucovs: &CovariateMatrix,
    hcovs: &CovariateMatrix,
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
    category: Category,
) -> f64 {
    let scorer = PluginScorer {
        params,
        user_covs: ucovs,
        host_covs: hcovs,
    };
    evaluate_full_negatives(&scorer, train, test, category, false)
        .unwrap()
        .auc
}

/// The ELBO must not decrease across sweeps (up to roundoff slack) on any of
/// 50 seeded instances spanning sizes up to 300 x 200, ranks {2, 5, 20}, and
/// runs with and without covariates, all inside a five-minute budget.
#[test]
fn c01_elbo_never_decreases() {
    let started = Instant::now();
    let sizes = [(40, 30), (80, 60), (150, 100), (220, 160), (300, 200)];
    let ranks = [2usize, 5, 20];
    let mut worst_rel_drop = f64::NEG_INFINITY;
    for instance in 0..50u64 {
        let (n_users, n_hosts) = sizes[(instance as usize) % sizes.len()];
        let r_fit = ranks[(instance as usize) % ranks.len()];
        let (ug, hg): (&[usize], &[usize]) = if instance % 2 == 0 {
            (&[2], &[3])
        } else {
            (&[], &[])
        };
        let (params, ucovs, hcovs) =
            synth::sample_params(n_users, n_hosts, ug, hg, &Hyperparameters::with_r(4), instance)
                .unwrap();
        let graph = synth::sample_graph(&params, &ucovs, &hcovs, instance.wrapping_add(1000));
        let opts = FitOptions {
            seed: 7_000 + instance,
            tol: 1e-300,
            max_sweeps: 10,
        };
        let (_, trace) =
            cavi::fit(&graph, &ucovs, &hcovs, &Hyperparameters::with_r(r_fit), &opts).unwrap();
        assert!(trace.values.len() >= 2, "instance {instance} ran one sweep");
        for w in trace.values.windows(2) {
            let slack = 1e-9 * w[0].abs();
            let drop = w[0] - w[1];
            worst_rel_drop = worst_rel_drop.max(drop / w[0].abs().max(1.0));
            assert!(
                w[1] >= w[0] - slack,
                "instance {instance} ({n_users}x{n_hosts}, r={r_fit}): \
                 elbo fell from {} to {}",
                w[0],
                w[1]
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "monotonicity suite took {secs:.1}s, budget 300s");
    println!(
        "[c01] PASS — elbo monotone on 50 instances (worst signed rel drop {worst_rel_drop:.2e}, {secs:.1}s)"
    );
}

/// The sparse log-likelihood must equal a dense full-enumeration Bernoulli
/// log-likelihood to 1e-10 relative on 100 random instances up to 12 x 12.
#[test]
fn c02_sparse_likelihood_matches_dense() {
    let mut worst = 0.0f64;
    for instance in 0..100u64 {
        let n_users = 1 + (instance as usize) % 12;
        let n_hosts = 1 + ((instance as usize) / 5) % 12;
        let (ug, hg): (&[usize], &[usize]) = if instance % 2 == 0 {
            (&[2], &[2])
        } else {
            (&[], &[])
        };
        let (params, ucovs, hcovs) =
            synth::sample_params(n_users, n_hosts, ug, hg, &Hyperparameters::with_r(3), instance)
                .unwrap();
        let graph = synth::sample_graph(&params, &ucovs, &hcovs, instance.wrapping_add(77));
        let sparse = sparse_log_likelihood(&graph, &params, &ucovs, &hcovs).unwrap();
        assert!(sparse.is_finite(), "instance {instance} degenerate");

        let mut dense = 0.0;
        for i in 0..n_users {
            for j in 0..n_hosts {
                let psi = params.psi(&ucovs, &hcovs, i, j);
                if graph.has_edge(i, j) {
                    dense += link_probability(psi).ln();
                } else {
                    dense -= psi;
                }
            }
        }
        let diff = (sparse.value() - dense).abs();
        let rel = diff / dense.abs().max(1.0);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-10,
            "instance {instance} ({n_users}x{n_hosts}): sparse {} vs dense {dense}",
            sparse.value()
        );
    }
    println!("[c02] PASS — sparse likelihood matches dense enumeration on 100 instances (worst rel {worst:.2e})");
}

/// Over 10 000 generator replicates of a fixed 3 x 3 truth, every cell's
/// empirical edge frequency must sit within 3 standard errors of
/// 1 - exp(-psi), and the pooled chi-square statistic must stay below the
/// 0.999 quantile of its 9-degree reference distribution.
#[test]
fn c03_censoring_law_frequencies() {
    let params = PointParams {
        n_users: 3,
        n_hosts: 3,
        r: 1,
        k: 0,
        h: 0,
        alpha: vec![0.2, 0.7, 1.5],
        beta: vec![0.3, 1.0, 2.2],
        phi: vec![],
    };
    let ucovs = CovariateMatrix::empty(3);
    let hcovs = CovariateMatrix::empty(3);
    let n = 10_000usize;
    let mut counts = [0u32; 9];
    for rep in 0..n as u64 {
        let g = synth::sample_graph(&params, &ucovs, &hcovs, 300_000 + rep);
        for i in 0..3 {
            for j in 0..3 {
                if g.has_edge(i, j) {
                    counts[i * 3 + j] += 1;
                }
            }
        }
    }
    let mut chi_square = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let p = link_probability(params.alpha[i] * params.beta[j]);
            let freq = f64::from(counts[i * 3 + j]) / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "cell ({i},{j}): freq {freq:.4} vs p {p:.4} (3se = {:.4})",
                3.0 * se
            );
            let dev = freq - p;
            chi_square += dev * dev * n as f64 / (p * (1.0 - p));
        }
    }
    // 0.999 quantile of the chi-square distribution with 9 degrees of freedom.
    assert!(
        chi_square < 27.877,
        "chi-square {chi_square:.2} exceeds the 0.999 quantile 27.877"
    );
    println!("[c03] PASS — censoring law holds over 10000 replicates (chi-square {chi_square:.2} < 27.877)");
}

/// On a 20 x 20 rank-2 instance, the variational plug-in link probabilities
/// and the Gibbs posterior-mean probabilities (10 000 kept draws after 1 000
/// burn-in) must agree with Spearman correlation above 0.9, inside ten
/// minutes.
#[test]
fn c04_cavi_gibbs_agreement() {
    let started = Instant::now();
    let gen_hyper = concentrated_hyper(2, 2.4);
    let (params, ucovs, hcovs) = synth::sample_params(20, 20, &[], &[], &gen_hyper, 42).unwrap();
    let graph = synth::sample_graph(&params, &ucovs, &hcovs, 43);
    assert!(graph.nnz() > 20, "degenerate instance: {} edges", graph.nnz());

    let hyper = Hyperparameters::with_r(2);
    let opts = FitOptions {
        seed: 44,
        tol: 1e-7,
        max_sweeps: 500,
    };
    let (state, _) = cavi::fit(&graph, &ucovs, &hcovs, &hyper, &opts).unwrap();
    let fitted = state.point_estimates();

    let chain = ChainOptions {
        seed: 45,
        n_samples: 11_000,
        burn_in: 1_000,
        thin: 1,
    };
    let samples = gibbs::run_chain(&graph, &ucovs, &hcovs, &hyper, &chain).unwrap();
    assert_eq!(samples.m(), 10_000);

    let mut vi = Vec::with_capacity(400);
    let mut mcmc = Vec::with_capacity(400);
    for i in 0..20 {
        for j in 0..20 {
            vi.push(link_probability(fitted.psi(&ucovs, &hcovs, i, j)));
            mcmc.push(gibbs::posterior_mean_link_probability(
                &samples, &ucovs, &hcovs, i, j,
            ));
        }
    }
    let rho = spearman(&vi, &mcmc);
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 600.0, "agreement check took {secs:.1}s, budget 600s");
    assert!(rho > 0.9, "spearman {rho:.4} <= 0.9");
    println!("[c04] PASS — cavi and gibbs link probabilities agree (spearman {rho:.4}, {secs:.1}s)");
}

/// A rank-5 truth whose nodes are active in a random subset of components,
/// so cells sharing a component carry high rates and the rest only the weak
/// planted covariate block: discriminable structure at moderate density.
fn sparse_loading_truth(seed: u64) -> (PointParams, CovariateMatrix, CovariateMatrix) {
    let (mut truth, ucovs, hcovs) =
        synth::sample_params(200, 150, &[3], &[2], &concentrated_hyper(5, 1.0), seed).unwrap();
    let mut mask = rng::labeled(seed, "acceptance/recovery-mask");
    for a in truth.alpha.iter_mut() {
        *a = if mask.random::<f64>() < 0.22 { 0.6 + *a * 0.5 } else { 0.0 };
    }
    for b in truth.beta.iter_mut() {
        *b = if mask.random::<f64>() < 0.22 { 0.6 + *b * 0.5 } else { 0.0 };
    }
    for (idx, phi) in truth.phi.iter_mut().enumerate() {
        *phi = if idx % 3 == 0 { 0.06 } else { 0.015 };
    }
    (truth, ucovs, hcovs)
}

/// Fitting on one draw from a known 200 x 150 rank-5 truth with covariate
/// effects and scoring a second independent draw must reach all-links AUC of
/// at least 0.85 and beat the degree baseline, in at least 18 of 20 seeds.
#[test]
fn c05_recovery_auc_beats_degree() {
    let hyper = Hyperparameters::with_r(5);
    let mut passes = 0;
    let mut aucs = Vec::new();
    for seed in 0..20u64 {
        let (truth, ucovs, hcovs) = sparse_loading_truth(seed);
        let train = synth::sample_graph(&truth, &ucovs, &hcovs, seed.wrapping_add(500));
        let test = synth::sample_graph(&truth, &ucovs, &hcovs, seed.wrapping_add(900));
        let opts = FitOptions {
            seed: 5_000 + seed,
            tol: 1e-5,
            max_sweeps: 200,
        };
        let (state, _) = cavi::fit(&train, &ucovs, &hcovs, &hyper, &opts).unwrap();
        let fitted = state.point_estimates();
        let model_auc = plugin_auc(&fitted, &ucovs, &hcovs, &train, &test, Category::All);
        let degree = DegreeScorer::new(&train);
        let degree_auc = evaluate_full_negatives(&degree, &train, &test, Category::All, false)
            .unwrap()
            .auc;
        if model_auc >= 0.85 && model_auc >= degree_auc {
            passes += 1;
        }
        aucs.push((model_auc, degree_auc));
    }
    assert!(
        passes >= 18,
        "only {passes}/20 seeds recovered: {aucs:?}"
    );
    println!("[c05] PASS — recovery auc >= 0.85 and >= degree baseline in {passes}/20 seeds");
}

/// With strong planted covariate interactions and weak latent factors, the
/// covariate-aware fit must beat the covariate-free fit by at least 0.05
/// all-links AUC in at least 18 of 20 seeds.
#[test]
fn c06_covariate_uplift_over_pmf() {
    let gen_hyper = concentrated_hyper(2, 8.0);
    let hyper = Hyperparameters::with_r(4);
    let mut passes = 0;
    let mut deltas = Vec::new();
    for seed in 0..20u64 {
        let (mut truth, ucovs, hcovs) =
            synth::sample_params(100, 80, &[4], &[4], &gen_hyper, seed).unwrap();
        for a in truth.alpha.iter_mut() {
            *a *= 0.05;
        }
        for b in truth.beta.iter_mut() {
            *b *= 0.05;
        }
        for k in 0..4 {
            for h in 0..4 {
                truth.phi[k * 4 + h] = if k == h { 0.17 } else { 0.01 };
            }
        }
        let train = synth::sample_graph(&truth, &ucovs, &hcovs, seed.wrapping_add(600));
        let test = synth::sample_graph(&truth, &ucovs, &hcovs, seed.wrapping_add(601));
        let opts = FitOptions {
            seed: 6_000 + seed,
            tol: 1e-5,
            max_sweeps: 200,
        };
        let (with_covs, _) = cavi::fit(&train, &ucovs, &hcovs, &hyper, &opts).unwrap();
        let covariate_auc = plugin_auc(
            &with_covs.point_estimates(),
            &ucovs,
            &hcovs,
            &train,
            &test,
            Category::All,
        );
        let no_ucovs = CovariateMatrix::empty(100);
        let no_hcovs = CovariateMatrix::empty(80);
        let (plain, _) = cavi::fit(&train, &no_ucovs, &no_hcovs, &hyper, &opts).unwrap();
        let plain_auc = plugin_auc(
            &plain.point_estimates(),
            &no_ucovs,
            &no_hcovs,
            &train,
            &test,
            Category::All,
        );
        if covariate_auc - plain_auc >= 0.05 {
            passes += 1;
        }
        deltas.push(covariate_auc - plain_auc);
    }
    assert!(
        passes >= 18,
        "only {passes}/20 seeds showed uplift >= 0.05: {deltas:?}"
    );
    let min_delta = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "[c06] PASS — covariate fit beats covariate-free fit by >= 0.05 auc in {passes}/20 seeds (min uplift {min_delta:.3})"
    );
}

/// Across 500 negative-resamples, the subsampled-AUC standard deviation must
/// shrink as the negative ratio grows (3x < 1x < 0.1x of the positive count)
/// and each subsampled mean must sit within two standard deviations of the
/// full-enumeration AUC.
#[test]
fn c07_subsampled_auc_stability() {
    let gen_hyper = concentrated_hyper(3, 9.0);
    let (truth, ucovs, hcovs) = synth::sample_params(80, 60, &[2], &[2], &gen_hyper, 7).unwrap();
    let train = synth::sample_graph(&truth, &ucovs, &hcovs, 70);
    let test = synth::sample_graph(&truth, &ucovs, &hcovs, 71);
    let opts = FitOptions {
        seed: 72,
        tol: 1e-5,
        max_sweeps: 150,
    };
    let (state, _) = cavi::fit(&train, &ucovs, &hcovs, &Hyperparameters::with_r(3), &opts).unwrap();
    let fitted = state.point_estimates();
    let scorer = PluginScorer {
        params: &fitted,
        user_covs: &ucovs,
        host_covs: &hcovs,
    };
    let full = evaluate_full_negatives(&scorer, &train, &test, Category::All, false)
        .unwrap()
        .auc;
    let stats = auc_stability(&scorer, &train, &test, &[0.1, 1.0, 3.0], 500, 73).unwrap();
    assert_eq!(stats.len(), 3);
    let (low, mid, high) = (&stats[0], &stats[1], &stats[2]);
    assert!(
        high.sd < mid.sd && mid.sd < low.sd,
        "sd not decreasing in ratio: 0.1x {:.5}, 1x {:.5}, 3x {:.5}",
        low.sd,
        mid.sd,
        high.sd
    );
    for s in &stats {
        assert!(
            (s.mean - full).abs() <= 2.0 * s.sd,
            "ratio {}: mean {:.5} vs full {full:.5} exceeds 2sd ({:.5})",
            s.ratio,
            s.mean,
            s.sd
        );
    }
    println!(
        "[c07] PASS — subsampled auc concentrates (sd {:.4} > {:.4} > {:.4}; means within 2sd of full {full:.4})",
        low.sd, mid.sd, high.sd
    );
}

/// Seasonal fits must (a) pin the first segment's adjustments at exactly one,
/// (b) recover the sign of a planted alternating log-adjustment for more than
/// 90% of active users, and (c) match the static fit's new-link AUC within
/// 0.01 in at least 15 of 20 seeds.
#[test]
fn c08_seasonal_recovery() {
    let period = PeriodMap::Modular { period: 2 };
    // Adjustment priors concentrated at one: zeta ~ Gamma(24, 4) keeps the
    // prior mean of each multiplier near 6/6 = 1 and shrinks starved segments
    // toward neutrality instead of letting them wander.
    let unit_centered = GammaGroup {
        shape: 6.0,
        rate_shape: 24.0,
        rate_rate: 4.0,
    };
    let shyper = |r| SeasonalHyperparameters {
        base: Hyperparameters::with_r(r),
        gamma: unit_centered,
        delta: unit_centered,
    };

    // (a) + (b): one denser 40 x 30 instance over 28 days with alternating
    // planted segment-2 user adjustments (2.0 for even users, 0.5 for odd).
    let gen_hyper = concentrated_hyper(2, 3.5);
    let (truth, _, _) = synth::sample_params(40, 30, &[], &[], &gen_hyper, 80).unwrap();
    let ucovs = CovariateMatrix::empty(40);
    let hcovs = CovariateMatrix::empty(30);
    let mut adjust = SeasonalAdjustments::neutral(40, 30, 2, 2);
    for i in 0..40 {
        let factor = if i % 2 == 0 { 3.0 } else { 1.0 / 3.0 };
        for rr in 0..2 {
            adjust.user_gamma[(i * 2 + 1) * 2 + rr] = factor;
        }
    }
    let seq =
        synth::sample_seasonal_sequence(&truth, &adjust, &ucovs, &hcovs, &period, 28, 81).unwrap();
    let opts = FitOptions {
        seed: 82,
        tol: 1e-5,
        max_sweeps: 300,
    };
    let (state, _) = seasonal::fit_seasonal(&seq, &ucovs, &hcovs, &shyper(2), &opts).unwrap();
    let (_, fitted_adjust) = state.point_estimates();
    for i in 0..40 {
        for rr in 0..2 {
            assert_eq!(fitted_adjust.gamma_at(i, 1, rr), 1.0, "gamma 1 not pinned");
        }
    }
    for j in 0..30 {
        for rr in 0..2 {
            assert_eq!(fitted_adjust.delta_at(j, 1, rr), 1.0, "delta 1 not pinned");
        }
    }
    let union = seq.union_graph();
    let mut active = 0usize;
    let mut correct = 0usize;
    for i in 0..40 {
        if union.out_degree(i) == 0 {
            continue;
        }
        active += 1;
        let fitted_log: f64 = (0..2).map(|rr| fitted_adjust.gamma_at(i, 2, rr).ln()).sum();
        let planted_positive = i % 2 == 0;
        if (fitted_log > 0.0) == planted_positive {
            correct += 1;
        }
    }
    assert!(active >= 30, "only {active} active users");
    let rate = correct as f64 / active as f64;
    assert!(
        rate > 0.9,
        "sign recovered for {correct}/{active} active users"
    );

    // (c): 30 x 24 instances, 14 train days, 7 held-out days; the seasonal
    // scorer must keep pace (within 0.01 new-link AUC) with a static fit of
    // the train-union graph on at least 15 of 20 seeds.
    let gen_sparse = concentrated_hyper(2, 5.0);
    let mut passes = 0;
    let mut pairs = Vec::new();
    for seed in 0..20u64 {
        let (truth, _, _) = synth::sample_params(30, 24, &[], &[], &gen_sparse, 800 + seed).unwrap();
        let uc = CovariateMatrix::empty(30);
        let hc = CovariateMatrix::empty(24);
        let mut adj = SeasonalAdjustments::neutral(30, 24, 2, 2);
        for i in 0..30 {
            let factor = if i % 2 == 0 { 2.0 } else { 0.5 };
            for rr in 0..2 {
                adj.user_gamma[(i * 2 + 1) * 2 + rr] = factor;
            }
        }
        let full_seq = synth::sample_seasonal_sequence(
            &truth,
            &adj,
            &uc,
            &hc,
            &period,
            21,
            8_000 + seed,
        )
        .unwrap();
        let train_snaps = full_seq.snapshots()[..14].to_vec();
        let train_union = union_of(&train_snaps);
        let test_union = union_of(&full_seq.snapshots()[14..]);
        let days: Vec<usize> = (15..=21).collect();
        let opts = FitOptions {
            seed: 8_500 + seed,
            tol: 1e-4,
            max_sweeps: 150,
        };

        let seasonal_seq = TemporalGraphSequence::new(train_snaps, period).unwrap();
        let (s_state, _) =
            seasonal::fit_seasonal(&seasonal_seq, &uc, &hc, &shyper(2), &opts).unwrap();
        let (s_params, s_adjust) = s_state.point_estimates();
        let s_scorer =
            SeasonalScorer::new(&s_params, &s_adjust, &uc, &hc, &period, &days).unwrap();
        let s_auc =
            evaluate_full_negatives(&s_scorer, &train_union, &test_union, Category::New, false)
                .unwrap()
                .auc;

        let (p_state, _) =
            cavi::fit(&train_union, &uc, &hc, &Hyperparameters::with_r(2), &opts).unwrap();
        let p_params = p_state.point_estimates();
        let p_scorer = PluginScorer {
            params: &p_params,
            user_covs: &uc,
            host_covs: &hc,
        };
        let p_auc =
            evaluate_full_negatives(&p_scorer, &train_union, &test_union, Category::New, false)
                .unwrap()
                .auc;

        if s_auc >= p_auc - 0.01 {
            passes += 1;
        }
        pairs.push((s_auc, p_auc));
    }
    assert!(
        passes >= 15,
        "seasonal new-link auc kept pace in only {passes}/20 seeds: {pairs:?}"
    );
    println!(
        "[c08] PASS — first segment pinned at 1, sign recovery {:.1}% of {active} users, new-link auc kept pace in {passes}/20 seeds",
        100.0 * rate
    );
}

/// The joint fit must collapse to the single-graph fit bit-for-bit when the
/// second graph is empty, and on a shared-loading synthetic its AUC on each
/// graph must come within 0.02 of that graph's individual fit.
#[test]
fn c09_joint_consistency() {
    // Bitwise collapse with an empty second graph.
    let gen_hyper = concentrated_hyper(3, 3.0);
    let (truth, ucovs, hcovs) = synth::sample_params(10, 8, &[2], &[2], &gen_hyper, 90).unwrap();
    let graph = synth::sample_graph(&truth, &ucovs, &hcovs, 91);
    assert!(graph.nnz() > 0);
    let empty = SparseBipartiteGraph::from_edges(10, 0, vec![]).unwrap();
    let bcovs = CovariateMatrix::empty(0);
    let hyper = Hyperparameters::with_r(3);
    let opts = FitOptions {
        seed: 92,
        tol: 1e-7,
        max_sweeps: 80,
    };
    let (j_state, j_trace) =
        joint::fit_joint(&graph, &empty, &ucovs, &hcovs, &bcovs, &hyper, &opts).unwrap();
    let (e_state, e_trace) = cavi::fit(&graph, &ucovs, &hcovs, &hyper, &opts).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&j_state.lambda_alpha), bits(&e_state.lambda_alpha));
    assert_eq!(bits(&j_state.mu_alpha), bits(&e_state.mu_alpha));
    assert_eq!(bits(&j_state.xi_alpha), bits(&e_state.xi_alpha));
    assert_eq!(bits(&j_state.side_a.lambda_beta), bits(&e_state.lambda_beta));
    assert_eq!(bits(&j_state.side_a.mu_beta), bits(&e_state.mu_beta));
    assert_eq!(bits(&j_state.side_a.lambda_phi), bits(&e_state.lambda_phi));
    assert_eq!(bits(&j_state.side_a.mu_phi), bits(&e_state.mu_phi));
    assert_eq!(bits(&j_trace.values), bits(&e_trace.values));
    assert_eq!(j_trace.iterations, e_trace.iterations);
    assert!(j_state.side_b.theta.is_empty());

    // Shared user loadings: the joint fit keeps pace with each individual fit.
    let mut results = Vec::new();
    for seed in [11u64, 23] {
        let truth = synth::sample_joint(
            60,
            40,
            40,
            &[2],
            &[2],
            &[2],
            &concentrated_hyper(3, 10.0),
            seed,
        )
        .unwrap();
        let test_a = synth::sample_graph(&truth.params_a, &truth.user_covs, &truth.host_covs_a, seed + 300);
        let test_b = synth::sample_graph(&truth.params_b, &truth.user_covs, &truth.host_covs_b, seed + 301);
        let opts = FitOptions {
            seed: 9_000 + seed,
            tol: 1e-5,
            max_sweeps: 200,
        };
        let (joint_state, _) = joint::fit_joint(
            &truth.graph_a,
            &truth.graph_b,
            &truth.user_covs,
            &truth.host_covs_a,
            &truth.host_covs_b,
            &hyper,
            &opts,
        )
        .unwrap();
        let (jp_a, jp_b) = joint_state.point_estimates();
        let joint_a = plugin_auc(
            &jp_a, &truth.user_covs, &truth.host_covs_a, &truth.graph_a, &test_a, Category::All,
        );
        let joint_b = plugin_auc(
            &jp_b, &truth.user_covs, &truth.host_covs_b, &truth.graph_b, &test_b, Category::All,
        );
        let (ind_a, _) = cavi::fit(&truth.graph_a, &truth.user_covs, &truth.host_covs_a, &hyper, &opts).unwrap();
        let (ind_b, _) = cavi::fit(&truth.graph_b, &truth.user_covs, &truth.host_covs_b, &hyper, &opts).unwrap();
        let solo_a = plugin_auc(
            &ind_a.point_estimates(), &truth.user_covs, &truth.host_covs_a, &truth.graph_a, &test_a, Category::All,
        );
        let solo_b = plugin_auc(
            &ind_b.point_estimates(), &truth.user_covs, &truth.host_covs_b, &truth.graph_b, &test_b, Category::All,
        );
        assert!(
            joint_a >= solo_a - 0.02 && joint_b >= solo_b - 0.02,
            "seed {seed}: joint ({joint_a:.4}, {joint_b:.4}) vs solo ({solo_a:.4}, {solo_b:.4})"
        );
        results.push((joint_a - solo_a, joint_b - solo_b));
    }
    println!(
        "[c09] PASS — joint collapses bitwise on an empty second graph; auc gaps vs solo fits {results:?}"
    );
}

/// Baseline scorers must be exact: truncated-SVD singular values agree with a
/// dense oracle to 1e-8 on 10 x 8 graphs, the Katz-transformed score at
/// (sigma = 100, eta = 1e-4) equals 1/99 to 1e-12, and the degree baseline
/// reproduces 1 - exp(-d_out * d_in).
#[test]
fn c10_baseline_exactness() {
    // Truncated SVD vs dense oracle on random 10 x 8 graphs.
    let mut worst_sv = 0.0f64;
    for seed in 0..10u64 {
        let (truth, uc, hc) =
            synth::sample_params(10, 8, &[], &[], &concentrated_hyper(2, 1.5), 100 + seed).unwrap();
        let graph = synth::sample_graph(&truth, &uc, &hc, 200 + seed);
        if graph.nnz() == 0 {
            continue;
        }
        let rank = 4.min(graph.nnz());
        let got = truncated_svd(&graph, rank, SvdMethod::Subspace).unwrap();
        let mut dense = nalgebra::DMatrix::<f64>::zeros(10, 8);
        for &(i, j) in graph.edges() {
            dense[(i as usize, j as usize)] = 1.0;
        }
        let mut oracle: Vec<f64> = dense.svd(false, false).singular_values.iter().copied().collect();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for k in 0..rank {
            let err = (got.s[k] - oracle[k]).abs();
            worst_sv = worst_sv.max(err);
            assert!(err <= 1e-8, "seed {seed}, sigma_{k}: {} vs {}", got.s[k], oracle[k]);
        }
    }

    // Katz transform at sigma = 100: a complete 100 x 100 graph has top
    // singular value exactly 100 with uniform singular vectors 1/10, so
    // 100 * score(i, j) = (1 - 1e-4 * 100)^{-1} - 1 = 1/99.
    let mut edges = Vec::with_capacity(10_000);
    for i in 0..100u32 {
        for j in 0..100u32 {
            edges.push((i, j));
        }
    }
    let complete = SparseBipartiteGraph::from_edges(100, 100, edges).unwrap();
    let katz = baseline_tkatz(&complete, 1, 1e-4).unwrap();
    let katz_err = (100.0 * katz.score(0, 0) - 1.0 / 99.0).abs();
    assert!(katz_err <= 1e-12, "katz score off by {katz_err:.2e}");

    // Degree baseline formula, including exact zero for isolated nodes.
    let graph =
        SparseBipartiteGraph::from_edges(4, 3, vec![(0, 0), (0, 1), (1, 0), (2, 2)]).unwrap();
    let degree = DegreeScorer::new(&graph);
    for i in 0..4 {
        for j in 0..3 {
            let d = (graph.out_degree(i) * graph.in_degree(j)) as f64;
            let expected = 1.0 - (-d).exp();
            assert!(
                (degree.score(i, j) - expected).abs() <= 1e-15,
                "degree score ({i},{j})"
            );
        }
    }
    assert_eq!(degree.score(3, 0), 0.0, "isolated user must score exactly 0");
    println!(
        "[c10] PASS — svd within {worst_sv:.2e} of oracle, katz value off by {katz_err:.2e}, degree formula exact"
    );
}

/// The rank-based AUC must equal the brute-force count of correctly ordered
/// positive/negative pairs (ties at half credit) exactly, over 1000 random
/// tied score sets.
#[test]
fn c11_auc_matches_bruteforce() {
    let mut rng = rng::labeled(11, "acceptance/auc-sets");
    for case in 0..1000 {
        let n_pos = rng.random_range(1..=10usize);
        let n_neg = rng.random_range(1..=10usize);
        let mut pairs = Vec::with_capacity(n_pos + n_neg);
        for idx in 0..n_pos + n_neg {
            pairs.push(ScoredPair {
                i: idx,
                j: 0,
                score: f64::from(rng.random_range(0..=6u32)) / 4.0,
                label: idx < n_pos,
                category: Category::All,
            });
        }
        let result = auc(&pairs).unwrap();
        assert_eq!(result.n_pos, n_pos);
        assert_eq!(result.n_neg, n_neg);
        let mut credit = 0.0f64;
        for p in pairs.iter().filter(|p| p.label) {
            for n in pairs.iter().filter(|p| !p.label) {
                credit += if p.score > n.score {
                    1.0
                } else if p.score == n.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let brute = credit / (n_pos * n_neg) as f64;
        assert_eq!(
            result.auc, brute,
            "case {case}: rank-based {} vs brute-force {brute}",
            result.auc
        );
    }
    println!("[c11] PASS — rank-based auc equals brute-force pairwise credit exactly on 1000 sets");
}

/// One sweep must touch each edge exactly once per phase (instrumented
/// counters equal nnz), and doubling the zero-cell count at fixed nnz on a
/// million-edge graph must not slow a sweep by more than 1.3x.
#[test]
fn c12_sweep_cost_tracks_nnz() {
    // Instrumented edge-visit counters on a covariate-bearing instance.
    let (truth, ucovs, hcovs) =
        synth::sample_params(150, 100, &[3], &[2], &concentrated_hyper(3, 6.0), 120).unwrap();
    let graph = synth::sample_graph(&truth, &ucovs, &hcovs, 121);
    let nnz = graph.nnz() as u64;
    assert!(nnz > 0);
    let opts = FitOptions {
        seed: 122,
        tol: 1e-300,
        max_sweeps: 3,
    };
    let (_, trace) =
        cavi::fit(&graph, &ucovs, &hcovs, &Hyperparameters::with_r(4), &opts).unwrap();
    assert_eq!(trace.sweep_stats.len(), 3);
    for stats in &trace.sweep_stats {
        assert_eq!(stats.theta_chi_edge_visits, nnz);
        assert_eq!(stats.alpha_edge_visits, nnz);
        assert_eq!(stats.beta_edge_visits, nnz);
        assert_eq!(stats.phi_edge_visits, nnz);
        assert_eq!(stats.gamma_edge_visits, 0);
        assert_eq!(stats.delta_edge_visits, 0);
    }

    // Sweep cost scaling: one million edges, zero cells 1e6 vs 2e6.
    let million_edges = |n_hosts: u32| -> SparseBipartiteGraph {
        let mut edges = Vec::with_capacity(1_000_000);
        for i in 0..2000u32 {
            for t in 0..500u32 {
                edges.push((i, (i * 7 + t) % 1000));
            }
        }
        SparseBipartiteGraph::from_edges(2000, n_hosts as usize, edges).unwrap()
    };
    let narrow = million_edges(1000);
    let wide = million_edges(1500);
    assert_eq!(narrow.nnz(), 1_000_000);
    assert_eq!(wide.nnz(), 1_000_000);

    let empty_u = CovariateMatrix::empty(2000);
    let hyper = Hyperparameters::with_r(20);
    let timed = |g: &SparseBipartiteGraph, sweeps: usize| -> f64 {
        let empty_h = CovariateMatrix::empty(g.n_hosts());
        let opts = FitOptions {
            seed: 123,
            tol: 1e-300,
            max_sweeps: sweeps,
        };
        let t0 = Instant::now();
        let (state, trace) = cavi::fit(g, &empty_u, &empty_h, &hyper, &opts).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        assert_eq!(trace.iterations, sweeps);
        assert_eq!(trace.sweep_stats[sweeps - 1].theta_chi_edge_visits, 1_000_000);
        std::hint::black_box(&state);
        dt
    };
    // Warm-up, then best of two interleaved runs per graph.
    timed(&narrow, 1);
    timed(&wide, 1);
    let t_narrow = timed(&narrow, 2).min(timed(&narrow, 2));
    let t_wide = timed(&wide, 2).min(timed(&wide, 2));
    let ratio = t_wide / t_narrow;
    assert!(
        ratio <= 1.3,
        "doubling zero cells scaled a sweep by {ratio:.3} ({t_narrow:.3}s -> {t_wide:.3}s)"
    );
    println!(
        "[c12] PASS — per-phase edge visits equal nnz; zero-cell doubling scaled sweeps by {ratio:.3} ({t_narrow:.2}s -> {t_wide:.2}s)"
    );
}
