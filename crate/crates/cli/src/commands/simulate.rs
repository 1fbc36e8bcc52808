//! `bplink simulate`: draw a ground truth from the generative model and
//! write the observation graph(s), covariate tables, and true parameters.
//!
//! Static mode writes `graph.txt`, `user_covs.csv`, `host_covs.csv`, and
//! `truth.json`; `--test-draw` adds `test.txt`, an independent draw from
//! the same truth (seeded with seed+1). Seasonal mode (`--t-days`) writes a
//! `sequence/` directory instead, plus `test.txt` as the union of
//! `--test-days` extra days simulated after the training window. Joint
//! mode (`--joint`) writes `graph_a.txt`/`graph_b.txt` with per-side
//! covariates and a two-sided `truth.json`.

use std::collections::BTreeSet;

use bplink::graph::{SparseBipartiteGraph, TemporalGraphSequence};
use bplink::io;
use bplink::seasonal::SeasonalAdjustments;
use bplink::synth;
use bplink::{Error, Result};
use clap::Args;
use serde_json::json;

use crate::config::{pick, pick_opt, require};
use crate::{resolve_common, write_manifest, CommonArgs, Outcome, RunManifest};

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of users.
    #[arg(long)]
    pub users: Option<usize>,
    /// Number of hosts.
    #[arg(long)]
    pub hosts: Option<usize>,
    /// Level counts of the user covariate groups (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub user_levels: Vec<usize>,
    /// Level counts of the host covariate groups (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub host_levels: Vec<usize>,
    /// Number of latent components.
    #[arg(long)]
    pub r: Option<usize>,
    /// Also draw an independent test graph from the same truth.
    #[arg(long)]
    pub test_draw: bool,
    /// Seasonal: training days to simulate (writes a sequence directory).
    #[arg(long)]
    pub t_days: Option<usize>,
    /// Seasonal: period structure (modular:P or lanl4:A:F).
    #[arg(long)]
    pub period: Option<String>,
    /// Seasonal: extra days after the training window whose union becomes
    /// the test graph.
    #[arg(long)]
    pub test_days: Option<usize>,
    /// Seasonal: user-side adjustment planted in every segment after the
    /// first.
    #[arg(long)]
    pub gamma_scale: Option<f64>,
    /// Seasonal: host-side adjustment planted in every segment after the
    /// first.
    #[arg(long)]
    pub delta_scale: Option<f64>,
    /// Also draw a second host side sharing the user loadings.
    #[arg(long)]
    pub joint: bool,
    /// Joint: number of hosts in the second graph.
    #[arg(long)]
    pub hosts_b: Option<usize>,
    /// Joint: level counts of the second graph's host covariate groups.
    #[arg(long, value_delimiter = ',')]
    pub host_levels_b: Vec<usize>,
}

pub fn run(args: SimulateArgs) -> Result<Outcome> {
    let rc = resolve_common(&args.common)?;
    let n_users = require(pick_opt(args.users, rc.cfg.usize("users")?), "--users")?;
    let n_hosts = require(pick_opt(args.hosts, rc.cfg.usize("hosts")?), "--hosts")?;
    if n_users == 0 || n_hosts == 0 {
        return Err(Error::InvalidArgument(
            "--users and --hosts must be positive".into(),
        ));
    }
    let r = pick(args.r, rc.cfg.usize("r")?, 20);
    let hyper = rc.cfg.hyperparameters(r)?;
    if args.joint && args.t_days.is_some() {
        return Err(Error::InvalidArgument(
            "--joint and --t-days cannot be combined".into(),
        ));
    }

    let mut settings = json!({
        "users": n_users,
        "hosts": n_hosts,
        "user_levels": args.user_levels,
        "host_levels": args.host_levels,
        "r": r,
        "hyper": hyper,
        "test_draw": args.test_draw,
    });
    let extra = settings.as_object_mut().expect("object");
    let mut outputs = Vec::new();

    if args.joint {
        let n_hosts_b = require(args.hosts_b.or(rc.cfg.usize("hosts_b")?), "--hosts-b")?;
        let truth = synth::sample_joint(
            n_users,
            n_hosts,
            n_hosts_b,
            &args.user_levels,
            &args.host_levels,
            &args.host_levels_b,
            &hyper,
            rc.seed,
        )?;
        io::write_graph_text(rc.out.join("graph_a.txt"), &truth.graph_a)?;
        io::write_graph_text(rc.out.join("graph_b.txt"), &truth.graph_b)?;
        io::write_covariates_csv(
            rc.out.join("user_covs.csv"),
            &truth.user_covs,
            truth.graph_a.user_labels(),
        )?;
        io::write_covariates_csv(
            rc.out.join("host_covs_a.csv"),
            &truth.host_covs_a,
            truth.graph_a.host_labels(),
        )?;
        io::write_covariates_csv(
            rc.out.join("host_covs_b.csv"),
            &truth.host_covs_b,
            truth.graph_b.host_labels(),
        )?;
        io::save_joint_params(rc.out.join("truth.json"), &truth.params_a, &truth.params_b)?;
        outputs.extend(
            [
                "graph_a.txt",
                "graph_b.txt",
                "user_covs.csv",
                "host_covs_a.csv",
                "host_covs_b.csv",
                "truth.json",
            ]
            .map(String::from),
        );
        if args.test_draw {
            let test_a = synth::sample_graph(
                &truth.params_a,
                &truth.user_covs,
                &truth.host_covs_a,
                rc.seed + 1,
            );
            let test_b = synth::sample_graph(
                &truth.params_b,
                &truth.user_covs,
                &truth.host_covs_b,
                rc.seed + 2,
            );
            io::write_graph_text(rc.out.join("test_a.txt"), &test_a)?;
            io::write_graph_text(rc.out.join("test_b.txt"), &test_b)?;
            outputs.extend(["test_a.txt", "test_b.txt"].map(String::from));
        }
        extra.insert("hosts_b".into(), json!(n_hosts_b));
        extra.insert("host_levels_b".into(), json!(args.host_levels_b));
        println!(
            "joint truth: {} users; side A {} hosts ({} edges), side B {} hosts ({} edges)",
            n_users,
            n_hosts,
            truth.graph_a.nnz(),
            n_hosts_b,
            truth.graph_b.nnz()
        );
    } else if let Some(t_days) = args.t_days {
        let period = require(
            args.period.clone().or(rc.cfg.string("period")?),
            "--period",
        )?;
        let period_map = io::parse_period_map(&period)?;
        let n_segments = period_map.n_segments();
        let test_days = pick(args.test_days, rc.cfg.usize("test_days")?, 0);
        let gamma_scale = pick(args.gamma_scale, rc.cfg.f64("gamma_scale")?, 1.0);
        let delta_scale = pick(args.delta_scale, rc.cfg.f64("delta_scale")?, 1.0);
        let (params, user_covs, host_covs) = synth::sample_params(
            n_users,
            n_hosts,
            &args.user_levels,
            &args.host_levels,
            &hyper,
            rc.seed,
        )?;
        let mut adjust = SeasonalAdjustments::neutral(n_users, n_hosts, n_segments, r);
        for i in 0..n_users {
            for p in 2..=n_segments {
                for rr in 0..r {
                    adjust.user_gamma[(i * n_segments + (p - 1)) * r + rr] = gamma_scale;
                }
            }
        }
        for j in 0..n_hosts {
            for p in 2..=n_segments {
                for rr in 0..r {
                    adjust.host_delta[(j * n_segments + (p - 1)) * r + rr] = delta_scale;
                }
            }
        }
        let full = synth::sample_seasonal_sequence(
            &params,
            &adjust,
            &user_covs,
            &host_covs,
            &period_map,
            t_days + test_days,
            rc.seed,
        )?;
        let train_seq =
            TemporalGraphSequence::new(full.snapshots()[..t_days].to_vec(), period_map)?;
        io::write_sequence_dir(rc.out.join("sequence"), &train_seq)?;
        let first = &full.snapshots()[0];
        io::write_covariates_csv(rc.out.join("user_covs.csv"), &user_covs, first.user_labels())?;
        io::write_covariates_csv(rc.out.join("host_covs.csv"), &host_covs, first.host_labels())?;
        io::save_seasonal_params(rc.out.join("truth.json"), &params, &adjust)?;
        outputs.extend(["sequence", "user_covs.csv", "host_covs.csv", "truth.json"].map(String::from));
        if test_days > 0 {
            let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
            for snap in &full.snapshots()[t_days..] {
                edges.extend(snap.edges().iter().copied());
            }
            let test = SparseBipartiteGraph::with_labels(
                first.user_labels().to_vec(),
                first.host_labels().to_vec(),
                edges.into_iter().collect(),
            )?;
            io::write_graph_text(rc.out.join("test.txt"), &test)?;
            outputs.push("test.txt".into());
        }
        extra.insert("t_days".into(), json!(t_days));
        extra.insert("test_days".into(), json!(test_days));
        extra.insert("period".into(), json!(period));
        extra.insert("gamma_scale".into(), json!(gamma_scale));
        extra.insert("delta_scale".into(), json!(delta_scale));
        let train_edges: usize = train_seq.snapshots().iter().map(|s| s.nnz()).sum();
        println!(
            "seasonal truth: {n_users} x {n_hosts}, {t_days} train days ({train_edges} \
             daily edges), test window days {}..={}",
            t_days + 1,
            t_days + test_days
        );
    } else {
        let (params, user_covs, host_covs) = synth::sample_params(
            n_users,
            n_hosts,
            &args.user_levels,
            &args.host_levels,
            &hyper,
            rc.seed,
        )?;
        let graph = synth::sample_graph(&params, &user_covs, &host_covs, rc.seed);
        io::write_graph_text(rc.out.join("graph.txt"), &graph)?;
        io::write_covariates_csv(rc.out.join("user_covs.csv"), &user_covs, graph.user_labels())?;
        io::write_covariates_csv(rc.out.join("host_covs.csv"), &host_covs, graph.host_labels())?;
        io::save_point_params(rc.out.join("truth.json"), &params)?;
        outputs.extend(["graph.txt", "user_covs.csv", "host_covs.csv", "truth.json"].map(String::from));
        if args.test_draw {
            let test = synth::sample_graph(&params, &user_covs, &host_covs, rc.seed + 1);
            io::write_graph_text(rc.out.join("test.txt"), &test)?;
            outputs.push("test.txt".into());
        }
        println!(
            "static truth: {n_users} x {n_hosts}, {} train edges",
            graph.nnz()
        );
    }

    write_manifest(
        &rc.out,
        &RunManifest {
            command: "simulate",
            seed: rc.seed,
            threads: rc.threads,
            converged: true,
            settings,
            outputs,
        },
    )?;
    Ok(Outcome::Success)
}
