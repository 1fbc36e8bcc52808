//! `bplink ablate`: measure what each covariate group is worth by
//! refitting the model with the group's columns removed and comparing AUC
//! on an identical pair sample.
//!
//! Output: `ablation.csv` with one row per ablated group
//! (`side,group,group_name,full_auc,ablated_auc,delta`; delta = full -
//! ablated, positive when the group carries predictive signal).

use std::path::PathBuf;

use bplink::cavi::{FitOptions, DEFAULT_MAX_SWEEPS, DEFAULT_TOL};
use bplink::eval::{ablate_covariate, AblationReport, EvalOptions, Side, DEFAULT_NEGATIVE_RATIO};
use bplink::{Error, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use crate::config::pick;
use crate::inputs::{self, SplitInput};
use crate::scorer::CategoryArg;
use crate::{resolve_common, write_manifest, CommonArgs, Outcome, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblateSide {
    User,
    Host,
    Both,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub split: SplitInput,
    #[arg(long)]
    pub user_covs: Option<PathBuf>,
    #[arg(long)]
    pub host_covs: Option<PathBuf>,
    /// Which covariate side to ablate.
    #[arg(long, value_enum, default_value = "both")]
    pub side: AblateSide,
    /// Single group index to ablate (default: every group on the side).
    #[arg(long)]
    pub group: Option<usize>,
    /// Number of latent components for the refits.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    /// Pair category the AUCs are computed on.
    #[arg(long, value_enum, default_value = "all")]
    pub category: CategoryArg,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub exclude_train_edges: bool,
}

pub fn run(args: AblateArgs) -> Result<Outcome> {
    let rc = resolve_common(&args.common)?;
    let (train, test) = args.split.load()?;
    let user_covs = inputs::load_covariates(args.user_covs.as_deref(), train.user_labels())?;
    let host_covs = inputs::load_covariates(args.host_covs.as_deref(), train.host_labels())?;

    let r = pick(args.r, rc.cfg.usize("r")?, 20);
    let hyper = rc.cfg.hyperparameters(r)?;
    let fit_opts = FitOptions {
        seed: rc.seed,
        tol: pick(args.tol, rc.cfg.f64("tol")?, DEFAULT_TOL),
        max_sweeps: pick(args.max_sweeps, rc.cfg.usize("max_sweeps")?, DEFAULT_MAX_SWEEPS),
    };
    let eval_opts = EvalOptions {
        ratio: pick(args.ratio, rc.cfg.f64("ratio")?, DEFAULT_NEGATIVE_RATIO),
        category: args.category.to_category(),
        seed: rc.seed,
        exclude_train_edges: args.exclude_train_edges,
    };

    let mut targets: Vec<(Side, usize)> = Vec::new();
    match (args.side, args.group) {
        (AblateSide::User, Some(g)) => targets.push((Side::User, g)),
        (AblateSide::Host, Some(g)) => targets.push((Side::Host, g)),
        (AblateSide::Both, Some(_)) => {
            return Err(Error::InvalidArgument(
                "--group needs --side user or --side host".into(),
            ));
        }
        (side, None) => {
            if matches!(side, AblateSide::User | AblateSide::Both) {
                targets.extend((0..user_covs.n_groups()).map(|g| (Side::User, g)));
            }
            if matches!(side, AblateSide::Host | AblateSide::Both) {
                targets.extend((0..host_covs.n_groups()).map(|g| (Side::Host, g)));
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "no covariate groups to ablate; pass --user-covs/--host-covs".into(),
        ));
    }

    let mut writer = csv::Writer::from_path(rc.out.join("ablation.csv"))?;
    writer.write_record(["side", "group", "group_name", "full_auc", "ablated_auc", "delta"])?;
    let mut reports: Vec<AblationReport> = Vec::new();
    for &(side, group) in &targets {
        let report = ablate_covariate(
            &train, &test, &user_covs, &host_covs, &hyper, &fit_opts, side, group, &eval_opts,
        )?;
        let side_name = match report.side {
            Side::User => "user",
            Side::Host => "host",
        };
        writer.write_record([
            side_name,
            &report.group.to_string(),
            &report.group_name,
            &report.full_auc.to_string(),
            &report.ablated_auc.to_string(),
            &report.delta.to_string(),
        ])?;
        println!(
            "ablate {side_name}/{} ({}): full auc {:.6}, ablated {:.6}, delta {:+.6}",
            report.group, report.group_name, report.full_auc, report.ablated_auc, report.delta
        );
        reports.push(report);
    }
    writer.flush()?;

    write_manifest(
        &rc.out,
        &RunManifest {
            command: "ablate",
            seed: rc.seed,
            threads: rc.threads,
            converged: true,
            settings: json!({
                "input": args.split.describe(),
                "user_covs": inputs::path_json(&args.user_covs),
                "host_covs": inputs::path_json(&args.host_covs),
                "side": match args.side {
                    AblateSide::User => "user",
                    AblateSide::Host => "host",
                    AblateSide::Both => "both",
                },
                "group": args.group,
                "r": r,
                "tol": fit_opts.tol,
                "max_sweeps": fit_opts.max_sweeps,
                "category": eval_opts.category.name(),
                "ratio": eval_opts.ratio,
                "exclude_train_edges": args.exclude_train_edges,
                "hyper": hyper,
            }),
            outputs: vec!["ablation.csv".into()],
        },
    )?;
    Ok(Outcome::Success)
}
