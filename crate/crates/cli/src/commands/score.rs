//! `bplink score`: write per-pair link scores as CSV.
//!
//! Pairs come from either an explicit `--pairs` CSV (`user,host` label
//! columns) or the evaluation sample for `--category` drawn from the test
//! graph (positives plus `--ratio` sampled negatives per positive).
//! Output: `scores.csv` with `user,host,score,positive,category` rows.

use std::path::PathBuf;

use bplink::eval::{evaluate, EvalOptions, ScoredPair, DEFAULT_NEGATIVE_RATIO};
use bplink::io;
use bplink::{Error, Result};
use clap::Args;
use serde_json::json;

use crate::config::pick;
use crate::inputs::{self, SplitInput};
use crate::scorer::{CategoryArg, ScorerArgs, ScorerContext};
use crate::{resolve_common, write_manifest, CommonArgs, Outcome, RunManifest};

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub split: SplitInput,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Explicit pair list CSV with `user` and `host` label columns;
    /// overrides the sampled evaluation pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub user_covs: Option<PathBuf>,
    #[arg(long)]
    pub host_covs: Option<PathBuf>,
    /// Pair category to sample when --pairs is absent.
    #[arg(long, value_enum, default_value = "all")]
    pub category: CategoryArg,
    /// Negatives per positive when sampling evaluation pairs.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Keep training edges out of the sampled negative pool.
    #[arg(long)]
    pub exclude_train_edges: bool,
}

pub fn run(args: ScoreArgs) -> Result<Outcome> {
    let rc = resolve_common(&args.common)?;

    // Pair-list mode scores a fixed list against the full training graph;
    // sample mode needs a proper train/test split.
    let (train, test) = match &args.pairs {
        Some(_) => {
            if args.split.train_end.is_some() {
                return Err(Error::InvalidArgument(
                    "--pairs scores against the whole training input; \
                     drop --train-end or drop --pairs"
                        .into(),
                ));
            }
            let train = args.split.train.load()?;
            let test = args
                .split
                .test
                .as_deref()
                .map(io::read_graph_text)
                .transpose()?;
            (train, test)
        }
        None => {
            let (train, test) = args.split.load()?;
            (train, Some(test))
        }
    };

    let user_covs = inputs::load_covariates(args.user_covs.as_deref(), train.user_labels())?;
    let host_covs = inputs::load_covariates(args.host_covs.as_deref(), train.host_labels())?;
    let ctx = ScorerContext::load(&args.scorer, &rc.cfg, &train, user_covs, host_covs, rc.seed)?;
    let category = args.category.to_category();
    let ratio = pick(args.ratio, rc.cfg.f64("ratio")?, DEFAULT_NEGATIVE_RATIO);
    let scorer = ctx.build(&train, category)?;

    let scored: Vec<ScoredPair> = match &args.pairs {
        Some(pairs_path) => inputs::read_pairs_csv(pairs_path, &train)?
            .into_iter()
            .map(|(i, j)| {
                let score = scorer.score(i, j);
                if !score.is_finite() {
                    return Err(Error::NonFiniteScore { i, j });
                }
                Ok(ScoredPair {
                    i,
                    j,
                    score,
                    label: test.as_ref().is_some_and(|t| t.has_edge(i, j)),
                    category,
                })
            })
            .collect::<Result<_>>()?,
        None => {
            let test = test.as_ref().expect("sample mode always has a test graph");
            let opts = EvalOptions {
                ratio,
                category,
                seed: rc.seed,
                exclude_train_edges: args.exclude_train_edges,
            };
            evaluate(scorer.as_ref(), &train, test, &opts)?.0
        }
    };

    io::write_scored_pairs_csv(
        rc.out.join("scores.csv"),
        &scored,
        train.user_labels(),
        train.host_labels(),
    )?;
    write_manifest(
        &rc.out,
        &RunManifest {
            command: "score",
            seed: rc.seed,
            threads: rc.threads,
            converged: true,
            settings: json!({
                "input": args.split.describe(),
                "pairs": inputs::path_json(&args.pairs),
                "user_covs": inputs::path_json(&args.user_covs),
                "host_covs": inputs::path_json(&args.host_covs),
                "category": category.name(),
                "ratio": ratio,
                "exclude_train_edges": args.exclude_train_edges,
                "scoring": ctx.describe(&args.scorer),
            }),
            outputs: vec!["scores.csv".into()],
        },
    )?;
    println!("scored {} pairs -> scores.csv", scored.len());
    Ok(Outcome::Success)
}
