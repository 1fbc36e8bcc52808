//! `bplink eval`: rank test edges against non-edges and report AUC.
//!
//! For each requested category this writes `auc_<category>.json` (the AUC
//! with its pair counts and sampling seed) and `roc_<category>.csv`, and
//! prints one summary line. `--full-negatives` ranks against every
//! eligible zero cell instead of sampling; `--stability-ratios` adds a
//! resampling-stability report (`stability.csv` with ratio, mean, sd).

use std::io::Write as _;
use std::path::PathBuf;

use bplink::eval::{
    auc_stability, evaluate, evaluate_full_negatives, Category, EvalOptions,
    DEFAULT_NEGATIVE_RATIO,
};
use bplink::io;
use bplink::Result;
use clap::Args;
use serde_json::json;

use crate::config::pick;
use crate::inputs::{self, SplitInput};
use crate::scorer::{CategoryArg, ScorerArgs, ScorerContext};
use crate::{resolve_common, write_manifest, CommonArgs, Outcome, RunManifest};

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub split: SplitInput,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    #[arg(long)]
    pub user_covs: Option<PathBuf>,
    #[arg(long)]
    pub host_covs: Option<PathBuf>,
    /// Categories to evaluate (comma separated).
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub categories: Vec<CategoryArg>,
    /// Negatives sampled per positive.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Keep training edges out of the sampled negative pool.
    #[arg(long)]
    pub exclude_train_edges: bool,
    /// Rank against every eligible zero cell instead of sampling.
    #[arg(long)]
    pub full_negatives: bool,
    /// Negative ratios for a subsampling-stability report (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub stability_ratios: Vec<f64>,
    /// Resampling repeats per stability ratio.
    #[arg(long)]
    pub stability_repeats: Option<usize>,
}

pub fn run(args: EvalArgs) -> Result<Outcome> {
    let rc = resolve_common(&args.common)?;
    let (train, test) = args.split.load()?;
    let user_covs = inputs::load_covariates(args.user_covs.as_deref(), train.user_labels())?;
    let host_covs = inputs::load_covariates(args.host_covs.as_deref(), train.host_labels())?;
    let ctx = ScorerContext::load(&args.scorer, &rc.cfg, &train, user_covs, host_covs, rc.seed)?;
    let ratio = pick(args.ratio, rc.cfg.f64("ratio")?, DEFAULT_NEGATIVE_RATIO);

    let mut outputs = Vec::new();
    let mut aucs = serde_json::Map::new();
    for category_arg in &args.categories {
        let category = category_arg.to_category();
        let scorer = ctx.build(&train, category)?;
        let result = if args.full_negatives {
            evaluate_full_negatives(
                scorer.as_ref(),
                &train,
                &test,
                category,
                args.exclude_train_edges,
            )?
        } else {
            let opts = EvalOptions {
                ratio,
                category,
                seed: rc.seed,
                exclude_train_edges: args.exclude_train_edges,
            };
            evaluate(scorer.as_ref(), &train, &test, &opts)?.1
        };
        let auc_file = format!("auc_{}.json", category.name());
        let roc_file = format!("roc_{}.csv", category.name());
        io::write_auc_json(rc.out.join(&auc_file), &result, category)?;
        io::write_roc_csv(rc.out.join(&roc_file), &result)?;
        println!(
            "auc[{}] = {:.6}  (n_pos={}, n_neg={})",
            category.name(),
            result.auc,
            result.n_pos,
            result.n_neg
        );
        aucs.insert(category.name().into(), json!(result.auc));
        outputs.push(auc_file);
        outputs.push(roc_file);
    }

    if !args.stability_ratios.is_empty() {
        let repeats = pick(args.stability_repeats, rc.cfg.usize("stability_repeats")?, 5);
        let scorer = ctx.build(&train, Category::All)?;
        let rows = auc_stability(
            scorer.as_ref(),
            &train,
            &test,
            &args.stability_ratios,
            repeats,
            rc.seed,
        )?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(rc.out.join("stability.csv"))?);
        writeln!(file, "ratio,mean,sd")?;
        for row in &rows {
            writeln!(file, "{},{},{}", row.ratio, row.mean, row.sd)?;
            println!(
                "stability[ratio={}] mean={:.6} sd={:.6} over {repeats} repeats",
                row.ratio, row.mean, row.sd
            );
        }
        outputs.push("stability.csv".into());
    }

    write_manifest(
        &rc.out,
        &RunManifest {
            command: "eval",
            seed: rc.seed,
            threads: rc.threads,
            converged: true,
            settings: json!({
                "input": args.split.describe(),
                "user_covs": inputs::path_json(&args.user_covs),
                "host_covs": inputs::path_json(&args.host_covs),
                "categories": args.categories.iter()
                    .map(|c| c.to_category().name())
                    .collect::<Vec<_>>(),
                "ratio": ratio,
                "exclude_train_edges": args.exclude_train_edges,
                "full_negatives": args.full_negatives,
                "stability_ratios": args.stability_ratios,
                "scoring": ctx.describe(&args.scorer),
                "auc": aucs,
            }),
            outputs,
        },
    )?;
    Ok(Outcome::Success)
}
