//! `bplink scree`: leading singular values of the adjacency matrix, for
//! choosing the factorization rank. Writes `scree.csv` (rank, value) and
//! prints the profile.

use std::io::Write as _;

use bplink::eval;
use bplink::Result;
use clap::Args;
use serde_json::json;

use crate::config::pick;
use crate::inputs::GraphInput;
use crate::{resolve_common, write_manifest, CommonArgs, Outcome, RunManifest};

#[derive(Args)]
pub struct ScreeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: GraphInput,
    /// Number of leading singular values (default: min dimension, capped
    /// at 50).
    #[arg(long)]
    pub r_max: Option<usize>,
}

pub fn run(args: ScreeArgs) -> Result<Outcome> {
    let rc = resolve_common(&args.common)?;
    let graph = args.input.load()?;
    let cap = graph.n_users().min(graph.n_hosts());
    let r_max = pick(args.r_max, rc.cfg.usize("r_max")?, cap.min(50));
    let values = eval::scree(&graph, r_max)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(rc.out.join("scree.csv"))?);
    writeln!(file, "rank,singular_value")?;
    for (idx, value) in values.iter().enumerate() {
        writeln!(file, "{},{}", idx + 1, value)?;
        println!("sigma[{}] = {value:.6}", idx + 1);
    }
    drop(file);

    write_manifest(
        &rc.out,
        &RunManifest {
            command: "scree",
            seed: rc.seed,
            threads: rc.threads,
            converged: true,
            settings: json!({
                "input": args.input.describe(),
                "r_max": r_max,
            }),
            outputs: vec!["scree.csv".into()],
        },
    )?;
    Ok(Outcome::Success)
}
