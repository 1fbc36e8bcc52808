//! Shared input loading: graphs from text files, event logs, or snapshot
//! directories; train/test splits; covariate tables joined on node labels.

use std::path::{Path, PathBuf};

use bplink::graph::{
    self, CovariateMatrix, SparseBipartiteGraph, TemporalGraphSequence, TimeWindow,
};
use bplink::io::{self, HostField};
use bplink::{Error, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HostFieldArg {
    Loghost,
    Source,
}

impl HostFieldArg {
    pub fn to_host_field(self) -> HostField {
        match self {
            HostFieldArg::Loghost => HostField::LogHost,
            HostFieldArg::Source => HostField::Source,
        }
    }
}

/// Flags naming the training graph; exactly one source must be given.
#[derive(Args)]
pub struct GraphInput {
    /// Training graph as text: a "n_users n_hosts nnz" header, then one
    /// "user host" index pair per line.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Event log (.csv with time/user/host columns, or .jsonl/.ndjson with
    /// Time/UserName and a host field); every event lands in the graph.
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Daily snapshot directory; the union of all days forms the graph.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    /// JSON field naming the host in .jsonl event logs.
    #[arg(long, value_enum, default_value = "loghost")]
    pub host_field: HostFieldArg,
}

impl GraphInput {
    pub fn load(&self) -> Result<SparseBipartiteGraph> {
        load_static_graph(
            self.graph.as_deref(),
            self.events.as_deref(),
            self.sequence.as_deref(),
            self.host_field.to_host_field(),
        )
    }

    pub fn describe(&self) -> serde_json::Value {
        json!({
            "graph": path_json(&self.graph),
            "events": path_json(&self.events),
            "sequence": path_json(&self.sequence),
            "host_field": self.host_field.to_host_field().field_name(),
        })
    }
}

pub fn load_static_graph(
    graph: Option<&Path>,
    events: Option<&Path>,
    sequence: Option<&Path>,
    host_field: HostField,
) -> Result<SparseBipartiteGraph> {
    match (graph, events, sequence) {
        (Some(p), None, None) => io::read_graph_text(p),
        (None, Some(p), None) => {
            graph::ingest_event_log(io::event_log_records(p, host_field)?, TimeWindow::all())
        }
        (None, None, Some(d)) => Ok(io::read_sequence_dir(d)?.union_graph()),
        _ => Err(Error::InvalidArgument(
            "provide exactly one of --graph, --events, --sequence".into(),
        )),
    }
}

/// A daily sequence, either prebuilt (`--sequence`) or ingested from an
/// event log with an explicit period structure (`--events` + `--period`).
pub fn load_sequence(
    sequence: Option<&Path>,
    events: Option<&Path>,
    period: Option<&str>,
    host_field: HostField,
) -> Result<TemporalGraphSequence> {
    match (sequence, events) {
        (Some(d), None) => io::read_sequence_dir(d),
        (None, Some(p)) => {
            let period = period.ok_or_else(|| {
                Error::InvalidArgument(
                    "ingesting events into daily snapshots needs --period \
                     (modular:P or lanl4:A:F)"
                        .into(),
                )
            })?;
            let map = io::parse_period_map(period)?;
            graph::ingest_daily_sequence(
                io::event_log_records(p, host_field)?,
                TimeWindow::all(),
                map,
            )
        }
        _ => Err(Error::InvalidArgument(
            "provide exactly one of --sequence, --events".into(),
        )),
    }
}

/// Covariate CSV joined on the given node labels; absent flag means no
/// covariates on that side.
pub fn load_covariates(path: Option<&Path>, labels: &[String]) -> Result<CovariateMatrix> {
    match path {
        Some(p) => io::read_covariates_csv(p, labels),
        None => Ok(CovariateMatrix::empty(labels.len())),
    }
}

/// Train/test pair for evaluation-style commands: either two aligned graph
/// files, or one event log split at `--train-end`.
#[derive(Args)]
pub struct SplitInput {
    #[command(flatten)]
    pub train: GraphInput,
    /// Test-window graph over the same node universe as the training graph.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Event-time split point: events before it train, at or after it test.
    #[arg(long)]
    pub train_end: Option<i64>,
    /// End of the test window; events at or after it are dropped.
    #[arg(long)]
    pub test_end: Option<i64>,
}

impl SplitInput {
    pub fn load(&self) -> Result<(SparseBipartiteGraph, SparseBipartiteGraph)> {
        let (train, test) = match (self.train.events.as_deref(), self.train_end) {
            (Some(events), Some(train_end)) => {
                if self.train.graph.is_some() || self.train.sequence.is_some() {
                    return Err(Error::InvalidArgument(
                        "--train-end splits an event log; drop --graph/--sequence".into(),
                    ));
                }
                if self.test.is_some() {
                    return Err(Error::InvalidArgument(
                        "pass either --test or --train-end, not both".into(),
                    ));
                }
                let test_end = self.test_end.unwrap_or(i64::MAX);
                let split = graph::temporal_split(
                    io::event_log_records(events, self.train.host_field.to_host_field())?,
                    train_end,
                    test_end,
                )?;
                (split.train, split.test)
            }
            _ => {
                let train = self.train.load()?;
                let test_path = self.test.as_deref().ok_or_else(|| {
                    Error::InvalidArgument(
                        "provide --test, or --events with --train-end".into(),
                    )
                })?;
                (train, io::read_graph_text(test_path)?)
            }
        };
        if train.n_users() != test.n_users() || train.n_hosts() != test.n_hosts() {
            return Err(Error::DimMismatch(format!(
                "train graph is {} x {} but test graph is {} x {}",
                train.n_users(),
                train.n_hosts(),
                test.n_users(),
                test.n_hosts()
            )));
        }
        Ok((train, test))
    }

    pub fn describe(&self) -> serde_json::Value {
        let mut desc = self.train.describe();
        let obj = desc.as_object_mut().expect("describe returns an object");
        obj.insert("test".into(), path_json(&self.test));
        obj.insert("train_end".into(), json!(self.train_end));
        obj.insert("test_end".into(), json!(self.test_end));
        desc
    }
}

/// Explicit pair list: a CSV with `user` and `host` label columns.
pub fn read_pairs_csv(path: &Path, graph: &SparseBipartiteGraph) -> Result<Vec<(usize, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (user_col, host_col) = match (find("user"), find("host")) {
        (Some(u), Some(h)) => (u, h),
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "pair list needs 'user' and 'host' columns".into(),
            });
        }
    };
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let user = record.get(user_col).unwrap_or("");
        let host = record.get(host_col).unwrap_or("");
        let i = graph.user_id(user).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown user label '{user}'"),
        })?;
        let j = graph.host_id(host).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown host label '{host}'"),
        })?;
        pairs.push((i, j));
    }
    Ok(pairs)
}

pub fn path_json(p: &Option<PathBuf>) -> serde_json::Value {
    match p {
        Some(p) => serde_json::Value::String(p.display().to_string()),
        None => serde_json::Value::Null,
    }
}
