//! File formats: event logs, covariate tables, graph files, sequence
//! directories, JSON checkpoints, and evaluation reports.
//!
//! Event logs come as CSV with a header naming `time`, `user` and `host`
//! columns (extra columns are ignored), or as JSON lines carrying richer
//! authentication records with `Time`, `UserName` and `LogHost`/`Source`
//! fields — which of the two host fields becomes the graph's host side is
//! selectable. Both readers stream records, so ingestion stays at
//! O(nnz + nodes) memory.
//!
//! Covariate tables are CSV with header `label,<column>,...` and binary
//! cells; a column named `group:level` joins the categorical group `group`,
//! a column without a colon forms its own group. Rows whose label is not in
//! the node universe are skipped.
//!
//! Graphs use a plain text format: a header line `n_users n_hosts nnz`
//! followed by one `i j` pair per line. A daily sequence is a directory of
//! such files plus a `manifest.json` naming the per-day files, the node
//! labels, and the period map — `modular:<P>` or
//! `lanl4:<anchor-weekday>:<friday-parity>` with the calendar anchoring
//! spelled out explicitly (weekday of day 1, 0 = Monday, and which
//! alternating-Friday phase is segment 3).
//!
//! Checkpoints are versioned JSON envelopes `{version, kind, body}`; the
//! kind tag distinguishes point estimates from full variational states and
//! the static model from its seasonal and joint variants. Variational
//! checkpoints store only the parameter blocks — per-edge proxies are
//! rebuilt on load and refreshed with one edge phase, so a loaded state is
//! immediately fit to resume, score, or evaluate. Reports are small CSVs
//! (ELBO trace, ROC points, scored pairs) plus a flat JSON AUC summary.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cavi::{ElboTrace, SweepStats, VariationalState};
use crate::error::{Error, Result};
use crate::eval::{AucResult, Category, ScoredPair};
use crate::gibbs::PosteriorSamples;
use crate::graph::{
    CovariateMatrix, EventRecord, PeriodMap, SparseBipartiteGraph, TemporalGraphSequence,
};
use crate::joint::{JointHostSide, JointVariationalState};
use crate::model::{Hyperparameters, PointParams};
use crate::seasonal::{SeasonalAdjustments, SeasonalHyperparameters, SeasonalVariationalState};

/// Schema version written into (and required from) every JSON checkpoint.
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_POINT_PARAMS: &str = "point-params";
const KIND_SEASONAL_PARAMS: &str = "seasonal-params";
const KIND_JOINT_PARAMS: &str = "joint-params";
const KIND_CAVI_STATE: &str = "cavi-state";
const KIND_SEASONAL_STATE: &str = "seasonal-state";
const KIND_JOINT_STATE: &str = "joint-state";
const KIND_POSTERIOR_SAMPLES: &str = "posterior-samples";
const KIND_SEQUENCE: &str = "sequence";

// ---------------------------------------------------------------------------
// Event logs
// ---------------------------------------------------------------------------

/// Which field of a JSON-lines authentication record names the host side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HostField {
    /// The machine the event was logged on.
    #[default]
    LogHost,
    /// The machine the event originated from.
    Source,
}

impl HostField {
    pub fn field_name(self) -> &'static str {
        match self {
            HostField::LogHost => "LogHost",
            HostField::Source => "Source",
        }
    }
}

fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn event_field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str) -> Result<&'a str> {
    rec.get(idx).ok_or_else(|| Error::Parse {
        line: record_line(rec),
        msg: format!("row is missing the {name} column"),
    })
}

/// Streams `time,user,host` records from a CSV file with a header row.
/// Columns are matched by name (case-insensitive); extra columns pass
/// through unread.
pub fn event_csv_records(
    path: &Path,
) -> Result<impl Iterator<Item = Result<EventRecord>> + use<>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(ti), Some(ui), Some(hi)) = (col("time"), col("user"), col("host")) else {
        return Err(Error::Parse {
            line: 1,
            msg: "event CSV needs time, user and host columns".into(),
        });
    };
    Ok(reader.into_records().map(move |rec| {
        let rec = rec?;
        let raw_time = event_field(&rec, ti, "time")?;
        let time: i64 = raw_time.parse().map_err(|_| Error::Parse {
            line: record_line(&rec),
            msg: format!("time {raw_time:?} is not an integer"),
        })?;
        Ok(EventRecord {
            time,
            user: event_field(&rec, ui, "user")?.to_owned(),
            host: event_field(&rec, hi, "host")?.to_owned(),
        })
    }))
}

#[derive(Deserialize)]
struct RawJsonEvent {
    #[serde(rename = "Time")]
    time: i64,
    #[serde(rename = "UserName")]
    user: String,
    #[serde(rename = "LogHost")]
    log_host: Option<String>,
    #[serde(rename = "Source")]
    source: Option<String>,
}

fn parse_event_json(line: &str, line_no: usize, host_field: HostField) -> Result<EventRecord> {
    let raw: RawJsonEvent = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let host = match host_field {
        HostField::LogHost => raw.log_host,
        HostField::Source => raw.source,
    };
    let Some(host) = host else {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("record lacks the {} field", host_field.field_name()),
        });
    };
    Ok(EventRecord {
        time: raw.time,
        user: raw.user,
        host,
    })
}

/// Streams events from a JSON-lines file of authentication records,
/// taking `Time`, `UserName`, and the selected host field from every
/// non-empty line. Unknown fields are ignored.
pub fn event_jsonl_records(
    path: &Path,
    host_field: HostField,
) -> Result<impl Iterator<Item = Result<EventRecord>> + use<>> {
    let file = File::open(path)?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(idx, line)| {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::Io(e))),
            };
            if line.trim().is_empty() {
                return None;
            }
            Some(parse_event_json(&line, idx + 1, host_field))
        }))
}

/// Opens an event log, picking the format from the file extension:
/// `.csv` is columnar, `.json`/`.jsonl`/`.ndjson` are JSON lines.
pub fn event_log_records(
    path: &Path,
    host_field: HostField,
) -> Result<Box<dyn Iterator<Item = Result<EventRecord>>>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("csv") => Ok(Box::new(event_csv_records(path)?)),
        Some("json" | "jsonl" | "ndjson") => {
            Ok(Box::new(event_jsonl_records(path, host_field)?))
        }
        other => Err(Error::InvalidArgument(format!(
            "cannot infer an event-log format from extension {other:?}; \
             expected .csv, .json, .jsonl or .ndjson"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Covariate tables
// ---------------------------------------------------------------------------

/// Reads a binary covariate CSV (`label,<column>,...`) against a fixed node
/// universe. Column groups come from the `group:level` header convention;
/// rows with unknown labels are skipped, nodes without rows keep all-zero
/// covariates. Erroring cases: non-binary cells, level conflicts within a
/// group, and a non-empty table where no label matches at all.
pub fn read_covariates_csv(path: impl AsRef<Path>, labels: &[String]) -> Result<CovariateMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "covariate CSV needs a label column".into(),
        });
    }
    let column_names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut group_names: Vec<String> = Vec::new();
    let mut group_of: Vec<u32> = Vec::new();
    for name in &column_names {
        let group = name.split_once(':').map(|(g, _)| g).unwrap_or(name);
        let gi = group_names
            .iter()
            .position(|g| g == group)
            .unwrap_or_else(|| {
                group_names.push(group.to_owned());
                group_names.len() - 1
            });
        group_of.push(gi as u32);
    }
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut assignments: Vec<(usize, usize)> = Vec::new();
    let mut rows_seen = 0usize;
    let mut rows_matched = 0usize;
    for rec in reader.into_records() {
        let rec = rec?;
        rows_seen += 1;
        let label = event_field(&rec, 0, "label")?;
        let Some(&node) = index.get(label) else {
            continue;
        };
        rows_matched += 1;
        for (k, cell) in rec.iter().skip(1).enumerate() {
            match cell {
                "0" => {}
                "1" => assignments.push((node, k)),
                other => {
                    return Err(Error::Parse {
                        line: record_line(&rec),
                        msg: format!("covariate cells must be 0 or 1, got {other:?}"),
                    })
                }
            }
        }
    }
    if rows_seen > 0 && rows_matched == 0 {
        return Err(Error::InvalidArgument(
            "no covariate row matches any node label; wrong file?".into(),
        ));
    }
    CovariateMatrix::new(
        labels.len(),
        column_names,
        group_names,
        group_of,
        &assignments,
    )
}

/// Writes a covariate matrix as binary CSV, one row per node in label
/// order. Column headers are `group:level` names, so the file reads back
/// with the same group structure.
pub fn write_covariates_csv(
    path: impl AsRef<Path>,
    covs: &CovariateMatrix,
    labels: &[String],
) -> Result<()> {
    if labels.len() != covs.n_nodes() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} covariate rows",
            labels.len(),
            covs.n_nodes()
        )));
    }
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["label".to_owned()];
    header.extend(covs.column_names().iter().cloned());
    writer.write_record(&header)?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        for k in 0..covs.n_covariates() {
            row.push(if covs.is_active(i, k) { "1" } else { "0" }.to_owned());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph files and sequence directories
// ---------------------------------------------------------------------------

/// Writes the plain text graph format: `n_users n_hosts nnz` header, then
/// one `i j` pair per line in sorted edge order. Node labels are not part
/// of the format; reading assigns synthetic ones.
pub fn write_graph_text(path: impl AsRef<Path>, graph: &SparseBipartiteGraph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "{} {} {}", graph.n_users(), graph.n_hosts(), graph.nnz())?;
    for &(i, j) in graph.edges() {
        writeln!(w, "{i} {j}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the plain text graph format written by [`write_graph_text`].
pub fn read_graph_text(path: impl AsRef<Path>) -> Result<SparseBipartiteGraph> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(idx, l)| (idx + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let Some((line, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty graph file".into(),
        });
    };
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line,
            msg: format!("expected `n_users n_hosts nnz`, got {header:?}"),
        })?;
    let [n_users, n_hosts, nnz] = dims[..] else {
        return Err(Error::Parse {
            line,
            msg: format!("expected 3 header fields, got {}", dims.len()),
        });
    };
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(nnz);
    let mut last_line = line;
    for (line, text) in lines {
        last_line = line;
        let pair: Vec<u32> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line,
                msg: format!("expected an `i j` pair, got {text:?}"),
            })?;
        let [i, j] = pair[..] else {
            return Err(Error::Parse {
                line,
                msg: format!("expected 2 edge fields, got {}", pair.len()),
            });
        };
        edges.push((i, j));
    }
    if edges.len() != nnz {
        return Err(Error::Parse {
            line: last_line,
            msg: format!("header promises {nnz} edges, file has {}", edges.len()),
        });
    }
    SparseBipartiteGraph::from_edges(n_users, n_hosts, edges)
}

/// Parses a period-map string: `modular:<P>` or
/// `lanl4:<anchor-weekday>:<friday-parity>` (weekday of day 1, 0 = Monday;
/// parity selects which alternating-Friday phase is segment 3).
pub fn parse_period_map(s: &str) -> Result<PeriodMap> {
    let bad = |what: &str| {
        Error::InvalidArgument(format!(
            "{what} in period map {s:?}; expected modular:<P> or \
             lanl4:<anchor-weekday>:<friday-parity>"
        ))
    };
    let parts: Vec<&str> = s.split(':').collect();
    let map = match parts.as_slice() {
        ["modular", p] => PeriodMap::Modular {
            period: p.parse().map_err(|_| bad("non-numeric period"))?,
        },
        ["lanl4", a, f] => PeriodMap::FourSegmentWeek {
            anchor_weekday: a.parse().map_err(|_| bad("non-numeric anchor weekday"))?,
            friday_parity: f.parse().map_err(|_| bad("non-numeric Friday parity"))?,
        },
        _ => return Err(bad("unknown form")),
    };
    map.validate()?;
    Ok(map)
}

/// Inverse of [`parse_period_map`].
pub fn format_period_map(map: &PeriodMap) -> String {
    match map {
        PeriodMap::Modular { period } => format!("modular:{period}"),
        PeriodMap::FourSegmentWeek {
            anchor_weekday,
            friday_parity,
        } => format!("lanl4:{anchor_weekday}:{friday_parity}"),
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceManifest {
    period: String,
    days: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    host_labels: Option<Vec<String>>,
}

/// Writes a daily sequence as a directory: one graph file per day plus a
/// `manifest.json` naming the files, the period map, and the node labels.
pub fn write_sequence_dir(dir: impl AsRef<Path>, seq: &TemporalGraphSequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut days = Vec::with_capacity(seq.n_days());
    for (idx, snapshot) in seq.snapshots().iter().enumerate() {
        let name = format!("day_{:04}.txt", idx + 1);
        write_graph_text(dir.join(&name), snapshot)?;
        days.push(name);
    }
    let first = &seq.snapshots()[0];
    let manifest = SequenceManifest {
        period: format_period_map(seq.period_map()),
        days,
        user_labels: Some(first.user_labels().to_vec()),
        host_labels: Some(first.host_labels().to_vec()),
    };
    save_envelope_pretty(&dir.join("manifest.json"), KIND_SEQUENCE, &manifest)
}

/// Reads a sequence directory written by [`write_sequence_dir`] (or
/// assembled by hand: day files and a manifest).
pub fn read_sequence_dir(dir: impl AsRef<Path>) -> Result<TemporalGraphSequence> {
    let dir = dir.as_ref();
    let manifest: SequenceManifest = load_envelope(&dir.join("manifest.json"), KIND_SEQUENCE)?;
    let period_map = parse_period_map(&manifest.period)?;
    let mut snapshots = Vec::with_capacity(manifest.days.len());
    for name in &manifest.days {
        let graph = read_graph_text(dir.join(name))?;
        let graph = match (&manifest.user_labels, &manifest.host_labels) {
            (Some(users), Some(hosts)) => SparseBipartiteGraph::with_labels(
                users.clone(),
                hosts.clone(),
                graph.edges().to_vec(),
            )?,
            _ => graph,
        };
        snapshots.push(graph);
    }
    TemporalGraphSequence::new(snapshots, period_map)
}

// ---------------------------------------------------------------------------
// JSON checkpoint envelope
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EnvelopeOut<'a, T: Serialize> {
    version: u32,
    kind: &'a str,
    body: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    version: u32,
    kind: String,
    body: serde_json::Value,
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if pretty {
        serde_json::to_writer_pretty(&mut w, value)?;
    } else {
        serde_json::to_writer(&mut w, value)?;
    }
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn save_envelope<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    write_json(
        path,
        &EnvelopeOut {
            version: CHECKPOINT_VERSION,
            kind,
            body,
        },
        false,
    )
}

fn save_envelope_pretty<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    write_json(
        path,
        &EnvelopeOut {
            version: CHECKPOINT_VERSION,
            kind,
            body,
        },
        true,
    )
}

fn load_envelope<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let envelope: EnvelopeIn = serde_json::from_str(&text)?;
    if envelope.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: envelope.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if envelope.kind != kind {
        return Err(Error::CheckpointKind {
            found: envelope.kind,
            expected: kind.to_owned(),
        });
    }
    Ok(serde_json::from_value(envelope.body)?)
}

fn expect_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::DimMismatch(format!(
            "checkpoint block {name} has {got} entries, expected {want}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Point-estimate checkpoints
// ---------------------------------------------------------------------------

/// Saves fitted point estimates (proxy or posterior means).
pub fn save_point_params(path: impl AsRef<Path>, params: &PointParams) -> Result<()> {
    save_envelope(path.as_ref(), KIND_POINT_PARAMS, params)
}

pub fn load_point_params(path: impl AsRef<Path>) -> Result<PointParams> {
    load_envelope(path.as_ref(), KIND_POINT_PARAMS)
}

#[derive(Serialize, Deserialize)]
struct SeasonalParamsBody {
    params: PointParams,
    adjustments: SeasonalAdjustments,
}

/// Saves seasonal point estimates: base factors plus the per-segment
/// adjustment arrays.
pub fn save_seasonal_params(
    path: impl AsRef<Path>,
    params: &PointParams,
    adjustments: &SeasonalAdjustments,
) -> Result<()> {
    save_envelope(
        path.as_ref(),
        KIND_SEASONAL_PARAMS,
        &SeasonalParamsBody {
            params: params.clone(),
            adjustments: adjustments.clone(),
        },
    )
}

pub fn load_seasonal_params(
    path: impl AsRef<Path>,
) -> Result<(PointParams, SeasonalAdjustments)> {
    let body: SeasonalParamsBody = load_envelope(path.as_ref(), KIND_SEASONAL_PARAMS)?;
    Ok((body.params, body.adjustments))
}

#[derive(Serialize, Deserialize)]
struct JointParamsBody {
    params_a: PointParams,
    params_b: PointParams,
}

/// Saves joint point estimates: one parameter set per graph with the
/// shared user block duplicated into both.
pub fn save_joint_params(
    path: impl AsRef<Path>,
    params_a: &PointParams,
    params_b: &PointParams,
) -> Result<()> {
    save_envelope(
        path.as_ref(),
        KIND_JOINT_PARAMS,
        &JointParamsBody {
            params_a: params_a.clone(),
            params_b: params_b.clone(),
        },
    )
}

pub fn load_joint_params(path: impl AsRef<Path>) -> Result<(PointParams, PointParams)> {
    let body: JointParamsBody = load_envelope(path.as_ref(), KIND_JOINT_PARAMS)?;
    Ok((body.params_a, body.params_b))
}

#[derive(Serialize, Deserialize)]
struct SamplesBody {
    burn_in: usize,
    thin: usize,
    draws: Vec<PointParams>,
}

/// Saves a chain's kept draws as one concatenated file.
pub fn save_posterior_samples(path: impl AsRef<Path>, samples: &PosteriorSamples) -> Result<()> {
    save_envelope(
        path.as_ref(),
        KIND_POSTERIOR_SAMPLES,
        &SamplesBody {
            burn_in: samples.burn_in,
            thin: samples.thin,
            draws: samples.draws.clone(),
        },
    )
}

pub fn load_posterior_samples(path: impl AsRef<Path>) -> Result<PosteriorSamples> {
    let body: SamplesBody = load_envelope(path.as_ref(), KIND_POSTERIOR_SAMPLES)?;
    Ok(PosteriorSamples {
        draws: body.draws,
        burn_in: body.burn_in,
        thin: body.thin,
    })
}

// ---------------------------------------------------------------------------
// Variational-state checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CaviStateBody {
    hyper: Hyperparameters,
    n_users: usize,
    n_hosts: usize,
    k: usize,
    h: usize,
    lambda_alpha: Vec<f64>,
    mu_alpha: Vec<f64>,
    lambda_beta: Vec<f64>,
    mu_beta: Vec<f64>,
    lambda_phi: Vec<f64>,
    mu_phi: Vec<f64>,
    nu_alpha: f64,
    nu_beta: f64,
    nu_phi: f64,
    xi_alpha: Vec<f64>,
    xi_beta: Vec<f64>,
    xi_phi: f64,
}

impl CaviStateBody {
    fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let r = self.hyper.r;
        expect_len("lambda_alpha", self.lambda_alpha.len(), self.n_users * r)?;
        expect_len("mu_alpha", self.mu_alpha.len(), self.n_users * r)?;
        expect_len("lambda_beta", self.lambda_beta.len(), self.n_hosts * r)?;
        expect_len("mu_beta", self.mu_beta.len(), self.n_hosts * r)?;
        expect_len("lambda_phi", self.lambda_phi.len(), self.k * self.h)?;
        expect_len("mu_phi", self.mu_phi.len(), self.k * self.h)?;
        expect_len("xi_alpha", self.xi_alpha.len(), self.n_users)?;
        expect_len("xi_beta", self.xi_beta.len(), self.n_hosts)?;
        Ok(())
    }
}

/// Saves a variational state's parameter blocks. Per-edge proxies are not
/// stored; [`load_cavi_state`] rebuilds them in one edge phase.
pub fn save_cavi_state(path: impl AsRef<Path>, state: &VariationalState) -> Result<()> {
    save_envelope(
        path.as_ref(),
        KIND_CAVI_STATE,
        &CaviStateBody {
            hyper: state.hyper.clone(),
            n_users: state.n_users,
            n_hosts: state.n_hosts,
            k: state.k,
            h: state.h,
            lambda_alpha: state.lambda_alpha.clone(),
            mu_alpha: state.mu_alpha.clone(),
            lambda_beta: state.lambda_beta.clone(),
            mu_beta: state.mu_beta.clone(),
            lambda_phi: state.lambda_phi.clone(),
            mu_phi: state.mu_phi.clone(),
            nu_alpha: state.nu_alpha,
            nu_beta: state.nu_beta,
            nu_phi: state.nu_phi,
            xi_alpha: state.xi_alpha.clone(),
            xi_beta: state.xi_beta.clone(),
            xi_phi: state.xi_phi,
        },
    )
}

/// Loads a variational state against its graph and covariates, rebuilding
/// the per-edge structures and refreshing the proxies so the state is
/// ready to resume or score.
pub fn load_cavi_state(
    path: impl AsRef<Path>,
    graph: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
) -> Result<VariationalState> {
    let body: CaviStateBody = load_envelope(path.as_ref(), KIND_CAVI_STATE)?;
    body.validate()?;
    let mut state = VariationalState {
        hyper: body.hyper,
        n_users: body.n_users,
        n_hosts: body.n_hosts,
        k: body.k,
        h: body.h,
        lambda_alpha: body.lambda_alpha,
        mu_alpha: body.mu_alpha,
        lambda_beta: body.lambda_beta,
        mu_beta: body.mu_beta,
        lambda_phi: body.lambda_phi,
        mu_phi: body.mu_phi,
        nu_alpha: body.nu_alpha,
        nu_beta: body.nu_beta,
        nu_phi: body.nu_phi,
        xi_alpha: body.xi_alpha,
        xi_beta: body.xi_beta,
        xi_phi: body.xi_phi,
        theta: Vec::new(),
        edge_weight: Vec::new(),
        chi_latent: Vec::new(),
        chi_pair: Vec::new(),
        pair_ptr: Vec::new(),
        pair_idx: Vec::new(),
        x_tilde: Vec::new(),
        y_tilde: Vec::new(),
    };
    state.rebuild_edge_structures(graph, user_covs, host_covs)?;
    state.update_theta_chi(graph, &mut SweepStats::default())?;
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct SeasonalStateBody {
    hyper: SeasonalHyperparameters,
    n_users: usize,
    n_hosts: usize,
    k: usize,
    h: usize,
    n_segments: usize,
    n_days: usize,
    lambda_alpha: Vec<f64>,
    mu_alpha: Vec<f64>,
    lambda_beta: Vec<f64>,
    mu_beta: Vec<f64>,
    lambda_phi: Vec<f64>,
    mu_phi: Vec<f64>,
    lambda_gamma: Vec<f64>,
    mu_gamma: Vec<f64>,
    lambda_delta: Vec<f64>,
    mu_delta: Vec<f64>,
    nu_alpha: f64,
    nu_beta: f64,
    nu_phi: f64,
    nu_gamma: f64,
    nu_delta: f64,
    xi_alpha: Vec<f64>,
    xi_beta: Vec<f64>,
    xi_phi: f64,
    xi_gamma: Vec<f64>,
    xi_delta: Vec<f64>,
}

impl SeasonalStateBody {
    fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let r = self.hyper.base.r;
        let p = self.n_segments;
        expect_len("lambda_alpha", self.lambda_alpha.len(), self.n_users * r)?;
        expect_len("mu_alpha", self.mu_alpha.len(), self.n_users * r)?;
        expect_len("lambda_beta", self.lambda_beta.len(), self.n_hosts * r)?;
        expect_len("mu_beta", self.mu_beta.len(), self.n_hosts * r)?;
        expect_len("lambda_phi", self.lambda_phi.len(), self.k * self.h)?;
        expect_len("mu_phi", self.mu_phi.len(), self.k * self.h)?;
        expect_len("lambda_gamma", self.lambda_gamma.len(), self.n_users * p * r)?;
        expect_len("mu_gamma", self.mu_gamma.len(), self.n_users * p * r)?;
        expect_len("lambda_delta", self.lambda_delta.len(), self.n_hosts * p * r)?;
        expect_len("mu_delta", self.mu_delta.len(), self.n_hosts * p * r)?;
        expect_len("xi_alpha", self.xi_alpha.len(), self.n_users)?;
        expect_len("xi_beta", self.xi_beta.len(), self.n_hosts)?;
        expect_len("xi_gamma", self.xi_gamma.len(), p)?;
        expect_len("xi_delta", self.xi_delta.len(), p)?;
        Ok(())
    }
}

/// Saves a seasonal variational state's parameter blocks (the static
/// schema plus the adjustment blocks, under its own kind tag).
pub fn save_seasonal_state(
    path: impl AsRef<Path>,
    state: &SeasonalVariationalState,
) -> Result<()> {
    save_envelope(
        path.as_ref(),
        KIND_SEASONAL_STATE,
        &SeasonalStateBody {
            hyper: state.hyper.clone(),
            n_users: state.n_users,
            n_hosts: state.n_hosts,
            k: state.k,
            h: state.h,
            n_segments: state.n_segments,
            n_days: state.n_days,
            lambda_alpha: state.lambda_alpha.clone(),
            mu_alpha: state.mu_alpha.clone(),
            lambda_beta: state.lambda_beta.clone(),
            mu_beta: state.mu_beta.clone(),
            lambda_phi: state.lambda_phi.clone(),
            mu_phi: state.mu_phi.clone(),
            lambda_gamma: state.lambda_gamma.clone(),
            mu_gamma: state.mu_gamma.clone(),
            lambda_delta: state.lambda_delta.clone(),
            mu_delta: state.mu_delta.clone(),
            nu_alpha: state.nu_alpha,
            nu_beta: state.nu_beta,
            nu_phi: state.nu_phi,
            nu_gamma: state.nu_gamma,
            nu_delta: state.nu_delta,
            xi_alpha: state.xi_alpha.clone(),
            xi_beta: state.xi_beta.clone(),
            xi_phi: state.xi_phi,
            xi_gamma: state.xi_gamma.clone(),
            xi_delta: state.xi_delta.clone(),
        },
    )
}

/// Loads a seasonal state against its sequence and covariates, rebuilding
/// per-day structures and refreshing the proxies.
pub fn load_seasonal_state(
    path: impl AsRef<Path>,
    seq: &TemporalGraphSequence,
    user_covs: &CovariateMatrix,
    host_covs: &CovariateMatrix,
) -> Result<SeasonalVariationalState> {
    let body: SeasonalStateBody = load_envelope(path.as_ref(), KIND_SEASONAL_STATE)?;
    body.validate()?;
    let mut state = SeasonalVariationalState {
        hyper: body.hyper,
        n_users: body.n_users,
        n_hosts: body.n_hosts,
        k: body.k,
        h: body.h,
        n_segments: body.n_segments,
        n_days: body.n_days,
        segment_days: Vec::new(),
        day_segment: Vec::new(),
        lambda_alpha: body.lambda_alpha,
        mu_alpha: body.mu_alpha,
        lambda_beta: body.lambda_beta,
        mu_beta: body.mu_beta,
        lambda_phi: body.lambda_phi,
        mu_phi: body.mu_phi,
        nu_alpha: body.nu_alpha,
        nu_beta: body.nu_beta,
        nu_phi: body.nu_phi,
        xi_alpha: body.xi_alpha,
        xi_beta: body.xi_beta,
        xi_phi: body.xi_phi,
        lambda_gamma: body.lambda_gamma,
        mu_gamma: body.mu_gamma,
        lambda_delta: body.lambda_delta,
        mu_delta: body.mu_delta,
        nu_gamma: body.nu_gamma,
        nu_delta: body.nu_delta,
        xi_gamma: body.xi_gamma,
        xi_delta: body.xi_delta,
        days: Vec::new(),
        x_tilde: Vec::new(),
        y_tilde: Vec::new(),
    };
    state.rebuild_day_structures(seq, user_covs, host_covs)?;
    state.update_theta_chi(seq, &mut SweepStats::default())?;
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct JointSideBody {
    n_hosts: usize,
    h: usize,
    lambda_beta: Vec<f64>,
    mu_beta: Vec<f64>,
    lambda_phi: Vec<f64>,
    mu_phi: Vec<f64>,
    nu_beta: f64,
    nu_phi: f64,
    xi_beta: Vec<f64>,
    xi_phi: f64,
}

impl JointSideBody {
    fn from_side(side: &JointHostSide) -> Self {
        JointSideBody {
            n_hosts: side.n_hosts,
            h: side.h,
            lambda_beta: side.lambda_beta.clone(),
            mu_beta: side.mu_beta.clone(),
            lambda_phi: side.lambda_phi.clone(),
            mu_phi: side.mu_phi.clone(),
            nu_beta: side.nu_beta,
            nu_phi: side.nu_phi,
            xi_beta: side.xi_beta.clone(),
            xi_phi: side.xi_phi,
        }
    }

    fn validate(&self, name: &str, r: usize, k: usize) -> Result<()> {
        let tag = |field: &str| format!("{name}.{field}");
        expect_len(&tag("lambda_beta"), self.lambda_beta.len(), self.n_hosts * r)?;
        expect_len(&tag("mu_beta"), self.mu_beta.len(), self.n_hosts * r)?;
        expect_len(&tag("lambda_phi"), self.lambda_phi.len(), k * self.h)?;
        expect_len(&tag("mu_phi"), self.mu_phi.len(), k * self.h)?;
        expect_len(&tag("xi_beta"), self.xi_beta.len(), self.n_hosts)?;
        Ok(())
    }

    fn into_side(self) -> JointHostSide {
        JointHostSide {
            n_hosts: self.n_hosts,
            h: self.h,
            lambda_beta: self.lambda_beta,
            mu_beta: self.mu_beta,
            lambda_phi: self.lambda_phi,
            mu_phi: self.mu_phi,
            nu_beta: self.nu_beta,
            nu_phi: self.nu_phi,
            xi_beta: self.xi_beta,
            xi_phi: self.xi_phi,
            theta: Vec::new(),
            edge_weight: Vec::new(),
            chi_latent: Vec::new(),
            chi_pair: Vec::new(),
            pair_ptr: Vec::new(),
            pair_idx: Vec::new(),
            y_tilde: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JointStateBody {
    hyper: Hyperparameters,
    n_users: usize,
    k: usize,
    lambda_alpha: Vec<f64>,
    mu_alpha: Vec<f64>,
    nu_alpha: f64,
    xi_alpha: Vec<f64>,
    side_a: JointSideBody,
    side_b: JointSideBody,
}

impl JointStateBody {
    fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let r = self.hyper.r;
        expect_len("lambda_alpha", self.lambda_alpha.len(), self.n_users * r)?;
        expect_len("mu_alpha", self.mu_alpha.len(), self.n_users * r)?;
        expect_len("xi_alpha", self.xi_alpha.len(), self.n_users)?;
        self.side_a.validate("side_a", r, self.k)?;
        self.side_b.validate("side_b", r, self.k)
    }
}

/// Saves a joint variational state's parameter blocks: the shared user
/// block plus both graphs' host/interaction blocks.
pub fn save_joint_state(path: impl AsRef<Path>, state: &JointVariationalState) -> Result<()> {
    save_envelope(
        path.as_ref(),
        KIND_JOINT_STATE,
        &JointStateBody {
            hyper: state.hyper.clone(),
            n_users: state.n_users,
            k: state.k,
            lambda_alpha: state.lambda_alpha.clone(),
            mu_alpha: state.mu_alpha.clone(),
            nu_alpha: state.nu_alpha,
            xi_alpha: state.xi_alpha.clone(),
            side_a: JointSideBody::from_side(&state.side_a),
            side_b: JointSideBody::from_side(&state.side_b),
        },
    )
}

/// Loads a joint state against both graphs and their covariates,
/// rebuilding per-edge structures and refreshing the proxies.
pub fn load_joint_state(
    path: impl AsRef<Path>,
    graph_a: &SparseBipartiteGraph,
    graph_b: &SparseBipartiteGraph,
    user_covs: &CovariateMatrix,
    host_covs_a: &CovariateMatrix,
    host_covs_b: &CovariateMatrix,
) -> Result<JointVariationalState> {
    let body: JointStateBody = load_envelope(path.as_ref(), KIND_JOINT_STATE)?;
    body.validate()?;
    let mut state = JointVariationalState {
        hyper: body.hyper,
        n_users: body.n_users,
        k: body.k,
        lambda_alpha: body.lambda_alpha,
        mu_alpha: body.mu_alpha,
        nu_alpha: body.nu_alpha,
        xi_alpha: body.xi_alpha,
        x_tilde: Vec::new(),
        side_a: body.side_a.into_side(),
        side_b: body.side_b.into_side(),
    };
    state.rebuild_edge_structures(graph_a, graph_b, user_covs, host_covs_a, host_covs_b)?;
    state.update_theta_chi(graph_a, graph_b, &mut SweepStats::default())?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Writes the per-sweep ELBO history as CSV (`sweep,elbo`).
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &ElboTrace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["sweep", "elbo"])?;
    for (sweep, value) in trace.values.iter().enumerate() {
        writer.write_record([(sweep + 1).to_string(), value.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the ROC polyline as CSV (`fpr,tpr`).
pub fn write_roc_csv(path: impl AsRef<Path>, result: &AucResult) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["fpr", "tpr"])?;
    for &(fpr, tpr) in &result.roc_points {
        writer.write_record([fpr.to_string(), tpr.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Flat JSON summary of one AUC evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub category: String,
}

/// Writes the AUC summary JSON for one evaluation category.
pub fn write_auc_json(
    path: impl AsRef<Path>,
    result: &AucResult,
    category: Category,
) -> Result<()> {
    write_json(
        path.as_ref(),
        &AucSummary {
            auc: result.auc,
            n_pos: result.n_pos,
            n_neg: result.n_neg,
            seed: result.sampling_seed,
            category: category.name().to_owned(),
        },
        true,
    )
}

pub fn read_auc_json(path: impl AsRef<Path>) -> Result<AucSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path.as_ref())?)?)
}

/// Writes scored pairs as CSV (`user,host,score,positive,category`),
/// resolving indices to node labels.
pub fn write_scored_pairs_csv(
    path: impl AsRef<Path>,
    pairs: &[ScoredPair],
    user_labels: &[String],
    host_labels: &[String],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["user", "host", "score", "positive", "category"])?;
    for pair in pairs {
        let (Some(user), Some(host)) = (user_labels.get(pair.i), host_labels.get(pair.j))
        else {
            return Err(Error::InvalidArgument(format!(
                "scored pair ({}, {}) is outside the {} x {} label universe",
                pair.i,
                pair.j,
                user_labels.len(),
                host_labels.len()
            )));
        };
        writer.write_record([
            user.as_str(),
            host.as_str(),
            &pair.score.to_string(),
            if pair.label { "1" } else { "0" },
            pair.category.name(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
