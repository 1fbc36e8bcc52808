//! Sparse bipartite graphs, categorical node covariates, and temporal
//! snapshot sequences.
//!
//! The graph is a binary adjacency over two disjoint node sets ("users" and
//! "hosts"), stored as a sorted coordinate list with both a row index and a
//! column index, because every inference update walks the edges once by user
//! and once by host. Graphs are immutable after construction and safe to
//! share across threads.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};

/// Half-open time interval [start, end) in integer seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn new(start: i64, end: i64) -> Self {
        TimeWindow { start, end }
    }

    /// Window covering every representable timestamp.
    pub fn all() -> Self {
        TimeWindow {
            start: i64::MIN,
            end: i64::MAX,
        }
    }

    #[inline]
    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }
}

/// One authentication-style event: who connected to what, and when.
/// Times are integer seconds; day boundaries fall at multiples of 86400.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub time: i64,
    pub user: String,
    pub host: String,
}

/// Seconds per day for day-boundary arithmetic.
pub const SECONDS_PER_DAY: i64 = 86_400;

/// Binary bipartite adjacency with dense per-side indices and label maps.
///
/// Edges are unique, sorted by (user, host); `row_ptr` slices the edge list
/// per user and `col_edge_ids` lists edge positions per host, so either
/// orientation can be walked without searching.
#[derive(Clone, PartialEq)]
pub struct SparseBipartiteGraph {
    n_users: usize,
    n_hosts: usize,
    edges: Vec<(u32, u32)>,
    row_ptr: Vec<usize>,
    col_ptr: Vec<usize>,
    col_edge_ids: Vec<u32>,
    user_labels: Vec<String>,
    host_labels: Vec<String>,
    user_index: HashMap<String, u32>,
    host_index: HashMap<String, u32>,
}

impl fmt::Debug for SparseBipartiteGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SparseBipartiteGraph({} users x {} hosts, {} edges)",
            self.n_users,
            self.n_hosts,
            self.edges.len()
        )
    }
}

fn default_labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn index_of(labels: &[String]) -> HashMap<String, u32> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i as u32))
        .collect()
}

impl SparseBipartiteGraph {
    /// Builds a graph from an edge list. Edges are sorted and de-duplicated;
    /// out-of-range endpoints are an error. Nodes get synthetic labels
    /// (`u0`, `u1`, ... / `h0`, `h1`, ...).
    pub fn from_edges(n_users: usize, n_hosts: usize, edges: Vec<(u32, u32)>) -> Result<Self> {
        Self::with_labels(
            default_labels("u", n_users),
            default_labels("h", n_hosts),
            edges,
        )
    }

    /// Builds a graph with explicit node labels (one per index, in order).
    pub fn with_labels(
        user_labels: Vec<String>,
        host_labels: Vec<String>,
        mut edges: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let n_users = user_labels.len();
        let n_hosts = host_labels.len();
        for &(i, j) in &edges {
            if i as usize >= n_users || j as usize >= n_hosts {
                return Err(Error::EdgeOutOfBounds {
                    i: i as usize,
                    j: j as usize,
                    n_users,
                    n_hosts,
                });
            }
        }
        edges.sort_unstable();
        edges.dedup();

        let mut row_ptr = vec![0usize; n_users + 1];
        for &(i, _) in &edges {
            row_ptr[i as usize + 1] += 1;
        }
        for i in 0..n_users {
            row_ptr[i + 1] += row_ptr[i];
        }

        // Column index: edge ids ordered by (host, user). Edges are already
        // user-sorted, so a counting pass per host keeps users sorted within
        // each host.
        let mut col_ptr = vec![0usize; n_hosts + 1];
        for &(_, j) in &edges {
            col_ptr[j as usize + 1] += 1;
        }
        for j in 0..n_hosts {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut cursor = col_ptr.clone();
        let mut col_edge_ids = vec![0u32; edges.len()];
        for (e, &(_, j)) in edges.iter().enumerate() {
            col_edge_ids[cursor[j as usize]] = e as u32;
            cursor[j as usize] += 1;
        }

        let user_index = index_of(&user_labels);
        let host_index = index_of(&host_labels);
        Ok(SparseBipartiteGraph {
            n_users,
            n_hosts,
            edges,
            row_ptr,
            col_ptr,
            col_edge_ids,
            user_labels,
            host_labels,
            user_index,
            host_index,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_hosts(&self) -> usize {
        self.n_hosts
    }

    pub fn nnz(&self) -> usize {
        self.edges.len()
    }

    /// All edges, sorted by (user, host). The position of an edge in this
    /// slice is its edge id.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Edge-id range for user `i`'s edges: `edges()[range]` all have user i.
    #[inline]
    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Edges of user `i` as a slice of (i, j) pairs.
    #[inline]
    pub fn row_edges(&self, i: usize) -> &[(u32, u32)] {
        &self.edges[self.row_range(i)]
    }

    /// Edge ids of host `j`'s edges, ordered by user.
    #[inline]
    pub fn col_edge_ids(&self, j: usize) -> &[u32] {
        &self.col_edge_ids[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.row_edges(i).binary_search(&(i as u32, j as u32)).is_ok()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn in_degree(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - self.col_ptr[j]
    }

    pub fn user_labels(&self) -> &[String] {
        &self.user_labels
    }

    pub fn host_labels(&self) -> &[String] {
        &self.host_labels
    }

    pub fn user_id(&self, label: &str) -> Option<usize> {
        self.user_index.get(label).map(|&i| i as usize)
    }

    pub fn host_id(&self, label: &str) -> Option<usize> {
        self.host_index.get(label).map(|&j| j as usize)
    }

    /// True when both graphs index the same node universe (same shape and
    /// the same labels in the same order).
    pub fn same_universe(&self, other: &Self) -> bool {
        self.n_users == other.n_users
            && self.n_hosts == other.n_hosts
            && self.user_labels == other.user_labels
            && self.host_labels == other.host_labels
    }
}

/// Interns labels in first-seen order.
#[derive(Default)]
struct Interner {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> u32 {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.to_owned());
        self.index.insert(label.to_owned(), id);
        id
    }
}

/// Builds the graph of distinct (user, host) pairs observed inside `window`.
/// Node indices are assigned in first-seen order over the in-window records.
/// Records outside the window are skipped; an empty window yields an empty
/// graph. Peak memory is O(nnz + |U| + |V|).
pub fn ingest_event_log<I>(records: I, window: TimeWindow) -> Result<SparseBipartiteGraph>
where
    I: IntoIterator<Item = Result<EventRecord>>,
{
    let mut users = Interner::default();
    let mut hosts = Interner::default();
    let mut edge_set: HashSet<(u32, u32)> = HashSet::new();
    for record in records {
        let record = record?;
        if !window.contains(record.time) {
            continue;
        }
        let i = users.intern(&record.user);
        let j = hosts.intern(&record.host);
        edge_set.insert((i, j));
    }
    SparseBipartiteGraph::with_labels(
        users.labels,
        hosts.labels,
        edge_set.into_iter().collect(),
    )
}

/// Result of a temporal train/test split: both graphs share one node
/// universe (first-seen order over all in-scope records), and the new-node
/// lists name labels that appear only inside the test window.
#[derive(Debug)]
pub struct TemporalSplit {
    pub train: SparseBipartiteGraph,
    pub test: SparseBipartiteGraph,
    pub new_users: Vec<String>,
    pub new_hosts: Vec<String>,
}

/// Splits an event stream at `train_end`: records before it form the train
/// graph, records in [train_end, test_end) the test graph. Requires
/// train_end < test_end.
pub fn temporal_split<I>(records: I, train_end: i64, test_end: i64) -> Result<TemporalSplit>
where
    I: IntoIterator<Item = Result<EventRecord>>,
{
    if train_end >= test_end {
        return Err(Error::InvalidArgument(format!(
            "train_end ({train_end}) must be before test_end ({test_end})"
        )));
    }
    let mut users = Interner::default();
    let mut hosts = Interner::default();
    let mut train_edges: HashSet<(u32, u32)> = HashSet::new();
    let mut test_edges: HashSet<(u32, u32)> = HashSet::new();
    // Per-node presence bits: bit 0 = seen in train, bit 1 = seen in test.
    let mut user_seen: Vec<u8> = Vec::new();
    let mut host_seen: Vec<u8> = Vec::new();

    for record in records {
        let record = record?;
        if record.time >= test_end {
            continue;
        }
        let in_train = record.time < train_end;
        let i = users.intern(&record.user);
        let j = hosts.intern(&record.host);
        if user_seen.len() <= i as usize {
            user_seen.resize(i as usize + 1, 0);
        }
        if host_seen.len() <= j as usize {
            host_seen.resize(j as usize + 1, 0);
        }
        let bit = if in_train { 1 } else { 2 };
        user_seen[i as usize] |= bit;
        host_seen[j as usize] |= bit;
        if in_train {
            train_edges.insert((i, j));
        } else {
            test_edges.insert((i, j));
        }
    }

    let new_users = users
        .labels
        .iter()
        .zip(&user_seen)
        .filter(|&(_, &seen)| seen == 2)
        .map(|(l, _)| l.clone())
        .collect();
    let new_hosts = hosts
        .labels
        .iter()
        .zip(&host_seen)
        .filter(|&(_, &seen)| seen == 2)
        .map(|(l, _)| l.clone())
        .collect();

    let train = SparseBipartiteGraph::with_labels(
        users.labels.clone(),
        hosts.labels.clone(),
        train_edges.into_iter().collect(),
    )?;
    let test = SparseBipartiteGraph::with_labels(
        users.labels,
        hosts.labels,
        test_edges.into_iter().collect(),
    )?;
    Ok(TemporalSplit {
        train,
        test,
        new_users,
        new_hosts,
    })
}

/// Edges present in `test` but not in `train`, sorted. Both graphs must
/// index the same node universe.
pub fn new_link_mask(
    train: &SparseBipartiteGraph,
    test: &SparseBipartiteGraph,
) -> Result<Vec<(u32, u32)>> {
    if !train.same_universe(test) {
        return Err(Error::DimMismatch(format!(
            "train is {} x {} but test is {} x {} (or labels differ)",
            train.n_users, train.n_hosts, test.n_users, test.n_hosts
        )));
    }
    Ok(test
        .edges
        .iter()
        .filter(|&&(i, j)| !train.has_edge(i as usize, j as usize))
        .copied()
        .collect())
}

/// Maps a day index t (1-based) to a seasonal segment in 1..=P.
/// Segment 1 is always the identity segment of the seasonal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeriodMap {
    /// t -> 1 + (t mod period).
    Modular { period: usize },
    /// Four-segment work-week calendar: segment 1 = Monday..Thursday,
    /// segment 2 = weekend, segments 3/4 = alternating Fridays.
    /// `anchor_weekday` is the weekday of day 1 (0 = Monday .. 6 = Sunday)
    /// and `friday_parity` fixes which alternating-Friday phase is
    /// segment 3.
    FourSegmentWeek { anchor_weekday: u8, friday_parity: u8 },
}

impl PeriodMap {
    pub fn n_segments(&self) -> usize {
        match self {
            PeriodMap::Modular { period } => *period,
            PeriodMap::FourSegmentWeek { .. } => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PeriodMap::Modular { period } => {
                if *period == 0 {
                    return Err(Error::InvalidArgument(
                        "modular period map needs period >= 1".into(),
                    ));
                }
            }
            PeriodMap::FourSegmentWeek {
                anchor_weekday,
                friday_parity,
            } => {
                if *anchor_weekday > 6 || *friday_parity > 1 {
                    return Err(Error::InvalidArgument(format!(
                        "four-segment map needs weekday in 0..=6 and parity in 0..=1, \
                         got ({anchor_weekday}, {friday_parity})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Segment of day `t` (t is 1-based).
    pub fn segment_of(&self, t: usize) -> usize {
        debug_assert!(t >= 1, "day indices are 1-based");
        match self {
            PeriodMap::Modular { period } => 1 + (t % period),
            PeriodMap::FourSegmentWeek {
                anchor_weekday,
                friday_parity,
            } => {
                let weekday = (*anchor_weekday as usize + t - 1) % 7;
                match weekday {
                    0..=3 => 1,
                    5 | 6 => 2,
                    _ => {
                        // Friday: ordinal of this Friday since day 1.
                        let first_friday = 1 + (4 + 7 - *anchor_weekday as usize) % 7;
                        let ordinal = (t - first_friday) / 7;
                        if (ordinal + *friday_parity as usize) % 2 == 0 {
                            3
                        } else {
                            4
                        }
                    }
                }
            }
        }
    }
}

/// Ordered daily snapshots over one shared node universe, plus the map from
/// day index to seasonal segment.
#[derive(Debug, Clone)]
pub struct TemporalGraphSequence {
    snapshots: Vec<SparseBipartiteGraph>,
    period_map: PeriodMap,
}

impl TemporalGraphSequence {
    pub fn new(snapshots: Vec<SparseBipartiteGraph>, period_map: PeriodMap) -> Result<Self> {
        period_map.validate()?;
        if snapshots.is_empty() {
            return Err(Error::InvalidArgument(
                "a temporal sequence needs at least one snapshot".into(),
            ));
        }
        for s in &snapshots[1..] {
            if !snapshots[0].same_universe(s) {
                return Err(Error::DimMismatch(
                    "all snapshots of a sequence must share one node universe".into(),
                ));
            }
        }
        Ok(TemporalGraphSequence {
            snapshots,
            period_map,
        })
    }

    pub fn n_days(&self) -> usize {
        self.snapshots.len()
    }

    pub fn n_users(&self) -> usize {
        self.snapshots[0].n_users()
    }

    pub fn n_hosts(&self) -> usize {
        self.snapshots[0].n_hosts()
    }

    /// Snapshot for day `t` (1-based).
    pub fn day(&self, t: usize) -> &SparseBipartiteGraph {
        &self.snapshots[t - 1]
    }

    pub fn snapshots(&self) -> &[SparseBipartiteGraph] {
        &self.snapshots
    }

    pub fn period_map(&self) -> &PeriodMap {
        &self.period_map
    }

    /// Union of all daily edge sets over the shared universe.
    pub fn union_graph(&self) -> SparseBipartiteGraph {
        let mut edges: HashSet<(u32, u32)> = HashSet::new();
        for s in &self.snapshots {
            edges.extend(s.edges().iter().copied());
        }
        SparseBipartiteGraph::with_labels(
            self.snapshots[0].user_labels().to_vec(),
            self.snapshots[0].host_labels().to_vec(),
            edges.into_iter().collect(),
        )
        .expect("union of valid snapshots is valid")
    }
}

/// Splits an event stream into per-day graphs over the union node universe.
/// Day 1 is the day containing `window.start`; days with no activity become
/// empty snapshots so calendar alignment is preserved.
pub fn ingest_daily_sequence<I>(
    records: I,
    window: TimeWindow,
    period_map: PeriodMap,
) -> Result<TemporalGraphSequence>
where
    I: IntoIterator<Item = Result<EventRecord>>,
{
    let mut users = Interner::default();
    let mut hosts = Interner::default();
    let mut day_edges: Vec<HashSet<(u32, u32)>> = Vec::new();
    let day0 = window.start.div_euclid(SECONDS_PER_DAY);
    for record in records {
        let record = record?;
        if !window.contains(record.time) {
            continue;
        }
        let day = (record.time.div_euclid(SECONDS_PER_DAY) - day0) as usize;
        if day_edges.len() <= day {
            day_edges.resize_with(day + 1, HashSet::new);
        }
        let i = users.intern(&record.user);
        let j = hosts.intern(&record.host);
        day_edges[day].insert((i, j));
    }
    if day_edges.is_empty() {
        return Err(Error::InvalidArgument(
            "no in-window records; cannot build a daily sequence".into(),
        ));
    }
    let snapshots = day_edges
        .into_iter()
        .map(|edges| {
            SparseBipartiteGraph::with_labels(
                users.labels.clone(),
                hosts.labels.clone(),
                edges.into_iter().collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TemporalGraphSequence::new(snapshots, period_map)
}

/// Per-day link totals and the proportion of links never seen on any
/// earlier day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayNewLinks {
    /// 1-based day index.
    pub day: usize,
    pub total_links: usize,
    pub new_links: usize,
    /// new_links / total_links; 0 on a zero-link day (see `zero_link_day`).
    pub proportion: f64,
    pub zero_link_day: bool,
}

/// For each day t > burn_in, reports |E_t| and |E_t \ union of all earlier
/// days| / |E_t|. The union accumulates from day 1; burn-in days are only
/// excluded from reporting. Zero-link days report proportion 0 with a flag.
pub fn daily_new_link_series(
    seq: &TemporalGraphSequence,
    burn_in: usize,
) -> Result<Vec<DayNewLinks>> {
    if burn_in >= seq.n_days() {
        return Err(Error::InvalidArgument(format!(
            "burn_in ({burn_in}) must be smaller than the number of days ({})",
            seq.n_days()
        )));
    }
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    let mut out = Vec::new();
    for t in 1..=seq.n_days() {
        let edges = seq.day(t).edges();
        let new_links = edges.iter().filter(|e| !seen.contains(e)).count();
        if t > burn_in {
            let zero = edges.is_empty();
            out.push(DayNewLinks {
                day: t,
                total_links: edges.len(),
                new_links,
                proportion: if zero {
                    0.0
                } else {
                    new_links as f64 / edges.len() as f64
                },
                zero_link_day: zero,
            });
        }
        seen.extend(edges.iter().copied());
    }
    Ok(out)
}

/// Binary categorical covariates for one node side, stored as per-node
/// sorted lists of active column indices. Columns belong to named groups
/// (one categorical variable each); levels within a group are mutually
/// exclusive, enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    n_nodes: usize,
    rows: Vec<Vec<u32>>,
    column_sums: Vec<u64>,
    column_names: Vec<String>,
    group_of: Vec<u32>,
    group_names: Vec<String>,
}

impl CovariateMatrix {
    /// The no-covariate matrix (K = 0) for `n_nodes` nodes.
    pub fn empty(n_nodes: usize) -> Self {
        CovariateMatrix {
            n_nodes,
            rows: vec![Vec::new(); n_nodes],
            column_sums: Vec::new(),
            column_names: Vec::new(),
            group_of: Vec::new(),
            group_names: Vec::new(),
        }
    }

    /// Builds a covariate matrix from (node, column) assignments.
    /// `group_of[k]` names the categorical group of column k (an index into
    /// `group_names`). Two active columns from one group on one node is an
    /// error; a node with no assignments keeps an all-zero row.
    pub fn new(
        n_nodes: usize,
        column_names: Vec<String>,
        group_names: Vec<String>,
        group_of: Vec<u32>,
        assignments: &[(usize, usize)],
    ) -> Result<Self> {
        let k = column_names.len();
        if group_of.len() != k {
            return Err(Error::DimMismatch(format!(
                "{} columns but {} group assignments",
                k,
                group_of.len()
            )));
        }
        if let Some(&g) = group_of.iter().find(|&&g| g as usize >= group_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "column group id {g} out of range for {} groups",
                group_names.len()
            )));
        }
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
        for &(node, col) in assignments {
            if node >= n_nodes || col >= k {
                return Err(Error::InvalidArgument(format!(
                    "covariate assignment ({node}, {col}) out of range for \
                     {n_nodes} nodes x {k} columns"
                )));
            }
            rows[node].push(col as u32);
        }
        let mut column_sums = vec![0u64; k];
        for (node, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            let mut seen_groups: Vec<u32> = Vec::with_capacity(row.len());
            for &col in row.iter() {
                let g = group_of[col as usize];
                if seen_groups.contains(&g) {
                    return Err(Error::DuplicateCovariate {
                        node,
                        group: group_names[g as usize].clone(),
                    });
                }
                seen_groups.push(g);
                column_sums[col as usize] += 1;
            }
        }
        Ok(CovariateMatrix {
            n_nodes,
            rows,
            column_sums,
            column_names,
            group_of,
            group_names,
        })
    }

    /// One categorical group with `n_levels` levels; `level_of(node)` gives
    /// each node's level (None = no assignment). Convenience for synthetic
    /// data and tests.
    pub fn single_group(
        n_nodes: usize,
        name: &str,
        n_levels: usize,
        level_of: impl Fn(usize) -> Option<usize>,
    ) -> Result<Self> {
        let column_names = (0..n_levels).map(|l| format!("{name}:{l}")).collect();
        let assignments: Vec<(usize, usize)> = (0..n_nodes)
            .filter_map(|node| level_of(node).map(|l| (node, l)))
            .collect();
        Self::new(
            n_nodes,
            column_names,
            vec![name.to_owned()],
            vec![0; n_levels],
            &assignments,
        )
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_covariates(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    /// Active column indices of node `i`, sorted.
    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn is_active(&self, i: usize, k: usize) -> bool {
        self.rows[i].binary_search(&(k as u32)).is_ok()
    }

    /// Number of nodes with column k active (the x-tilde totals).
    pub fn column_sums(&self) -> &[u64] {
        &self.column_sums
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn group_of(&self, col: usize) -> usize {
        self.group_of[col] as usize
    }

    /// Copy with every column of group `g` removed (for ablation studies).
    pub fn drop_group(&self, g: usize) -> Result<Self> {
        if g >= self.group_names.len() {
            return Err(Error::InvalidArgument(format!(
                "group {g} out of range for {} groups",
                self.group_names.len()
            )));
        }
        let keep: Vec<usize> = (0..self.n_covariates())
            .filter(|&k| self.group_of[k] as usize != g)
            .collect();
        let mut new_col: HashMap<u32, u32> = HashMap::new();
        for (new_k, &old_k) in keep.iter().enumerate() {
            new_col.insert(old_k as u32, new_k as u32);
        }
        let mut group_names = self.group_names.clone();
        group_names.remove(g);
        let rows: Vec<Vec<u32>> = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .filter_map(|col| new_col.get(col).copied())
                    .collect()
            })
            .collect();
        let mut column_sums = vec![0u64; keep.len()];
        for row in &rows {
            for &col in row {
                column_sums[col as usize] += 1;
            }
        }
        Ok(CovariateMatrix {
            n_nodes: self.n_nodes,
            rows,
            column_sums,
            column_names: keep.iter().map(|&k| self.column_names[k].clone()).collect(),
            group_of: keep
                .iter()
                .map(|&k| {
                    let old_g = self.group_of[k];
                    if old_g as usize > g {
                        old_g - 1
                    } else {
                        old_g
                    }
                })
                .collect(),
            group_names,
        })
    }
}
