//! Directed graph datasets: validation, CSV ingestion, degree statistics,
//! adjacency normalization and a stochastic-block-model generator.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Split index as used in split files: 0 = train, 1 = validation, 2 = test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_index(i: u64) -> Option<Self> {
        match i {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Immutable directed graph with node features, labels and a train/val/test split.
///
/// Edges are stored once per ordered pair, without self-loops. Adjacency in
/// both directions is precomputed with sorted neighbor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    num_nodes: usize,
    feature_dim: usize,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<f64>,
    labels: Vec<Option<usize>>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    is_train: Vec<bool>,
    in_adj: Vec<Vec<usize>>,
    out_adj: Vec<Vec<usize>>,
}

impl GraphDataset {
    /// Builds a dataset, rejecting anything that violates the graph invariants.
    ///
    /// `features` is row-major `num_nodes x feature_dim`. `edges` must already be
    /// free of duplicates; use [`dedup_edges`] first for raw edge dumps.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<Option<usize>>,
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        if features.len() != num_nodes * feature_dim {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} entries, expected {num_nodes}x{feature_dim}",
                features.len()
            )));
        }
        if let Some(x) = features.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidGraph(format!("non-finite feature value {x}")));
        }
        if labels.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        let mut edges = edges;
        edges.sort_unstable();
        for w in edges.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidGraph(format!("duplicate edge {:?}", w[0])));
            }
        }
        let mut in_adj = vec![Vec::new(); num_nodes];
        let mut out_adj = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u},{v}) has an endpoint outside [0, {num_nodes})"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on node {u}")));
            }
            out_adj[u].push(v);
            in_adj[v].push(u);
        }
        // edges are sorted by (src, dst), so out_adj is sorted already
        for list in &mut in_adj {
            list.sort_unstable();
        }

        let mut membership: Vec<Option<Split>> = vec![None; num_nodes];
        for (split, set) in [(Split::Train, &train), (Split::Val, &val), (Split::Test, &test)] {
            for &v in set {
                if v >= num_nodes {
                    return Err(Error::InvalidGraph(format!("split node {v} out of range")));
                }
                if let Some(prev) = membership[v] {
                    return Err(Error::InvalidGraph(format!(
                        "node {v} assigned to both split {} and split {}",
                        prev.index(),
                        split.index()
                    )));
                }
                membership[v] = Some(split);
            }
        }
        let num_classes = labels.iter().flatten().map(|&y| y + 1).max().unwrap_or(0);
        for &v in &train {
            if labels[v].is_none() {
                return Err(Error::InvalidGraph(format!("training node {v} has no label")));
            }
        }
        let mut is_train = vec![false; num_nodes];
        for &v in &train {
            is_train[v] = true;
        }
        let sorted = |mut s: Vec<usize>| {
            s.sort_unstable();
            s
        };
        Ok(Self {
            num_nodes,
            feature_dim,
            num_classes,
            edges,
            features,
            labels,
            train: sorted(train),
            val: sorted(val),
            test: sorted(test),
            is_train,
            in_adj,
            out_adj,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// One more than the largest label present.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Directed edges sorted by `(src, dst)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, v: usize) -> &[f64] {
        &self.features[v * self.feature_dim..(v + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, v: usize) -> Option<usize> {
        self.labels[v]
    }

    pub fn train_set(&self) -> &[usize] {
        &self.train
    }

    pub fn val_set(&self) -> &[usize] {
        &self.val
    }

    pub fn test_set(&self) -> &[usize] {
        &self.test
    }

    pub fn split_nodes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_train(&self, v: usize) -> bool {
        self.is_train[v]
    }

    /// Sources of edges into `v`, sorted.
    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.in_adj[v]
    }

    /// Targets of edges out of `v`, sorted.
    pub fn out_neighbors(&self, v: usize) -> &[usize] {
        &self.out_adj[v]
    }

    /// Same dataset with node `w` removed: its edges are deleted and it leaves
    /// every split. The id stays allocated so other ids are unchanged; its
    /// features and label are kept but no longer reachable from training.
    pub fn without_node(&self, w: usize) -> Result<Self> {
        if w >= self.num_nodes {
            return Err(Error::InvalidParameter(format!("node {w} out of range")));
        }
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|&(u, v)| u != w && v != w)
            .collect();
        let drop_w = |s: &[usize]| s.iter().copied().filter(|&v| v != w).collect::<Vec<_>>();
        Self::new(
            self.num_nodes,
            edges,
            self.features.clone(),
            self.feature_dim,
            self.labels.clone(),
            drop_w(&self.train),
            drop_w(&self.val),
            drop_w(&self.test),
        )
    }
}

/// Sorts and removes repeated directed pairs. Returns how many were removed.
pub fn dedup_edges(edges: &mut Vec<(usize, usize)>) -> usize {
    let before = edges.len();
    edges.sort_unstable();
    edges.dedup();
    before - edges.len()
}

/// Number of edges into `v` whose source is a training node.
pub fn train_in_degree(g: &GraphDataset, v: usize) -> usize {
    g.in_neighbors(v).iter().filter(|&&u| g.is_train(u)).count()
}

/// Inverse-degree normalization of one adjacency row with an added self-loop.
///
/// Returns the self weight first, then one weight per neighbor, each equal to
/// `1 / (|neighbors| + 1)`. `self_id` only documents the row owner.
pub fn normalize_row(neighbors: &[usize], self_id: usize) -> Vec<f64> {
    debug_assert!(!neighbors.contains(&self_id));
    let w = 1.0 / (neighbors.len() + 1) as f64;
    vec![w; neighbors.len() + 1]
}

/// Count of nodes per training in-degree.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeHistogram {
    pub counts: BTreeMap<usize, usize>,
}

impl DegreeHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Reads `degree,count` rows.
    pub fn load_csv(path: &Path, has_header: bool) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (line, row) in read_rows(path, has_header)? {
            let [d, c] = parse_fields::<2>(path, line, &row)?;
            *counts.entry(d as usize).or_insert(0) += c as usize;
        }
        Ok(Self { counts })
    }
}

pub fn degree_histogram(g: &GraphDataset) -> DegreeHistogram {
    let mut counts = BTreeMap::new();
    for v in 0..g.num_nodes() {
        *counts.entry(train_in_degree(g, v)).or_insert(0) += 1;
    }
    DegreeHistogram { counts }
}

/// Paths of the four CSV files that make up a dataset on disk.
#[derive(Debug, Clone)]
pub struct GraphFiles<'a> {
    pub edges: &'a Path,
    pub features: &'a Path,
    pub labels: &'a Path,
    pub splits: &'a Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LoadStats {
    pub duplicate_edges: usize,
}

pub const EDGE_FILE: &str = "edges.csv";
pub const FEATURE_FILE: &str = "features.csv";
pub const LABEL_FILE: &str = "labels.csv";
pub const SPLIT_FILE: &str = "splits.csv";

fn read_rows(path: &Path, has_header: bool) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        rows.push((line, rec));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_fields<const N: usize>(path: &Path, line: u64, row: &csv::StringRecord) -> Result<[u64; N]> {
    if row.len() != N {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("expected {N} fields, found {}", row.len()),
        });
    }
    let mut out = [0u64; N];
    for (slot, field) in out.iter_mut().zip(row.iter()) {
        *slot = field.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("expected a non-negative integer, found {field:?}"),
        })?;
    }
    Ok(out)
}

/// Loads and validates a dataset from CSV files.
///
/// The node count comes from the number of feature rows. Repeated edges are
/// collapsed and counted in the returned [`LoadStats`]; self-loops are errors.
pub fn load_graph(files: &GraphFiles<'_>, has_header: bool) -> Result<(GraphDataset, LoadStats)> {
    let mut features = Vec::new();
    let mut feature_dim = None;
    let mut num_nodes = 0usize;
    for (line, row) in read_rows(files.features, has_header)? {
        let dim = *feature_dim.get_or_insert(row.len());
        if row.len() != dim {
            return Err(Error::Parse {
                path: files.features.to_path_buf(),
                line,
                message: format!("row has {} columns, previous rows have {dim}", row.len()),
            });
        }
        for field in row.iter() {
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                path: files.features.to_path_buf(),
                line,
                message: format!("expected a real number, found {field:?}"),
            })?;
            features.push(x);
        }
        num_nodes += 1;
    }
    let feature_dim = feature_dim.unwrap_or(0);

    let mut edges = Vec::new();
    for (line, row) in read_rows(files.edges, has_header)? {
        let [u, v] = parse_fields::<2>(files.edges, line, &row)?;
        let (u, v) = (u as usize, v as usize);
        let bad = |message: String| Error::Parse {
            path: files.edges.to_path_buf(),
            line,
            message,
        };
        if u >= num_nodes || v >= num_nodes {
            return Err(bad(format!(
                "edge ({u},{v}) endpoint out of range for {num_nodes} nodes"
            )));
        }
        if u == v {
            return Err(bad(format!("self-loop on node {u}")));
        }
        edges.push((u, v));
    }
    let duplicate_edges = dedup_edges(&mut edges);
    if duplicate_edges > 0 {
        log::warn!("{}: removed {duplicate_edges} duplicate edges", files.edges.display());
    }

    let mut labels = vec![None; num_nodes];
    for (line, row) in read_rows(files.labels, has_header)? {
        let [v, y] = parse_fields::<2>(files.labels, line, &row)?;
        let v = v as usize;
        if v >= num_nodes {
            return Err(Error::Parse {
                path: files.labels.to_path_buf(),
                line,
                message: format!("node {v} out of range for {num_nodes} nodes"),
            });
        }
        labels[v] = Some(y as usize);
    }

    let mut sets = [Vec::new(), Vec::new(), Vec::new()];
    let mut seen = vec![false; num_nodes];
    for (line, row) in read_rows(files.splits, has_header)? {
        let [v, s] = parse_fields::<2>(files.splits, line, &row)?;
        let v = v as usize;
        let bad = |message: String| Error::Parse {
            path: files.splits.to_path_buf(),
            line,
            message,
        };
        if v >= num_nodes {
            return Err(bad(format!("node {v} out of range for {num_nodes} nodes")));
        }
        let split = Split::from_index(s).ok_or_else(|| bad(format!("split index {s} not in {{0,1,2}}")))?;
        if seen[v] {
            return Err(bad(format!("node {v} assigned to more than one split")));
        }
        seen[v] = true;
        sets[split.index() as usize].push(v);
    }
    let [train, val, test] = sets;
    let g = GraphDataset::new(num_nodes, edges, features, feature_dim, labels, train, val, test)?;
    Ok((g, LoadStats { duplicate_edges }))
}

/// Loads `edges.csv`, `features.csv`, `labels.csv` and `splits.csv` from `dir`.
pub fn load_graph_dir(dir: &Path, has_header: bool) -> Result<(GraphDataset, LoadStats)> {
    let (e, f, l, s) = (
        dir.join(EDGE_FILE),
        dir.join(FEATURE_FILE),
        dir.join(LABEL_FILE),
        dir.join(SPLIT_FILE),
    );
    load_graph(
        &GraphFiles {
            edges: &e,
            features: &f,
            labels: &l,
            splits: &s,
        },
        has_header,
    )
}

/// Writes the dataset as headerless CSV files in `dir`. Floats use the
/// shortest representation that parses back to the same value.
pub fn save_graph_dir(g: &GraphDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    };
    write(EDGE_FILE, &|w| {
        for (u, v) in g.edges() {
            writeln!(w, "{u},{v}")?;
        }
        Ok(())
    })?;
    write(FEATURE_FILE, &|w| {
        for v in 0..g.num_nodes() {
            let row: Vec<String> = g.feature_row(v).iter().map(|x| format!("{x:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })?;
    write(LABEL_FILE, &|w| {
        for (v, y) in g.labels().iter().enumerate() {
            if let Some(y) = y {
                writeln!(w, "{v},{y}")?;
            }
        }
        Ok(())
    })?;
    write(SPLIT_FILE, &|w| {
        let mut rows: Vec<(usize, u8)> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| g.split_nodes(s).iter().map(move |&v| (v, s.index())))
            .collect();
        rows.sort_unstable();
        for (v, s) in rows {
            writeln!(w, "{v},{s}")?;
        }
        Ok(())
    })
}

/// Parameters of the stochastic block model generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub n: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

/// Directed SBM with Gaussian class-conditional features.
///
/// Node `v` belongs to class `v % num_classes`. Each ordered pair `(u, v)`,
/// `u != v`, is an edge with probability `p_in` within a class and `p_out`
/// across classes. Features are a per-class standard-normal mean vector plus
/// `feature_noise` times i.i.d. standard-normal noise. Each node goes to
/// train/val/test with probability 0.6/0.2/0.2 from a hash of `(seed, v)`.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<GraphDataset> {
    let SbmConfig {
        n,
        num_classes,
        p_in,
        p_out,
        feature_dim,
        feature_noise,
        seed,
    } = *cfg;
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if num_classes == 0 || n < num_classes {
        return Err(Error::InvalidParameter(format!(
            "need n >= num_classes >= 1, got n={n}, num_classes={num_classes}"
        )));
    }
    if !(feature_noise >= 0.0 && feature_noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("feature_noise must be >= 0, got {feature_noise}")));
    }

    let mut mean_rng = rng::stream(seed, Domain::Generator, 0);
    let means: Vec<f64> = (0..num_classes * feature_dim)
        .map(|_| mean_rng.sample(StandardNormal))
        .collect();

    let class = |v: usize| v % num_classes;
    let mut edges = Vec::new();
    let mut features = Vec::with_capacity(n * feature_dim);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for u in 0..n {
        let mut r = rng::stream(seed, Domain::Generator, 1 + u as u64);
        let c = class(u);
        for j in 0..feature_dim {
            let noise: f64 = r.sample(StandardNormal);
            features.push(means[c * feature_dim + j] + feature_noise * noise);
        }
        for v in 0..n {
            if v == u {
                continue;
            }
            let p = if class(v) == c { p_in } else { p_out };
            // always draw so the stream position does not depend on p
            let x: f64 = r.random();
            if x < p {
                edges.push((u, v));
            }
        }
        let bucket = split_hash(seed, u as u64) % 10;
        match bucket {
            0..=5 => train.push(u),
            6..=7 => val.push(u),
            _ => test.push(u),
        }
    }
    let labels = (0..n).map(|v| Some(class(v))).collect();
    GraphDataset::new(n, edges, features, feature_dim, labels, train, val, test)
}

fn split_hash(seed: u64, v: u64) -> u64 {
    let mut z = seed ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z ^ (z >> 33)
}
