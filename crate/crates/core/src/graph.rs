//! Graph datasets, adjacency normalization and multi-hop feature augmentation.
//!
//! A dataset directory holds five files:
//!
//! | file          | content                                                        |
//! |---------------|----------------------------------------------------------------|
//! | `meta.json`   | `{"num_nodes":int,"num_features":int,"num_classes":int}`        |
//! | `features.csv`| `num_nodes` rows of `num_features` comma-separated floats       |
//! | `edges.tsv`   | one `src<TAB>dst` pair per line, 0-based                        |
//! | `labels.csv`  | one integer per line; row `i` is the label of node `i`          |
//! | `splits.json` | `{"train":[ints],"test":[ints]}`                                |
//!
//! Edges are read as undirected: duplicates collapse and self-loops are dropped.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut1, Axis};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.json";

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Triplets must be
    /// sorted by `(row, col)` and free of duplicates.
    pub fn from_sorted_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (r, c, v) in triplets {
            debug_assert!(r < rows && c < cols);
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                out[[r, c]] = v;
            }
        }
        out
    }

    fn accumulate_row(&self, r: usize, x: &ArrayView2<'_, f64>, mut out: ArrayViewMut1<'_, f64>) {
        let (idx, vals) = self.row(r);
        for (&c, &v) in idx.iter().zip(vals) {
            out.scaled_add(v, &x.row(c));
        }
    }

    /// Sparse-dense product `self · x`.
    pub fn mul_dense(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "inner dimensions differ");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        #[cfg(feature = "parallel")]
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, row)| self.accumulate_row(r, x, row));
        #[cfg(not(feature = "parallel"))]
        for (r, row) in out.axis_iter_mut(Axis(0)).enumerate() {
            self.accumulate_row(r, x, row);
        }
        out
    }
}

/// Node-classification graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    /// Binary, symmetric, zero diagonal.
    pub adjacency: CsrMatrix,
    /// One row per node.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub train_mask: Vec<usize>,
    pub test_mask: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Edges are symmetrized,
    /// duplicates merged and self-loops dropped.
    pub fn from_edges(
        num_classes: usize,
        features: Array2<f64>,
        edges: &[(usize, usize)],
        labels: Vec<usize>,
        train_mask: Vec<usize>,
        test_mask: Vec<usize>,
    ) -> Result<Self> {
        let num_nodes = features.nrows();
        let (adjacency, _, _) = symmetric_adjacency(num_nodes, edges.iter().copied())?;
        let graph = Graph {
            num_nodes,
            num_features: features.ncols(),
            num_classes,
            adjacency,
            features,
            labels,
            train_mask,
            test_mask,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.dim() != (self.num_nodes, self.num_features) {
            return Err(Error::invalid(format!(
                "feature matrix is {:?}, expected ({}, {})",
                self.features.dim(),
                self.num_nodes,
                self.num_features
            )));
        }
        if self.labels.len() != self.num_nodes {
            return Err(Error::invalid(format!(
                "{} labels for {} nodes",
                self.labels.len(),
                self.num_nodes
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        let train: BTreeSet<usize> = self.train_mask.iter().copied().collect();
        for &i in self.train_mask.iter().chain(&self.test_mask) {
            if i >= self.num_nodes {
                return Err(Error::invalid(format!("split index {i} out of range")));
            }
        }
        if let Some(&i) = self.test_mask.iter().find(|i| train.contains(i)) {
            return Err(Error::invalid(format!("node {i} is in both train and test split")));
        }
        Ok(())
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Undirected edges as `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for a in 0..self.num_nodes {
            let (idx, _) = self.adjacency.row(a);
            out.extend(idx.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Per-column training targets: `Some(label)` for train-mask nodes.
    pub fn train_targets(&self) -> Vec<Option<usize>> {
        let mut targets = vec![None; self.num_nodes];
        for &i in &self.train_mask {
            targets[i] = Some(self.labels[i]);
        }
        targets
    }
}

fn symmetric_adjacency(
    num_nodes: usize,
    edges: impl Iterator<Item = (usize, usize)>,
) -> Result<(CsrMatrix, usize, usize)> {
    let mut set = BTreeSet::new();
    let mut self_loops = 0;
    let mut seen = 0;
    for (a, b) in edges {
        if a >= num_nodes || b >= num_nodes {
            return Err(Error::invalid(format!(
                "edge ({a}, {b}) out of range for {num_nodes} nodes"
            )));
        }
        seen += 1;
        if a == b {
            self_loops += 1;
            continue;
        }
        set.insert((a, b));
        set.insert((b, a));
    }
    let duplicates = seen - self_loops - set.len() / 2;
    let adj = CsrMatrix::from_sorted_triplets(
        num_nodes,
        num_nodes,
        set.into_iter().map(|(a, b)| (a, b, 1.0)),
    );
    Ok((adj, duplicates, self_loops))
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Splits {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn read_file(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

/// Loads a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_str(&read_file(dir, META_FILE)?)
        .map_err(|e| parse_err(META_FILE, e.line(), e.to_string()))?;

    let text = read_file(dir, FEATURES_FILE)?;
    let mut features = Array2::zeros((meta.num_nodes, meta.num_features));
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if rows >= meta.num_nodes {
            return Err(parse_err(FEATURES_FILE, lineno, "more rows than num_nodes"));
        }
        let mut cols = 0;
        for field in line.split(',') {
            if cols >= meta.num_features {
                return Err(parse_err(FEATURES_FILE, lineno, "more columns than num_features"));
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(FEATURES_FILE, lineno, format!("non-numeric feature {field:?}"))
            })?;
            features[[rows, cols]] = v;
            cols += 1;
        }
        if cols != meta.num_features {
            return Err(parse_err(
                FEATURES_FILE,
                lineno,
                format!("{cols} columns, expected {}", meta.num_features),
            ));
        }
        rows += 1;
    }
    if rows != meta.num_nodes {
        return Err(parse_err(
            FEATURES_FILE,
            text.lines().count(),
            format!("{rows} rows, expected {}", meta.num_nodes),
        ));
    }

    let text = read_file(dir, EDGES_FILE)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(EDGES_FILE, lineno, "expected two node indices"));
        };
        if fields.next().is_some() {
            return Err(parse_err(EDGES_FILE, lineno, "expected two node indices"));
        }
        let parse = |s: &str| -> Result<usize> {
            let v: usize = s
                .parse()
                .map_err(|_| parse_err(EDGES_FILE, lineno, format!("bad node index {s:?}")))?;
            if v >= meta.num_nodes {
                return Err(parse_err(
                    EDGES_FILE,
                    lineno,
                    format!("node index {v} out of range for {} nodes", meta.num_nodes),
                ));
            }
            Ok(v)
        };
        edges.push((parse(a)?, parse(b)?));
    }

    let text = read_file(dir, LABELS_FILE)?;
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (i, line) in text.lines().enumerate() {
        let field = line.trim();
        if field.is_empty() {
            continue;
        }
        let y: usize = field
            .parse()
            .map_err(|_| parse_err(LABELS_FILE, i + 1, format!("bad label {field:?}")))?;
        if y >= meta.num_classes {
            return Err(parse_err(
                LABELS_FILE,
                i + 1,
                format!("label {y} outside [0, {})", meta.num_classes),
            ));
        }
        labels.push(y);
    }
    if labels.len() != meta.num_nodes {
        return Err(parse_err(
            LABELS_FILE,
            text.lines().count(),
            format!("{} labels, expected {}", labels.len(), meta.num_nodes),
        ));
    }

    let splits: Splits = serde_json::from_str(&read_file(dir, SPLITS_FILE)?)
        .map_err(|e| parse_err(SPLITS_FILE, e.line(), e.to_string()))?;

    let (adjacency, duplicates, self_loops) =
        symmetric_adjacency(meta.num_nodes, edges.into_iter())?;
    if duplicates > 0 || self_loops > 0 {
        log::info!(
            "{}: dropped {duplicates} duplicate edges and {self_loops} self-loops",
            dir.display()
        );
    }
    let graph = Graph {
        num_nodes: meta.num_nodes,
        num_features: meta.num_features,
        num_classes: meta.num_classes,
        adjacency,
        features,
        labels,
        train_mask: splits.train,
        test_mask: splits.test,
    };
    graph.validate()?;
    Ok(graph)
}

/// Writes a graph in the dataset directory format. Floats use the shortest
/// representation that parses back to the same bits.
pub fn save_dataset(graph: &Graph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| Error::io(path, e))
    };

    let meta = Meta {
        num_nodes: graph.num_nodes,
        num_features: graph.num_features,
        num_classes: graph.num_classes,
    };
    write(META_FILE, serde_json::to_string(&meta).expect("meta serializes"))?;

    let mut text = String::new();
    for row in graph.features.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                text.push(',');
            }
            write!(text, "{v}").unwrap();
        }
        text.push('\n');
    }
    write(FEATURES_FILE, text)?;

    let mut text = String::new();
    for (a, b) in graph.edges() {
        writeln!(text, "{a}\t{b}").unwrap();
    }
    write(EDGES_FILE, text)?;

    let mut text = String::new();
    for y in &graph.labels {
        writeln!(text, "{y}").unwrap();
    }
    write(LABELS_FILE, text)?;

    let splits = Splits {
        train: graph.train_mask.clone(),
        test: graph.test_mask.clone(),
    };
    write(SPLITS_FILE, serde_json::to_string(&splits).expect("splits serialize"))
}

/// Symmetric normalization with self-loops: `D^{-1/2} (A + I) D^{-1/2}` where
/// `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(graph: &Graph) -> CsrMatrix {
    let adj = &graph.adjacency;
    let n = adj.rows();
    let deg: Vec<f64> = (0..n).map(|r| (adj.row(r).0.len() + 1) as f64).collect();
    let weight = |r: usize, c: usize| 1.0 / (deg[r] * deg[c]).sqrt();
    let mut triplets = Vec::with_capacity(adj.nnz() + n);
    for r in 0..n {
        let (idx, _) = adj.row(r);
        let mut diag_done = false;
        for &c in idx {
            if !diag_done && c > r {
                triplets.push((r, r, 1.0 / deg[r]));
                diag_done = true;
            }
            triplets.push((r, c, weight(r, c)));
        }
        if !diag_done {
            triplets.push((r, r, 1.0 / deg[r]));
        }
    }
    CsrMatrix::from_sorted_triplets(n, n, triplets)
}

/// Node features concatenated over propagation depths:
/// `[X | ÂX | Â²X | … | Â^{K-1}X]`, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeatures {
    pub matrix: Array2<f64>,
    pub hops: usize,
}

impl AugmentedFeatures {
    pub fn block_width(&self) -> usize {
        self.matrix.ncols() / self.hops
    }

    /// Columns of hop `k`.
    pub fn block(&self, k: usize) -> ArrayView2<'_, f64> {
        let w = self.block_width();
        self.matrix.slice(s![.., k * w..(k + 1) * w])
    }

    /// Feature-by-node layout used as the network input.
    pub fn to_input(&self) -> Array2<f64> {
        self.matrix.t().as_standard_layout().into_owned()
    }
}

/// Builds the `K`-hop augmented feature matrix. Each hop is one sparse
/// propagation of the previous hop; powers of `Â` are never formed.
pub fn augment_features(graph: &Graph, hops: usize) -> Result<AugmentedFeatures> {
    if hops == 0 {
        return Err(Error::invalid("hop count must be at least 1"));
    }
    let f = graph.num_features;
    let norm = normalize_adjacency(graph);
    let mut matrix = Array2::zeros((graph.num_nodes, hops * f));
    matrix.slice_mut(s![.., 0..f]).assign(&graph.features);
    let mut current = graph.features.clone();
    for k in 1..hops {
        current = norm.mul_dense(&current.view());
        matrix.slice_mut(s![.., k * f..(k + 1) * f]).assign(&current);
    }
    Ok(AugmentedFeatures { matrix, hops })
}
