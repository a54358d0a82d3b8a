//! Dataset ingestion, plain-text serialization and synthetic generators.
//!
//! Node datasets live in a directory of `edges.tsv`, `features.csv`,
//! `labels.csv` and `train.idx`/`val.idx`/`test.idx`. Graph datasets are a
//! directory of per-graph subdirectories (each with `edges.tsv` and
//! `features.csv`, ordered by name) plus `targets.csv` and `splits.csv`
//! with one line per graph. All text is UTF-8 with LF line endings.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DegtaError, Result};
use crate::graph::{build_graph, Graph, Splits};
use crate::linalg::Matrix;

/// One graph with features, labels and node splits.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    pub graph: Graph,
}

impl NodeDataset {
    pub fn new(graph: Graph) -> Result<NodeDataset> {
        if graph.labels().is_none() {
            return Err(DegtaError::DatasetInvalid {
                file: "labels.csv".into(),
                msg: "node dataset requires labels".into(),
            });
        }
        if graph.splits().is_none() {
            return Err(DegtaError::DatasetInvalid {
                file: "train.idx".into(),
                msg: "node dataset requires splits".into(),
            });
        }
        Ok(NodeDataset { graph })
    }

    pub fn num_classes(&self) -> usize {
        self.graph
            .labels()
            .unwrap()
            .iter()
            .map(|&l| l + 1)
            .max()
            .unwrap_or(1)
            .max(1) as usize
    }
}

/// Per-graph prediction target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(i64),
    Real(f64),
}

/// Which split a graph belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphSplit {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for GraphSplit {
    type Err = DegtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(GraphSplit::Train),
            "val" => Ok(GraphSplit::Val),
            "test" => Ok(GraphSplit::Test),
            other => Err(DegtaError::InvalidParameter(format!(
                "unknown split '{other}' (expected train|val|test)"
            ))),
        }
    }
}

impl std::fmt::Display for GraphSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraphSplit::Train => "train",
            GraphSplit::Val => "val",
            GraphSplit::Test => "test",
        })
    }
}

/// A list of graphs with one target and one split assignment each.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub targets: Vec<Target>,
    pub splits: Vec<GraphSplit>,
}

impl GraphDataset {
    pub fn indices_in(&self, split: GraphSplit) -> Vec<usize> {
        (0..self.graphs.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn is_regression(&self) -> bool {
        self.targets.iter().any(|t| matches!(t, Target::Real(_)))
    }

    pub fn num_classes(&self) -> usize {
        self.targets
            .iter()
            .map(|t| match t {
                Target::Class(c) => c + 1,
                Target::Real(_) => 0,
            })
            .max()
            .unwrap_or(1)
            .max(1) as usize
    }

    pub fn feature_width(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.features().cols())
    }
}

// ---- parsing ------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| DegtaError::DatasetInvalid {
        file: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DegtaError {
    DegtaError::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// `u<TAB>v` pairs, 0-based, one per line.
pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (ln, line) in read_lines(path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let u = it
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, ln + 1, "expected 'u<TAB>v'"))?;
        let v = it
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, ln + 1, "expected 'u<TAB>v'"))?;
        if it.next().is_some() {
            return Err(parse_err(path, ln + 1, "trailing fields after 'u<TAB>v'"));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Headerless CSV of reals, row `i` = node `i`.
pub fn read_csv_matrix(path: &Path) -> Result<Matrix> {
    let lines = read_lines(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(lines.len());
    let mut width = None;
    for (ln, line) in lines.iter().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, ln + 1, format!("bad real '{t}'")))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    path,
                    ln + 1,
                    format!("row has {} fields, expected {w}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DegtaError::DatasetInvalid {
            file: path.display().to_string(),
            msg: "empty matrix file".into(),
        });
    }
    Matrix::from_rows(&rows)
}

fn read_int_column(path: &Path) -> Result<Vec<i64>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(ln, l)| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| parse_err(path, ln + 1, format!("bad integer '{l}'")))
        })
        .collect()
}

fn read_index_file(path: &Path, num_nodes: usize) -> Result<Vec<usize>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(ln, l)| {
            let idx = l
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, ln + 1, format!("bad index '{l}'")))?;
            if idx >= num_nodes {
                return Err(parse_err(
                    path,
                    ln + 1,
                    format!("index {idx} out of range for {num_nodes} nodes"),
                ));
            }
            Ok(idx)
        })
        .collect()
}

/// Loads `edges.tsv` + `features.csv` from one directory into a graph.
pub fn load_graph(dir: &Path) -> Result<Graph> {
    let features = read_csv_matrix(&dir.join("features.csv"))?;
    let edges = read_edge_list(&dir.join("edges.tsv"))?;
    let (g, _) = build_graph(&edges, features)?;
    Ok(g)
}

/// Loads and validates a node-classification dataset directory.
pub fn load_node_dataset(dir: &Path) -> Result<NodeDataset> {
    let g = load_graph(dir)?;
    let n = g.num_nodes();
    let labels_path = dir.join("labels.csv");
    let labels = read_int_column(&labels_path)?;
    if labels.len() != n {
        return Err(DegtaError::DatasetInvalid {
            file: labels_path.display().to_string(),
            msg: format!("{} labels for {n} nodes", labels.len()),
        });
    }
    let splits = Splits {
        train: read_index_file(&dir.join("train.idx"), n)?,
        val: read_index_file(&dir.join("val.idx"), n)?,
        test: read_index_file(&dir.join("test.idx"), n)?,
    };
    let g = g.with_labels(labels)?.with_splits(splits)?;
    NodeDataset::new(g)
}

/// Loads a graph-level dataset: per-graph subdirectories ordered by name,
/// plus `targets.csv` and `splits.csv`.
pub fn load_graph_dataset(dir: &Path) -> Result<GraphDataset> {
    let mut subdirs: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DegtaError::DatasetInvalid {
            file: dir.display().to_string(),
            msg: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(DegtaError::DatasetInvalid {
            file: dir.display().to_string(),
            msg: "no per-graph subdirectories found".into(),
        });
    }

    let mut graphs = Vec::with_capacity(subdirs.len());
    let mut width = None;
    for sub in &subdirs {
        let g = load_graph(sub)?;
        match width {
            None => width = Some(g.features().cols()),
            Some(w) if w != g.features().cols() => {
                return Err(DegtaError::DatasetInvalid {
                    file: sub.display().to_string(),
                    msg: format!(
                        "feature width {} differs from {w}",
                        g.features().cols()
                    ),
                })
            }
            _ => {}
        }
        graphs.push(g);
    }

    let targets_path = dir.join("targets.csv");
    let targets: Vec<Target> = read_lines(&targets_path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(ln, l)| {
            let t = l.trim();
            if let Ok(c) = t.parse::<i64>() {
                Ok(Target::Class(c))
            } else if let Ok(r) = t.parse::<f64>() {
                Ok(Target::Real(r))
            } else {
                Err(parse_err(&targets_path, ln + 1, format!("bad target '{t}'")))
            }
        })
        .collect::<Result<_>>()?;
    if targets.len() != graphs.len() {
        return Err(DegtaError::DatasetInvalid {
            file: targets_path.display().to_string(),
            msg: format!("{} targets for {} graphs", targets.len(), graphs.len()),
        });
    }

    let splits_path = dir.join("splits.csv");
    let splits: Vec<GraphSplit> = read_lines(&splits_path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(ln, l)| {
            l.trim()
                .parse::<GraphSplit>()
                .map_err(|e| parse_err(&splits_path, ln + 1, e.to_string()))
        })
        .collect::<Result<_>>()?;
    if splits.len() != graphs.len() {
        return Err(DegtaError::DatasetInvalid {
            file: splits_path.display().to_string(),
            msg: format!("{} splits for {} graphs", splits.len(), graphs.len()),
        });
    }

    Ok(GraphDataset {
        graphs,
        targets,
        splits,
    })
}

// ---- serialization ------------------------------------------------------

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

fn format_matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `edges.tsv` + `features.csv` for one graph.
pub fn save_graph(dir: &Path, g: &Graph) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for (u, v) in g.edge_list() {
        let _ = writeln!(edges, "{u}\t{v}");
    }
    write_file(&dir.join("edges.tsv"), &edges)?;
    write_file(&dir.join("features.csv"), &format_matrix_csv(g.features()))
}

pub fn save_node_dataset(dir: &Path, ds: &NodeDataset) -> Result<()> {
    save_graph(dir, &ds.graph)?;
    let labels = ds.graph.labels().unwrap();
    let mut text = String::new();
    for l in labels {
        let _ = writeln!(text, "{l}");
    }
    write_file(&dir.join("labels.csv"), &text)?;
    let splits = ds.graph.splits().unwrap();
    for (name, idx) in [
        ("train.idx", &splits.train),
        ("val.idx", &splits.val),
        ("test.idx", &splits.test),
    ] {
        let mut text = String::new();
        for i in idx {
            let _ = writeln!(text, "{i}");
        }
        write_file(&dir.join(name), &text)?;
    }
    Ok(())
}

pub fn save_graph_dataset(dir: &Path, ds: &GraphDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, g) in ds.graphs.iter().enumerate() {
        save_graph(&dir.join(format!("g{i:04}")), g)?;
    }
    let mut targets = String::new();
    for t in &ds.targets {
        match t {
            Target::Class(c) => {
                let _ = writeln!(targets, "{c}");
            }
            Target::Real(r) => {
                let _ = writeln!(targets, "{r:?}");
            }
        }
    }
    write_file(&dir.join("targets.csv"), &targets)?;
    let mut splits = String::new();
    for s in &ds.splits {
        let _ = writeln!(splits, "{s}");
    }
    write_file(&dir.join("splits.csv"), &splits)
}

// ---- generators ---------------------------------------------------------

/// Synthetic dataset kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum GenKind {
    Sbm {
        n: usize,
        blocks: usize,
        p_in: f64,
        p_out: f64,
        noise: f64,
    },
    Cycle {
        n: usize,
    },
    DisjointCycles {
        n: usize,
        count: usize,
    },
    Csl {
        n: usize,
        skip: usize,
    },
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Generated {
    Node(NodeDataset),
    Graph(Graph),
}

pub fn generate(kind: &GenKind, seed: u64) -> Result<Generated> {
    match *kind {
        GenKind::Sbm {
            n,
            blocks,
            p_in,
            p_out,
            noise,
        } => gen_sbm(n, blocks, p_in, p_out, noise, seed).map(Generated::Node),
        GenKind::Cycle { n } => gen_cycle(n).map(Generated::Graph),
        GenKind::DisjointCycles { n, count } => {
            gen_disjoint_cycles(n, count).map(Generated::Graph)
        }
        GenKind::Csl { n, skip } => gen_csl(n, skip).map(Generated::Graph),
    }
}

fn unit_features(n: usize) -> Matrix {
    Matrix::from_vec(n, 1, vec![1.0; n])
}

pub fn gen_cycle(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(DegtaError::InvalidParameter(format!(
            "cycle requires n >= 3, got {n}"
        )));
    }
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Ok(build_graph(&edges, unit_features(n))?.0)
}

pub fn gen_disjoint_cycles(n: usize, count: usize) -> Result<Graph> {
    if n < 3 || count < 1 {
        return Err(DegtaError::InvalidParameter(format!(
            "disjoint_cycles requires n >= 3 and count >= 1, got n={n} count={count}"
        )));
    }
    let mut edges = Vec::with_capacity(n * count);
    for c in 0..count {
        let base = c * n;
        edges.extend((0..n).map(|i| (base + i, base + (i + 1) % n)));
    }
    Ok(build_graph(&edges, unit_features(n * count))?.0)
}

/// Circular skip-link graph: a cycle on `n` nodes plus chords `(i, i+skip)`.
pub fn gen_csl(n: usize, skip: usize) -> Result<Graph> {
    if n < 5 || skip < 2 || skip >= n - 1 {
        return Err(DegtaError::InvalidParameter(format!(
            "csl requires n >= 5 and 2 <= skip <= n-2, got n={n} skip={skip}"
        )));
    }
    let mut edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.extend((0..n).map(|i| (i, (i + skip) % n)));
    Ok(build_graph(&edges, unit_features(n))?.0)
}

/// Stochastic block model with one-hot block features plus Gaussian noise,
/// block labels, and a stratified 50/25/25 split.
pub fn gen_sbm(
    n: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    noise: f64,
    seed: u64,
) -> Result<NodeDataset> {
    if blocks < 1 || n < blocks {
        return Err(DegtaError::InvalidParameter(format!(
            "sbm requires 1 <= blocks <= n, got n={n} blocks={blocks}"
        )));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(DegtaError::InvalidParameter(format!(
                "{name} must lie in [0,1], got {p}"
            )));
        }
    }
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let rng: &mut ChaCha8Rng = &mut rng;

    let block_of: Vec<usize> = (0..n).map(|i| i * blocks / n).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of[u] == block_of[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut features = Matrix::zeros(n, blocks);
    for u in 0..n {
        for b in 0..blocks {
            let base = if block_of[u] == b { 1.0 } else { 0.0 };
            let eps: f64 = StandardNormal.sample(rng);
            features[(u, b)] = base + noise * eps;
        }
    }

    let (g, _) = build_graph(&edges, features)?;
    let labels: Vec<i64> = block_of.iter().map(|&b| b as i64).collect();

    let mut splits = Splits::default();
    for b in 0..blocks {
        let mut idx: Vec<usize> = (0..n).filter(|&u| block_of[u] == b).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_train = idx.len() / 2;
        let n_val = idx.len() / 4;
        splits.train.extend(&idx[..n_train]);
        splits.val.extend(&idx[n_train..n_train + n_val]);
        splits.test.extend(&idx[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let g = g.with_labels(labels)?.with_splits(splits)?;
    NodeDataset::new(g)
}

/// Random graph with exactly `m` distinct edges, used by the scaling bench.
pub fn gen_random_edges(n: usize, m: usize, seed: u64) -> Result<Graph> {
    let max_edges = n * (n - 1) / 2;
    let m = m.min(max_edges);
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let mut set = std::collections::BTreeSet::new();
    while set.len() < m {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            set.insert((u.min(v), u.max(v)));
        }
    }
    let edges: Vec<_> = set.into_iter().collect();
    let mut features = Matrix::zeros(n, 4);
    for v in features.data_mut() {
        *v = rng.random::<f64>();
    }
    Ok(build_graph(&edges, features)?.0)
}
