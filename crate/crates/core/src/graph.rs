//! Undirected graph storage (symmetric CSR) and the derived matrices the
//! encodings and attention channels consume.

use crate::error::{DegtaError, Result};
use crate::linalg::Matrix;

/// Sentinel for nodes a capped BFS did not reach.
pub const UNREACHED: usize = usize::MAX;

/// Train/val/test index sets. Pairwise disjoint subsets of `[0, N)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for idx in self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
        {
            if idx >= num_nodes {
                return Err(DegtaError::IndexOutOfRange {
                    index: idx,
                    num_nodes,
                });
            }
            if seen[idx] {
                return Err(DegtaError::InvalidParameter(format!(
                    "split index {idx} appears in more than one split"
                )));
            }
            seen[idx] = true;
        }
        Ok(())
    }
}

/// Undirected graph: symmetric CSR adjacency (no stored self-loops, no
/// duplicates), dense node features, optional node labels and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Matrix,
    labels: Option<Vec<i64>>,
    splits: Option<Splits>,
}

/// Builds the symmetric CSR graph from an edge list.
///
/// Duplicate edges (including the reversed direction of an already-seen
/// edge) are collapsed. Input self-loops are dropped; the returned count
/// says how many were seen. Feature rows define `N`.
pub fn build_graph(edges: &[(usize, usize)], features: Matrix) -> Result<(Graph, usize)> {
    let num_nodes = features.rows();
    if num_nodes == 0 {
        return Err(DegtaError::InvalidParameter(
            "graph must have at least one node".into(),
        ));
    }
    let mut dropped = 0usize;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
    for &(u, v) in edges {
        if u >= num_nodes || v >= num_nodes {
            return Err(DegtaError::IndexOutOfRange {
                index: u.max(v),
                num_nodes,
            });
        }
        if u == v {
            dropped += 1;
            continue;
        }
        pairs.push((u.min(v), u.max(v)));
    }
    pairs.sort_unstable();
    pairs.dedup();

    let mut degree = vec![0usize; num_nodes];
    for &(u, v) in &pairs {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut offsets = vec![0usize; num_nodes + 1];
    for i in 0..num_nodes {
        offsets[i + 1] = offsets[i] + degree[i];
    }
    let mut cursor = offsets.clone();
    let mut neighbors = vec![0usize; 2 * pairs.len()];
    for &(u, v) in &pairs {
        neighbors[cursor[u]] = v;
        cursor[u] += 1;
        neighbors[cursor[v]] = u;
        cursor[v] += 1;
    }
    for i in 0..num_nodes {
        neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
    }

    Ok((
        Graph {
            num_nodes,
            offsets,
            neighbors,
            features,
            labels: None,
            splits: None,
        },
        dropped,
    ))
}

/// Like [`build_graph`] but treats input self-loops as an error.
pub fn build_graph_strict(edges: &[(usize, usize)], features: Matrix) -> Result<Graph> {
    if let Some(&(u, _)) = edges.iter().find(|(u, v)| u == v) {
        return Err(DegtaError::InvalidParameter(format!(
            "self-loop on node {u} rejected"
        )));
    }
    build_graph(edges, features).map(|(g, _)| g)
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edge list with `u < v`, sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(DegtaError::InvalidParameter(format!(
                "labels length {} does not match {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.num_nodes)?;
        self.splits = Some(splits);
        Ok(self)
    }

    /// Relabels node `u` as `pi[u]`, permuting features, labels and splits.
    pub fn permute(&self, pi: &[usize]) -> Result<Graph> {
        let n = self.num_nodes;
        if pi.len() != n {
            return Err(DegtaError::InvalidPermutation { n });
        }
        let mut seen = vec![false; n];
        for &p in pi {
            if p >= n || seen[p] {
                return Err(DegtaError::InvalidPermutation { n });
            }
            seen[p] = true;
        }

        let mut edges = Vec::with_capacity(self.num_edges());
        for (u, v) in self.edge_list() {
            edges.push((pi[u], pi[v]));
        }
        let mut features = Matrix::zeros(n, self.features.cols());
        for u in 0..n {
            features.row_mut(pi[u]).copy_from_slice(self.features.row(u));
        }
        let (mut g, _) = build_graph(&edges, features)?;
        if let Some(labels) = &self.labels {
            let mut out = vec![0i64; n];
            for u in 0..n {
                out[pi[u]] = labels[u];
            }
            g.labels = Some(out);
        }
        if let Some(splits) = &self.splits {
            let map = |ix: &[usize]| ix.iter().map(|&u| pi[u]).collect::<Vec<_>>();
            g.splits = Some(Splits {
                train: map(&splits.train),
                val: map(&splits.val),
                test: map(&splits.test),
            });
        }
        Ok(g)
    }

    /// Inverse of the permutation slice.
    pub fn invert_permutation(pi: &[usize]) -> Vec<usize> {
        let mut inv = vec![0usize; pi.len()];
        for (u, &p) in pi.iter().enumerate() {
            inv[p] = u;
        }
        inv
    }

    /// Dense adjacency (0/1, zero diagonal).
    pub fn dense_adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.num_nodes, self.num_nodes);
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                a[(u, v)] = 1.0;
            }
        }
        a
    }
}

/// Breadth-first hop counts from `source`, capped at `cap`: any node at
/// distance >= `cap` is reported as [`UNREACHED`].
pub fn bfs_distances(g: &Graph, source: usize, cap: usize) -> Vec<usize> {
    assert!(source < g.num_nodes(), "source out of range");
    assert!(cap >= 1, "cap must be at least 1");
    let mut dist = vec![UNREACHED; g.num_nodes()];
    let mut queue = std::collections::VecDeque::new();
    dist[source] = 0;
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        let du = dist[u];
        if du + 1 >= cap {
            continue;
        }
        for &v in g.neighbors(u) {
            if dist[v] == UNREACHED {
                dist[v] = du + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Sparse row-stochastic matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.offsets[i]..self.offsets[i + 1] {
                m[(i, self.cols[k])] = self.vals[k];
            }
        }
        m
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.offsets[i]..self.offsets[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }
}

/// Degree vector, random-walk-normalized adjacency with self-loops, and the
/// symmetrically normalized Laplacian with self-loops.
#[derive(Debug, Clone)]
pub struct DerivedMatrices {
    /// Raw degrees (self-loops not counted).
    pub degree: Vec<usize>,
    /// Row-stochastic `D̃⁻¹ Ã` where `Ã = A + I`.
    pub rw_normalized: CsrMatrix,
    /// Symmetric `D̃^{-1/2} (D̃ - Ã) D̃^{-1/2}`.
    pub sym_laplacian: Matrix,
}

pub fn derive_matrices(g: &Graph) -> DerivedMatrices {
    let n = g.num_nodes();
    let degree: Vec<usize> = (0..n).map(|u| g.degree(u)).collect();

    // rw_normalized: row i holds 1/(deg(i)+1) at sorted(neighbors(i) ∪ {i}).
    let mut offsets = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    offsets.push(0);
    for u in 0..n {
        let w = 1.0 / (degree[u] as f64 + 1.0);
        let mut inserted = false;
        for &v in g.neighbors(u) {
            if !inserted && u < v {
                cols.push(u);
                vals.push(w);
                inserted = true;
            }
            cols.push(v);
            vals.push(w);
        }
        if !inserted {
            cols.push(u);
            vals.push(w);
        }
        offsets.push(cols.len());
    }
    let rw_normalized = CsrMatrix {
        n,
        offsets,
        cols,
        vals,
    };

    let mut lap = Matrix::zeros(n, n);
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| 1.0 / ((d as f64 + 1.0).sqrt()))
        .collect();
    for u in 0..n {
        lap[(u, u)] = 1.0 - inv_sqrt[u] * inv_sqrt[u];
        for &v in g.neighbors(u) {
            lap[(u, v)] = -inv_sqrt[u] * inv_sqrt[v];
        }
    }

    DerivedMatrices {
        degree,
        rw_normalized,
        sym_laplacian: lap,
    }
}
