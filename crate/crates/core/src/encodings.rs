//! Initial positional and structural encodings: per-node matrices
//! `P, S ∈ R^{N x K}` plus the optional pairwise Jaccard matrix.
//!
//! Walk-based encodings sum their addends in a canonical (value-sorted)
//! order so the outputs are bit-identical under node relabeling.

use serde::{Deserialize, Serialize};

use crate::error::{DegtaError, Result};
use crate::graph::{bfs_distances, derive_matrices, Graph, UNREACHED};
use crate::linalg::{eigen_sym, sum_canonical, Matrix};

/// Positional encoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    Jaccard,
    LapPe,
    Rwpe,
}

/// Structural encoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    Rwse,
    Dse,
    Tcse,
}

impl std::str::FromStr for PeKind {
    type Err = DegtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jaccard" => Ok(PeKind::Jaccard),
            "lappe" => Ok(PeKind::LapPe),
            "rwpe" => Ok(PeKind::Rwpe),
            other => Err(DegtaError::InvalidParameter(format!(
                "unknown positional encoding '{other}' (expected jaccard|lappe|rwpe)"
            ))),
        }
    }
}

impl std::str::FromStr for SeKind {
    type Err = DegtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rwse" => Ok(SeKind::Rwse),
            "dse" => Ok(SeKind::Dse),
            "tcse" => Ok(SeKind::Tcse),
            other => Err(DegtaError::InvalidParameter(format!(
                "unknown structural encoding '{other}' (expected rwse|dse|tcse)"
            ))),
        }
    }
}

impl std::fmt::Display for PeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PeKind::Jaccard => "jaccard",
            PeKind::LapPe => "lappe",
            PeKind::Rwpe => "rwpe",
        })
    }
}

impl std::fmt::Display for SeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SeKind::Rwse => "rwse",
            SeKind::Dse => "dse",
            SeKind::Tcse => "tcse",
        })
    }
}

/// Gaussian-decay parameters for the Jaccard positional encoding.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JaccardConfig {
    /// Gaussian bandwidth `h`; the decay is `exp(-dist^2 / (2 h^2))`.
    pub bandwidth: f64,
    /// Receptive-field cap `K`.
    pub cap: usize,
}

impl JaccardConfig {
    pub fn new(cap: usize) -> Self {
        JaccardConfig {
            bandwidth: 1.0,
            cap,
        }
    }

    pub fn with_bandwidth(mut self, h: f64) -> Result<Self> {
        if h <= 0.0 {
            return Err(DegtaError::InvalidParameter(format!(
                "jaccard bandwidth must be positive, got {h}"
            )));
        }
        self.bandwidth = h;
        Ok(self)
    }
}

/// Initial encodings for one graph.
#[derive(Debug, Clone)]
pub struct EncodingSet {
    pub p: Matrix,
    pub s: Matrix,
    pub pairwise_jaccard: Option<Matrix>,
    pub k: usize,
    pub pe_kind: PeKind,
    pub se_kind: SeKind,
}

impl EncodingSet {
    /// Computes the configured strategies for `g`.
    pub fn compute(
        g: &Graph,
        pe_kind: PeKind,
        se_kind: SeKind,
        k: usize,
        bandwidth: f64,
    ) -> Result<EncodingSet> {
        let (p, pairwise) = match pe_kind {
            PeKind::Jaccard => {
                let cfg = JaccardConfig::new(k).with_bandwidth(bandwidth)?;
                let (pairwise, p) = jaccard_pe(g, &cfg);
                (p, Some(pairwise))
            }
            PeKind::LapPe => (lap_pe(g, k)?, None),
            PeKind::Rwpe => (rwpe(g, k), None),
        };
        let s = match se_kind {
            SeKind::Rwse => rwse(g, k),
            SeKind::Dse => dse(g, k),
            SeKind::Tcse => tcse(g, k),
        };
        Ok(EncodingSet {
            p,
            s,
            pairwise_jaccard: pairwise,
            k,
            pe_kind,
            se_kind,
        })
    }
}

/// One step of `B <- B * Â` where `Â = D̃⁻¹Ã` is the row-stochastic walk
/// matrix with self-loops. Each output entry sums its addends canonically.
fn walk_step(g: &Graph, inv_deg: &[f64], b: &Matrix) -> Matrix {
    let n = g.num_nodes();
    let mut out = Matrix::zeros(n, n);
    let mut buf: Vec<f64> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for &k in g.neighbors(j) {
                let v = b[(i, k)] * inv_deg[k];
                if v != 0.0 {
                    buf.push(v);
                }
            }
            let v = b[(i, j)] * inv_deg[j];
            if v != 0.0 {
                buf.push(v);
            }
            if !buf.is_empty() {
                out[(i, j)] = sum_canonical(&mut buf);
            }
        }
    }
    out
}

fn inv_degrees(g: &Graph) -> Vec<f64> {
    (0..g.num_nodes())
        .map(|u| 1.0 / (g.degree(u) as f64 + 1.0))
        .collect()
}

/// Random-walk structural encoding: `S[i,k] = (Â^k)_{ii}` for `k = 0..K-1`.
pub fn rwse(g: &Graph, k: usize) -> Matrix {
    assert!(k >= 1, "rwse requires K >= 1");
    let n = g.num_nodes();
    let inv_deg = inv_degrees(g);
    let mut s = Matrix::zeros(n, k);
    let mut b = Matrix::identity(n);
    for step in 0..k {
        if step > 0 {
            b = walk_step(g, &inv_deg, &b);
        }
        for i in 0..n {
            s[(i, step)] = b[(i, i)];
        }
    }
    s
}

/// Degree structural encoding: normalized degree followed by a log-binned
/// one-hot of `floor(log2(1 + deg))`, overflow clamped to the last bin.
pub fn dse(g: &Graph, k: usize) -> Matrix {
    assert!(k >= 2, "dse requires K >= 2");
    let n = g.num_nodes();
    let max_deg = (0..n).map(|u| g.degree(u)).max().unwrap_or(0);
    let mut s = Matrix::zeros(n, k);
    for u in 0..n {
        let d = g.degree(u);
        if max_deg > 0 {
            s[(u, 0)] = d as f64 / max_deg as f64;
        }
        let bin = ((1 + d) as f64).log2().floor() as usize;
        let bin = bin.min(k - 2);
        s[(u, 1 + bin)] = 1.0;
    }
    s
}

/// Per-node triangle and 4-cycle counts, both normalized by `N`; remaining
/// columns are zero.
pub fn tcse(g: &Graph, k: usize) -> Matrix {
    assert!(k >= 2, "tcse requires K >= 2");
    let n = g.num_nodes();
    let mut s = Matrix::zeros(n, k);
    for i in 0..n {
        let (tri, quad) = triangle_quad_counts(g, i);
        s[(i, 0)] = tri as f64 / n as f64;
        s[(i, 1)] = quad as f64 / n as f64;
    }
    s
}

/// Number of triangles and simple 4-cycles containing node `i`.
pub fn triangle_quad_counts(g: &Graph, i: usize) -> (usize, usize) {
    let nbrs = g.neighbors(i);
    let mut tri = 0usize;
    let mut quad = 0usize;
    for (ai, &a) in nbrs.iter().enumerate() {
        for &b in &nbrs[ai + 1..] {
            if g.has_edge(a, b) {
                tri += 1;
            }
            // Common neighbors of a and b other than i close a 4-cycle.
            let (mut x, mut y) = (g.neighbors(a).iter(), g.neighbors(b).iter());
            let (mut xv, mut yv) = (x.next(), y.next());
            while let (Some(&u), Some(&v)) = (xv, yv) {
                match u.cmp(&v) {
                    std::cmp::Ordering::Less => xv = x.next(),
                    std::cmp::Ordering::Greater => yv = y.next(),
                    std::cmp::Ordering::Equal => {
                        if u != i {
                            quad += 1;
                        }
                        xv = x.next();
                        yv = y.next();
                    }
                }
            }
        }
    }
    (tri, quad)
}

/// Laplacian positional encoding: unit eigenvectors of `L̂` for the `K`
/// smallest eigenvalues after the trivial one, each sign-fixed so its
/// largest-magnitude entry is positive.
pub fn lap_pe(g: &Graph, k: usize) -> Result<Matrix> {
    let n = g.num_nodes();
    if k > n.saturating_sub(1) {
        return Err(DegtaError::InvalidParameter(format!(
            "lappe requires K <= N-1 (K={k}, N={n})"
        )));
    }
    let lap = derive_matrices(g).sym_laplacian;
    let (vals, vecs) = eigen_sym(&lap, 1e-12, 100)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));

    let mut p = Matrix::zeros(n, k);
    for (col, &ev) in order[1..1 + k].iter().enumerate() {
        let mut norm2 = 0.0;
        for i in 0..n {
            norm2 += vecs[(i, ev)] * vecs[(i, ev)];
        }
        let norm = norm2.sqrt();
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for i in 0..n {
            let a = vecs[(i, ev)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        let flip = if vecs[(best, ev)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            p[(i, col)] = flip * vecs[(i, ev)] / norm;
        }
    }
    Ok(p)
}

/// Random-walk positional encoding: step-k walk rows condensed to their
/// Euclidean norm, `P[i,k] = ||(Â^k)_{i,·}||₂`.
pub fn rwpe(g: &Graph, k: usize) -> Matrix {
    assert!(k >= 1, "rwpe requires K >= 1");
    let n = g.num_nodes();
    let inv_deg = inv_degrees(g);
    let mut p = Matrix::zeros(n, k);
    let mut b = Matrix::identity(n);
    let mut buf: Vec<f64> = Vec::new();
    for step in 0..k {
        if step > 0 {
            b = walk_step(g, &inv_deg, &b);
        }
        for i in 0..n {
            for &v in b.row(i) {
                if v != 0.0 {
                    buf.push(v * v);
                }
            }
            p[(i, step)] = sum_canonical(&mut buf).sqrt();
        }
    }
    p
}

/// Jaccard positional encoding.
///
/// The pairwise matrix assigns `exp(-k^2 / (2 h^2))` at the first walk power
/// `k < K` whose occupancy becomes positive (the shortest-path distance) and
/// 0 beyond the cap. The per-node vector is a Gaussian-decayed distance
/// histogram: `P[i,k] = exp(-(k+1)^2/(2h^2)) * #{j : dist = k+1} /
/// max(1, #{j != i : dist < K})`.
pub fn jaccard_pe(g: &Graph, cfg: &JaccardConfig) -> (Matrix, Matrix) {
    let n = g.num_nodes();
    let k = cfg.cap;
    let h2 = 2.0 * cfg.bandwidth * cfg.bandwidth;

    // Pairwise: walk occupancy B starts at I and multiplies by Ã each step.
    let mut pairwise = Matrix::zeros(n, n);
    let mut occupied = vec![false; n * n];
    for i in 0..n {
        occupied[i * n + i] = true;
    }
    for step in 0..k {
        let decay = (-((step * step) as f64) / h2).exp();
        for i in 0..n {
            for j in 0..n {
                if occupied[i * n + j] && pairwise[(i, j)] == 0.0 {
                    pairwise[(i, j)] = decay;
                }
            }
        }
        if step + 1 == k {
            break;
        }
        let mut next = occupied.clone();
        for i in 0..n {
            for j in 0..n {
                if occupied[i * n + j] {
                    for &v in g.neighbors(j) {
                        next[i * n + v] = true;
                    }
                }
            }
        }
        occupied = next;
    }

    // Vector mode from BFS distance histograms.
    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        let dist = bfs_distances(g, i, k + 1);
        let denom = dist
            .iter()
            .enumerate()
            .filter(|&(j, &d)| j != i && d != UNREACHED && d < k)
            .count()
            .max(1) as f64;
        for (j, &d) in dist.iter().enumerate() {
            if j == i || d == UNREACHED || d == 0 || d > k {
                continue;
            }
            let col = d - 1;
            p[(i, col)] += (-((d * d) as f64) / h2).exp() / denom;
        }
    }
    (pairwise, p)
}
