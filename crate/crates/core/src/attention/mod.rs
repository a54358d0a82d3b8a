//! Local (neighborhood) and global (sampled long-range) attention channels.

pub mod global;
pub mod local;

use crate::graph::Graph;

/// Directed source/destination pairs grouped contiguously by source node,
/// with `offsets[i]..offsets[i+1]` indexing node `i`'s pairs. Used both for
/// local neighborhoods and for sampled global pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.src.iter().copied().zip(self.dst.iter().copied()).collect()
    }

    /// Builds from per-source destination lists.
    pub fn from_lists(dsts: &[Vec<usize>]) -> PairSet {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = Vec::with_capacity(dsts.len() + 1);
        offsets.push(0);
        for (i, list) in dsts.iter().enumerate() {
            for &j in list {
                src.push(i);
                dst.push(j);
            }
            offsets.push(src.len());
        }
        PairSet { src, dst, offsets }
    }
}

/// Local neighborhoods including the self-loop: `N_i = neighbors(i) ∪ {i}`.
pub fn local_pairs(g: &Graph) -> PairSet {
    let lists: Vec<Vec<usize>> = (0..g.num_nodes())
        .map(|i| {
            let mut l: Vec<usize> = g.neighbors(i).to_vec();
            match l.binary_search(&i) {
                Ok(_) => {}
                Err(pos) => l.insert(pos, i),
            }
            l
        })
        .collect();
    PairSet::from_lists(&lists)
}
