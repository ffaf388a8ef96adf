//! Skeleton graphs, adjacency normalization and hop-distance tables.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Undirected joint graph. Edges are stored once as `(i, j)` with `i < j`,
/// sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    names: Option<Vec<String>>,
}

impl SkeletonGraph {
    /// Validates and builds a graph: indices in range, no self-loops, connected.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("graph needs at least one joint".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Graph(format!("edge ({i}, {j}) out of range for {n} joints")));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop on joint {i}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let g = SkeletonGraph {
            n,
            edges: set.into_iter().collect(),
            names: None,
        };
        let unreached = g.unreachable_from_first();
        if let Some(v) = unreached {
            return Err(Error::Graph(format!("graph is disconnected: joint {v} unreachable from joint 0")));
        }
        Ok(g)
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn chain(n: usize) -> Self {
        Self::new(n, (1..n).map(|i| (i - 1, i))).expect("chains are connected")
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n {
            return Err(Error::Graph(format!("{} names for {} joints", names.len(), self.n)));
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    /// Dense 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> Vec<bool> {
        let mut a = vec![false; self.n * self.n];
        for &(i, j) in &self.edges {
            a[i * self.n + j] = true;
            a[j * self.n + i] = true;
        }
        a
    }

    /// Relabels joint `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Graph("permutation length mismatch".into()));
        }
        Self::new(self.n, self.edges.iter().map(|&(i, j)| (perm[i], perm[j])))
    }

    fn unreachable_from_first(&self) -> Option<usize> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for u in 0..self.n {
                if adj[v * self.n + u] && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.iter().position(|s| !s)
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub a_hat: Tensor,
}

pub fn normalize_adjacency(g: &SkeletonGraph) -> NormalizedAdjacency {
    let n = g.n();
    let adj = g.adjacency();
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + adj[i * n..(i + 1) * n].iter().filter(|&&e| e).count() as f64)
        .collect();
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j || adj[i * n + j] {
                // deg_i * deg_j is an exact integer product, so the matrix is
                // symmetric to the last bit.
                a.data_mut()[i * n + j] = 1.0 / libm::sqrt(deg[i] * deg[j]);
            }
        }
    }
    NormalizedAdjacency { a_hat: a }
}

/// Shortest-path hop counts (edge-counting: self distance 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopTable {
    n: usize,
    d: Vec<u32>,
}

impl HopTable {
    pub fn from_matrix(n: usize, d: Vec<u32>) -> Self {
        assert_eq!(d.len(), n * n);
        HopTable { n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.d
    }

    pub fn diameter(&self) -> u32 {
        self.d.iter().copied().max().unwrap_or(0)
    }

    /// Count of ordered pairs `(i, j)` at each hop distance `0..=diameter`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.diameter() as usize + 1];
        for &v in &self.d {
            h[v as usize] += 1;
        }
        h
    }
}

/// Hop table by adjacency powering: `d[i][j]` is the smallest `h` with
/// `((A + I)^h)[i][j] > 0`.
pub fn hop_table(g: &SkeletonGraph, max_hop: usize) -> Result<HopTable> {
    let n = g.n();
    let mut step = g.adjacency();
    for i in 0..n {
        step[i * n + i] = true;
    }
    const UNSET: u32 = u32::MAX;
    let mut d = vec![UNSET; n * n];
    // (A + I)^0 = I
    let mut reach = vec![false; n * n];
    for i in 0..n {
        reach[i * n + i] = true;
        d[i * n + i] = 0;
    }
    let mut remaining = n * n - n;
    let mut h = 0;
    while remaining > 0 {
        if h == max_hop {
            return Err(Error::config(
                "max_hop",
                format!("graph diameter exceeds max_hop = {max_hop}"),
            ));
        }
        h += 1;
        let mut next = vec![false; n * n];
        for i in 0..n {
            for k in 0..n {
                if !reach[i * n + k] {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] |= step[k * n + j];
                }
            }
        }
        for (idx, (&r, dv)) in next.iter().zip(d.iter_mut()).enumerate() {
            if r && *dv == UNSET {
                *dv = h as u32;
                remaining -= 1;
                debug_assert!(idx / n != idx % n);
            }
        }
        reach = next;
    }
    Ok(HopTable { n, d })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_joint_normalizes_to_one() {
        let g = SkeletonGraph::new(1, []).unwrap();
        assert_eq!(normalize_adjacency(&g).a_hat.data(), &[1.0]);
    }

    #[test]
    fn two_joints_all_half() {
        let g = SkeletonGraph::new(2, [(0, 1)]).unwrap();
        assert_eq!(normalize_adjacency(&g).a_hat.data(), &[0.5; 4]);
    }

    #[test]
    fn chain_distances() {
        let h = hop_table(&SkeletonGraph::chain(5), 10).unwrap();
        assert_eq!(h.get(0, 4), 4);
        assert_eq!(h.get(2, 3), 1);
        assert!((0..5).all(|i| h.get(i, i) == 0));
        assert_eq!(h.diameter(), 4);
        assert_eq!(h.histogram(), [5, 8, 6, 4, 2]);
    }

    #[test]
    fn max_hop_below_diameter_is_config_error() {
        let err = hop_table(&SkeletonGraph::chain(5), 3).unwrap_err();
        assert!(matches!(err, Error::Config { field: "max_hop", .. }));
        assert!(hop_table(&SkeletonGraph::chain(5), 4).is_ok());
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(SkeletonGraph::new(2, [(0, 0)]), Err(Error::Graph(_))));
        assert!(matches!(SkeletonGraph::new(2, [(0, 2)]), Err(Error::Graph(_))));
        assert!(matches!(SkeletonGraph::new(3, [(0, 1)]), Err(Error::Graph(_))));
        let g = SkeletonGraph::new(2, [(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }
}
